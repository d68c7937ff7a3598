import re

_UNIT_SECONDS = {
    "ms": 1e-3,
    "millisecond": 1e-3,
    "milliseconds": 1e-3,
    "s": 1.0,
    "sec": 1.0,
    "second": 1.0,
    "seconds": 1.0,
    "m": 60.0,
    "min": 60.0,
    "minute": 60.0,
    "minutes": 60.0,
    "h": 3600.0,
    "hour": 3600.0,
    "hours": 3600.0,
}

_PART = re.compile(r"([\d.]+)\s*([a-z]+)")


def parse_duration(value: str | int | float) -> float:
    """Convert a duration such as ``90``, ``"90s"``, ``"2 min"`` or ``"1m30s"`` to seconds."""
    if isinstance(value, bool):
        raise ValueError(f"Unable to parse the duration: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)

    text = value.lower().strip()
    try:
        return float(text)
    except ValueError:
        pass

    # Compound forms like "1m30s" or "1 hour 5 minutes"
    parts = _PART.findall(text)
    if not parts or _PART.sub("", text).strip():
        raise ValueError(f"Unable to parse the duration: {value!r}")

    total = 0.0
    for number, unit in parts:
        if unit not in _UNIT_SECONDS:
            raise ValueError(f"Unknown duration unit {unit!r} in {value!r}")
        try:
            total += float(number) * _UNIT_SECONDS[unit]
        except ValueError:
            raise ValueError(f"Unable to parse the duration: {value!r}")
    return total

import pytest

from or_gaze.utils.durations import parse_duration


@pytest.mark.parametrize(
    "value, expected",
    [
        (90, 90.0),
        (1.5, 1.5),
        ("90", 90.0),
        ("90s", 90.0),
        ("2 min", 120.0),
        ("1m30s", 90.0),
        ("250ms", 0.25),
        ("1 hour 5 minutes", 3900.0),
        (" 40 Seconds ", 40.0),
    ],
)
def test_various_duration_formats(value, expected):
    assert parse_duration(value) == pytest.approx(expected)


@pytest.mark.parametrize("value", ["", "soon", "5 fortnights", "1m junk", True])
def test_invalid_input(value):
    with pytest.raises(ValueError):
        parse_duration(value)

import errno
import fcntl
import functools
import hashlib
import io
import json
import os
import time
import zipfile
from contextlib import contextmanager
from datetime import UTC, datetime
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Hashable, Iterator, Optional, TextIO

import numpy as np
from pydantic import BaseModel, Field, field_validator

log = getLogger(__name__)

ArrayDict = dict[str, np.ndarray]


class CacheSettings(BaseModel):
    cache_dir: Path = Path(".cache")
    lock_timeout: float = Field(default=10.0, description="Seconds to wait for an entry lock.")

    @field_validator("cache_dir", mode="before")
    @classmethod
    def ensure_path(cls, v: Any) -> Path:
        return Path(v)


class CacheMetadata(BaseModel):
    """Metadata stored next to every cached array bundle."""

    creation_timestamp: datetime = Field(default_factory=lambda: datetime.now(UTC))
    name: str
    key_content: str
    from_cache: bool = False


def make_hashable(obj: Any) -> Hashable:
    """Convert key parts (configs, paths, arrays) into a stable hashable form."""
    if isinstance(obj, (str, int, float, bool, type(None))):
        return obj
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, BaseModel):
        return json.dumps(obj.model_dump(mode="json"), sort_keys=True)
    if isinstance(obj, np.ndarray):
        return hashlib.sha256(np.ascontiguousarray(obj).tobytes()).hexdigest()
    if isinstance(obj, (list, tuple)):
        return tuple(make_hashable(x) for x in obj)
    if isinstance(obj, dict):
        return tuple(sorted((str(k), make_hashable(v)) for k, v in obj.items()))
    return f"{obj.__class__.__module__}.{obj.__class__.__qualname__}"


def _acquire(lock_file: TextIO, timeout: float, poll_s: float = 0.1) -> bool:
    """Poll a non-blocking exclusive flock; False once timeout elapses."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            return True
        except OSError as e:
            if e.errno != errno.EAGAIN:
                raise
        if time.monotonic() > deadline:
            return False
        time.sleep(poll_s)


class ArtifactCache:
    """File-backed cache of numpy array bundles keyed by hashed call content."""

    def __init__(self, settings: Optional[CacheSettings] = None):
        self.settings = settings or CacheSettings()
        os.makedirs(self.settings.cache_dir, exist_ok=True)

    @staticmethod
    def generate_key(name: str, key: Any) -> tuple[str, str]:
        key_content = str(make_hashable(key))
        key_hash = hashlib.sha256(key_content.encode()).hexdigest()
        return f"{name}_{key_hash[:10]}", key_content

    def _paths(self, entry_key: str) -> tuple[Path, Path]:
        base = self.settings.cache_dir / entry_key
        return base.with_suffix(".npz"), base.with_suffix(".json")

    @contextmanager
    def _file_lock(self, filepath: Path) -> Iterator[None]:
        lock_path = Path(str(filepath) + ".lock")
        with open(lock_path, "w") as lock_file:
            if not _acquire(lock_file, self.settings.lock_timeout):
                raise TimeoutError(
                    f"cache entry {filepath.name} still locked after {self.settings.lock_timeout}s"
                )
            try:
                yield
            finally:
                fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)
                lock_path.unlink(missing_ok=True)

    def get(self, name: str, key: Any) -> Optional[ArrayDict]:
        entry_key, _ = self.generate_key(name, key)
        blob, meta = self._paths(entry_key)
        if not blob.exists() or not meta.exists():
            log.debug("cache miss %s", entry_key)
            return None

        with self._file_lock(blob):
            try:
                with np.load(blob, allow_pickle=False) as data:
                    arrays = {k: data[k] for k in data.files}
                CacheMetadata.model_validate_json(meta.read_text())
            except (ValueError, OSError, EOFError, zipfile.BadZipFile):
                # corrupted entries are misses
                log.warning("dropping corrupted cache entry %s", entry_key)
                blob.unlink(missing_ok=True)
                meta.unlink(missing_ok=True)
                return None
        log.debug("cache hit %s", entry_key)
        return arrays

    def set(self, name: str, key: Any, arrays: ArrayDict) -> None:
        entry_key, key_content = self.generate_key(name, key)
        blob, meta = self._paths(entry_key)
        os.makedirs(blob.parent, exist_ok=True)

        buffer = io.BytesIO()
        np.savez(buffer, **arrays)
        metadata = CacheMetadata(name=name, key_content=key_content)
        with self._file_lock(blob):
            for path, payload in ((blob, buffer.getvalue()), (meta, metadata.model_dump_json())):
                temp_file = path.with_name(path.name + ".tmp")
                try:
                    if isinstance(payload, bytes):
                        temp_file.write_bytes(payload)
                    else:
                        temp_file.write_text(payload)
                    os.replace(temp_file, path)
                finally:
                    try:
                        os.unlink(temp_file)
                    except OSError:
                        pass

    def exists(self, name: str, key: Any) -> bool:
        entry_key, _ = self.generate_key(name, key)
        blob, meta = self._paths(entry_key)
        with self._file_lock(blob):
            return blob.exists() and meta.exists()


def cached_arrays(
    name: str, key_fn: Callable[..., Any]
) -> Callable[[Callable[..., ArrayDict]], Callable[..., ArrayDict]]:
    """Decorator caching an array-bundle function when called with ``cache=ArtifactCache``.

    ``key_fn`` receives the call's arguments and returns the key content.
    """

    def decorator(func: Callable[..., ArrayDict]) -> Callable[..., ArrayDict]:
        @functools.wraps(func)
        def wrapper(*args: Any, cache: Optional[ArtifactCache] = None, **kwargs: Any) -> ArrayDict:
            if cache is None:
                return func(*args, **kwargs)
            key = key_fn(*args, **kwargs)
            hit = cache.get(name, key)
            if hit is not None:
                return hit
            result = func(*args, **kwargs)
            cache.set(name, key, result)
            return result

        return wrapper

    return decorator

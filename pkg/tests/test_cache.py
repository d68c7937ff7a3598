import fcntl

import numpy as np
import pytest

from or_gaze.cache import ArtifactCache, CacheSettings, cached_arrays, make_hashable
from or_gaze.settings import GazeBackendConfig


@pytest.fixture
def cache(tmp_path):
    return ArtifactCache(CacheSettings(cache_dir=tmp_path))


class TestArtifactCache:
    def test_set_and_get(self, cache):
        arrays = {"a": np.arange(6).reshape(2, 3), "b": np.ones(4, dtype=np.float32)}
        cache.set("bundle", ("v000", 1), arrays)
        retrieved = cache.get("bundle", ("v000", 1))

        assert retrieved is not None
        assert set(retrieved) == {"a", "b"}
        np.testing.assert_array_equal(retrieved["a"], arrays["a"])
        assert retrieved["b"].dtype == np.float32

    def test_exists(self, cache):
        assert not cache.exists("bundle", "key")
        cache.set("bundle", "key", {"x": np.zeros(1)})
        assert cache.exists("bundle", "key")

    def test_get_nonexistent_key(self, cache):
        assert cache.get("bundle", "missing") is None

    def test_overwrite_existing_entry(self, cache):
        cache.set("bundle", "key", {"x": np.zeros(2)})
        cache.set("bundle", "key", {"x": np.ones(2)})
        np.testing.assert_array_equal(cache.get("bundle", "key")["x"], np.ones(2))

    def test_corrupted_entry_is_a_miss(self, cache, tmp_path):
        cache.set("bundle", "key", {"x": np.zeros(2)})
        entry_key, _ = ArtifactCache.generate_key("bundle", "key")
        (tmp_path / f"{entry_key}.npz").write_bytes(b"not a zip archive")

        assert cache.get("bundle", "key") is None
        assert not (tmp_path / f"{entry_key}.npz").exists()

    def test_truncated_archive_is_a_miss(self, cache, tmp_path):
        cache.set("bundle", "key", {"x": np.arange(64.0)})
        entry_key, _ = ArtifactCache.generate_key("bundle", "key")
        blob = tmp_path / f"{entry_key}.npz"
        data = blob.read_bytes()
        blob.write_bytes(data[: len(data) // 2])

        assert data.startswith(b"PK")
        assert cache.get("bundle", "key") is None
        assert not blob.exists()
        assert not (tmp_path / f"{entry_key}.json").exists()

    def test_held_lock_times_out(self, tmp_path):
        cache = ArtifactCache(CacheSettings(cache_dir=tmp_path, lock_timeout=0.2))
        entry_key, _ = ArtifactCache.generate_key("bundle", "key")
        with open(tmp_path / f"{entry_key}.npz.lock", "w") as held:
            fcntl.flock(held.fileno(), fcntl.LOCK_EX)
            with pytest.raises(TimeoutError, match="still locked"):
                cache.exists("bundle", "key")
            fcntl.flock(held.fileno(), fcntl.LOCK_UN)
        assert not cache.exists("bundle", "key")

    def test_file_creation(self, cache, tmp_path):
        cache.set("bundle", "key", {"x": np.zeros(2)})
        entry_key, _ = ArtifactCache.generate_key("bundle", "key")
        assert entry_key.startswith("bundle_")
        assert (tmp_path / f"{entry_key}.npz").exists()
        assert (tmp_path / f"{entry_key}.json").exists()


class TestKeys:
    def test_configs_hash_by_content(self):
        a = make_hashable(GazeBackendConfig(heatmap_size=32))
        b = make_hashable(GazeBackendConfig(heatmap_size=32))
        c = make_hashable(GazeBackendConfig(heatmap_size=64))
        assert a == b != c

    def test_arrays_hash_by_content(self):
        assert make_hashable(np.arange(3)) == make_hashable(np.arange(3))
        assert make_hashable(np.arange(3)) != make_hashable(np.arange(1, 4))

    def test_dict_order_is_irrelevant(self):
        assert make_hashable({"a": 1, "b": [1, 2]}) == make_hashable({"b": [1, 2], "a": 1})


def test_cached_arrays_decorator(tmp_path):
    calls = []

    @cached_arrays("squares", lambda n: n)
    def squares(n):
        calls.append(n)
        return {"values": np.arange(n) ** 2}

    cache = ArtifactCache(CacheSettings(cache_dir=tmp_path))
    first = squares(4, cache=cache)
    second = squares(4, cache=cache)
    np.testing.assert_array_equal(first["values"], second["values"])
    assert calls == [4]

    squares(4)
    assert calls == [4, 4]

import numpy as np
import pytest

from or_gaze.backends import (
    GeometricBackend,
    ReferenceBackend,
    ReferenceNet,
    SceneInput,
    evaluate_backend,
    make_backend,
    predict_video,
    read_scene,
    train_reference_backend,
)
from or_gaze.cache import ArtifactCache, CacheSettings
from or_gaze.checkpoints import load_checkpoint
from or_gaze.heatmaps import heatmap_argmax
from or_gaze.metrics import pixel_l2
from or_gaze.models import BoundingBox, DegenerateInputError, ModelStateError
from or_gaze.settings import GazeBackendConfig, RegionBox
from or_gaze.synth import cell_center, head_cell, region_target, render_raster

SIZE = 64
IMAGE = (640, 480)
TABLE = {"table": RegionBox(x1=0.6, y1=0.4, x2=0.8, y2=0.6)}


def head_box(x: float, y: float) -> BoundingBox:
    cx, cy = x * IMAGE[0], y * IMAGE[1]
    return BoundingBox(x1=cx - 10, y1=cy - 10, x2=cx + 10, y2=cy + 10)


@pytest.fixture
def scene_to_table():
    """One head at the left facing the table region."""
    head = cell_center(*head_cell(0.2, 0.5, SIZE), SIZE)
    target = region_target(TABLE["table"], SIZE)
    vx, vy = target[0] - head[0], target[1] - head[1]
    distance = float(np.hypot(vx, vy))
    raster = render_raster(SIZE, TABLE, [head], [((vx / distance, vy / distance), distance)])
    return SceneInput(raster, IMAGE), head, target


class TestGeometricBackend:
    def test_reads_scene(self, scene_to_table):
        scene, head, target = scene_to_table
        cues = read_scene(scene.raster)
        assert cues.heads == [pytest.approx(head)]
        assert cues.regions == [pytest.approx(target)]

    def test_snaps_to_attended_region(self, scene_to_table, backend):
        scene, head, target = scene_to_table
        prediction = backend.predict(scene, head_box(*head))
        assert prediction.heatmap.shape == (32, 32)
        assert pixel_l2(heatmap_argmax(prediction.heatmap), target) < 0.03
        assert prediction.in_frame_score > 0.99
        assert prediction.feature.shape == (16,)

    def test_fixed_distance_without_snapping(self, scene_to_table):
        scene, head, _ = scene_to_table
        backend = GeometricBackend(
            GazeBackendConfig(heatmap_size=32, snap_to_targets=False, fixed_distance=0.1)
        )
        point = heatmap_argmax(backend.predict(scene, head_box(*head)).heatmap)
        assert point.x == pytest.approx(head[0] + 0.1, abs=1 / 32)

    def test_looking_outside(self, backend):
        head = cell_center(*head_cell(0.2, 0.5, SIZE), SIZE)
        raster = render_raster(SIZE, TABLE, [head], [((1.0, 0.0), None)])
        prediction = backend.predict(SceneInput(raster, IMAGE), head_box(*head))
        assert 0.0 < prediction.in_frame_score < 0.5

    def test_no_stroke(self, backend):
        head = cell_center(*head_cell(0.5, 0.5, SIZE), SIZE)
        raster = np.zeros((SIZE, SIZE), dtype=np.uint8)
        raster[31:34, 31:34] = 255
        prediction = backend.predict(SceneInput(raster, IMAGE), head_box(*head))
        assert prediction.in_frame_score == 0.5

    def test_head_outside_raster(self, scene_to_table, backend):
        scene, _, _ = scene_to_table
        with pytest.raises(DegenerateInputError):
            backend.predict(scene, BoundingBox(x1=700.0, y1=10.0, x2=720.0, y2=30.0))

    def test_deterministic_noise(self, scene_to_table):
        scene, head, _ = scene_to_table
        config = GazeBackendConfig(heatmap_size=32, direction_noise_deg=20.0, seed=4)
        a = GeometricBackend(config).predict(scene, head_box(*head))
        b = GeometricBackend(config).predict(scene, head_box(*head))
        np.testing.assert_array_equal(a.heatmap, b.heatmap)


class TestVideoPredictions:
    def test_predictions_cover_every_person(self, corpus, backend):
        video = corpus.videos[0]
        predictions = predict_video(backend, video)
        assert len(predictions.frame_index) == sum(len(f.persons) for f in video.frames)
        assert predictions.heatmaps.shape[1:] == (32, 32)
        assert predictions.features.shape[1] == 16
        assert np.all(predictions.in_scores > 0.0)
        assert predictions.row(3, 2) == 3 * 4 + 2
        with pytest.raises(KeyError):
            predictions.row(3, 9)

    def test_cached_predictions(self, corpus, backend, tmp_path):
        cache = ArtifactCache(CacheSettings(cache_dir=tmp_path))
        video = corpus.videos[1]
        first = predict_video(backend, video, cache=cache)
        assert len(list(tmp_path.glob("gaze_predictions_*.npz"))) == 1
        second = predict_video(backend, video, cache=cache)
        np.testing.assert_array_equal(first.heatmaps, second.heatmaps)
        np.testing.assert_array_equal(first.frame_index, second.frame_index)

    def test_evaluate(self, corpus, backend):
        report = evaluate_backend(backend, corpus.test_videos)
        assert report.task == "gaze.geometric"
        assert report.metrics["auc"] > 0.7
        assert 0.0 <= report.metrics["l2"] <= np.sqrt(2)
        assert report.metrics["in_out_accuracy"] > 0.5
        assert "roc_example" in report.curves


class TestReferenceBackend:
    def test_size_must_divide_by_eight(self):
        with pytest.raises(ValueError):
            ReferenceNet(size=20)

    def test_needs_checkpoint(self):
        with pytest.raises(ModelStateError):
            make_backend(GazeBackendConfig(kind="reference"))

    def test_geometric_from_config(self):
        assert isinstance(make_backend(GazeBackendConfig()), GeometricBackend)

    def test_train_save_and_load(self, corpus, tmp_path):
        config = GazeBackendConfig(
            kind="reference", heatmap_size=16, feature_dim=8, base_channels=4, epochs=1
        )
        backend = train_reference_backend(corpus.train_videos[:1], config)
        assert len(backend.history) == 1
        assert np.isfinite(backend.history[0])

        backend.save(tmp_path / "gaze")
        loaded = make_backend(config, tmp_path / "gaze")
        assert isinstance(loaded, ReferenceBackend)
        assert loaded.descriptor.trainable
        assert loaded.cache_key() == backend.cache_key()

        video = corpus.test_videos[0]
        scene = SceneInput(video.rasters[0], video.frames[0].image_size)
        heads = [p.head for p in video.frames[0].persons]
        for a, b in zip(backend.predict_many(scene, heads), loaded.predict_many(scene, heads)):
            np.testing.assert_allclose(a.heatmap, b.heatmap, rtol=1e-5)
            assert a.feature.shape == (8,)

        with pytest.raises(ModelStateError):
            load_checkpoint(tmp_path / "gaze", "role")

import numpy as np
import pytest
import torch

from or_gaze.association import HeatmapTracklet
from or_gaze.backends import predict_video
from or_gaze.models import ROLES, DegenerateInputError, ModelStateError, RoleLabel
from or_gaze.roles import (
    RoleClassifier,
    RoleNet,
    collate_chunks,
    encode_tracklet,
    evaluate_roles,
    gt_frame_roles,
    infer_roles,
    load_roles,
    role_dataset,
    role_loss,
    role_presence,
    save_roles,
    tracklet_chunks,
    tracklet_label,
    train_role,
    video_tracklets,
)
from or_gaze.settings import RoleModelConfig
from tests.conftest import assert_finite_difference_gradients, create_frame, create_person


def small_config(**overrides) -> RoleModelConfig:
    values = dict(embed_dim=16, num_heads=2, max_length=16, epochs=2, batch_size=4, dropout=0.0)
    values.update(overrides)
    return RoleModelConfig(**values)


def tracklet(length: int, track_id: int = 0, size: int = 8) -> HeatmapTracklet:
    heatmaps = np.random.default_rng(length).random((length, size, size))
    heatmaps /= heatmaps.sum(axis=(1, 2), keepdims=True)
    return HeatmapTracklet(track_id, heatmaps, np.arange(length))


@pytest.fixture(scope="module")
def dataset(corpus, backend):
    return role_dataset(corpus.train_videos, backend)


@pytest.fixture(scope="module")
def classifier(dataset):
    tracklets, labels = dataset
    return train_role(tracklets, labels, small_config(), heatmap_size=32)


class TestRoleNet:
    def test_logit_shape(self):
        net = RoleNet(small_config(), heatmap_size=8)
        heatmaps, mask = collate_chunks([tracklet(3).heatmaps, tracklet(5).heatmaps])
        assert net(heatmaps, mask).shape == (2, len(ROLES))

    @pytest.mark.parametrize("pooling", ["cls", "mean"])
    def test_padding_is_ignored(self, pooling):
        net = RoleNet(small_config(pooling=pooling), heatmap_size=8).eval()
        short = tracklet(3).heatmaps
        with torch.no_grad():
            alone = net(*collate_chunks([short]))
            padded = net(*collate_chunks([short, tracklet(6).heatmaps]))
        torch.testing.assert_close(alone[0], padded[0], rtol=1e-4, atol=1e-5)

    def test_loss_gradients(self):
        torch.manual_seed(0)
        net = RoleNet(small_config(), heatmap_size=8).double().eval()
        heatmaps, mask = collate_chunks([tracklet(3).heatmaps, tracklet(5).heatmaps])
        labels = torch.tensor([0, 1])
        assert_finite_difference_gradients(
            lambda: role_loss(net, heatmaps.double(), mask, labels), net.parameters(), count=8
        )

    def test_chunks(self):
        assert [len(c) for c in tracklet_chunks(tracklet(10), 4)] == [4, 4, 2]
        assert [len(c) for c in tracklet_chunks(tracklet(3), 4)] == [3]


class TestLabels:
    def test_tracklet_label_is_majority(self):
        roles = [RoleLabel.ANESTHETIST, RoleLabel.HEAD_SURGEON, RoleLabel.ANESTHETIST]
        frames = [
            create_frame([create_person("p0", 0.5, 0.3, role=role)], frame_index=i)
            for i, role in enumerate(roles)
        ]
        assert tracklet_label(frames, tracklet(3)) == RoleLabel.ANESTHETIST

    def test_unlabeled_tracklet(self):
        frames = [create_frame([create_person("p0", 0.5, 0.3)], frame_index=i) for i in range(3)]
        assert tracklet_label(frames, tracklet(3)) is None

    def test_dataset_covers_every_track(self, dataset):
        tracklets, labels = dataset
        assert len(tracklets) == 8
        assert sorted(set(labels)) == sorted(ROLES)

    def test_gt_presence(self, corpus):
        frames = corpus.videos[0].frames
        assert role_presence(frames, gt_frame_roles(frames)).all()


class TestTraining:
    def test_history(self, classifier):
        assert len(classifier.history) == 2
        assert all(np.isfinite(classifier.history))

    def test_single_role_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            train_role([tracklet(3, 0), tracklet(4, 1)], [RoleLabel.ANESTHETIST] * 2, small_config())

    def test_encode_tracklet_averages_chunks(self, classifier, dataset):
        tracklet = dataset[0][0]
        logits = encode_tracklet(tracklet, classifier)
        assert logits.shape == (len(ROLES),)
        np.testing.assert_allclose(logits, classifier.chunk_logits([tracklet])[0].mean(axis=0))

    def test_predictions_are_distributions(self, classifier, dataset):
        tracklets, _ = dataset
        for result in classifier.predict(tracklets[:2]):
            assert result.probs.sum() == pytest.approx(1.0)
            assert result.role in ROLES
            assert len(result.chunk_votes) == 2

    def test_frame_roles_are_distinct(self, classifier, corpus, backend):
        video = corpus.test_videos[0]
        tracklets = video_tracklets(video, predict_video(backend, video))
        frame_roles = infer_roles(video.frames, tracklets, classifier)
        assert sorted(frame_roles) == [f.frame_index for f in video.frames]
        for labels in frame_roles.values():
            assigned = [r for r in labels.values() if r is not None]
            assert len(assigned) == len(set(assigned)) == 4

        greedy = infer_roles(video.frames, tracklets, classifier, method="greedy")
        assert all(len(set(labels.values())) == 4 for labels in greedy.values())

    def test_save_and_load(self, classifier, dataset, tmp_path):
        classifier.save(tmp_path / "role")
        loaded = RoleClassifier.load(tmp_path / "role")
        assert loaded.heatmap_size == 32
        assert loaded.history == classifier.history
        tracklets, _ = dataset
        for a, b in zip(classifier.chunk_logits(tracklets), loaded.chunk_logits(tracklets)):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)

    def test_evaluate(self, classifier, corpus, backend):
        report = evaluate_roles(classifier, corpus.test_videos, backend)
        assert report.task == "role"
        assert report.metrics["num_tracklets"] == 4.0
        assert 0.0 <= report.metrics["tracklet_macro_f1"] <= 1.0
        assert set(report.per_class) == {str(r) for r in ROLES}

    def test_untrained_model(self, corpus, backend):
        with pytest.raises(ModelStateError):
            evaluate_roles(RoleClassifier(small_config(), 32), corpus.test_videos, backend)


def test_save_and_load_frame_roles(tmp_path):
    frame_roles = {0: {"p0": RoleLabel.HEAD_SURGEON, "p1": None}, 3: {"p0": RoleLabel.ANESTHETIST}}
    save_roles("v000", frame_roles, tmp_path / "v000.roles.json")
    assert load_roles(tmp_path / "v000.roles.json") == ("v000", frame_roles)

import numpy as np
import pytest
import torch

from or_gaze.backends import predict_video
from or_gaze.layers import sine_position_encoding_2d
from or_gaze.models import PHASES, DegenerateInputError, ModelStateError, PhaseLabel
from or_gaze.phases import (
    PhaseInputs,
    PhaseNet,
    PhaseRecognizer,
    build_phase_inputs,
    clip_encode,
    clip_windows,
    evaluate_phases,
    frame_gaze_embedding,
    head_position_embedding,
    head_position_map,
    infer_phase,
    load_phases,
    phase_inputs,
    phase_loss,
    save_phases,
    scene_embedding,
    tcn_classify,
    train_phase,
)
from or_gaze.roles import gt_frame_roles
from or_gaze.settings import PhaseModelConfig
from tests.conftest import assert_finite_difference_gradients


def small_config(**overrides) -> PhaseModelConfig:
    values = dict(
        clip_frames=5,
        embed_dim=16,
        num_layers=1,
        num_heads=2,
        position_dim=8,
        tcn_stages=2,
        tcn_layers=3,
        tcn_features=8,
        epochs=2,
        train_window=16,
        dropout=0.0,
        gt_roles=True,
    )
    values.update(overrides)
    return PhaseModelConfig(**values)


@pytest.fixture(scope="module")
def train_inputs(corpus, backend):
    return build_phase_inputs(corpus.train_videos, small_config(), backend)


@pytest.fixture(scope="module")
def test_inputs(corpus, backend):
    return build_phase_inputs(corpus.test_videos, small_config(), backend)


@pytest.fixture(scope="module")
def recognizer(train_inputs):
    return train_phase(train_inputs, small_config(), heatmap_size=32)


class TestWindows:
    def test_edges_are_replicated(self):
        np.testing.assert_array_equal(
            clip_windows(5, 3), [[0, 0, 1], [0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 4]]
        )

    def test_even_window(self):
        np.testing.assert_array_equal(clip_windows(3, 4)[1], [0, 0, 1, 2])

    def test_single_frame(self):
        np.testing.assert_array_equal(clip_windows(1, 3), [[0, 0, 0]])


class TestHeadPositionMap:
    def test_only_head_cells_are_set(self):
        grid = head_position_map(np.array([[0.5, 0.5]]), 8, size=16)
        assert grid.shape == (8, 16, 16)
        nonzero = torch.nonzero(grid.abs().sum(dim=0))
        assert nonzero.tolist() == [[8, 8]]
        expected = sine_position_encoding_2d(torch.tensor([[8.5 / 16, 8.5 / 16]]), 8)[0]
        torch.testing.assert_close(grid[:, 8, 8], expected)

    def test_shared_cell_counts_once(self):
        once = head_position_map(np.array([[0.5, 0.5]]), 8, size=16)
        twice = head_position_map(np.array([[0.5, 0.5], [0.51, 0.51]]), 8, size=16)
        torch.testing.assert_close(once, twice)

    def test_no_heads(self):
        assert not head_position_map(np.zeros((0, 2)), 8, size=16).any()


class TestPhaseNet:
    def test_scene_embedding_shapes_must_match(self):
        with pytest.raises(ValueError):
            scene_embedding(torch.zeros(4), torch.zeros(5))

    def test_clip_encode_gradients(self):
        torch.manual_seed(0)
        net = PhaseNet(small_config(clip_frames=3, embed_dim=8), heatmap_size=16).double().eval()
        presence = np.array([True, False, True, False])
        window = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda w: clip_encode(net, w, presence), (window,))

    def test_frame_embeddings(self):
        net = PhaseNet(small_config(), heatmap_size=16).eval()
        with torch.no_grad():
            g = frame_gaze_embedding(net, [np.ones((16, 16)), np.eye(16)])
            h = head_position_embedding(net, np.array([[0.25, 0.5], [0.75, 0.5]]))
            nobody = frame_gaze_embedding(net, [])
            zero_map = net.gaze_embedding(torch.zeros(1, 16, 16))[0]
        assert g.shape == h.shape == (16,)
        assert scene_embedding(g, h).shape == (16,)
        assert torch.equal(nobody, zero_map)

    def test_stage_loss_gradients(self):
        torch.manual_seed(0)
        net = PhaseNet(small_config(), heatmap_size=16).double().eval()
        features = torch.randn(7, 16, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3])
        assert_finite_difference_gradients(
            lambda: phase_loss(net.classify(features), labels), net.tcn.parameters(), count=8
        )

    def test_stage_logits(self):
        net = PhaseNet(small_config(), heatmap_size=16).eval()
        features = torch.randn(7, 16)
        stages = net.classify(features)
        assert len(stages) == 2
        assert tcn_classify(net, features).shape == (7, len(PHASES))

    def test_linear_head_without_tcn(self):
        net = PhaseNet(small_config(use_tcn=False), heatmap_size=16).eval()
        assert len(net.classify(torch.randn(7, 16))) == 1

    def test_empty_sequence(self):
        net = PhaseNet(small_config(), heatmap_size=16)
        with pytest.raises(DegenerateInputError):
            net.classify(torch.zeros(0, 16))


class TestInputs:
    def test_phase_inputs(self, corpus, backend):
        video = corpus.videos[0]
        inputs = phase_inputs(video, predict_video(backend, video), gt_frame_roles(video.frames))
        assert inputs.gaze_maps.shape == (32, 32, 32)
        sums = inputs.gaze_maps.sum(axis=(1, 2))
        assert np.all((np.abs(sums - 1.0) < 1e-4) | (sums == 0.0))
        assert inputs.presence.all()
        assert len(inputs.heads) == 32 and inputs.heads[0].shape == (4, 2)
        assert [PHASES[i] for i in inputs.labels[:5]] == [PhaseLabel.OR_PREPARATION] * 4 + [
            PhaseLabel.PATIENT_ROLL_IN
        ]

    def test_role_tokens_can_be_disabled(self, corpus, backend):
        video = corpus.videos[0]
        inputs = phase_inputs(
            video, predict_video(backend, video), gt_frame_roles(video.frames), use_role_tokens=False
        )
        assert not inputs.presence.any()

    def test_predicted_roles_need_a_model(self, corpus, backend):
        with pytest.raises(ModelStateError):
            build_phase_inputs(corpus.test_videos, small_config(gt_roles=False), backend)


class TestRecognizer:
    def test_history(self, recognizer):
        assert len(recognizer.history) == 2
        assert all(np.isfinite(recognizer.history))

    def test_posteriors(self, recognizer, test_inputs):
        proba = recognizer.predict_proba(test_inputs[0])
        assert proba.shape == (32, len(PHASES))
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        phases = infer_phase(recognizer, test_inputs[0])
        assert len(phases) == 32 and all(p in PHASES for p in phases)

    def test_labels_required(self):
        heads = [np.zeros((0, 2))] * 4
        unlabeled = PhaseInputs("v000", np.zeros((4, 16, 16)), heads, np.zeros((4, 4), bool))
        with pytest.raises(DegenerateInputError):
            train_phase([unlabeled], small_config(), heatmap_size=16)

    def test_save_and_load(self, recognizer, test_inputs, tmp_path):
        recognizer.save(tmp_path / "phase")
        loaded = PhaseRecognizer.load(tmp_path / "phase")
        np.testing.assert_allclose(
            loaded.predict_proba(test_inputs[0]), recognizer.predict_proba(test_inputs[0]), atol=1e-6
        )

    def test_evaluate(self, recognizer, test_inputs):
        report = evaluate_phases(recognizer, test_inputs)
        assert report.task == "phase"
        assert 0.0 <= report.metrics["accuracy"] <= 1.0
        assert report.metrics["num_frames"] == 32.0
        timeline = report.curves["timeline_v002"]
        assert len(timeline["predicted"]) == len(timeline["ground_truth"]) == 32

    def test_untrained(self, test_inputs):
        with pytest.raises(ModelStateError):
            evaluate_phases(PhaseRecognizer(small_config(), 32), test_inputs)


def test_save_and_load_phases(tmp_path):
    phases = [PhaseLabel.OR_PREPARATION, PhaseLabel.OR_PREPARATION, PhaseLabel.CONCLUSION]
    save_phases("v001", phases, tmp_path / "v001.phases.json")
    assert load_phases(tmp_path / "v001.phases.json") == ("v001", phases)

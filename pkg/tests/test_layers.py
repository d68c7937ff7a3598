import pytest
import torch
import torch.nn.functional as F

from or_gaze.layers import (
    MultiStageTCN,
    diou_loss_1d,
    make_encoder,
    sigmoid_focal_loss,
    sine_position_encoding_2d,
)


class TestPositionEncoding:
    def test_shape_and_origin(self):
        points = torch.zeros(3, 2)
        encoding = sine_position_encoding_2d(points, 16)
        assert encoding.shape == (3, 16)
        torch.testing.assert_close(encoding[0, 0::2], torch.zeros(8))
        torch.testing.assert_close(encoding[0, 1::2], torch.ones(8))

    def test_y_channels_first(self):
        a = sine_position_encoding_2d(torch.tensor([[0.3, 0.0]]), 8)
        b = sine_position_encoding_2d(torch.tensor([[0.0, 0.3]]), 8)
        torch.testing.assert_close(a[0, 4:], b[0, :4])

    def test_dim_must_divide_by_four(self):
        with pytest.raises(ValueError):
            sine_position_encoding_2d(torch.zeros(1, 2), 10)


def test_encoder_keeps_shape():
    encoder = make_encoder(16, 2, 2).eval()
    assert encoder(torch.randn(2, 5, 16)).shape == (2, 5, 16)


class TestTCN:
    def test_stage_outputs(self):
        tcn = MultiStageTCN(8, 16, 4, n_stages=3, n_layers=4).eval()
        outputs = tcn(torch.randn(1, 8, 20))
        assert len(outputs) == 3
        assert all(out.shape == (1, 4, 20) for out in outputs)

    def test_constant_sequence_stays_constant(self):
        torch.manual_seed(0)
        tcn = MultiStageTCN(3, 8, 4, n_stages=2, n_layers=5).eval()
        x = torch.randn(1, 3, 1).expand(1, 3, 40).contiguous()
        out = tcn(x)[-1]
        torch.testing.assert_close(out, out[..., :1].expand_as(out))


class TestLosses:
    def test_focal_without_modulation_is_bce(self):
        logits = torch.tensor([2.0, -1.0, 0.5])
        targets = torch.tensor([1.0, 0.0, 0.0])
        expected = F.binary_cross_entropy_with_logits(logits, targets, reduction="sum")
        torch.testing.assert_close(sigmoid_focal_loss(logits, targets, alpha=-1, gamma=0.0), expected)

    def test_focal_downweights_easy_examples(self):
        easy = sigmoid_focal_loss(torch.tensor([6.0]), torch.tensor([1.0]))
        hard = sigmoid_focal_loss(torch.tensor([-6.0]), torch.tensor([1.0]))
        assert easy < 1e-4 < hard

    @pytest.mark.parametrize(
        "pred, target, expected",
        [((1.0, 1.0), (1.0, 1.0), 0.0), ((2.0, 0.0), (0.0, 2.0), 1.25), ((1.0, 1.0), (2.0, 2.0), 0.5)],
    )
    def test_diou(self, pred, target, expected):
        loss = diou_loss_1d(torch.tensor([pred]), torch.tensor([target]))
        assert loss.item() == pytest.approx(expected)

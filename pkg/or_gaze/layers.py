"""Building blocks shared by the torch models."""

import math

import torch
import torch.nn.functional as F
from torch import nn


def sine_position_encoding_2d(
    points: torch.Tensor, dim: int, temperature: float = 10000.0
) -> torch.Tensor:
    """Sinusoidal encoding of normalized (x, y) points, shape (..., 2) -> (..., dim).

    Half the channels encode y and half x, each interleaving sin and cos over geometric
    frequencies of the coordinate scaled to [0, 2*pi]; y channels come first.
    """
    if dim % 4:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    steps = torch.arange(half, dtype=points.dtype, device=points.device)
    dim_t = temperature ** (2 * torch.div(steps, 2, rounding_mode="floor") / half)
    scaled = points * (2 * math.pi)
    pos_x = scaled[..., 0, None] / dim_t
    pos_y = scaled[..., 1, None] / dim_t
    pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=-1).flatten(-2)
    pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((pos_y, pos_x), dim=-1)


def make_encoder(dim: int, heads: int, layers: int, dropout: float = 0.0) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=dim,
        nhead=heads,
        dim_feedforward=2 * dim,
        dropout=dropout,
        activation="gelu",
        batch_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)


class DilatedResidualLayer(nn.Module):
    def __init__(self, dilation: int, channels: int, dropout: float = 0.5):
        super().__init__()
        self.dilation = dilation
        self.conv_dilated = nn.Conv1d(channels, channels, 3, dilation=dilation)
        self.conv_in = nn.Conv1d(channels, channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # edge replication keeps a constant sequence constant
        padded = F.pad(x, (self.dilation, self.dilation), mode="replicate")
        out = F.relu(self.conv_dilated(padded))
        out = self.dropout(self.conv_in(out))
        return x + out


class SingleStageTCN(nn.Module):
    def __init__(self, in_channel: int, n_features: int, n_classes: int, n_layers: int, dropout: float):
        super().__init__()
        self.conv_in = nn.Conv1d(in_channel, n_features, 1)
        self.layers = nn.ModuleList(
            [DilatedResidualLayer(2**i, n_features, dropout) for i in range(n_layers)]
        )
        self.conv_out = nn.Conv1d(n_features, n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv_in(x)
        for layer in self.layers:
            out = layer(out)
        return self.conv_out(out)


class MultiStageTCN(nn.Module):
    """Multi-stage dilated temporal convolutions; each stage refines the softmax of the last.

    Input (B, C_in, T), output a list of per-stage logits (B, n_classes, T).
    """

    def __init__(
        self,
        in_channel: int,
        n_features: int,
        n_classes: int,
        n_stages: int,
        n_layers: int,
        dropout: float = 0.5,
    ):
        super().__init__()
        self.stage1 = SingleStageTCN(in_channel, n_features, n_classes, n_layers, dropout)
        self.stages = nn.ModuleList(
            [
                SingleStageTCN(n_classes, n_features, n_classes, n_layers, dropout)
                for _ in range(n_stages - 1)
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = self.stage1(x)
        outputs = [out]
        for stage in self.stages:
            out = stage(F.softmax(out, dim=1))
            outputs.append(out)
        return outputs


def sigmoid_focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    reduction: str = "sum",
) -> torch.Tensor:
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * ((1 - p_t) ** gamma)
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    return loss


def diou_loss_1d(
    pred_offsets: torch.Tensor, target_offsets: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Distance-IoU loss of 1D segments given as (left, right) distances from a shared point.

    Returns one value per row, in [0, 2].
    """
    lp, rp = pred_offsets[:, 0], pred_offsets[:, 1]
    lg, rg = target_offsets[:, 0], target_offsets[:, 1]
    intersection = torch.min(lp, lg) + torch.min(rp, rg)
    union = lp + rp + lg + rg - intersection
    iou = intersection / union.clamp(min=eps)
    enclosing = torch.max(lp, lg) + torch.max(rp, rg)
    # squared distance between the two centers, relative to the enclosing length
    rho = 0.5 * (rp - lp - rg + lg)
    return 1.0 - iou + torch.square(rho / enclosing.clamp(min=eps))

"""Anchor-free temporal activity detection over fused clip features.

A convolutional feature pyramid scores every instant of every level for each activity class
and regresses its distances to the segment start and end. Training labels instants by center
sampling within per-level regression ranges; decoding keeps the top candidates and merges them
with Gaussian soft-NMS.
"""

import copy
import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from or_gaze.backends import GazeBackend, predict_video
from or_gaze.cache import ArtifactCache
from or_gaze.checkpoints import CheckpointDescriptor, load_checkpoint, save_checkpoint
from or_gaze.layers import diou_loss_1d, sigmoid_focal_loss
from or_gaze.metrics import EvalReport, ap_at_tiou, tiou
from or_gaze.models import (
    ACTIVITIES,
    ActivitySegment,
    DegenerateInputError,
    FeatureKind,
    ModelStateError,
)
from or_gaze.settings import GazeEncoderConfig, GazeMode, ScenarioConfig, TadConfig, config_hash
from or_gaze.synth import CorpusVideo, clip_grid
from or_gaze.teamcomm import (
    ClipGazes,
    GazeEncoder,
    GazeEncoderModel,
    collate_clips,
    extract_clip_gazes,
)
from or_gaze.utils.seeding import seed_everything

log = getLogger(__name__)

ACTIVITY_INDEX = {activity: i for i, activity in enumerate(ACTIVITIES)}
PRIOR_PROB = 0.01


@dataclass
class TadSample:
    """One video on its clip grid: f_va, optional f_g or gaze clips, ground truth in seconds."""

    video_id: str
    f_va: np.ndarray
    t_start_s: float
    t_stride_s: float
    duration_s: float
    f_g: Optional[np.ndarray] = None
    clips: Optional[list[ClipGazes]] = None
    segments: Optional[list[ActivitySegment]] = None

    @property
    def num_clips(self) -> int:
        return len(self.f_va)

    def to_clip_units(self, seconds: float) -> float:
        return (seconds - self.t_start_s) / self.t_stride_s

    def to_seconds(self, units: float) -> float:
        return self.t_start_s + units * self.t_stride_s


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv1d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())


class TadNet(nn.Module):
    def __init__(
        self,
        config: TadConfig,
        va_dim: int,
        gaze_dim: int,
        encoder: Optional[GazeEncoder] = None,
    ):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.fusion = nn.Linear(gaze_dim, va_dim) if config.use_gaze else None
        self.encoder = encoder
        self.embed = _conv_block(va_dim, h)
        self.levels = nn.ModuleList(
            [_conv_block(h, h, 1 if level == 0 else 2) for level in range(config.pyramid_levels)]
        )
        self.cls_head = nn.Sequential(_conv_block(h, h), nn.Conv1d(h, len(ACTIVITIES), 3, padding=1))
        self.reg_head = nn.Sequential(_conv_block(h, h), nn.Conv1d(h, 2, 3, padding=1))
        self.scales = nn.Parameter(torch.ones(config.pyramid_levels))
        nn.init.constant_(self.cls_head[-1].bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def fuse(self, f_va: torch.Tensor, f_g: Optional[torch.Tensor]) -> torch.Tensor:
        """f = f_va + sigmoid(W f_g + b) * f_va; plain f_va without gaze."""
        if self.fusion is None:
            return f_va
        if f_g is None:
            raise ValueError("gaze fusion needs f_g")
        return f_va + torch.sigmoid(self.fusion(f_g)) * f_va

    def forward(
        self, f_va: torch.Tensor, f_g: Optional[torch.Tensor] = None
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """(L, D_va) features -> per-level class logits (L_l, C) and positive offsets (L_l, 2)."""
        x = self.embed(self.fuse(f_va, f_g).T.unsqueeze(0))
        cls_logits, offsets = [], []
        for level, block in enumerate(self.levels):
            x = block(x)
            cls_logits.append(self.cls_head(x)[0].T)
            offsets.append(F.softplus(self.reg_head(x)[0].T * self.scales[level]))
        return cls_logits, offsets


def level_lengths(num_clips: int, levels: int) -> list[int]:
    lengths = [num_clips]
    for _ in range(levels - 1):
        lengths.append((lengths[-1] + 1) // 2)
    return lengths


def make_points(num_clips: int, config: TadConfig) -> torch.Tensor:
    """(num_points, 4) rows of (t in clip units, range lo, range hi, stride) over all levels."""
    rows = []
    for level, length in enumerate(level_lengths(num_clips, config.pyramid_levels)):
        stride = 2**level
        lo, hi = config.regression_ranges[level]
        t = torch.arange(length, dtype=torch.float64) * stride
        rows.append(
            torch.stack(
                [t, torch.full_like(t, lo), torch.full_like(t, hi), torch.full_like(t, stride)], dim=1
            )
        )
    return torch.cat(rows)


def label_points(
    points: torch.Tensor,
    gt_segments: torch.Tensor,
    gt_labels: torch.Tensor,
    num_classes: int,
    center_radius: float = 1.5,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Class targets (num_points, C) and stride-normalized (left, right) targets (num_points, 2).

    A point is positive for a segment when it lies in the center region of radius
    ``center_radius * stride`` (cut at the segment bounds) and the segment's longer offset
    falls in the point's regression range. Among several, the shortest segment wins.
    """
    num_pts, num_gts = len(points), len(gt_segments)
    if num_gts == 0:
        return points.new_zeros(num_pts, num_classes), points.new_zeros(num_pts, 2)

    lens = (gt_segments[:, 1] - gt_segments[:, 0])[None, :].repeat(num_pts, 1)
    segs = gt_segments[None].expand(num_pts, num_gts, 2)
    left = points[:, 0, None] - segs[:, :, 0]
    right = segs[:, :, 1] - points[:, 0, None]
    reg_targets = torch.stack((left, right), dim=-1)

    center = 0.5 * (segs[:, :, 0] + segs[:, :, 1])
    t_mins = center - points[:, 3, None] * center_radius
    t_maxs = center + points[:, 3, None] * center_radius
    cb_left = points[:, 0, None] - torch.maximum(t_mins, segs[:, :, 0])
    cb_right = torch.minimum(t_maxs, segs[:, :, 1]) - points[:, 0, None]
    inside_center = torch.stack((cb_left, cb_right), -1).min(-1)[0] > 0

    max_distance = reg_targets.max(-1)[0]
    in_range = (max_distance >= points[:, 1, None]) & (max_distance <= points[:, 2, None])

    lens = lens.masked_fill(~inside_center, float("inf")).masked_fill(~in_range, float("inf"))
    min_len, min_idx = lens.min(dim=1)
    chosen = ((lens <= min_len[:, None] + 1e-3) & (lens < float("inf"))).to(points.dtype)
    one_hot = F.one_hot(gt_labels, num_classes).to(points.dtype)
    cls_targets = (chosen @ one_hot).clamp(0.0, 1.0)
    reg_targets = reg_targets[torch.arange(num_pts), min_idx] / points[:, 3, None]
    return cls_targets, reg_targets


def tad_loss(
    cls_logits: Sequence[torch.Tensor],
    offsets: Sequence[torch.Tensor],
    cls_targets: torch.Tensor,
    reg_targets: torch.Tensor,
    config: TadConfig,
) -> torch.Tensor:
    """Focal classification loss plus DIoU regression loss on positives, per positive point."""
    logits = torch.cat(list(cls_logits))
    pred = torch.cat(list(offsets))
    positive = cls_targets.sum(-1) > 0
    normalizer = max(int(positive.sum()), 1)
    cls_loss = sigmoid_focal_loss(
        logits, cls_targets.to(logits.dtype), config.focal_alpha, config.focal_gamma
    )
    if positive.any():
        reg_loss = diou_loss_1d(pred[positive], reg_targets[positive].to(pred.dtype)).sum()
    else:
        reg_loss = 0.0 * pred.sum()
    return (cls_loss + reg_loss) / normalizer


def _targets(sample: TadSample, config: TadConfig) -> tuple[torch.Tensor, torch.Tensor]:
    segments = sample.segments or []
    gt = torch.tensor(
        [[sample.to_clip_units(s.start_s), sample.to_clip_units(s.end_s)] for s in segments],
        dtype=torch.float64,
    ).reshape(-1, 2)
    labels = torch.tensor([ACTIVITY_INDEX[s.activity] for s in segments], dtype=torch.long)
    points = make_points(sample.num_clips, config)
    return label_points(points, gt, labels, len(ACTIVITIES), config.center_radius)


def soft_nms(
    segments: np.ndarray,
    scores: np.ndarray,
    sigma: float = 0.5,
    iou_threshold: float = 0.75,
    min_score: float = 1e-3,
    max_count: int = 100,
) -> tuple[list[int], list[float]]:
    """Gaussian soft-NMS; candidates at or above ``iou_threshold`` to a kept one are dropped.

    Returns kept indices with their decayed scores, best first.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    remaining = [i for i in range(len(scores)) if scores[i] >= min_score]
    kept, kept_scores = [], []
    while remaining and len(kept) < max_count:
        best = max(remaining, key=lambda i: (scores[i], -segments[i][0], -i))
        kept.append(best)
        kept_scores.append(float(scores[best]))
        remaining.remove(best)
        survivors = []
        for i in remaining:
            overlap = tiou(tuple(segments[best]), tuple(segments[i]))
            if overlap >= iou_threshold:
                continue
            scores[i] *= math.exp(-(overlap**2) / sigma)
            if scores[i] >= min_score:
                survivors.append(i)
        remaining = survivors
    return kept, kept_scores


class TadModel:
    def __init__(
        self,
        config: Optional[TadConfig] = None,
        va_dim: int = 320,
        gaze_dim: int = 256,
        net: Optional[TadNet] = None,
    ):
        self.config = config or TadConfig()
        self.va_dim = va_dim
        self.gaze_dim = gaze_dim
        self.net = net or TadNet(self.config, va_dim, gaze_dim)
        self.net.eval()
        self.history: list[float] = []

    def _gaze_input(self, sample: TadSample) -> Optional[torch.Tensor]:
        if not self.config.use_gaze:
            return None
        if self.net.encoder is not None:
            if sample.clips is None:
                raise ValueError(f"{sample.video_id}: fine-tuning the gaze encoder needs gaze clips")
            return self.net.encoder(collate_clips(sample.clips, self.net.encoder.gaze_dim))
        if sample.f_g is None:
            raise ValueError(f"{sample.video_id}: gaze fusion needs f_g")
        return torch.from_numpy(np.asarray(sample.f_g, dtype=np.float32))

    def outputs(self, sample: TadSample) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        if sample.num_clips == 0:
            raise DegenerateInputError(f"{sample.video_id}: empty feature sequence")
        f_va = torch.from_numpy(np.asarray(sample.f_va, dtype=np.float32))
        return self.net(f_va, self._gaze_input(sample))

    def save(self, path: str | Path, force: bool = False) -> Path:
        encoder = self.net.encoder
        descriptor = CheckpointDescriptor(
            name="tad",
            kind="tad",
            config=self.config.model_dump(mode="json"),
            extra={
                "va_dim": self.va_dim,
                "gaze_dim": self.gaze_dim,
                "history": self.history,
                "encoder": None
                if encoder is None
                else {"config": encoder.config.model_dump(mode="json"), "gaze_dim": encoder.gaze_dim},
            },
        )
        return save_checkpoint(path, self.net.state_dict(), descriptor, force=force)

    @classmethod
    def load(cls, path: str | Path) -> "TadModel":
        state_dict, descriptor = load_checkpoint(path, "tad")
        config = TadConfig.model_validate(descriptor.config)
        extra = descriptor.extra
        encoder = None
        if extra.get("encoder"):
            encoder = GazeEncoder(
                GazeEncoderConfig.model_validate(extra["encoder"]["config"]),
                int(extra["encoder"]["gaze_dim"]),
            )
        net = TadNet(config, int(extra["va_dim"]), int(extra["gaze_dim"]), encoder)
        net.load_state_dict(state_dict)
        model = cls(config, int(extra["va_dim"]), int(extra["gaze_dim"]), net)
        model.history = list(extra.get("history", []))
        return model


def tad_samples(
    videos: Sequence[CorpusVideo],
    scenario: ScenarioConfig,
    backend: Optional[GazeBackend] = None,
    encoder: Optional[GazeEncoderModel] = None,
    mode: GazeMode = "global",
    keep_clips: bool = False,
    cache: Optional[ArtifactCache] = None,
) -> list[TadSample]:
    """f_va = [visual, action] per clip; f_g from the frozen encoder when one is given."""
    samples = []
    for video in videos:
        missing = [k for k in (FeatureKind.VISUAL, FeatureKind.ACTION) if k not in video.features]
        if missing:
            raise DegenerateInputError(f"{video.video_id}: missing {', '.join(missing)} features")
        visual, action = video.features[FeatureKind.VISUAL], video.features[FeatureKind.ACTION]
        _, t_start, t_stride = clip_grid(scenario, video.num_frames)
        sample = TadSample(
            video_id=video.video_id,
            f_va=np.concatenate([visual.vectors, action.vectors], axis=1),
            t_start_s=t_start,
            t_stride_s=t_stride,
            duration_s=video.duration_s,
            segments=list(video.segments.segments) if video.segments is not None else None,
        )
        if encoder is not None and backend is not None:
            clips = extract_clip_gazes(video, predict_video(backend, video, cache=cache), scenario, mode)
            sample.f_g = encoder.encode(clips)
            if keep_clips:
                sample.clips = clips
        samples.append(sample)
    return samples


def train_tad(
    samples: Sequence[TadSample],
    config: Optional[TadConfig] = None,
    encoder: Optional[GazeEncoderModel] = None,
) -> TadModel:
    config = config or TadConfig()
    if not samples:
        raise DegenerateInputError("no videos to train on")
    targets = [_targets(s, config) for s in samples]
    if not any(bool((cls > 0).any()) for cls, _ in targets):
        raise DegenerateInputError("no positive instants in the training videos")

    generator = seed_everything(config.seed)
    va_dim = samples[0].f_va.shape[1]
    if samples[0].f_g is not None:
        gaze_dim = samples[0].f_g.shape[1]
    else:
        gaze_dim = encoder.config.output_dim if encoder is not None else va_dim
    tuned = None
    if config.use_gaze and not config.freeze_encoder:
        if encoder is None:
            raise ModelStateError("fine-tuning the gaze encoder needs a trained encoder")
        tuned = copy.deepcopy(encoder.net)
    model = TadModel(config, va_dim, gaze_dim, TadNet(config, va_dim, gaze_dim, tuned))
    net = model.net
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    net.train()
    for epoch in range(config.epochs):
        total = 0.0
        for i in torch.randperm(len(samples), generator=generator).tolist():
            cls_targets, reg_targets = targets[i]
            optimizer.zero_grad()
            cls_logits, offsets = model.outputs(samples[i])
            loss = tad_loss(cls_logits, offsets, cls_targets, reg_targets, config)
            loss.backward()
            optimizer.step()
            total += loss.item()
        model.history.append(total / len(samples))
        log.info("tad epoch %d loss %.5f", epoch + 1, model.history[-1])
    net.eval()
    return model


@torch.no_grad()
def tad_detect(model: TadModel, sample: TadSample) -> list[ActivitySegment]:
    """Scored detections of one video, per class after soft-NMS, best first."""
    if not model.history:
        raise ModelStateError("TAD model is untrained")
    config = model.config
    model.net.eval()
    cls_logits, offsets = model.outputs(sample)
    points = make_points(sample.num_clips, config)

    probs = torch.sigmoid(torch.cat(cls_logits)).double()
    offs = torch.cat(offsets).double()
    flat = probs.flatten()
    keep = torch.nonzero(flat > config.pre_nms_threshold).flatten()
    keep = keep[torch.argsort(flat[keep], descending=True, stable=True)][: config.pre_nms_topk]
    point_idx, class_idx = keep // len(ACTIVITIES), keep % len(ACTIVITIES)

    candidates: dict[int, list[tuple[float, float, float]]] = {c: [] for c in range(len(ACTIVITIES))}
    for p, c, score in zip(point_idx.tolist(), class_idx.tolist(), flat[keep].tolist()):
        t, stride = points[p, 0].item(), points[p, 3].item()
        start = sample.to_seconds(t - offs[p, 0].item() * stride)
        end = sample.to_seconds(t + offs[p, 1].item() * stride)
        start, end = max(0.0, start), min(sample.duration_s, end)
        if end - start > 1e-6:
            candidates[c].append((start, end, score))

    detections = []
    for c, rows in candidates.items():
        if not rows:
            continue
        segments = np.array([(s, e) for s, e, _ in rows])
        kept, scores = soft_nms(
            segments,
            np.array([s for _, _, s in rows]),
            config.nms_sigma,
            config.nms_iou_threshold,
            config.min_score,
            config.max_detections,
        )
        for i, score in zip(kept, scores):
            if score < config.score_threshold:
                continue
            detections.append(
                ActivitySegment(
                    video_id=sample.video_id,
                    activity=ACTIVITIES[c],
                    start_s=float(segments[i, 0]),
                    end_s=float(segments[i, 1]),
                    score=min(max(score, 0.0), 1.0),
                )
            )
    return detections


def evaluate_tad(
    detections: dict[str, list[ActivitySegment]],
    ground_truth: dict[str, list[ActivitySegment]],
    config: TadConfig,
    thresholds: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5),
    task: str = "teamcomm",
) -> EvalReport:
    """Per-class AP at every tIoU threshold, and the average over classes."""
    metrics, per_class, flags, curves = {}, {}, [], {}
    for activity in ACTIVITIES:
        dets = [d for v in sorted(detections) for d in detections[v] if d.activity == activity]
        gts = [g for v in sorted(ground_truth) for g in ground_truth[v] if g.activity == activity]
        result = ap_at_tiou(dets, gts, thresholds)
        name = str(activity)
        per_class[name] = {f"ap@{t:g}": v for t, v in result.ap.items()}
        per_class[name]["mean_ap"] = result.mean_ap
        metrics[f"{name}.mean_ap"] = result.mean_ap
        if result.no_ground_truth:
            flags.append(f"{name}: no ground truth")
        if result.precision:
            curves[f"pr_{name}"] = {"precision": result.precision, "recall": result.recall}
    metrics["average_mean_ap"] = float(np.mean([metrics[f"{a}.mean_ap"] for a in ACTIVITIES]))
    return EvalReport(
        task=task,
        metrics=metrics,
        per_class=per_class,
        config_hash=config_hash(config),
        seed=config.seed,
        flags=flags,
        curves=curves,
    )

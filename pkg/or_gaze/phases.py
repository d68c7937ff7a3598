"""Surgical phase recognition from aggregated gaze heatmaps, head positions and role tokens.

Per frame, the summed gaze heatmap gives a gaze embedding and a sparse head-position map gives
a head embedding; their sum is the scene embedding. A centered window of K scene embeddings
plus one token per clinical role goes through a transformer encoder, and the per-frame clip
features are classified by a multi-stage temporal convolution network.
"""

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from or_gaze import io
from or_gaze.backends import GazeBackend, VideoPredictions, predict_video
from or_gaze.cache import ArtifactCache
from or_gaze.checkpoints import CheckpointDescriptor, load_checkpoint, save_checkpoint
from or_gaze.heatmaps import HEATMAP_SIZE, frame_heatmap
from or_gaze.layers import MultiStageTCN, make_encoder, sine_position_encoding_2d
from or_gaze.metrics import EvalReport, accuracy, boundary_error_rates, macro_f1
from or_gaze.models import (
    PHASES,
    ROLES,
    DegenerateInputError,
    ModelStateError,
    PhaseLabel,
)
from or_gaze.roles import (
    FrameRoles,
    RoleClassifier,
    gt_frame_roles,
    predict_video_roles,
    role_presence,
)
from or_gaze.settings import PhaseModelConfig, config_hash
from or_gaze.synth import CorpusVideo, head_cell
from or_gaze.utils.seeding import seed_everything

log = getLogger(__name__)

PHASE_INDEX = {phase: i for i, phase in enumerate(PHASES)}
# persons whose in-frame score falls below this contribute the zero map
IN_FRAME_THRESHOLD = 0.5
EMBED_BATCH = 64


def head_position_map(
    centers: np.ndarray, channels: int, size: int = HEATMAP_SIZE
) -> torch.Tensor:
    """(C, size, size) map, zero except at head cells, which hold the encoding of the cell center."""
    grid = torch.zeros(channels, size, size)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        return grid
    cells = sorted({head_cell(x, y, size) for x, y in centers})
    rows = torch.tensor([r for r, _ in cells])
    cols = torch.tensor([c for _, c in cells])
    points = torch.stack([(cols + 0.5) / size, (rows + 0.5) / size], dim=1).float()
    grid[:, rows, cols] = sine_position_encoding_2d(points, channels).T
    return grid


class PhaseNet(nn.Module):
    def __init__(self, config: PhaseModelConfig, heatmap_size: int = HEATMAP_SIZE):
        super().__init__()
        self.config = config
        self.heatmap_size = heatmap_size
        d, c = config.embed_dim, config.position_dim
        self.gaze_fc = nn.Sequential(nn.Linear(heatmap_size**2, d), nn.ReLU(), nn.Linear(d, d))
        self.head_conv = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, d, 3, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(1),
        )
        self.frame_positions = nn.Parameter(torch.zeros(1, config.clip_frames, d))
        self.role_embeddings = nn.Parameter(torch.zeros(len(ROLES), d))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        for p in (self.frame_positions, self.role_embeddings, self.cls_token):
            nn.init.normal_(p, std=0.02)
        self.encoder = make_encoder(d, config.num_heads, config.num_layers, config.dropout)
        if config.use_tcn:
            self.tcn = MultiStageTCN(
                d, config.tcn_features, len(PHASES), config.tcn_stages, config.tcn_layers,
                config.dropout,
            )
        else:
            self.linear = nn.Conv1d(d, len(PHASES), 1)

    def gaze_embedding(self, frame_maps: torch.Tensor) -> torch.Tensor:
        """(n, H, W) aggregated heatmaps -> (n, D)."""
        cells = frame_maps.shape[-1] * frame_maps.shape[-2]
        return self.gaze_fc(frame_maps.flatten(1) * cells)

    def head_embedding(self, head_maps: torch.Tensor) -> torch.Tensor:
        """(n, C, H, W) head-position maps -> (n, D)."""
        return self.head_conv(head_maps).flatten(1)

    def clip_features(self, windows: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
        """(L, K, D) scene-embedding windows and (L, M) role presence -> (L, D)."""
        role_tokens = self.role_embeddings.unsqueeze(0) * presence.unsqueeze(-1).to(windows.dtype)
        tokens = torch.cat([windows + self.frame_positions, role_tokens], dim=1)
        if self.config.pooling == "cls":
            tokens = torch.cat([self.cls_token.expand(len(tokens), -1, -1), tokens], dim=1)
            return self.encoder(tokens)[:, 0]
        return self.encoder(tokens).mean(dim=1)

    def classify(self, clip_features: torch.Tensor) -> list[torch.Tensor]:
        """(L, D) -> per-stage logits, each (L, num_phases)."""
        if clip_features.shape[0] < 1:
            raise DegenerateInputError("phase classification needs at least one frame")
        x = clip_features.T.unsqueeze(0)
        if self.config.use_tcn:
            stages = self.tcn(x)
        else:
            stages = [self.linear(x)]
        return [s.squeeze(0).T for s in stages]


@dataclass
class PhaseInputs:
    video_id: str
    gaze_maps: np.ndarray
    heads: list[np.ndarray]
    presence: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return len(self.gaze_maps)


def phase_inputs(
    video: CorpusVideo,
    predictions: VideoPredictions,
    frame_roles: FrameRoles,
    renormalize: bool = True,
    use_role_tokens: bool = True,
) -> PhaseInputs:
    size = predictions.heatmaps.shape[-1] if len(predictions.heatmaps) else HEATMAP_SIZE
    maps, heads = [], []
    for frame in video.frames:
        rows = predictions.rows(frame.frame_index)
        inside = [
            predictions.heatmaps[r] for r in rows if predictions.in_scores[r] >= IN_FRAME_THRESHOLD
        ]
        maps.append(frame_heatmap(inside, size, renormalize))
        heads.append(
            np.array(
                [p.head.normalized_center(frame.image_size) for p in frame.persons],
                dtype=np.float64,
            ).reshape(-1, 2)
        )
    presence = role_presence(video.frames, frame_roles)
    if not use_role_tokens:
        presence[:] = False
    labels = None
    if all(frame.phase is not None for frame in video.frames):
        labels = np.array([PHASE_INDEX[frame.phase] for frame in video.frames])
    return PhaseInputs(video.video_id, np.stack(maps), heads, presence, labels)


def frame_gaze_embedding(
    net: PhaseNet, heatmaps: Sequence[np.ndarray], renormalize: bool = True
) -> torch.Tensor:
    frame_map = frame_heatmap(heatmaps, net.heatmap_size, renormalize)
    return net.gaze_embedding(torch.from_numpy(frame_map).unsqueeze(0))[0]


def head_position_embedding(net: PhaseNet, centers: np.ndarray) -> torch.Tensor:
    head_map = head_position_map(centers, net.config.position_dim, net.heatmap_size)
    return net.head_embedding(head_map.unsqueeze(0))[0]


def scene_embedding(g: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    if g.shape != h.shape:
        raise ValueError(f"gaze embedding {tuple(g.shape)} and head embedding {tuple(h.shape)} differ")
    return g + h


def clip_windows(num_frames: int, k: int) -> np.ndarray:
    """(num_frames, K) frame indices of centered windows, edges replicated."""
    offsets = np.arange(k) - k // 2
    return np.clip(np.arange(num_frames)[:, None] + offsets[None, :], 0, num_frames - 1)


def clip_encode(net: PhaseNet, scene: torch.Tensor, presence: np.ndarray) -> torch.Tensor:
    """Clip feature of one window of K scene embeddings and the roles present in it."""
    present = torch.from_numpy(np.asarray(presence, dtype=bool)).unsqueeze(0)
    return net.clip_features(scene.unsqueeze(0), present)[0]


def tcn_classify(net: PhaseNet, clip_features: torch.Tensor) -> torch.Tensor:
    """Per-frame phase logits of the final stage."""
    return net.classify(clip_features)[-1]


def phase_loss(stage_logits: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    return sum(F.cross_entropy(logits, labels) for logits in stage_logits)


def _scene_embeddings(net: PhaseNet, inputs: PhaseInputs, frames: np.ndarray) -> torch.Tensor:
    out = []
    for start in range(0, len(frames), EMBED_BATCH):
        idx = frames[start : start + EMBED_BATCH]
        maps = torch.from_numpy(inputs.gaze_maps[idx])
        head_maps = torch.stack(
            [head_position_map(inputs.heads[i], net.config.position_dim, net.heatmap_size) for i in idx]
        )
        out.append(scene_embedding(net.gaze_embedding(maps), net.head_embedding(head_maps)))
    return torch.cat(out)


def _span_logits(net: PhaseNet, inputs: PhaseInputs, start: int, end: int) -> list[torch.Tensor]:
    """Stage logits for frames [start, end), with clip windows reaching outside the span."""
    k = net.config.clip_frames
    windows = clip_windows(inputs.num_frames, k)[start:end]
    needed = np.unique(windows)
    scene = _scene_embeddings(net, inputs, needed)
    local = np.searchsorted(needed, windows)
    presence = inputs.presence[windows].any(axis=1)
    clip = net.clip_features(scene[torch.from_numpy(local)], torch.from_numpy(presence))
    return net.classify(clip)


class PhaseRecognizer:
    def __init__(
        self,
        config: Optional[PhaseModelConfig] = None,
        heatmap_size: int = HEATMAP_SIZE,
        net: Optional[PhaseNet] = None,
    ):
        self.config = config or PhaseModelConfig()
        self.heatmap_size = heatmap_size
        self.net = net or PhaseNet(self.config, heatmap_size)
        self.net.eval()
        self.history: list[float] = []

    @torch.no_grad()
    def predict_proba(self, inputs: PhaseInputs) -> np.ndarray:
        """(num_frames, num_phases) posterior of the final stage."""
        self.net.eval()
        if inputs.num_frames < 1:
            raise DegenerateInputError(f"{inputs.video_id}: video has no frames")
        logits = _span_logits(self.net, inputs, 0, inputs.num_frames)[-1]
        return torch.softmax(logits.double(), dim=1).numpy()

    def save(self, path: str | Path, force: bool = False) -> Path:
        descriptor = CheckpointDescriptor(
            name="phase",
            kind="phase",
            config=self.config.model_dump(mode="json"),
            extra={"heatmap_size": self.heatmap_size, "history": self.history},
        )
        return save_checkpoint(path, self.net.state_dict(), descriptor, force=force)

    @classmethod
    def load(cls, path: str | Path) -> "PhaseRecognizer":
        state_dict, descriptor = load_checkpoint(path, "phase")
        config = PhaseModelConfig.model_validate(descriptor.config)
        recognizer = cls(config, int(descriptor.extra.get("heatmap_size", HEATMAP_SIZE)))
        recognizer.net.load_state_dict(state_dict)
        recognizer.net.eval()
        recognizer.history = list(descriptor.extra.get("history", []))
        return recognizer


def video_frame_roles(
    video: CorpusVideo,
    config: PhaseModelConfig,
    backend: GazeBackend,
    role_classifier: Optional[RoleClassifier],
    cache: Optional[ArtifactCache] = None,
) -> FrameRoles:
    """Roles driving the role tokens: predicted by default, annotated with ``gt_roles``."""
    if config.gt_roles:
        return gt_frame_roles(video.frames)
    if role_classifier is None:
        raise ModelStateError("phase recognition needs a trained role model (or gt_roles)")
    return predict_video_roles(video, role_classifier, backend, cache=cache)


def build_phase_inputs(
    videos: Sequence[CorpusVideo],
    config: PhaseModelConfig,
    backend: GazeBackend,
    role_classifier: Optional[RoleClassifier] = None,
    cache: Optional[ArtifactCache] = None,
) -> list[PhaseInputs]:
    inputs = []
    for video in videos:
        predictions = predict_video(backend, video, cache=cache)
        frame_roles = video_frame_roles(video, config, backend, role_classifier, cache)
        inputs.append(
            phase_inputs(video, predictions, frame_roles, config.renormalize, config.use_role_tokens)
        )
    return inputs


def train_phase(
    inputs: Sequence[PhaseInputs],
    config: Optional[PhaseModelConfig] = None,
    heatmap_size: int = HEATMAP_SIZE,
) -> PhaseRecognizer:
    """Stage-summed cross-entropy over ``train_window``-frame spans of every video."""
    config = config or PhaseModelConfig()
    missing = [x.video_id for x in inputs if x.labels is None]
    if missing or not inputs:
        raise DegenerateInputError(f"phase labels missing for {missing or 'every video'}")

    spans = [
        (v, start, min(start + config.train_window, x.num_frames))
        for v, x in enumerate(inputs)
        for start in range(0, x.num_frames, config.train_window)
    ]
    generator = seed_everything(config.seed)
    recognizer = PhaseRecognizer(config, heatmap_size)
    net = recognizer.net
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    net.train()
    for epoch in range(config.epochs):
        total = 0.0
        for i in torch.randperm(len(spans), generator=generator).tolist():
            v, start, end = spans[i]
            labels = torch.from_numpy(inputs[v].labels[start:end])
            optimizer.zero_grad()
            loss = phase_loss(_span_logits(net, inputs[v], start, end), labels)
            loss.backward()
            optimizer.step()
            total += loss.item()
        recognizer.history.append(total / len(spans))
        log.info("phase epoch %d loss %.5f", epoch + 1, recognizer.history[-1])
    net.eval()
    return recognizer


def infer_phase(recognizer: PhaseRecognizer, inputs: PhaseInputs) -> list[PhaseLabel]:
    return [PHASES[i] for i in recognizer.predict_proba(inputs).argmax(axis=1)]


def save_phases(video_id: str, phases: Sequence[PhaseLabel], path: str | Path, force: bool = False):
    return io.save_frame_labels(video_id, {i: str(p) for i, p in enumerate(phases)}, path, force)


def load_phases(path: str | Path) -> tuple[str, list[PhaseLabel]]:
    video_id, labels = io.load_frame_labels(path)
    return video_id, [PhaseLabel(labels[i]) for i in sorted(labels)]


def evaluate_phases(
    recognizer: PhaseRecognizer, inputs: Sequence[PhaseInputs], boundary_window: int = 3
) -> EvalReport:
    if not recognizer.history:
        raise ModelStateError("phase model is untrained")
    preds, gts, boundary, interior, curves = [], [], [], [], {}
    for x in inputs:
        if x.labels is None:
            raise DegenerateInputError(f"{x.video_id}: phase labels missing")
        predicted = recognizer.predict_proba(x).argmax(axis=1).tolist()
        truth = x.labels.tolist()
        preds += [PHASES[i] for i in predicted]
        gts += [PHASES[i] for i in truth]
        b, i = boundary_error_rates(predicted, truth, boundary_window)
        boundary.append(b)
        interior.append(i)
        curves[f"timeline_{x.video_id}"] = {"predicted": predicted, "ground_truth": truth}

    score, per_class = macro_f1(preds, gts, PHASES)
    return EvalReport(
        task="phase",
        metrics={
            "macro_f1": score,
            "accuracy": accuracy(preds, gts),
            "boundary_error": float(np.mean(boundary)),
            "interior_error": float(np.mean(interior)),
            "num_frames": float(len(gts)),
        },
        per_class=per_class,
        config_hash=config_hash(recognizer.config),
        seed=recognizer.config.seed,
        curves=curves,
    )

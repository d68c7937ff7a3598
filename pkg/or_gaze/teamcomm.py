"""Self-supervised spatial-temporal gaze encoder and gated fusion for team-communication detection.

Per clip, every frame's person gaze features (with their head positions) are summarized by a
spatial encoder, and the sequence of frame vectors by a temporal encoder projecting to the
visual feature size V. The encoder learns from visual clip features alone, through InfoNCE.
"""

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from or_gaze.backends import GazeBackend, VideoPredictions, predict_video
from or_gaze.cache import ArtifactCache
from or_gaze.checkpoints import CheckpointDescriptor, load_checkpoint, save_checkpoint
from or_gaze.layers import make_encoder, sine_position_encoding_2d
from or_gaze.models import DegenerateInputError, FeatureKind, FeatureTable, FrameRecord
from or_gaze.settings import GazeEncoderConfig, GazeMode, ScenarioConfig
from or_gaze.synth import CorpusVideo, clip_frame_range, clip_grid
from or_gaze.utils.seeding import seed_everything

log = getLogger(__name__)

LOCAL_PERSONS = 3


@dataclass
class ClipGazes:
    """Gaze features (P x G) and head centers (P x 2) of every frame of one clip."""

    video_id: str
    clip_index: int
    features: list[np.ndarray]
    heads: list[np.ndarray]
    person_ids: list[list[str]]

    @property
    def num_frames(self) -> int:
        return len(self.features)


def select_persons(frame: FrameRecord, mode: GazeMode) -> list[int]:
    """Person indices to encode; local mode keeps the rightmost three heads."""
    indices = list(range(len(frame.persons)))
    if mode == "global":
        return indices
    centers = [p.head.normalized_center(frame.image_size)[0] for p in frame.persons]
    indices.sort(key=lambda j: (-centers[j], frame.persons[j].person_id))
    return indices[: min(LOCAL_PERSONS, len(indices))]


def extract_clip_gazes(
    video: CorpusVideo,
    predictions: VideoPredictions,
    scenario: ScenarioConfig,
    mode: GazeMode = "global",
) -> list[ClipGazes]:
    """One entry per clip of the feature grid."""
    num_clips, _, _ = clip_grid(scenario, video.num_frames)
    gaze_dim = predictions.features.shape[1]
    clips = []
    for c in range(num_clips):
        features, heads, ids = [], [], []
        for f in clip_frame_range(scenario, c, video.num_frames):
            frame = video.frames[f]
            chosen = select_persons(frame, mode)
            rows = [predictions.row(frame.frame_index, j) for j in chosen]
            features.append(predictions.features[rows].reshape(len(rows), gaze_dim))
            heads.append(
                np.array(
                    [frame.persons[j].head.normalized_center(frame.image_size) for j in chosen],
                    dtype=np.float32,
                ).reshape(-1, 2)
            )
            ids.append([frame.persons[j].person_id for j in chosen])
        clips.append(ClipGazes(video.video_id, c, features, heads, ids))
    return clips


@dataclass
class GazeBatch:
    features: torch.Tensor
    heads: torch.Tensor
    person_mask: torch.Tensor
    frame_mask: torch.Tensor


def collate_clips(clips: Sequence[ClipGazes], gaze_dim: int) -> GazeBatch:
    n = max(max(c.num_frames for c in clips), 1)
    p = max((len(f) for c in clips for f in c.features), default=0)
    features = torch.zeros(len(clips), n, p, gaze_dim)
    heads = torch.zeros(len(clips), n, p, 2)
    person_mask = torch.zeros(len(clips), n, p, dtype=torch.bool)
    frame_mask = torch.zeros(len(clips), n, dtype=torch.bool)
    for b, clip in enumerate(clips):
        frame_mask[b, : clip.num_frames] = True
        for t, (feat, head) in enumerate(zip(clip.features, clip.heads)):
            features[b, t, : len(feat)] = torch.from_numpy(np.asarray(feat, dtype=np.float32))
            heads[b, t, : len(head)] = torch.from_numpy(np.asarray(head, dtype=np.float32))
            person_mask[b, t, : len(feat)] = True
    return GazeBatch(features, heads, person_mask, frame_mask)


class GazeEncoder(nn.Module):
    def __init__(self, config: GazeEncoderConfig, gaze_dim: int = 128):
        super().__init__()
        self.config = config
        self.gaze_dim = gaze_dim
        g = gaze_dim
        self.spatial_cls = nn.Parameter(torch.zeros(1, 1, g))
        self.temporal_cls = nn.Parameter(torch.zeros(1, 1, g))
        self.temporal_positions = nn.Parameter(torch.zeros(1, config.max_frames, g))
        for p in (self.spatial_cls, self.temporal_cls, self.temporal_positions):
            nn.init.normal_(p, std=0.02)
        self.spatial = make_encoder(g, config.num_heads, config.spatial_layers, config.dropout)
        self.temporal = make_encoder(g, config.num_heads, config.temporal_layers, config.dropout)
        self.head = nn.Linear(g, config.output_dim)

    def encode_frames(
        self, features: torch.Tensor, heads: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """(F, P, G) persons with (F, P, 2) head centers -> (F, G) classification-token outputs."""
        tokens = features + sine_position_encoding_2d(heads, self.gaze_dim)
        tokens = torch.cat([self.spatial_cls.expand(len(tokens), -1, -1), tokens], dim=1)
        padding = torch.cat([torch.zeros_like(mask[:, :1]), ~mask], dim=1)
        return self.spatial(tokens, src_key_padding_mask=padding)[:, 0]

    def encode_sequence(self, frames: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, N, G) frame vectors -> (B, V)."""
        b, n, _ = frames.shape
        tokens = frames + self.temporal_positions[:, :n]
        tokens = torch.cat([self.temporal_cls.expand(b, -1, -1), tokens], dim=1)
        padding = torch.cat([torch.zeros_like(mask[:, :1]), ~mask], dim=1)
        return self.head(self.temporal(tokens, src_key_padding_mask=padding)[:, 0])

    def forward(self, batch: GazeBatch) -> torch.Tensor:
        b, n, p, g = batch.features.shape
        frames = self.encode_frames(
            batch.features.reshape(b * n, p, g),
            batch.heads.reshape(b * n, p, 2),
            batch.person_mask.reshape(b * n, p),
        )
        return self.encode_sequence(frames.reshape(b, n, g), batch.frame_mask)


def spatial_encode(encoder: GazeEncoder, features: np.ndarray, heads: np.ndarray) -> torch.Tensor:
    """Frame vector (G) of P person gaze features and head centers; P may be 0."""
    dtype = encoder.spatial_cls.dtype
    features = torch.as_tensor(np.asarray(features), dtype=dtype).reshape(1, -1, encoder.gaze_dim)
    heads = torch.as_tensor(np.asarray(heads), dtype=dtype).reshape(1, -1, 2)
    mask = torch.ones(features.shape[:2], dtype=torch.bool)
    return encoder.encode_frames(features, heads, mask)[0]


def temporal_encode(encoder: GazeEncoder, frames: torch.Tensor) -> torch.Tensor:
    """Clip feature f_g (V) of N frame vectors (N x G)."""
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DegenerateInputError("temporal encoding needs at least one frame vector")
    mask = torch.ones(1, frames.shape[0], dtype=torch.bool)
    return encoder.encode_sequence(frames.unsqueeze(0), mask)[0]


def infonce_loss(
    f_g: torch.Tensor, f_v: torch.Tensor, temperature: float = 0.07, symmetric: bool = False
) -> torch.Tensor:
    """Mean over i of -log softmax_j(cos(f_g^i, f_v^j) / temperature)[i]."""
    if f_g.shape != f_v.shape:
        raise ValueError(f"unmatched batches {tuple(f_g.shape)} vs {tuple(f_v.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    g_norm, v_norm = f_g.norm(dim=1, keepdim=True), f_v.norm(dim=1, keepdim=True)
    if (g_norm == 0).any() or (v_norm == 0).any():
        raise DegenerateInputError("cosine similarity of a zero-norm feature is undefined")
    logits = (f_g / g_norm) @ (f_v / v_norm).T / temperature
    targets = torch.arange(len(f_g), device=f_g.device)
    loss = F.cross_entropy(logits, targets)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, targets))
    return loss


class GazeEncoderModel:
    def __init__(
        self,
        config: Optional[GazeEncoderConfig] = None,
        gaze_dim: int = 128,
        net: Optional[GazeEncoder] = None,
    ):
        self.config = config or GazeEncoderConfig()
        self.gaze_dim = gaze_dim
        self.net = net or GazeEncoder(self.config, gaze_dim)
        self.net.eval()
        self.history: list[float] = []

    @torch.no_grad()
    def encode(self, clips: Sequence[ClipGazes]) -> np.ndarray:
        self.net.eval()
        out = [np.zeros((0, self.config.output_dim), dtype=np.float32)]
        for start in range(0, len(clips), self.config.batch_size):
            batch = collate_clips(clips[start : start + self.config.batch_size], self.gaze_dim)
            out.append(self.net(batch).numpy())
        return np.concatenate(out)

    def save(self, path: str | Path, force: bool = False) -> Path:
        descriptor = CheckpointDescriptor(
            name="gaze_encoder",
            kind="gaze_encoder",
            config=self.config.model_dump(mode="json"),
            extra={"gaze_dim": self.gaze_dim, "history": self.history},
        )
        return save_checkpoint(path, self.net.state_dict(), descriptor, force=force)

    @classmethod
    def load(cls, path: str | Path) -> "GazeEncoderModel":
        state_dict, descriptor = load_checkpoint(path, "gaze_encoder")
        config = GazeEncoderConfig.model_validate(descriptor.config)
        model = cls(config, int(descriptor.extra["gaze_dim"]))
        model.net.load_state_dict(state_dict)
        model.net.eval()
        model.history = list(descriptor.extra.get("history", []))
        return model


def encoder_dataset(
    videos: Sequence[CorpusVideo],
    backend: GazeBackend,
    scenario: ScenarioConfig,
    mode: GazeMode = "global",
    cache: Optional[ArtifactCache] = None,
) -> tuple[list[ClipGazes], np.ndarray]:
    """Clips paired with their visual features; activity labels are never read."""
    clips, visual = [], []
    for video in videos:
        table = video.features.get(FeatureKind.VISUAL)
        if table is None:
            raise DegenerateInputError(f"{video.video_id}: no visual features")
        video_clips = extract_clip_gazes(video, predict_video(backend, video, cache=cache), scenario, mode)
        if len(video_clips) != table.num_clips:
            raise ValueError(
                f"{video.video_id}: {len(video_clips)} gaze clips vs {table.num_clips} visual clips"
            )
        clips += video_clips
        visual.append(table.vectors)
    return clips, np.concatenate(visual) if visual else np.zeros((0, scenario.visual_dim))


def mean_alignment(model: GazeEncoderModel, clips: Sequence[ClipGazes], visual: np.ndarray) -> float:
    """Mean cosine similarity between each clip's f_g and its own visual feature."""
    f_g = torch.from_numpy(model.encode(clips)).double()
    f_v = torch.from_numpy(np.asarray(visual)).double()
    return float(F.cosine_similarity(f_g, f_v, dim=1).mean())


def train_gaze_encoder(
    clips: Sequence[ClipGazes],
    visual: np.ndarray,
    config: Optional[GazeEncoderConfig] = None,
    gaze_dim: int = 128,
) -> GazeEncoderModel:
    config = config or GazeEncoderConfig()
    visual = np.asarray(visual, dtype=np.float32)
    if visual.ndim != 2 or visual.shape[1] != config.output_dim:
        raise ValueError(
            f"encoder output dim {config.output_dim} does not match visual features {visual.shape}"
        )
    if len(clips) != len(visual) or not clips:
        raise ValueError(f"{len(clips)} clips for {len(visual)} visual features")

    generator = seed_everything(config.seed)
    model = GazeEncoderModel(config, gaze_dim)
    net = model.net
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    targets = torch.from_numpy(visual)
    net.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(clips), generator=generator)
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size].tolist()
            optimizer.zero_grad()
            f_g = net(collate_clips([clips[i] for i in idx], gaze_dim))
            loss = infonce_loss(f_g, targets[idx], config.temperature, config.symmetric)
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        model.history.append(total / batches)
        log.info("gaze encoder epoch %d loss %.5f", epoch + 1, model.history[-1])
    net.eval()
    return model


def gated_fusion(f_g, f_va, weight, bias):
    """f_va + sigmoid(W f_g + b) * f_va, for numpy arrays or torch tensors."""
    if isinstance(f_g, torch.Tensor):
        if weight.shape[-1] != f_g.shape[-1] or weight.shape[0] != f_va.shape[-1]:
            raise ValueError(f"W {tuple(weight.shape)} does not map {f_g.shape[-1]} -> {f_va.shape[-1]}")
        return f_va + torch.sigmoid(f_g @ weight.T + bias) * f_va
    f_g = np.atleast_1d(np.asarray(f_g, dtype=np.float64))
    f_va = np.atleast_1d(np.asarray(f_va, dtype=np.float64))
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    bias = np.asarray(bias, dtype=np.float64)
    if weight.shape != (f_va.shape[-1], f_g.shape[-1]) or bias.shape not in ((), f_va.shape[-1:]):
        raise ValueError(
            f"W {weight.shape} and b {bias.shape} do not map {f_g.shape[-1]} -> {f_va.shape[-1]}"
        )
    gate = 1.0 / (1.0 + np.exp(-(f_g @ weight.T + bias)))
    return f_va + gate * f_va


def gaze_feature_table(
    model: GazeEncoderModel, clips: Sequence[ClipGazes], scenario: ScenarioConfig, video: CorpusVideo
) -> FeatureTable:
    """Stored f_g of one video on the clip grid of its visual features."""
    _, t_start, t_stride = clip_grid(scenario, video.num_frames)
    return FeatureTable(video.video_id, FeatureKind.GAZE, t_start, t_stride, model.encode(clips))


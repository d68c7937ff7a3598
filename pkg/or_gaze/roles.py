"""Clinical role prediction from gaze heatmap tracklets.

Every tracked person's heatmaps go through a small transformer classifier; tracklet
probabilities are then propagated to the frames and made distinct per frame.
"""

import hashlib
from collections import Counter
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from or_gaze import io
from or_gaze.association import (
    HeatmapTracklet,
    assign_frame_roles,
    associate_heads_bodies,
    build_tracklets,
)
from or_gaze.backends import GazeBackend, VideoPredictions, predict_video
from or_gaze.cache import ArtifactCache
from or_gaze.checkpoints import CheckpointDescriptor, load_checkpoint, save_checkpoint
from or_gaze.heatmaps import HEATMAP_SIZE
from or_gaze.layers import make_encoder
from or_gaze.metrics import EvalReport, accuracy, macro_f1
from or_gaze.models import (
    ROLES,
    DegenerateInputError,
    FrameRecord,
    ModelStateError,
    RoleLabel,
)
from or_gaze.settings import RoleModelConfig, config_hash
from or_gaze.synth import CorpusVideo
from or_gaze.utils.seeding import seed_everything

log = getLogger(__name__)

ROLE_INDEX = {role: i for i, role in enumerate(ROLES)}

FrameRoles = dict[int, dict[str, Optional[RoleLabel]]]


class RoleNet(nn.Module):
    def __init__(self, config: RoleModelConfig, heatmap_size: int = HEATMAP_SIZE):
        super().__init__()
        self.config = config
        self.heatmap_size = heatmap_size
        self.input_size = heatmap_size // 2 if config.downsample else heatmap_size
        d = config.embed_dim
        self.project = nn.Sequential(nn.Linear(self.input_size**2, d), nn.GELU(), nn.Linear(d, d))
        self.positions = nn.Parameter(torch.zeros(1, config.max_length, d))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.normal_(self.positions, std=0.02)
        nn.init.normal_(self.cls_token, std=0.02)
        self.encoder = make_encoder(d, config.num_heads, config.num_layers, config.dropout)
        self.norm = nn.LayerNorm(d)
        self.classifier = nn.Linear(d, len(ROLES))

    def forward(self, heatmaps: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Role logits (B, M) of normalized heatmaps (B, T, H, W); ``mask`` marks real frames."""
        b, t, h, w = heatmaps.shape
        x = heatmaps
        if self.config.downsample:
            x = F.avg_pool2d(x.reshape(b * t, 1, h, w), 2)
        # unit mean per cell for a normalized map
        x = x.reshape(b, t, -1) * (h * w)
        tokens = self.project(x) + self.positions[:, :t]
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        padding = torch.cat([torch.zeros_like(mask[:, :1]), ~mask], dim=1)
        out = self.encoder(tokens, src_key_padding_mask=padding)
        if self.config.pooling == "cls":
            pooled = out[:, 0]
        else:
            weights = mask.unsqueeze(-1).to(out.dtype)
            pooled = (out[:, 1:] * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
        return self.classifier(self.norm(pooled))


def tracklet_chunks(tracklet: HeatmapTracklet, max_length: int) -> list[np.ndarray]:
    """Consecutive pieces of at most ``max_length`` frames; short tracklets stay whole."""
    if len(tracklet) == 0:
        raise DegenerateInputError(f"track {tracklet.track_id}: empty tracklet")
    return [tracklet.heatmaps[i : i + max_length] for i in range(0, len(tracklet), max_length)]


def collate_chunks(chunks: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    longest = max(len(c) for c in chunks)
    _, h, w = chunks[0].shape
    heatmaps = torch.zeros(len(chunks), longest, h, w)
    mask = torch.zeros(len(chunks), longest, dtype=torch.bool)
    for i, chunk in enumerate(chunks):
        heatmaps[i, : len(chunk)] = torch.from_numpy(np.asarray(chunk, dtype=np.float32))
        mask[i, : len(chunk)] = True
    return heatmaps, mask


def role_loss(
    net: RoleNet, heatmaps: torch.Tensor, mask: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    return F.cross_entropy(net(heatmaps, mask), labels)


@dataclass
class TrackletRole:
    track_id: int
    probs: np.ndarray
    role: RoleLabel
    chunk_votes: list[int]


class RoleClassifier:
    def __init__(
        self,
        config: Optional[RoleModelConfig] = None,
        heatmap_size: int = HEATMAP_SIZE,
        net: Optional[RoleNet] = None,
    ):
        self.config = config or RoleModelConfig()
        self.heatmap_size = heatmap_size
        self.net = net or RoleNet(self.config, heatmap_size)
        self.net.eval()
        self.history: list[float] = []

    @torch.no_grad()
    def chunk_logits(self, tracklets: Sequence[HeatmapTracklet]) -> list[np.ndarray]:
        """Logits (num_chunks, M) per tracklet."""
        self.net.eval()
        chunks, owner = [], []
        for i, tracklet in enumerate(tracklets):
            for chunk in tracklet_chunks(tracklet, self.config.max_length):
                chunks.append(chunk)
                owner.append(i)
        logits = []
        for start in range(0, len(chunks), self.config.batch_size):
            batch = chunks[start : start + self.config.batch_size]
            logits.append(self.net(*collate_chunks(batch)).numpy())
        flat = np.concatenate(logits) if logits else np.zeros((0, len(ROLES)), dtype=np.float32)
        owner = np.asarray(owner)
        return [flat[owner == i] for i in range(len(tracklets))]

    def predict(self, tracklets: Sequence[HeatmapTracklet]) -> list[TrackletRole]:
        results = []
        for tracklet, logits in zip(tracklets, self.chunk_logits(tracklets)):
            chunk_probs = torch.softmax(torch.from_numpy(logits).double(), dim=1).numpy()
            probs = chunk_probs.mean(axis=0)
            votes = chunk_probs.argmax(axis=1).tolist()
            counts = Counter(votes)
            top = max(counts.values())
            # majority vote, ties go to the higher mean probability
            winner = max((r for r, c in counts.items() if c == top), key=lambda r: probs[r])
            results.append(TrackletRole(tracklet.track_id, probs, ROLES[winner], votes))
        return results

    def save(self, path: str | Path, force: bool = False) -> Path:
        descriptor = CheckpointDescriptor(
            name="role",
            kind="role",
            config=self.config.model_dump(mode="json"),
            extra={"heatmap_size": self.heatmap_size, "history": self.history},
        )
        return save_checkpoint(path, self.net.state_dict(), descriptor, force=force)

    @classmethod
    def load(cls, path: str | Path) -> "RoleClassifier":
        state_dict, descriptor = load_checkpoint(path, "role")
        config = RoleModelConfig.model_validate(descriptor.config)
        classifier = cls(config, int(descriptor.extra.get("heatmap_size", HEATMAP_SIZE)))
        classifier.net.load_state_dict(state_dict)
        classifier.net.eval()
        classifier.history = list(descriptor.extra.get("history", []))
        return classifier


def encode_tracklet(tracklet: HeatmapTracklet, classifier: RoleClassifier) -> np.ndarray:
    """Role logits of one tracklet; long tracklets average the logits of their chunks."""
    return classifier.chunk_logits([tracklet])[0].mean(axis=0)


# corpus plumbing


def video_tracklets(
    video: CorpusVideo, predictions: VideoPredictions, threshold: float = 0.0
) -> list[HeatmapTracklet]:
    associations = [associate_heads_bodies(frame, threshold) for frame in video.frames]
    return build_tracklets(video.frames, associations, predictions)


def tracklet_label(frames: Sequence[FrameRecord], tracklet: HeatmapTracklet) -> Optional[RoleLabel]:
    """Most frequent annotated role of the tracklet's heads."""
    by_index = {frame.frame_index: frame for frame in frames}
    roles = [
        by_index[f].persons[j].role
        for f, j in zip(tracklet.frame_indices.tolist(), tracklet.head_indices.tolist())
    ]
    counts = Counter(r for r in roles if r is not None)
    if not counts:
        return None
    return min(counts, key=lambda r: (-counts[r], ROLE_INDEX[r]))


def role_dataset(
    videos: Sequence[CorpusVideo], backend: GazeBackend, cache: Optional[ArtifactCache] = None
) -> tuple[list[HeatmapTracklet], list[RoleLabel]]:
    """Labeled tracklets of every video; tracklets without a role annotation are left out."""
    tracklets, labels = [], []
    for video in videos:
        for tracklet in video_tracklets(video, predict_video(backend, video, cache=cache)):
            label = tracklet_label(video.frames, tracklet)
            if label is not None:
                tracklets.append(tracklet)
                labels.append(label)
    return tracklets, labels


def _dedup(
    tracklets: Sequence[HeatmapTracklet], labels: Sequence[RoleLabel]
) -> tuple[list[HeatmapTracklet], list[RoleLabel]]:
    seen: set[str] = set()
    kept, kept_labels = [], []
    for tracklet, label in zip(tracklets, labels):
        digest = hashlib.sha256(
            tracklet.heatmaps.tobytes() + tracklet.frame_indices.tobytes() + str(label).encode()
        ).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        kept.append(tracklet)
        kept_labels.append(label)
    return kept, kept_labels


def train_role(
    tracklets: Sequence[HeatmapTracklet],
    labels: Sequence[RoleLabel],
    config: Optional[RoleModelConfig] = None,
    heatmap_size: int = HEATMAP_SIZE,
) -> RoleClassifier:
    """Cross-entropy training on tracklet chunks; identical tracklets count once."""
    config = config or RoleModelConfig()
    tracklets, labels = _dedup(tracklets, labels)
    if len(set(labels)) < 2:
        raise DegenerateInputError(f"need at least two distinct roles, got {sorted(set(labels))}")

    chunks, targets = [], []
    for tracklet, label in zip(tracklets, labels):
        for chunk in tracklet_chunks(tracklet, config.max_length):
            chunks.append(chunk)
            targets.append(ROLE_INDEX[label])
    targets = torch.tensor(targets)

    generator = seed_everything(config.seed)
    classifier = RoleClassifier(config, heatmap_size)
    net = classifier.net
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    net.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(chunks), generator=generator)
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size].tolist()
            heatmaps, mask = collate_chunks([chunks[i] for i in idx])
            optimizer.zero_grad()
            loss = role_loss(net, heatmaps, mask, targets[idx])
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        classifier.history.append(total / batches)
        log.info("role epoch %d loss %.5f", epoch + 1, classifier.history[-1])
    net.eval()
    return classifier


def infer_roles(
    frames: Sequence[FrameRecord],
    tracklets: Sequence[HeatmapTracklet],
    classifier: RoleClassifier,
    method: str = "optimal",
) -> FrameRoles:
    """Per-frame person_id -> role; persons without a tracklet or beyond M stay ``None``."""
    results = classifier.predict(tracklets)
    present: dict[int, list[tuple[int, np.ndarray]]] = {}
    for tracklet, result in zip(tracklets, results):
        for f, j in zip(tracklet.frame_indices.tolist(), tracklet.head_indices.tolist()):
            present.setdefault(f, []).append((j, result.probs))

    frame_roles: FrameRoles = {}
    for frame in frames:
        labels: dict[str, Optional[RoleLabel]] = {p.person_id: None for p in frame.persons}
        entries = sorted(present.get(frame.frame_index, []), key=lambda e: e[0])
        if entries:
            probs = np.stack([p for _, p in entries])
            probs = probs / probs.sum(axis=1, keepdims=True)
            for (head, _), role in zip(entries, assign_frame_roles(probs, method)):
                if role is not None:
                    labels[frame.persons[head].person_id] = ROLES[role]
        frame_roles[frame.frame_index] = labels
    return frame_roles


def predict_video_roles(
    video: CorpusVideo,
    classifier: RoleClassifier,
    backend: GazeBackend,
    cache: Optional[ArtifactCache] = None,
) -> FrameRoles:
    tracklets = video_tracklets(video, predict_video(backend, video, cache=cache))
    return infer_roles(video.frames, tracklets, classifier)


def gt_frame_roles(frames: Sequence[FrameRecord]) -> FrameRoles:
    return {frame.frame_index: {p.person_id: p.role for p in frame.persons} for frame in frames}


def role_presence(frames: Sequence[FrameRecord], frame_roles: FrameRoles) -> np.ndarray:
    """Boolean (num_frames, M) matrix of roles assigned in each frame."""
    presence = np.zeros((len(frames), len(ROLES)), dtype=bool)
    for i, frame in enumerate(frames):
        for role in frame_roles.get(frame.frame_index, {}).values():
            if role is not None:
                presence[i, ROLE_INDEX[role]] = True
    return presence


def save_roles(video_id: str, frame_roles: FrameRoles, path: str | Path, force: bool = False) -> Path:
    labels = {
        f: {pid: (None if role is None else str(role)) for pid, role in persons.items()}
        for f, persons in frame_roles.items()
    }
    return io.save_frame_labels(video_id, labels, path, force=force)


def load_roles(path: str | Path) -> tuple[str, FrameRoles]:
    video_id, labels = io.load_frame_labels(path)
    return video_id, {
        f: {pid: (None if role is None else RoleLabel(role)) for pid, role in persons.items()}
        for f, persons in labels.items()
    }


def evaluate_roles(
    classifier: RoleClassifier,
    videos: Sequence[CorpusVideo],
    backend: GazeBackend,
    cache: Optional[ArtifactCache] = None,
) -> EvalReport:
    if not classifier.history:
        raise ModelStateError("role model is untrained")
    track_preds, track_gts = [], []
    frame_preds, frame_gts, frame_hits = [], [], []
    for video in videos:
        tracklets = video_tracklets(video, predict_video(backend, video, cache=cache))
        for tracklet, result in zip(tracklets, classifier.predict(tracklets)):
            label = tracklet_label(video.frames, tracklet)
            if label is not None:
                track_preds.append(result.role)
                track_gts.append(label)
        frame_roles = infer_roles(video.frames, tracklets, classifier)
        for frame in video.frames:
            for person in frame.persons:
                if person.role is None:
                    continue
                predicted = frame_roles[frame.frame_index].get(person.person_id)
                frame_hits.append(predicted)
                frame_gts.append(person.role)
                if predicted is not None:
                    frame_preds.append((predicted, person.role))
    if not track_gts:
        raise DegenerateInputError("no labeled tracklets to evaluate")

    track_f1, per_class = macro_f1(track_preds, track_gts, ROLES)
    frame_f1, _ = macro_f1([p for p, _ in frame_preds], [g for _, g in frame_preds], ROLES)
    return EvalReport(
        task="role",
        metrics={
            "tracklet_macro_f1": track_f1,
            "tracklet_accuracy": accuracy(track_preds, track_gts),
            "frame_accuracy": accuracy(frame_hits, frame_gts),
            "frame_macro_f1": frame_f1,
            "num_tracklets": float(len(track_gts)),
        },
        per_class=per_class,
        config_hash=config_hash(classifier.config),
        seed=classifier.config.seed,
    )

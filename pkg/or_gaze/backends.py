"""Gaze-following backends.

A backend turns a scene raster and one head box into a gaze heatmap, an in-frame score and a
G-dimensional gaze feature. ``GeometricBackend`` reads the rendered facing strokes directly;
``ReferenceBackend`` is a small trainable encoder-decoder over the raster and a head channel.
"""

import hashlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from scipy import ndimage
from torch import nn

from or_gaze.cache import ArtifactCache, cached_arrays
from or_gaze.checkpoints import CheckpointDescriptor, load_checkpoint, save_checkpoint
from or_gaze.heatmaps import gaussian_heatmap, heatmap_argmax, heatmap_expected_point
from or_gaze.metrics import EvalReport, heatmap_auc, pixel_l2
from or_gaze.models import (
    FORMAT_VERSION,
    BoundingBox,
    DegenerateInputError,
    GazePoint,
    ModelStateError,
    OrGazeError,
)
from or_gaze.settings import GazeBackendConfig, RegionBox, config_hash
from or_gaze.synth import (
    HEAD_VALUE,
    STROKE_MIN_VALUE,
    CorpusVideo,
    cell_center,
    region_cells,
    stroke_distance,
)
from or_gaze.utils.seeding import seed_everything

log = getLogger(__name__)

SNAP_RADIUS = 0.15
STROKE_RADIUS_PX = (1.5, 4.75)
OUTSIDE_REACH = 1.5


class BackendDescriptor(BaseModel):
    name: str
    feature_dim: int
    height: int
    width: int
    trainable: bool
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class SceneInput:
    raster: np.ndarray
    image_size: tuple[int, int]


@dataclass
class GazePrediction:
    heatmap: np.ndarray
    in_frame_score: float
    feature: np.ndarray

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float32)
        self.feature = np.asarray(self.feature, dtype=np.float32)
        if np.any(self.heatmap < 0) or not np.all(np.isfinite(self.heatmap)):
            raise DegenerateInputError("heatmap must be non-negative and finite")
        if not np.all(np.isfinite(self.feature)):
            raise DegenerateInputError("gaze feature must be finite")
        if not 0.0 <= self.in_frame_score <= 1.0:
            raise ValueError(f"in_frame_score {self.in_frame_score} outside [0, 1]")


def head_center(scene: SceneInput, head: BoundingBox) -> tuple[float, float]:
    x, y = head.normalized_center(scene.image_size)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise DegenerateInputError(f"head box {head.as_tuple()} lies outside the raster")
    return x, y


class GazeBackend(ABC):
    config: GazeBackendConfig

    @property
    @abstractmethod
    def descriptor(self) -> BackendDescriptor:
        pass

    @abstractmethod
    def predict(self, scene: SceneInput, head: BoundingBox) -> GazePrediction:
        pass

    def predict_many(self, scene: SceneInput, heads: list[BoundingBox]) -> list[GazePrediction]:
        return [self.predict(scene, head) for head in heads]

    def cache_key(self) -> str:
        """Identifies the backend and its weights in artifact-cache keys."""
        return self.descriptor.model_dump_json()


# geometric backend


@dataclass
class SceneCues:
    heads: list[tuple[float, float]]
    regions: list[tuple[float, float]]


def read_scene(raster: np.ndarray) -> SceneCues:
    """Head centers and region targets recovered from a rendered raster."""
    size = raster.shape[0]
    labels, count = ndimage.label(raster == HEAD_VALUE)
    centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, count + 1))
    heads = [((c + 0.5) / size, (r + 0.5) / size) for r, c in centroids]

    regions = []
    for value in np.unique(raster):
        if value == 0 or value >= STROKE_MIN_VALUE:
            continue
        rows, cols = np.nonzero(raster == value)
        box = RegionBox(
            x1=cols.min() / size, y1=rows.min() / size, x2=(cols.max() + 1) / size,
            y2=(rows.max() + 1) / size,
        )
        r0, r1, c0, c1 = region_cells(box, size)
        regions.append(cell_center((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2, size))
    return SceneCues(heads, regions)


class GeometricBackend(GazeBackend):
    """Deterministic backend reading facing strokes off the raster.

    The stroke gives a direction and, through its value, a distance. The resulting point snaps
    to the nearest region target or other head when ``snap_to_targets`` is set; otherwise the
    gaze is placed ``fixed_distance`` along the direction, which makes a weak baseline.
    """

    def __init__(self, config: Optional[GazeBackendConfig] = None):
        self.config = config or GazeBackendConfig()
        rng = np.random.default_rng([self.config.seed, 0x6E0])
        self.projection = rng.normal(size=(self.config.feature_dim, 10)) / math.sqrt(10)

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(
            name="geometric",
            feature_dim=self.config.feature_dim,
            height=self.config.heatmap_size,
            width=self.config.heatmap_size,
            trainable=False,
        )

    def cache_key(self) -> str:
        return self.config.model_dump_json()

    def _origin(self, raster: np.ndarray, x: float, y: float) -> tuple[float, float]:
        size = raster.shape[0]
        labels, count = ndimage.label(raster == HEAD_VALUE)
        if count == 0:
            return x, y
        centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, count + 1))
        points = [((c + 0.5) / size, (r + 0.5) / size) for r, c in centroids]
        return min(points, key=lambda p: (p[0] - x) ** 2 + (p[1] - y) ** 2)

    def _facing(
        self, raster: np.ndarray, origin: tuple[float, float]
    ) -> Optional[tuple[np.ndarray, Optional[float]]]:
        size = raster.shape[0]
        rows, cols = np.nonzero((raster >= STROKE_MIN_VALUE) & (raster < HEAD_VALUE))
        offsets = np.stack([cols + 0.5 - origin[0] * size, rows + 0.5 - origin[1] * size], axis=1)
        reach = np.linalg.norm(offsets, axis=1)
        near = (reach >= STROKE_RADIUS_PX[0]) & (reach <= STROKE_RADIUS_PX[1])
        if not near.any():
            return None
        direction = offsets[near].mean(axis=0)
        norm = np.linalg.norm(direction)
        if norm == 0:
            return None
        distance = stroke_distance(float(np.median(raster[rows[near], cols[near]])))
        return direction / norm, distance

    def _noise_angle(self, raster: np.ndarray, origin: tuple[float, float]) -> float:
        if self.config.direction_noise_deg <= 0:
            return 0.0
        digest = hashlib.sha256(raster.tobytes() + np.asarray(origin).tobytes()).digest()
        rng = np.random.default_rng([self.config.seed, int.from_bytes(digest[:8], "little")])
        return math.radians(rng.normal(0.0, self.config.direction_noise_deg))

    def predict(self, scene: SceneInput, head: BoundingBox) -> GazePrediction:
        x, y = head_center(scene, head)
        raster = np.asarray(scene.raster)
        origin = self._origin(raster, x, y)
        facing = self._facing(raster, origin)
        size = self.config.heatmap_size

        if facing is None:
            point, in_score = origin, 0.5
        else:
            direction, distance = facing
            angle = self._noise_angle(raster, origin)
            if angle:
                c, s = math.cos(angle), math.sin(angle)
                dx, dy = direction
                direction = np.array([c * dx - s * dy, s * dx + c * dy])
            if not self.config.snap_to_targets:
                reach = self.config.fixed_distance
            else:
                reach = OUTSIDE_REACH if distance is None else distance
            raw = (origin[0] + reach * direction[0], origin[1] + reach * direction[1])
            point = raw
            if self.config.snap_to_targets and distance is not None:
                cues = read_scene(raster)
                others = [h for h in cues.heads if math.dist(h, origin) > 1e-9]
                candidates = cues.regions + others
                if candidates:
                    best = min(candidates, key=lambda p: math.dist(p, raw))
                    if math.dist(best, raw) <= SNAP_RADIUS:
                        point = best
            margin = min(raw[0], 1.0 - raw[0], raw[1], 1.0 - raw[1])
            in_score = 1.0 / (1.0 + math.exp(-30.0 * margin))

        px, py = float(np.clip(point[0], 0.0, 1.0)), float(np.clip(point[1], 0.0, 1.0))
        heatmap = gaussian_heatmap(px, py, size, self.config.sigma_px)
        return GazePrediction(heatmap, in_score, self._feature(origin, heatmap, in_score))

    def _feature(self, origin: tuple[float, float], heatmap: np.ndarray, in_score: float):
        argmax = heatmap_argmax(heatmap)
        expected = heatmap_expected_point(heatmap)
        grid = heatmap / heatmap.sum()
        xs = (np.arange(grid.shape[1]) + 0.5) / grid.shape[1]
        ys = (np.arange(grid.shape[0]) + 0.5) / grid.shape[0]
        spread_x = float((grid.sum(axis=0) * (xs - expected.x) ** 2).sum())
        spread_y = float((grid.sum(axis=1) * (ys - expected.y) ** 2).sum())
        u = np.array(
            [origin[0], origin[1], argmax.x, argmax.y, expected.x, expected.y,
             math.sqrt(spread_x), math.sqrt(spread_y), in_score, 1.0]
        )
        return np.tanh(self.projection @ u).astype(np.float32)


# reference backend


def _conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU())


class ReferenceNet(nn.Module):
    """Encoder-decoder over (raster, head map, x grid, y grid) with a dense bottleneck.

    The bottleneck vector is the gaze feature; an in/out logit is read from it.
    """

    def __init__(self, size: int = 64, base_channels: int = 16, feature_dim: int = 128):
        super().__init__()
        if size % 8:
            raise ValueError("heatmap size must be divisible by 8")
        b = base_channels
        self.size = size
        self.enc1 = nn.Sequential(_conv(4, b), _conv(b, b))
        self.enc2 = nn.Sequential(_conv(b, 2 * b), _conv(2 * b, 2 * b))
        self.enc3 = _conv(2 * b, 4 * b)
        self.pool = nn.MaxPool2d(2)
        bottleneck = 4 * b * (size // 8) ** 2
        self.to_feature = nn.Linear(bottleneck, feature_dim)
        self.from_feature = nn.Linear(feature_dim, bottleneck)
        self.in_out = nn.Linear(feature_dim, 1)
        self.up3 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.dec3 = _conv(4 * b + 2 * b, 2 * b)
        self.up2 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.dec2 = _conv(2 * b + b, b)
        self.up1 = nn.ConvTranspose2d(b, b, 2, stride=2)
        self.dec1 = _conv(b + 4, b)
        self.head = nn.Conv2d(b, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        bottom = self.pool(e3)
        feature = torch.relu(self.to_feature(bottom.flatten(1)))
        d = torch.relu(self.from_feature(feature)).view_as(bottom)
        d = self.dec3(torch.cat([self.up3(d), e3], dim=1))
        d = self.dec2(torch.cat([self.up2(d), e2], dim=1))
        d = self.dec1(torch.cat([self.up1(d), x], dim=1))
        return self.head(d).squeeze(1), self.in_out(feature).squeeze(1), feature


def encode_scene(raster: np.ndarray, x: float, y: float, size: int) -> np.ndarray:
    """Network input channels: raster, head map, x grid, y grid."""
    image = np.asarray(raster, dtype=np.float32) / 255.0
    if image.shape != (size, size):
        image = (
            F.interpolate(torch.from_numpy(image)[None, None], size=(size, size), mode="nearest")
            .numpy()[0, 0]
        )
    coords = (np.arange(size, dtype=np.float32) + 0.5) / size
    grid_x = np.broadcast_to(coords[None, :], (size, size))
    grid_y = np.broadcast_to(coords[:, None], (size, size))
    head = gaussian_heatmap(x, y, size, sigma_px=1.5)
    return np.stack([image, head, grid_x, grid_y]).astype(np.float32)


def reference_loss(
    net: ReferenceNet,
    inputs: torch.Tensor,
    target_maps: torch.Tensor,
    inside: torch.Tensor,
) -> torch.Tensor:
    """Pixelwise BCE against Gaussian targets for in-frame samples plus in/out BCE."""
    logits, in_logits, _ = net(inputs)
    loss = F.binary_cross_entropy_with_logits(in_logits, inside)
    if inside.any():
        mask = inside.bool()
        loss = loss + F.binary_cross_entropy_with_logits(logits[mask], target_maps[mask])
    return loss


class ReferenceBackend(GazeBackend):
    def __init__(self, config: Optional[GazeBackendConfig] = None, net: Optional[ReferenceNet] = None):
        self.config = config or GazeBackendConfig(kind="reference")
        self.net = net or ReferenceNet(
            self.config.heatmap_size, self.config.base_channels, self.config.feature_dim
        )
        self.net.eval()
        self.history: list[float] = []

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(
            name="reference",
            feature_dim=self.config.feature_dim,
            height=self.config.heatmap_size,
            width=self.config.heatmap_size,
            trainable=True,
        )

    def cache_key(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return f"{self.config.model_dump_json()}:{digest.hexdigest()}"

    @torch.no_grad()
    def predict_many(self, scene: SceneInput, heads: list[BoundingBox]) -> list[GazePrediction]:
        if not heads:
            return []
        size = self.config.heatmap_size
        inputs = np.stack(
            [encode_scene(scene.raster, *head_center(scene, head), size) for head in heads]
        )
        self.net.eval()
        logits, in_logits, features = self.net(torch.from_numpy(inputs))
        heatmaps = torch.sigmoid(logits).numpy()
        scores = torch.sigmoid(in_logits).numpy()
        return [
            GazePrediction(heatmaps[i], float(scores[i]), features[i].numpy())
            for i in range(len(heads))
        ]

    def predict(self, scene: SceneInput, head: BoundingBox) -> GazePrediction:
        return self.predict_many(scene, [head])[0]

    def save(self, path: str | Path, force: bool = False) -> Path:
        descriptor = CheckpointDescriptor(
            name="reference",
            kind="gaze_backend",
            config=self.config.model_dump(mode="json"),
            extra={**self.descriptor.model_dump(), "history": self.history},
        )
        return save_checkpoint(path, self.net.state_dict(), descriptor, force=force)

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceBackend":
        state_dict, descriptor = load_checkpoint(path, "gaze_backend")
        backend = cls(GazeBackendConfig.model_validate(descriptor.config))
        backend.net.load_state_dict(state_dict)
        backend.net.eval()
        backend.history = list(descriptor.extra.get("history", []))
        return backend


@dataclass
class GazeSamples:
    inputs: np.ndarray
    target_maps: np.ndarray
    inside: np.ndarray
    gaze: list[Optional[GazePoint]]


def collect_samples(videos: Iterable[CorpusVideo], size: int, sigma_px: float) -> GazeSamples:
    """Training samples from every annotated person of the given videos."""
    inputs, targets, inside, gaze = [], [], [], []
    for video in videos:
        if video.rasters is None:
            raise OrGazeError(f"{video.video_id}: corpus has no rasters")
        for frame in video.frames:
            scene = SceneInput(video.rasters[frame.frame_index], frame.image_size)
            for person in frame.persons:
                if not person.annotated:
                    continue
                x, y = head_center(scene, person.head)
                inputs.append(encode_scene(scene.raster, x, y, size))
                if person.gaze is not None:
                    targets.append(gaussian_heatmap(person.gaze.x, person.gaze.y, size, sigma_px))
                else:
                    targets.append(np.zeros((size, size), dtype=np.float32))
                inside.append(0.0 if person.looking_outside else 1.0)
                gaze.append(person.gaze)
    if not inputs:
        raise OrGazeError("no annotated persons to train on")
    return GazeSamples(
        np.stack(inputs), np.stack(targets), np.asarray(inside, dtype=np.float32), gaze
    )


def train_reference_backend(
    videos: list[CorpusVideo], config: Optional[GazeBackendConfig] = None
) -> ReferenceBackend:
    config = config or GazeBackendConfig(kind="reference")
    generator = seed_everything(config.seed)
    samples = collect_samples(videos, config.heatmap_size, config.sigma_px)
    backend = ReferenceBackend(config)
    net = backend.net
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    inputs = torch.from_numpy(samples.inputs)
    targets = torch.from_numpy(samples.target_maps)
    inside = torch.from_numpy(samples.inside)

    net.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(inputs), generator=generator)
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = reference_loss(net, inputs[idx], targets[idx], inside[idx])
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        backend.history.append(total / batches)
        log.info("gaze backend epoch %d loss %.5f", epoch + 1, backend.history[-1])
    net.eval()
    return backend


def make_backend(config: GazeBackendConfig, checkpoint: Optional[str | Path] = None) -> GazeBackend:
    if config.kind == "geometric":
        return GeometricBackend(config)
    if checkpoint is None:
        raise ModelStateError("reference backend needs a trained checkpoint (gaze train)")
    return ReferenceBackend.load(checkpoint)


# per-video predictions


@dataclass
class VideoPredictions:
    """Predictions for every person with a head box, row-aligned with (frame, person) indices."""

    video_id: str
    frame_index: np.ndarray
    person_index: np.ndarray
    heatmaps: np.ndarray
    in_scores: np.ndarray
    features: np.ndarray

    def rows(self, frame_index: int) -> np.ndarray:
        return np.flatnonzero(self.frame_index == frame_index)

    def row(self, frame_index: int, person_index: int) -> int:
        hits = np.flatnonzero(
            (self.frame_index == frame_index) & (self.person_index == person_index)
        )
        if hits.size == 0:
            raise KeyError((frame_index, person_index))
        return int(hits[0])


def _video_key(backend: GazeBackend, video: CorpusVideo):
    heads = [
        p.head.as_tuple() for frame in video.frames for p in frame.persons
    ]
    return (backend.cache_key(), video.video_id, video.rasters, heads)


@cached_arrays("gaze_predictions", _video_key)
def _predict_arrays(backend: GazeBackend, video: CorpusVideo) -> dict[str, np.ndarray]:
    if video.rasters is None:
        raise OrGazeError(f"{video.video_id}: no rasters to run the gaze backend on")
    descriptor = backend.descriptor
    frame_idx, person_idx, heatmaps, scores, features = [], [], [], [], []
    for frame in video.frames:
        scene = SceneInput(video.rasters[frame.frame_index], frame.image_size)
        predictions = backend.predict_many(scene, [p.head for p in frame.persons])
        for j, prediction in enumerate(predictions):
            frame_idx.append(frame.frame_index)
            person_idx.append(j)
            heatmaps.append(prediction.heatmap)
            scores.append(prediction.in_frame_score)
            features.append(prediction.feature)
    n = len(frame_idx)
    return {
        "frame_index": np.asarray(frame_idx, dtype=np.int64),
        "person_index": np.asarray(person_idx, dtype=np.int64),
        "heatmaps": np.stack(heatmaps)
        if n
        else np.zeros((0, descriptor.height, descriptor.width), dtype=np.float32),
        "in_scores": np.asarray(scores, dtype=np.float32),
        "features": np.stack(features)
        if n
        else np.zeros((0, descriptor.feature_dim), dtype=np.float32),
    }


def predict_video(
    backend: GazeBackend, video: CorpusVideo, cache: Optional[ArtifactCache] = None
) -> VideoPredictions:
    arrays = _predict_arrays(backend, video, cache=cache)
    return VideoPredictions(video.video_id, **arrays)


def evaluate_backend(
    backend: GazeBackend,
    videos: list[CorpusVideo],
    point_estimate: str = "argmax",
    cache: Optional[ArtifactCache] = None,
) -> EvalReport:
    """Mean heatmap AUC and L2 over in-frame annotated persons, plus in/out accuracy."""
    aucs, l2s, in_out_hits, in_out_total = [], [], 0, 0
    roc: tuple[np.ndarray, np.ndarray] | None = None
    for video in videos:
        predictions = predict_video(backend, video, cache=cache)
        for frame in video.frames:
            for j, person in enumerate(frame.persons):
                if not person.annotated:
                    continue
                row = predictions.row(frame.frame_index, j)
                in_out_total += 1
                in_out_hits += int((predictions.in_scores[row] >= 0.5) != person.looking_outside)
                if person.gaze is None:
                    continue
                heatmap = predictions.heatmaps[row]
                if not heatmap.any():
                    aucs.append(0.5)
                    l2s.append(pixel_l2(GazePoint(x=0.5, y=0.5), person.gaze))
                    continue
                auc, fpr, tpr = heatmap_auc(heatmap, person.gaze, return_curve=True)
                aucs.append(auc)
                if roc is None:
                    roc = (fpr, tpr)
                point = (
                    heatmap_expected_point(heatmap)
                    if point_estimate == "expected"
                    else heatmap_argmax(heatmap)
                )
                l2s.append(pixel_l2(point, person.gaze))
    if not aucs:
        raise OrGazeError("no in-frame gaze annotations to evaluate")

    curves = {}
    if roc is not None:
        curves["roc_example"] = {"fpr": roc[0].tolist(), "tpr": roc[1].tolist()}
    return EvalReport(
        task=f"gaze.{backend.descriptor.name}",
        metrics={
            "auc": float(np.mean(aucs)),
            "l2": float(np.mean(l2s)),
            "in_out_accuracy": in_out_hits / max(in_out_total, 1),
            "num_persons": float(len(aucs)),
        },
        config_hash=config_hash(backend.config),
        seed=backend.config.seed,
        curves=curves,
    )

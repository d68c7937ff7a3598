"""Head-body association, heatmap tracklets and per-frame unique role assignment."""

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from logging import getLogger
from typing import TYPE_CHECKING, Literal, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from or_gaze.heatmaps import normalize_heatmap
from or_gaze.models import BoundingBox, DegenerateInputError, FrameRecord

if TYPE_CHECKING:
    from or_gaze.backends import VideoPredictions

log = getLogger(__name__)

Box = BoundingBox | Sequence[float]

# -log(0) stand-in for role assignment
LOG_ZERO_COST = 1e9
# above this many roles the exhaustive search gives way to the Hungarian solver
EXHAUSTIVE_MAX_ROLES = 8
# assignments whose total costs differ by less than this are ties
TIE_TOLERANCE = 1e-12


def _as_array(box: Box) -> np.ndarray:
    if isinstance(box, BoundingBox):
        return np.asarray(box.as_tuple(), dtype=np.float64)
    return np.asarray(box, dtype=np.float64)


def giou_matrix(boxes_a: Sequence[Box], boxes_b: Sequence[Box]) -> np.ndarray:
    """Pairwise generalized IoU, rows from ``boxes_a`` and columns from ``boxes_b``."""
    a = np.stack([_as_array(b) for b in boxes_a]) if len(boxes_a) else np.zeros((0, 4))
    b = np.stack([_as_array(x) for x in boxes_b]) if len(boxes_b) else np.zeros((0, 4))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    if np.any(area_a <= 0) or np.any(area_b <= 0):
        raise DegenerateInputError("GIoU of a zero-area box is undefined")
    a, b = a[:, None, :], b[None, :, :]

    w = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    h = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    intersection = w * h
    union = area_a[:, None] + area_b[None, :] - intersection

    wc = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    hc = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosing = wc * hc
    return intersection / union - (enclosing - union) / enclosing


def giou(a: Box, b: Box) -> float:
    return float(giou_matrix([a], [b])[0, 0])


def hungarian(cost: np.ndarray) -> dict[int, int]:
    """Minimum-cost maximum matching of rows to columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return {}
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def associate_heads_bodies(frame: FrameRecord, threshold: float = 0.0) -> dict[int, int]:
    """Map head index -> body index within one frame.

    Indices refer to ``frame.persons``; persons without a body box offer no body. Pairs whose
    GIoU falls below ``threshold`` stay unmatched.
    """
    heads = [p.head for p in frame.persons]
    body_owner = [i for i, p in enumerate(frame.persons) if p.body is not None]
    if not heads or not body_owner:
        return {}
    scores = giou_matrix(heads, [frame.persons[i].body for i in body_owner])
    pairs = {}
    for head, column in hungarian(-scores).items():
        if scores[head, column] >= threshold:
            pairs[head] = body_owner[column]
    return pairs


@dataclass
class HeatmapTracklet:
    track_id: int
    heatmaps: np.ndarray
    frame_indices: np.ndarray
    # index into frame.persons of the associated head, per frame
    head_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.heatmaps = np.asarray(self.heatmaps, dtype=np.float32)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if self.heatmaps.ndim != 3:
            raise ValueError(f"tracklet heatmaps must be T x H x W, got {self.heatmaps.shape}")
        if len(self.frame_indices) != len(self.heatmaps):
            raise ValueError("one frame index per heatmap")
        if np.any(np.diff(self.frame_indices) <= 0):
            raise ValueError(f"track {self.track_id}: frame indices must strictly increase")
        if len(self.head_indices) == 0:
            self.head_indices = np.zeros(len(self.frame_indices), dtype=np.int64)
        self.head_indices = np.asarray(self.head_indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.frame_indices)


def build_tracklets(
    frames: Sequence[FrameRecord],
    associations: Sequence[dict[int, int]],
    predictions: "VideoPredictions",
) -> list[HeatmapTracklet]:
    """One normalized heatmap tracklet per body track id, ordered by track id.

    Frames where a track has no associated head are skipped. All-zero heatmaps stay zero.
    """
    rows: dict[int, list[tuple[int, int, np.ndarray]]] = defaultdict(list)
    for frame, pairs in zip(frames, associations):
        seen = set()
        for head, body in sorted(pairs.items()):
            track = frame.persons[body].track_id
            if track is None:
                continue
            if track in seen:
                raise ValueError(f"frame {frame.frame_index}: track {track} associated twice")
            seen.add(track)
            heatmap = predictions.heatmaps[predictions.row(frame.frame_index, head)]
            if heatmap.any():
                heatmap = normalize_heatmap(heatmap)
            rows[track].append((frame.frame_index, head, heatmap))

    tracklets = []
    for track in sorted(rows):
        entries = rows[track]
        tracklets.append(
            HeatmapTracklet(
                track_id=track,
                heatmaps=np.stack([h for _, _, h in entries]),
                frame_indices=np.array([f for f, _, _ in entries]),
                head_indices=np.array([j for _, j, _ in entries]),
            )
        )
    log.debug("built %d tracklets over %d frames", len(tracklets), len(frames))
    return tracklets


def _role_costs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.minimum(-np.log(probs), LOG_ZERO_COST)


def _exhaustive(costs: np.ndarray) -> tuple[int, ...]:
    persons, roles = costs.shape
    best, best_cost = None, math.inf
    # lexicographic order, so among equal products the lowest person gets the smallest role
    for roles_taken in itertools.permutations(range(roles), persons):
        total = float(costs[np.arange(persons), roles_taken].sum())
        if total < best_cost - TIE_TOLERANCE:
            best, best_cost = roles_taken, total
    return best


def _lexicographic_hungarian(costs: np.ndarray) -> dict[int, int]:
    """Optimal assignment with the exhaustive tie-break, via one solve per fixed pair."""
    persons, roles = costs.shape
    forbidden = LOG_ZERO_COST * (persons + 1)
    optimum = _matching_cost(costs, hungarian(costs))
    tolerance = TIE_TOLERANCE * max(1.0, optimum)
    fixed = costs.copy()
    for p in range(persons):
        for r in range(roles):
            if fixed[p, r] >= forbidden:
                continue
            trial = fixed.copy()
            trial[p, :] = forbidden
            trial[:, r] = forbidden
            trial[p, r] = fixed[p, r]
            if _matching_cost(trial, hungarian(trial)) <= optimum + tolerance:
                fixed = trial
                break
    return {p: int(np.argmin(fixed[p])) for p in range(persons)}


def _matching_cost(costs: np.ndarray, matching: dict[int, int]) -> float:
    return math.fsum(costs[p, r] for p, r in matching.items())


def _greedy(probs: np.ndarray) -> dict[int, int]:
    """Fix the most confident (person, role) pair, drop that role, renormalize, repeat."""
    probs = probs.copy()
    assigned: dict[int, int] = {}
    free = np.ones(probs.shape[0], dtype=bool)
    while free.any():
        masked = np.where(free[:, None], probs, -1.0)
        person, role = np.unravel_index(int(np.argmax(masked)), masked.shape)
        assigned[int(person)] = int(role)
        free[person] = False
        probs[:, role] = 0.0
        totals = probs.sum(axis=1, keepdims=True)
        probs = np.divide(probs, totals, out=np.zeros_like(probs), where=totals > 0)
    return dict(sorted(assigned.items()))


def unique_role_assignment(
    probs: np.ndarray, method: Literal["optimal", "greedy"] = "optimal"
) -> dict[int, int]:
    """Injective person -> role map maximizing the product of assigned probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        return {}
    if probs.ndim != 2:
        raise ValueError(f"probabilities must be persons x roles, got shape {probs.shape}")
    persons, roles = probs.shape
    if persons > roles:
        raise ValueError(f"{persons} persons cannot take distinct roles among {roles}")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("rows must be probability vectors")

    if method == "greedy":
        return _greedy(probs)
    costs = _role_costs(probs)
    if roles <= EXHAUSTIVE_MAX_ROLES:
        return {p: r for p, r in enumerate(_exhaustive(costs))}
    return _lexicographic_hungarian(costs)


def top_confident(probs: np.ndarray, limit: int) -> list[int]:
    """Indices of the ``limit`` rows with the highest maximum probability, in row order."""
    if len(probs) <= limit:
        return list(range(len(probs)))
    confidence = np.asarray(probs).max(axis=1)
    order = sorted(range(len(probs)), key=lambda i: (-confidence[i], i))
    return sorted(order[:limit])


def assign_frame_roles(probs: np.ndarray, method: str = "optimal") -> list[Optional[int]]:
    """Role index per row; rows beyond the ``M`` most confident stay unassigned."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) == 0:
        return []
    keep = top_confident(probs, probs.shape[1])
    mapping = unique_role_assignment(probs[keep], method=method)
    roles: list[Optional[int]] = [None] * len(probs)
    for local, role in mapping.items():
        roles[keep[local]] = role
    return roles

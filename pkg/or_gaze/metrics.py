"""Evaluation metrics for gaze, classification and temporal detection, plus reports."""

import math
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Hashable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from or_gaze.io import read_document, write_document
from or_gaze.models import ActivitySegment, DegenerateInputError, GazePoint

log = getLogger(__name__)

Interval = ActivitySegment | tuple[float, float]


# gaze


def _as_xy(point: GazePoint | Sequence[float]) -> tuple[float, float]:
    if isinstance(point, GazePoint):
        return point.x, point.y
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"point ({x}, {y}) outside the unit square")
    return x, y


def pixel_l2(pred: GazePoint | Sequence[float], gt: GazePoint | Sequence[float]) -> float:
    """Euclidean distance in normalized image coordinates, at most sqrt(2)."""
    (px, py), (gx, gy) = _as_xy(pred), _as_xy(gt)
    return math.hypot(px - gx, py - gy)


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ROC points over distinct thresholds, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores, sorted_labels = scores[order], labels[order]
    # one ROC point per distinct score, so tied scores form one diagonal step
    last_of_run = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.size - 1]
    tps = np.cumsum(sorted_labels)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def heatmap_auc(
    h: np.ndarray, gt: GazePoint | Sequence[GazePoint], return_curve: bool = False
) -> float | tuple[float, np.ndarray, np.ndarray]:
    """ROC AUC of heatmap cells as confidences for containing the gaze target.

    The ground-truth cell is the only positive; passing several points marks several cells.
    Tied confidences count one half.
    """
    grid = np.asarray(h, dtype=np.float64)
    if grid.ndim != 2 or not np.all(np.isfinite(grid)) or np.any(grid < 0) or not grid.any():
        raise DegenerateInputError("heatmap must be a finite, non-negative, non-zero 2D grid")
    height, width = grid.shape
    points = [gt] if isinstance(gt, GazePoint) else list(gt)
    labels = np.zeros_like(grid, dtype=bool)
    for point in points:
        x, y = _as_xy(point)
        labels[min(int(y * height), height - 1), min(int(x * width), width - 1)] = True
    fpr, tpr = roc_curve(grid, labels)
    auc = _trapezoid(fpr, tpr)
    return (auc, fpr, tpr) if return_curve else auc


# classification


def macro_f1(
    preds: Sequence[Hashable], gts: Sequence[Hashable], classes: Sequence[Hashable]
) -> tuple[float, dict[str, dict[str, float]]]:
    """Unweighted mean of per-class F1 over ``classes``; a class with no true positives scores 0."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} labels")
    known = set(classes)
    unknown = {label for label in (*preds, *gts) if label not in known}
    if unknown:
        raise ValueError(f"unknown class label(s): {sorted(map(str, unknown))}")

    per_class: dict[str, dict[str, float]] = {}
    for cls in classes:
        tp = sum(1 for p, g in zip(preds, gts) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(preds, gts) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(preds, gts) if p != cls and g == cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[str(cls)] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": float(tp + fn),
        }
    score = float(np.mean([v["f1"] for v in per_class.values()])) if per_class else 0.0
    return score, per_class


def accuracy(preds: Sequence[Hashable], gts: Sequence[Hashable]) -> float:
    if not gts:
        return 0.0
    return sum(1 for p, g in zip(preds, gts) if p == g) / len(gts)


def boundary_error_rates(
    preds: Sequence[Hashable], gts: Sequence[Hashable], window: int = 3
) -> tuple[float, float]:
    """Error rates within ``window`` frames of a label change and elsewhere."""
    n = len(gts)
    near = np.zeros(n, dtype=bool)
    for i in range(1, n):
        if gts[i] != gts[i - 1]:
            near[max(0, i - window) : min(n, i + window)] = True
    wrong = np.array([p != g for p, g in zip(preds, gts)], dtype=bool)
    boundary = float(wrong[near].mean()) if near.any() else 0.0
    interior = float(wrong[~near].mean()) if (~near).any() else 0.0
    return boundary, interior


# temporal detection


def _bounds(segment: Interval) -> tuple[float, float]:
    if isinstance(segment, ActivitySegment):
        return segment.start_s, segment.end_s
    return float(segment[0]), float(segment[1])


def tiou(a: Interval, b: Interval) -> float:
    (a0, a1), (b0, b1) = _bounds(a), _bounds(b)
    intersection = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0) if intersection > 0 else (a1 - a0) + (b1 - b0)
    return intersection / union if union > 0 else 0.0


@dataclass
class APResult:
    ap: dict[float, float]
    mean_ap: float
    no_ground_truth: bool = False
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    mprec = np.r_[0.0, precision, 0.0]
    mrec = np.r_[0.0, recall, 1.0]
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def _match(
    detections: list[ActivitySegment], ground_truth: list[ActivitySegment], threshold: float
) -> tuple[np.ndarray, np.ndarray]:
    order = sorted(
        range(len(detections)),
        key=lambda i: (-(detections[i].score or 0.0), detections[i].start_s),
    )
    matched = [False] * len(ground_truth)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_iou = -1, threshold
        for j, gt in enumerate(ground_truth):
            if matched[j] or gt.video_id != det.video_id:
                continue
            overlap = tiou(det, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            matched[best] = True
            tp[rank] = 1.0
    return tp, 1.0 - tp


def ap_at_tiou(
    detections: Sequence[ActivitySegment],
    ground_truth: Sequence[ActivitySegment],
    thresholds: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5),
) -> APResult:
    """AP of scored detections of one class against ground truth, per tIoU threshold.

    Detections are ranked by score, earlier start first among equal scores; each claims the
    unmatched ground-truth segment of the same video with the highest tIoU at or above the
    threshold.
    """
    detections, ground_truth = list(detections), list(ground_truth)
    if not ground_truth:
        return APResult({t: 0.0 for t in thresholds}, 0.0, no_ground_truth=True)

    ap: dict[float, float] = {}
    curve: tuple[list[float], list[float]] = ([], [])
    for threshold in thresholds:
        if not detections:
            ap[threshold] = 0.0
            continue
        tp, fp = _match(detections, ground_truth, threshold)
        tp_cum, fp_cum = np.cumsum(tp), np.cumsum(fp)
        recall = tp_cum / len(ground_truth)
        precision = tp_cum / (tp_cum + fp_cum)
        ap[threshold] = _interpolated_ap(precision, recall)
        if math.isclose(threshold, 0.5) or not curve[0]:
            curve = (precision.tolist(), recall.tolist())
    return APResult(ap, float(np.mean(list(ap.values()))), False, *curve)


# head orientation vs gaze


@dataclass
class DeviationStats:
    mean_deg: float
    std_deg: float
    bias_deg: tuple[float, float]
    angles_deg: np.ndarray
    offsets: Optional[np.ndarray] = None


def angular_deviation(
    gaze: np.ndarray,
    axes: np.ndarray,
    intrinsics: Optional[tuple[float, float, float, float]] = None,
) -> DeviationStats:
    """Angles between paired 3D gaze directions and head optical axes.

    Bias is the mean signed yaw and pitch difference. With camera ``intrinsics``
    (fx, fy, cx, cy) the gaze directions are also projected to pixel offsets from the frame
    center; directions behind the camera are left out.
    """
    gaze = np.asarray(gaze, dtype=np.float64).reshape(-1, 3)
    axes = np.asarray(axes, dtype=np.float64).reshape(-1, 3)
    if gaze.shape != axes.shape:
        raise ValueError(f"unpaired inputs {gaze.shape} vs {axes.shape}")
    g_norm, a_norm = np.linalg.norm(gaze, axis=1), np.linalg.norm(axes, axis=1)
    if np.any(g_norm == 0) or np.any(a_norm == 0):
        raise DegenerateInputError("zero-norm direction vector")
    cosine = np.clip(np.sum(gaze * axes, axis=1) / (g_norm * a_norm), -1.0, 1.0)
    angles = np.degrees(np.arccos(cosine))

    yaw = np.arctan2(gaze[:, 0], gaze[:, 2]) - np.arctan2(axes[:, 0], axes[:, 2])
    pitch = np.arctan2(gaze[:, 1], gaze[:, 2]) - np.arctan2(axes[:, 1], axes[:, 2])
    bias = (float(np.degrees(np.mean(yaw))), float(np.degrees(np.mean(pitch))))

    offsets = None
    if intrinsics is not None:
        fx, fy, _, _ = intrinsics
        front = gaze[:, 2] > 0
        offsets = np.stack(
            [fx * gaze[front, 0] / gaze[front, 2], fy * gaze[front, 1] / gaze[front, 2]], axis=1
        )
    return DeviationStats(float(angles.mean()), float(angles.std()), bias, angles, offsets)


# reports


class EvalReport(BaseModel):
    task: str
    metrics: dict[str, float]
    per_class: dict[str, dict[str, float]] = Field(default_factory=dict)
    config_hash: str
    seed: int
    flags: list[str] = Field(default_factory=list)
    curves: dict[str, dict[str, list[Any]]] = Field(
        default_factory=dict, description="Named curves, e.g. precision/recall or timelines."
    )

    @model_validator(mode="after")
    def _finite(self) -> "EvalReport":
        values = list(self.metrics.values()) + [
            v for row in self.per_class.values() for v in row.values()
        ]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"{self.task}: report values must be finite")
        return self

    def save(self, path: str | Path, force: bool = False) -> Path:
        log.info("%s: %s", self.task, {k: round(v, 4) for k, v in self.metrics.items()})
        return write_document(path, self.model_dump(mode="json"), force=force)

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.model_validate(read_document(path))

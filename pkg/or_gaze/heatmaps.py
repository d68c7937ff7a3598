"""Gaze heatmap utilities: normalization, frame aggregation, point read-out, target maps."""

from typing import Sequence

import numpy as np

from or_gaze.models import DegenerateInputError, GazePoint

HEATMAP_SIZE = 64


def _check_grid(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2D, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise DegenerateInputError("heatmap has non-finite entries")
    if np.any(h < 0):
        raise DegenerateInputError("heatmap has negative entries")
    return h


def normalize_heatmap(h: np.ndarray) -> np.ndarray:
    """Scale a non-negative grid to sum 1."""
    grid = _check_grid(h)
    total = grid.sum()
    if total <= 0:
        raise DegenerateInputError("cannot normalize an all-zero heatmap")
    return (grid / total).astype(np.float32)


def sum_normalized_heatmaps(hs: Sequence[np.ndarray], renormalize: bool = True) -> np.ndarray:
    """Sum the normalized per-person heatmaps of one frame.

    With ``renormalize`` the sum is scaled back to 1 so the result does not depend on the
    person count. An empty list is a no-person frame; callers substitute the zero map.
    """
    if len(hs) == 0:
        raise DegenerateInputError("no heatmaps to aggregate")
    shape = np.shape(hs[0])
    if any(np.shape(h) != shape for h in hs):
        raise ValueError("heatmaps differ in size")
    total = np.zeros(shape, dtype=np.float64)
    for h in hs:
        total += normalize_heatmap(h)
    if renormalize:
        total /= total.sum()
    return total.astype(np.float32)


def frame_heatmap(hs: Sequence[np.ndarray], size: int = HEATMAP_SIZE, renormalize: bool = True):
    """Aggregated frame map; the zero map when nobody contributes."""
    if len(hs) == 0:
        return np.zeros((size, size), dtype=np.float32)
    return sum_normalized_heatmaps(hs, renormalize=renormalize)


def heatmap_argmax(h: np.ndarray) -> GazePoint:
    """Center of the maximal cell, first occurrence in row-major order."""
    grid = _check_grid(h)
    if not grid.any():
        raise DegenerateInputError("argmax of an all-zero heatmap")
    row, col = np.unravel_index(int(np.argmax(grid)), grid.shape)
    height, width = grid.shape
    return GazePoint(x=(col + 0.5) / width, y=(row + 0.5) / height)


def heatmap_expected_point(h: np.ndarray) -> GazePoint:
    grid = normalize_heatmap(h).astype(np.float64)
    height, width = grid.shape
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return GazePoint(
        x=float(np.clip((grid.sum(axis=0) * xs).sum(), 0.0, 1.0)),
        y=float(np.clip((grid.sum(axis=1) * ys).sum(), 0.0, 1.0)),
    )


def point_to_cell(point: GazePoint, size: int) -> tuple[int, int]:
    """(row, col) of the cell containing a normalized point."""
    col = min(int(point.x * size), size - 1)
    row = min(int(point.y * size), size - 1)
    return row, col


def gaussian_heatmap(x: float, y: float, size: int = HEATMAP_SIZE, sigma_px: float = 3.0):
    """Isotropic Gaussian with peak 1 centered at normalized (x, y), in cell units."""
    centers = np.arange(size, dtype=np.float64) + 0.5
    gx = np.exp(-((centers - x * size) ** 2) / (2 * sigma_px**2))
    gy = np.exp(-((centers - y * size) ** 2) / (2 * sigma_px**2))
    return np.outer(gy, gx).astype(np.float32)

import numpy as np
import pytest

from or_gaze.heatmaps import (
    frame_heatmap,
    gaussian_heatmap,
    heatmap_argmax,
    heatmap_expected_point,
    normalize_heatmap,
    point_to_cell,
    sum_normalized_heatmaps,
)
from or_gaze.models import DegenerateInputError, GazePoint


class TestAggregation:
    def test_normalize(self):
        h = normalize_heatmap(np.array([[1.0, 3.0], [0.0, 4.0]]))
        assert h.sum() == pytest.approx(1.0)
        assert h[1, 1] == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "grid", [np.zeros((4, 4)), -np.ones((4, 4)), np.full((4, 4), np.nan)]
    )
    def test_normalize_rejects_degenerate(self, grid):
        with pytest.raises(DegenerateInputError):
            normalize_heatmap(grid)

    def test_sum_is_independent_of_scale(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 0.0], [0.0, 10.0]])
        total = sum_normalized_heatmaps([a, b])
        np.testing.assert_allclose(total, [[0.5, 0.0], [0.0, 0.5]])

    def test_sum_without_renormalization(self):
        total = sum_normalized_heatmaps([np.ones((2, 2))] * 3, renormalize=False)
        assert total.sum() == pytest.approx(3.0)

    def test_sizes_must_match(self):
        with pytest.raises(ValueError):
            sum_normalized_heatmaps([np.ones((2, 2)), np.ones((3, 3))])

    def test_no_person_frame_is_zero(self):
        h = frame_heatmap([], size=8)
        assert h.shape == (8, 8) and not h.any()


class TestReadout:
    def test_argmax_first_occurrence(self):
        h = np.zeros((4, 4))
        h[1, 2] = h[3, 0] = 1.0
        assert heatmap_argmax(h) == GazePoint(x=0.625, y=0.375)

    def test_argmax_of_zero_map(self):
        with pytest.raises(DegenerateInputError):
            heatmap_argmax(np.zeros((4, 4)))

    def test_expected_point_of_uniform_map(self):
        point = heatmap_expected_point(np.ones((8, 8)))
        assert point.x == pytest.approx(0.5) and point.y == pytest.approx(0.5)

    def test_gaussian_peaks_at_its_center(self):
        h = gaussian_heatmap(0.3, 0.7, size=32, sigma_px=2.0)
        assert h.max() == pytest.approx(1.0, abs=0.05)
        assert point_to_cell(heatmap_argmax(h), 32) == point_to_cell(GazePoint(x=0.3, y=0.7), 32)

    @pytest.mark.parametrize(
        "x, y, cell", [(0.0, 0.0, (0, 0)), (1.0, 1.0, (7, 7)), (0.5, 0.24, (1, 4))]
    )
    def test_point_to_cell(self, x, y, cell):
        assert point_to_cell(GazePoint(x=x, y=y), 8) == cell

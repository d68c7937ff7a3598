import pytest

from or_gaze.metrics import EvalReport
from or_gaze.models import OutputExistsError
from or_gaze.plots import render_report

PNG_MAGIC = b"\x89PNG"


def report_with(curves: dict) -> EvalReport:
    return EvalReport(task="phase", metrics={}, config_hash="0" * 16, seed=0, curves=curves)


class TestRenderReport:
    def test_one_png_per_known_curve(self, tmp_path):
        report = report_with(
            {
                "roc": {"fpr": [0.0, 0.5, 1.0], "tpr": [0.0, 1.0, 1.0]},
                "pr_STOP": {"precision": [1.0, 0.5], "recall": [0.5, 1.0]},
                "timeline_v002": {"predicted": [0, 0, 1, 2], "ground_truth": [0, 1, 1, 2]},
                "histogram": {"bins": [1, 2]},
            }
        )
        written = render_report(report, tmp_path)
        assert sorted(p.name for p in written) == [
            "phase.pr_STOP.png",
            "phase.roc.png",
            "phase.timeline_v002.png",
        ]
        for path in written:
            assert path.read_bytes().startswith(PNG_MAGIC)

    def test_refuses_overwrite(self, tmp_path):
        report = report_with({"roc": {"fpr": [0.0, 1.0], "tpr": [0.0, 1.0]}})
        render_report(report, tmp_path)
        with pytest.raises(OutputExistsError):
            render_report(report, tmp_path)
        assert len(render_report(report, tmp_path, force=True)) == 1

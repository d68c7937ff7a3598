"""PNG renderings of the curves carried by evaluation reports."""

from io import BytesIO
from logging import getLogger
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from or_gaze.io import write_atomic  # noqa: E402
from or_gaze.metrics import EvalReport  # noqa: E402
from or_gaze.models import PHASES  # noqa: E402

log = getLogger(__name__)


def _save(fig, path: Path, force: bool) -> Path:
    buf = BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    return write_atomic(path, buf.getvalue(), force=force)


def plot_roc(curve: dict, title: str, path: Path, force: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve["fpr"], curve["tpr"], color="C0")
    ax.plot([0, 1], [0, 1], color="0.7", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    return _save(fig, path, force)


def plot_pr(curve: dict, title: str, path: Path, force: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.step(curve["recall"], curve["precision"], where="post", color="C1")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    return _save(fig, path, force)


def plot_timeline(curve: dict, title: str, path: Path, force: bool = False) -> Path:
    """Predicted and ground-truth phase indices as two color bands."""
    rows = np.array([curve["ground_truth"], curve["predicted"]], dtype=float)
    fig, ax = plt.subplots(figsize=(8, 1.6))
    ax.imshow(rows, aspect="auto", cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    ax.set_yticks([0, 1], labels=["truth", "predicted"])
    ax.set_xlabel("frame")
    ax.set_title(f"{title} ({len(PHASES)} phases)")
    return _save(fig, path, force)


def render_report(report: EvalReport, out_dir: str | Path, force: bool = False) -> list[Path]:
    """One PNG per curve of the report, named ``<task>.<curve>.png``."""
    out_dir = Path(out_dir)
    written = []
    for name, curve in sorted(report.curves.items()):
        path = out_dir / f"{report.task}.{name}.png"
        title = f"{report.task} {name}"
        if {"fpr", "tpr"} <= curve.keys():
            written.append(plot_roc(curve, title, path, force))
        elif {"precision", "recall"} <= curve.keys():
            written.append(plot_pr(curve, title, path, force))
        elif {"predicted", "ground_truth"} <= curve.keys():
            written.append(plot_timeline(curve, title, path, force))
        else:
            log.warning("%s: no renderer for curve %s", report.task, name)
    log.info("rendered %d plot(s) for %s", len(written), report.task)
    return written

from typing import Callable, Iterable, Optional

import numpy as np
import pytest
import torch

from or_gaze.backends import GeometricBackend, VideoPredictions
from or_gaze.models import (
    ActivityClass,
    ActivitySegment,
    BoundingBox,
    FrameRecord,
    GazePoint,
    PersonObservation,
    PhaseLabel,
    RoleLabel,
)
from or_gaze.settings import GazeBackendConfig, PhaseStep, ScenarioConfig
from or_gaze.synth import SyntheticCorpus, generate_corpus

IMAGE_SIZE = (640, 480)


def small_scenario(**overrides) -> ScenarioConfig:
    """A 32-frame, three-video scenario with short episodes and small feature dims."""
    values = dict(
        seed=7,
        num_videos=3,
        phase_script=[PhaseStep(phase=phase, duration_s=4.0) for phase in PhaseLabel],
        stop_duration_s=(3.0, 5.0),
        aba_duration_s=(2.0, 5.0),
        stop_episodes_per_video=1,
        aba_episodes_per_video=1,
        visual_dim=16,
        action_dim=8,
        clip_frames=4,
        clip_stride=2,
    )
    values.update(overrides)
    return ScenarioConfig(**values)


def create_person(
    person_id: str,
    x: float,
    y: float,
    role: Optional[RoleLabel] = None,
    gaze: Optional[tuple[float, float]] = None,
    with_body: bool = True,
    track_id: Optional[int] = None,
    image_size: tuple[int, int] = IMAGE_SIZE,
) -> PersonObservation:
    """Person with a 32x32 head box centered at normalized (x, y) and a body box below it."""
    w, h = image_size
    cx, cy = x * w, y * h
    head = BoundingBox(x1=cx - 16, y1=cy - 16, x2=cx + 16, y2=cy + 16)
    body = BoundingBox(x1=cx - 30, y1=cy - 20, x2=cx + 30, y2=min(h, cy + 120))
    return PersonObservation(
        person_id=person_id,
        head=head,
        body=body if with_body else None,
        gaze=None if gaze is None else GazePoint(x=gaze[0], y=gaze[1]),
        role=role,
        track_id=track_id,
    )


def create_frame(
    persons: list[PersonObservation],
    frame_index: int = 0,
    video_id: str = "v000",
    phase: Optional[PhaseLabel] = None,
) -> FrameRecord:
    return FrameRecord(
        video_id=video_id,
        frame_index=frame_index,
        timestamp_s=float(frame_index),
        image_size=IMAGE_SIZE,
        persons=persons,
        phase=phase,
    )


def create_segment(
    start: float,
    end: float,
    score: Optional[float] = None,
    activity: ActivityClass = ActivityClass.STOP,
    video_id: str = "v000",
) -> ActivitySegment:
    return ActivitySegment(
        video_id=video_id, activity=activity, start_s=start, end_s=end, score=score
    )


def create_predictions(
    frames: list[FrameRecord], heatmaps: dict[tuple[int, int], np.ndarray], size: int = 8
) -> VideoPredictions:
    """Predictions for every (frame, person); missing entries get a uniform map."""
    frame_idx, person_idx, maps = [], [], []
    for frame in frames:
        for j in range(len(frame.persons)):
            frame_idx.append(frame.frame_index)
            person_idx.append(j)
            maps.append(heatmaps.get((frame.frame_index, j), np.ones((size, size))))
    n = len(frame_idx)
    return VideoPredictions(
        video_id=frames[0].video_id if frames else "v000",
        frame_index=np.asarray(frame_idx, dtype=np.int64),
        person_index=np.asarray(person_idx, dtype=np.int64),
        heatmaps=np.asarray(maps, dtype=np.float32).reshape(n, size, size),
        in_scores=np.ones(n, dtype=np.float32),
        features=np.zeros((n, 8), dtype=np.float32),
    )


def assert_finite_difference_gradients(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Iterable[torch.Tensor],
    count: int = 5,
    eps: float = 1e-6,
    seed: int = 0,
) -> None:
    """Compare autograd against central differences on ``count`` random float64 entries."""
    params = [p for p in parameters if p.requires_grad]
    assert all(p.dtype == torch.float64 for p in params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    rng = np.random.default_rng(seed)
    for _ in range(count):
        k = int(rng.integers(len(params)))
        flat = params[k].data.view(-1)
        idx = int(rng.integers(flat.numel()))
        original = flat[idx].item()
        flat[idx] = original + eps
        up = loss_fn().item()
        flat[idx] = original - eps
        down = loss_fn().item()
        flat[idx] = original
        numeric = (up - down) / (2 * eps)
        analytic = 0.0 if grads[k] is None else grads[k].reshape(-1)[idx].item()
        scale = max(abs(numeric), abs(analytic), 1e-3)
        assert abs(numeric - analytic) / scale < 1e-4, (k, idx, numeric, analytic)


@pytest.fixture(scope="session")
def scenario() -> ScenarioConfig:
    return small_scenario()


@pytest.fixture(scope="session")
def corpus(scenario) -> SyntheticCorpus:
    return generate_corpus(scenario)


@pytest.fixture(scope="session")
def backend() -> GeometricBackend:
    return GeometricBackend(GazeBackendConfig(feature_dim=16, heatmap_size=32))

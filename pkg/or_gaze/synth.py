"""Synthetic operating-room corpora.

Every video follows the phase script; persons of each role stand at phase-dependent places
and pick gaze targets from role- and phase-conditioned distributions. STOP episodes turn the
whole team towards the head surgeon, ABA episodes turn the anesthetists towards the operating
table or the laparoscopic monitor. Episode labels and gaze behavior come from the same
schedule, so segment files are exact.

Scene rasters encode the layout the gaze backends read: regions are intensity bands, every
head is a 3x3 blob of ``HEAD_VALUE`` and a short facing stroke points from the head towards
the attended target. The stroke value encodes the distance to that target.
"""

import math
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Optional

import numpy as np

from or_gaze import io
from or_gaze.models import (
    ActivityClass,
    ActivitySegment,
    BoundingBox,
    DegenerateInputError,
    FeatureKind,
    FeatureTable,
    FrameRecord,
    GazePoint,
    InfeasibleConfigError,
    PersonObservation,
    PhaseLabel,
    RoleLabel,
    SegmentSet,
)
from or_gaze.settings import RegionBox, ScenarioConfig
from or_gaze.utils.seeding import video_rng

log = getLogger(__name__)

HEAD_VALUE = 255
STROKE_MIN_VALUE = 190
STROKE_OUTSIDE_VALUE = 250
STROKE_DISTANCE_SCALE = 40.0
STROKE_STEPS = np.arange(2.0, 4.51, 0.25)
OUTSIDE = "outside"
PERSON_PREFIX = "person:"

TABLE = "operating_table"
MONITOR = "laparoscopic_monitor"
ANESTHESIA = "anesthesia_equipment"
INSTRUMENTS = "instrument_table"
DOOR = "door"
PERSON = "person"
TARGET_KINDS = (TABLE, MONITOR, ANESTHESIA, INSTRUMENTS, DOOR, PERSON)

P = PhaseLabel
R = RoleLabel

# normalized head centers per phase and role
LAYOUT: dict[PhaseLabel, dict[RoleLabel, tuple[float, float]]] = {
    P.OR_PREPARATION: {
        R.HEAD_SURGEON: (0.30, 0.30),
        R.ASSISTANT_SURGEON: (0.55, 0.82),
        R.CIRCULATING_NURSE: (0.18, 0.62),
        R.ANESTHETIST: (0.82, 0.28),
    },
    P.PATIENT_ROLL_IN: {
        R.HEAD_SURGEON: (0.30, 0.42),
        R.ASSISTANT_SURGEON: (0.70, 0.80),
        R.CIRCULATING_NURSE: (0.16, 0.50),
        R.ANESTHETIST: (0.82, 0.30),
    },
    P.PATIENT_PREPARATION: {
        R.HEAD_SURGEON: (0.30, 0.50),
        R.ASSISTANT_SURGEON: (0.70, 0.52),
        R.CIRCULATING_NURSE: (0.20, 0.68),
        R.ANESTHETIST: (0.80, 0.34),
    },
    P.IMPLANT_PREPARATION: {
        R.HEAD_SURGEON: (0.30, 0.52),
        R.ASSISTANT_SURGEON: (0.70, 0.50),
        R.CIRCULATING_NURSE: (0.16, 0.70),
        R.ANESTHETIST: (0.82, 0.30),
    },
    P.IMPLANT_PLACEMENT: {
        R.HEAD_SURGEON: (0.32, 0.50),
        R.ASSISTANT_SURGEON: (0.68, 0.50),
        R.CIRCULATING_NURSE: (0.20, 0.72),
        R.ANESTHETIST: (0.82, 0.30),
    },
    P.CONCLUSION: {
        R.HEAD_SURGEON: (0.30, 0.48),
        R.ASSISTANT_SURGEON: (0.70, 0.54),
        R.CIRCULATING_NURSE: (0.18, 0.66),
        R.ANESTHETIST: (0.82, 0.32),
    },
    P.PATIENT_ROLL_OUT: {
        R.HEAD_SURGEON: (0.28, 0.36),
        R.ASSISTANT_SURGEON: (0.62, 0.84),
        R.CIRCULATING_NURSE: (0.18, 0.52),
        R.ANESTHETIST: (0.82, 0.30),
    },
    P.OR_CLEANUP: {
        R.HEAD_SURGEON: (0.32, 0.28),
        R.ASSISTANT_SURGEON: (0.55, 0.84),
        R.CIRCULATING_NURSE: (0.18, 0.72),
        R.ANESTHETIST: (0.80, 0.26),
    },
}
ATTENTIVE_ANESTHETIST_POSITION = (0.74, 0.34)

# target weights in TARGET_KINDS order; the head surgeon's table weight is the dominance
# parameter and these weights share the remainder
HEAD_SURGEON_RESIDUAL: dict[PhaseLabel, tuple[float, ...]] = {
    P.OR_PREPARATION: (0, 1, 0, 4, 2, 3),
    P.PATIENT_ROLL_IN: (0, 0, 0, 1, 5, 4),
    P.PATIENT_PREPARATION: (0, 3, 0, 3, 1, 3),
    P.IMPLANT_PREPARATION: (0, 5, 0, 4, 0, 1),
    P.IMPLANT_PLACEMENT: (0, 7, 0, 2, 0, 1),
    P.CONCLUSION: (0, 4, 0, 2, 1, 3),
    P.PATIENT_ROLL_OUT: (0, 0, 0, 2, 3, 5),
    P.OR_CLEANUP: (0, 1, 0, 5, 3, 1),
}
TARGET_WEIGHTS: dict[RoleLabel, dict[PhaseLabel, tuple[float, ...]]] = {
    R.ASSISTANT_SURGEON: {
        P.OR_PREPARATION: (1, 0, 0, 6, 1, 2),
        P.PATIENT_ROLL_IN: (2, 0, 0, 1, 5, 2),
        P.PATIENT_PREPARATION: (5, 1, 0, 2, 0, 2),
        P.IMPLANT_PREPARATION: (4, 3, 0, 3, 0, 1),
        P.IMPLANT_PLACEMENT: (5, 4, 0, 1, 0, 1),
        P.CONCLUSION: (5, 2, 0, 1, 0, 2),
        P.PATIENT_ROLL_OUT: (2, 0, 0, 2, 4, 2),
        P.OR_CLEANUP: (1, 0, 0, 6, 2, 1),
    },
    R.CIRCULATING_NURSE: {
        P.OR_PREPARATION: (1, 0, 0, 5, 2, 2),
        P.PATIENT_ROLL_IN: (1, 0, 0, 1, 6, 2),
        P.PATIENT_PREPARATION: (3, 0, 0, 3, 1, 3),
        P.IMPLANT_PREPARATION: (1, 1, 0, 6, 0, 2),
        P.IMPLANT_PLACEMENT: (2, 2, 0, 4, 0, 2),
        P.CONCLUSION: (2, 1, 0, 4, 1, 2),
        P.PATIENT_ROLL_OUT: (1, 0, 0, 2, 5, 2),
        P.OR_CLEANUP: (1, 0, 0, 6, 2, 1),
    },
    # no table or monitor outside attentive episodes
    R.ANESTHETIST: {
        P.OR_PREPARATION: (0, 0, 6, 0, 1, 3),
        P.PATIENT_ROLL_IN: (0, 0, 5, 0, 3, 2),
        P.PATIENT_PREPARATION: (0, 0, 7, 0, 0, 3),
        P.IMPLANT_PREPARATION: (0, 0, 8, 0, 0, 2),
        P.IMPLANT_PLACEMENT: (0, 0, 8, 0, 0, 2),
        P.CONCLUSION: (0, 0, 7, 0, 1, 2),
        P.PATIENT_ROLL_OUT: (0, 0, 5, 0, 3, 2),
        P.OR_CLEANUP: (0, 0, 6, 0, 2, 2),
    },
}
ATTENTIVE_TARGETS = ((TABLE, 0.7), (MONITOR, 0.3))


@dataclass
class CorpusVideo:
    video_id: str
    fps: float
    image_size: tuple[int, int]
    frames: list[FrameRecord]
    rasters: Optional[np.ndarray] = None
    segments: Optional[SegmentSet] = None
    features: dict[FeatureKind, FeatureTable] = field(default_factory=dict)
    # generator-side truth, per frame: person_id -> attended target
    targets: list[dict[str, str]] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.fps

    @property
    def phases(self) -> list[Optional[PhaseLabel]]:
        return [frame.phase for frame in self.frames]


@dataclass
class SyntheticCorpus:
    scenario: ScenarioConfig
    videos: list[CorpusVideo]
    train_ids: list[str]
    test_ids: list[str]

    @property
    def train_videos(self) -> list[CorpusVideo]:
        return [v for v in self.videos if v.video_id in self.train_ids]

    @property
    def test_videos(self) -> list[CorpusVideo]:
        return [v for v in self.videos if v.video_id in self.test_ids]

    def video(self, video_id: str) -> CorpusVideo:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    def split(self, which: str) -> list[CorpusVideo]:
        return {"train": self.train_videos, "test": self.test_videos, "all": self.videos}[which]


# scene geometry shared with the gaze backends


def region_cells(box: RegionBox, size: int) -> tuple[int, int, int, int]:
    """Raster cells covered by a region as (row0, row1, col0, col1), end-exclusive.

    A cell belongs to the region when its center lies inside the box.
    """
    c0 = max(0, math.ceil(box.x1 * size - 0.5))
    c1 = min(size, max(c0 + 1, math.ceil(box.x2 * size - 0.5)))
    r0 = max(0, math.ceil(box.y1 * size - 0.5))
    r1 = min(size, max(r0 + 1, math.ceil(box.y2 * size - 0.5)))
    return r0, r1, c0, c1


def region_target(box: RegionBox, size: int) -> tuple[float, float]:
    """Center of the middle cell of the rasterized region."""
    r0, r1, c0, c1 = region_cells(box, size)
    return cell_center((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2, size)


def region_palette(regions: dict[str, RegionBox]) -> dict[str, int]:
    palette = {name: 40 + 20 * i for i, name in enumerate(sorted(regions))}
    if palette and max(palette.values()) >= STROKE_MIN_VALUE:
        raise InfeasibleConfigError(f"at most 8 regions can be rendered, got {len(regions)}")
    return palette


def head_cell(x: float, y: float, size: int) -> tuple[int, int]:
    return (min(max(int(y * size), 0), size - 1), min(max(int(x * size), 0), size - 1))


def cell_center(row: int, col: int, size: int) -> tuple[float, float]:
    return ((col + 0.5) / size, (row + 0.5) / size)


def stroke_value(distance: Optional[float]) -> int:
    """Raster value of a facing stroke; ``None`` marks a target outside the image."""
    if distance is None:
        return STROKE_OUTSIDE_VALUE
    return STROKE_MIN_VALUE + int(round(STROKE_DISTANCE_SCALE * min(distance, 1.45)))


def stroke_distance(value: float) -> Optional[float]:
    if value >= STROKE_OUTSIDE_VALUE - 0.5:
        return None
    return max(0.0, (value - STROKE_MIN_VALUE) / STROKE_DISTANCE_SCALE)


def render_raster(
    size: int,
    regions: dict[str, RegionBox],
    heads: list[tuple[float, float]],
    facing: list[tuple[tuple[float, float], Optional[float]]],
) -> np.ndarray:
    """One frame raster.

    ``heads`` are normalized head cell centers; ``facing`` holds, per head, a unit direction
    and the distance to the attended target (``None`` when looking outside the image).
    """
    raster = np.zeros((size, size), dtype=np.uint8)
    for name, value in region_palette(regions).items():
        r0, r1, c0, c1 = region_cells(regions[name], size)
        raster[r0:r1, c0:c1] = value

    for (hx, hy), ((dx, dy), distance) in zip(heads, facing):
        value = stroke_value(distance)
        for t in STROKE_STEPS:
            col = int(math.floor(hx * size + t * dx))
            row = int(math.floor(hy * size + t * dy))
            if 0 <= row < size and 0 <= col < size:
                raster[row, col] = value

    for hx, hy in heads:
        row, col = head_cell(hx, hy, size)
        raster[max(0, row - 1) : row + 2, max(0, col - 1) : col + 2] = HEAD_VALUE
    return raster


# scheduling


def phase_per_frame(config: ScenarioConfig) -> list[PhaseLabel]:
    n = config.num_frames
    bounds, elapsed = [], 0.0
    for step in config.phase_script:
        elapsed += step.duration_s
        bounds.append(int(round(elapsed * config.fps)))
    phases, k = [], 0
    for f in range(n):
        while k < len(bounds) - 1 and f >= bounds[k]:
            k += 1
        phases.append(config.phase_script[k].phase)
    return phases


def _schedule_episodes(
    config: ScenarioConfig, n: int, rng: np.random.Generator
) -> list[tuple[ActivityClass, int, int]]:
    """Non-overlapping episodes as (class, first frame, end frame exclusive)."""
    specs = [(ActivityClass.STOP, *config.stop_duration_s, False)] * config.stop_episodes_per_video
    specs += [(ActivityClass.ABA, *config.aba_duration_s, True)] * config.aba_episodes_per_video
    if not specs:
        return []
    gap = 1
    mins = [max(1, math.ceil(lo * config.fps - 1e-9)) for _, lo, _, _ in specs]
    if sum(mins) + gap * (len(specs) - 1) > n:
        raise InfeasibleConfigError(
            f"{len(specs)} episodes need at least {sum(mins) + gap * (len(specs) - 1)} frames, "
            f"video has {n}"
        )

    durations = []
    for (_, lo, hi, log_uniform), min_frames in zip(specs, mins):
        if log_uniform:
            seconds = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        else:
            seconds = rng.uniform(lo, hi)
        durations.append(max(min_frames, int(round(seconds * config.fps))))

    available = n - gap * (len(specs) - 1)
    while sum(durations) > available:
        i = int(np.argmax([d - m for d, m in zip(durations, mins)]))
        durations[i] = max(mins[i], durations[i] - (sum(durations) - available))

    order = rng.permutation(len(specs))
    free = available - sum(durations)
    cuts = np.sort(rng.integers(0, free + 1, size=len(specs)))
    lead = np.diff(np.concatenate([[0], cuts]))
    episodes, start = [], 0
    for j, idx in enumerate(order):
        start += int(lead[j])
        episodes.append((specs[idx][0], start, start + durations[idx]))
        start += durations[idx] + gap
    return sorted(episodes, key=lambda e: e[1])


def _check_feasible(config: ScenarioConfig) -> None:
    counts = {role: config.persons_per_role.get(role, 0) for role in RoleLabel}
    if sum(counts.values()) == 0:
        raise InfeasibleConfigError("scenario has no persons")
    if config.aba_episodes_per_video and counts[RoleLabel.ANESTHETIST] == 0:
        raise InfeasibleConfigError("ABA episodes need at least one anesthetist")
    if config.stop_episodes_per_video and sum(counts.values()) < 2:
        raise InfeasibleConfigError("STOP episodes need at least two persons")
    region_palette(config.regions)


@dataclass
class _Person:
    person_id: str
    role: RoleLabel
    rank: int


def _team(config: ScenarioConfig) -> list[_Person]:
    team = []
    for role in RoleLabel:
        for rank in range(config.persons_per_role.get(role, 0)):
            team.append(_Person(f"p{len(team)}", role, rank))
    return team


def _base_position(phase: PhaseLabel, person: _Person, attentive: bool) -> tuple[float, float]:
    if attentive:
        x, y = ATTENTIVE_ANESTHETIST_POSITION
    else:
        x, y = LAYOUT[phase][person.role]
    if person.rank:
        dy = 0.16 * person.rank
        y = y + dy if y + dy < 0.9 else y - dy
    return x, y


def _target_weights(config: ScenarioConfig, role: RoleLabel, phase: PhaseLabel) -> np.ndarray:
    if role == RoleLabel.HEAD_SURGEON:
        residual = np.asarray(HEAD_SURGEON_RESIDUAL[phase], dtype=np.float64)
        weights = residual / residual.sum() * (1.0 - config.head_surgeon_dominance)
        weights[0] = config.head_surgeon_dominance
        return weights
    weights = np.asarray(TARGET_WEIGHTS[role][phase], dtype=np.float64)
    return weights / weights.sum()


def _boxes(x: float, y: float, image_size: tuple[int, int]) -> tuple[BoundingBox, BoundingBox]:
    width, height = image_size
    cx, cy = x * width, y * height
    hw, hh = 0.025 * width, 0.035 * height
    head = BoundingBox(
        x1=max(0.0, cx - hw), y1=max(0.0, cy - hh), x2=min(width, cx + hw), y2=min(height, cy + hh)
    )
    body = BoundingBox(
        x1=max(0.0, cx - 0.06 * width),
        y1=max(0.0, cy - 0.045 * height),
        x2=min(width, cx + 0.06 * width),
        y2=min(height, cy + 0.30 * height),
    )
    return head, body


def _rotate(vx: float, vy: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return c * vx - s * vy, s * vx + c * vy


def _generate_video(config: ScenarioConfig, index: int) -> CorpusVideo:
    rng = video_rng(config.seed, index)
    video_id = f"v{index:03d}"
    n = config.num_frames
    size = config.raster_size
    team = _team(config)
    phases = phase_per_frame(config)
    episodes = _schedule_episodes(config, n, rng)
    state: list[Optional[ActivityClass]] = [None] * n
    for activity, start, end in episodes:
        state[start:end] = [activity] * (end - start)
    head_surgeon = next((p for p in team if p.role == RoleLabel.HEAD_SURGEON), None)
    targets_by_region = {name: region_target(box, size) for name, box in config.regions.items()}

    frames, rasters, targets = [], np.zeros((n, size, size), dtype=np.uint8), []
    for f in range(n):
        phase, activity = phases[f], state[f]
        heads: dict[str, tuple[float, float]] = {}
        for person in team:
            attentive = activity == ActivityClass.ABA and person.role == RoleLabel.ANESTHETIST
            x, y = _base_position(phase, person, attentive)
            x = float(np.clip(x + rng.normal(0.0, config.head_motion), 0.05, 0.95))
            y = float(np.clip(y + rng.normal(0.0, config.head_motion), 0.05, 0.95))
            heads[person.person_id] = (x, y)
        cells = {pid: cell_center(*head_cell(x, y, size), size) for pid, (x, y) in heads.items()}

        persons, facing, frame_targets = [], [], {}
        for person in team:
            others = [p.person_id for p in team if p.person_id != person.person_id]
            draws = rng.random(3)
            if activity == ActivityClass.STOP:
                if head_surgeon is not None and person is not head_surgeon:
                    target = PERSON_PREFIX + head_surgeon.person_id
                else:
                    target = PERSON_PREFIX + others[int(draws[0] * len(others))]
            elif activity == ActivityClass.ABA and person.role == RoleLabel.ANESTHETIST:
                target = ATTENTIVE_TARGETS[0][0] if draws[0] < ATTENTIVE_TARGETS[0][1] else MONITOR
            elif draws[0] < config.outside_rate:
                target = OUTSIDE
            else:
                weights = _target_weights(config, person.role, phase)
                if not others:
                    weights[-1] = 0.0
                    weights /= weights.sum()
                cumulative = np.cumsum(weights)
                pick = int(np.searchsorted(cumulative, draws[1] * cumulative[-1], side="right"))
                kind = TARGET_KINDS[min(pick, len(TARGET_KINDS) - 1)]
                if kind == PERSON:
                    target = PERSON_PREFIX + others[int(draws[2] * len(others))]
                else:
                    target = kind
            frame_targets[person.person_id] = target

            hx, hy = cells[person.person_id]
            if target == OUTSIDE:
                angle = rng.uniform(0.0, 2 * math.pi)
                direction, distance = (math.cos(angle), math.sin(angle)), None
                gaze = None
            else:
                if target.startswith(PERSON_PREFIX):
                    tx, ty = cells[target[len(PERSON_PREFIX) :]]
                else:
                    tx, ty = targets_by_region[target]
                vx, vy = tx - hx, ty - hy
                distance = math.hypot(vx, vy)
                direction = (vx / distance, vy / distance) if distance > 0 else (1.0, 0.0)
                jx, jy = _rotate(vx, vy, math.radians(rng.normal(0.0, config.gaze_jitter_deg)))
                gaze = GazePoint(
                    x=float(np.clip(hx + jx, 0.0, 1.0)), y=float(np.clip(hy + jy, 0.0, 1.0))
                )
            facing.append((direction, distance))

            occluded = rng.random() < config.occlusion_rate
            head_box, body_box = _boxes(*heads[person.person_id], config.image_size)
            persons.append(
                PersonObservation(
                    person_id=person.person_id,
                    head=head_box,
                    gaze=None if occluded else gaze,
                    looking_outside=not occluded and target == OUTSIDE,
                    body=body_box,
                    track_id=int(person.person_id[1:]),
                    role=person.role,
                )
            )

        rasters[f] = render_raster(size, config.regions, [cells[p.person_id] for p in team], facing)
        frames.append(
            FrameRecord(
                video_id=video_id,
                frame_index=f,
                timestamp_s=f / config.fps,
                image_size=config.image_size,
                persons=persons,
                phase=phase,
            )
        )
        targets.append(frame_targets)

    segments = SegmentSet(
        video_id=video_id,
        duration_s=n / config.fps,
        segments=[
            ActivitySegment(
                video_id=video_id, activity=activity, start_s=start / config.fps, end_s=end / config.fps
            )
            for activity, start, end in episodes
        ],
    )
    log.info("generated %s: %d frames, %d episodes", video_id, n, len(episodes))
    return CorpusVideo(
        video_id=video_id,
        fps=config.fps,
        image_size=config.image_size,
        frames=frames,
        rasters=rasters,
        segments=segments,
        targets=targets,
    )


def split_ids(video_ids: list[str], test_fraction: float) -> tuple[list[str], list[str]]:
    """Hold out the last ceil(test_fraction * n) videos, keeping at least one for training."""
    n = len(video_ids)
    n_test = min(math.ceil(test_fraction * n - 1e-9), n - 1) if n > 1 else 0
    return video_ids[: n - n_test], video_ids[n - n_test :]


def generate_corpus(config: ScenarioConfig, with_features: bool = True) -> SyntheticCorpus:
    """Deterministic corpus; each video draws from its own seed-derived stream."""
    _check_feasible(config)
    videos = [_generate_video(config, i) for i in range(config.num_videos)]
    train_ids, test_ids = split_ids([v.video_id for v in videos], config.test_fraction)
    corpus = SyntheticCorpus(config, videos, train_ids, test_ids)
    if with_features:
        generate_surrogate_features(corpus)
    return corpus


# surrogate clip features


def clip_grid(config: ScenarioConfig, num_frames: int) -> tuple[int, float, float]:
    """(num_clips, t_start_s, t_stride_s) of the clip grid over a video."""
    size, stride = config.clip_frames, config.clip_stride
    num_clips = (num_frames - size) // stride + 1 if num_frames >= size else 1
    return num_clips, size / (2 * config.fps), stride / config.fps


def clip_frame_range(config: ScenarioConfig, clip_index: int, num_frames: int) -> range:
    start = clip_index * config.clip_stride
    return range(start, min(start + config.clip_frames, num_frames))


def _clip_states(video: CorpusVideo, config: ScenarioConfig) -> tuple[list[int], list[int]]:
    num_clips, t_start, t_stride = clip_grid(config, video.num_frames)
    phase_index = {phase: i for i, phase in enumerate(PhaseLabel)}
    phases, states = [], []
    for c in range(num_clips):
        t = t_start + c * t_stride
        f = min(int(t * video.fps), video.num_frames - 1)
        phases.append(phase_index[video.frames[f].phase or PhaseLabel.OR_PREPARATION])
        state = 0
        for seg in video.segments.segments if video.segments else []:
            if seg.start_s <= t < seg.end_s:
                state = 1 + list(ActivityClass).index(seg.activity)
        states.append(state)
    return phases, states


# how strongly each state (none, STOP, ABA) shows in visual and action features
STATE_GAIN = {FeatureKind.VISUAL: (0.0, 0.6, 0.3), FeatureKind.ACTION: (0.0, 0.5, 0.5)}


def generate_surrogate_features(corpus: SyntheticCorpus) -> None:
    """Attach visual (V) and action (A) clip features to every video.

    Vectors are ``snr * mean + noise`` with unit Gaussian noise and means conditioned on the
    clip's phase and activity; an infinite SNR yields the means themselves.
    """
    config = corpus.scenario
    means_rng = np.random.default_rng([config.seed, 0xFEA7])
    means = {}
    for kind, dim in ((FeatureKind.VISUAL, config.visual_dim), (FeatureKind.ACTION, config.action_dim)):
        phase_means = means_rng.normal(size=(len(PhaseLabel), dim))
        state_means = means_rng.normal(size=(3, dim)) * np.asarray(STATE_GAIN[kind])[:, None]
        means[kind] = (phase_means, state_means)

    for index, video in enumerate(corpus.videos):
        rng = video_rng(config.seed, index, stream=1)
        num_clips, t_start, t_stride = clip_grid(config, video.num_frames)
        phases, states = _clip_states(video, config)
        snrs = {FeatureKind.VISUAL: config.visual_snr, FeatureKind.ACTION: config.action_snr}
        for kind, snr in snrs.items():
            phase_means, state_means = means[kind]
            mean = phase_means[phases] + state_means[states]
            noise = rng.normal(size=mean.shape)
            vectors = mean if math.isinf(snr) else snr * mean + noise
            video.features[kind] = FeatureTable(video.video_id, kind, t_start, t_stride, vectors)


# persistence


def write_corpus(corpus: SyntheticCorpus, root: str | Path, force: bool = False) -> io.CorpusManifest:
    root = Path(root)
    for video in corpus.videos:
        io.save_annotations(
            video.frames, io.annotation_path(root, video.video_id), video.fps, force=force
        )
        if video.segments is not None:
            io.save_segments(
                video.segments, io.annotation_path(root, video.video_id, io.SEGMENT_SUFFIX), force
            )
        if video.rasters is not None:
            io.save_rasters(video.rasters, root, video.video_id, force=force)
        for table in video.features.values():
            io.save_features(table, root, force=force)
    manifest = io.CorpusManifest(
        scenario=corpus.scenario,
        videos=[v.video_id for v in corpus.videos],
        train_videos=corpus.train_ids,
        test_videos=corpus.test_ids,
    )
    io.save_manifest(manifest, root, force=force)
    log.info("wrote %d videos to %s", len(corpus.videos), root)
    return manifest


def load_corpus(root: str | Path, with_segments: bool = True) -> SyntheticCorpus:
    """Read a corpus directory back; generator-side targets are not persisted."""
    root = Path(root)
    manifest = io.load_manifest(root)
    videos = []
    for video_id in manifest.videos:
        annotations = io.load_video(io.annotation_path(root, video_id))
        video = CorpusVideo(
            video_id=video_id,
            fps=annotations.fps,
            image_size=annotations.image_size,
            frames=annotations.frames,
        )
        if (root / video_id / "rasters.json").exists():
            video.rasters = io.load_rasters(root, video_id)
        if with_segments:
            video.segments = io.optional_segments(root, video_id)
        for kind in FeatureKind:
            if io.feature_paths(root, video_id, kind)[1].exists():
                video.features[kind] = io.load_features(root, video_id, kind)
        videos.append(video)
    return SyntheticCorpus(manifest.scenario, videos, manifest.train_videos, manifest.test_videos)


# head orientation vs gaze direction


def sample_head_gaze_pairs(
    n: int,
    rng: np.random.Generator,
    mean_deg: float = 12.0,
    std_deg: float = 5.0,
    bias_deg: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Paired (gaze direction, head optical axis) unit vectors in head-camera coordinates.

    The optical axis is +z; gaze deviates from it by a gamma-distributed angle with the given
    mean and std, at a uniform azimuth, then yaw and pitch are shifted by ``bias_deg``.
    """
    if mean_deg <= 0 or std_deg <= 0:
        raise DegenerateInputError("deviation mean and std must be positive")
    shape = (mean_deg / std_deg) ** 2
    theta = np.radians(rng.gamma(shape, std_deg**2 / mean_deg, size=n))
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    gaze = np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1
    )
    yaw, pitch = np.radians(bias_deg[0]), np.radians(bias_deg[1])
    rot_y = np.array(
        [[np.cos(yaw), 0.0, np.sin(yaw)], [0.0, 1.0, 0.0], [-np.sin(yaw), 0.0, np.cos(yaw)]]
    )
    rot_x = np.array(
        [[1.0, 0.0, 0.0], [0.0, np.cos(pitch), np.sin(pitch)], [0.0, -np.sin(pitch), np.cos(pitch)]]
    )
    gaze = gaze @ rot_y.T @ rot_x.T
    axes = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
    return gaze, axes

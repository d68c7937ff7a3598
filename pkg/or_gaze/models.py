from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Optional, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

FORMAT_VERSION = 1


class RoleLabel(StrEnum):
    """Clinical roles, in class-index order."""

    HEAD_SURGEON = "head_surgeon"
    ASSISTANT_SURGEON = "assistant_surgeon"
    CIRCULATING_NURSE = "circulating_nurse"
    ANESTHETIST = "anesthetist"


class PhaseLabel(StrEnum):
    """Surgical phases, in class-index order."""

    OR_PREPARATION = "or_preparation"
    PATIENT_ROLL_IN = "patient_roll_in"
    PATIENT_PREPARATION = "patient_preparation"
    IMPLANT_PREPARATION = "implant_placement_preparation"
    IMPLANT_PLACEMENT = "implant_placement"
    CONCLUSION = "conclusion"
    PATIENT_ROLL_OUT = "patient_roll_out"
    OR_CLEANUP = "or_cleanup"


class ActivityClass(StrEnum):
    STOP = "STOP"
    ABA = "ABA"


class FeatureKind(StrEnum):
    VISUAL = "visual"
    ACTION = "action"
    GAZE = "gaze"


ROLES: list[RoleLabel] = list(RoleLabel)
PHASES: list[PhaseLabel] = list(PhaseLabel)
ACTIVITIES: list[ActivityClass] = list(ActivityClass)


class BoundingBox(BaseModel):
    """Axis-aligned box in pixels, origin top-left."""

    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float
    y2: float

    @model_validator(mode="after")
    def _positive_area(self) -> Self:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have x2>x1 and y2>y1, got {self.as_tuple()}")
        return self

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def normalized_center(self, image_size: tuple[int, int]) -> tuple[float, float]:
        """Box center divided by (width, height) of the image."""
        cx, cy = self.center
        return (cx / image_size[0], cy / image_size[1])

    def contained_in(self, image_size: tuple[int, int]) -> bool:
        width, height = image_size
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


class GazePoint(BaseModel):
    """Gaze target in coordinates normalized to the unit square."""

    model_config = ConfigDict(frozen=True)

    x: float = Field(ge=0.0, le=1.0)
    y: float = Field(ge=0.0, le=1.0)

    @classmethod
    def from_pixels(cls, x: float, y: float, image_size: tuple[int, int]) -> "GazePoint":
        return cls(x=x / image_size[0], y=y / image_size[1])

    def to_pixels(self, image_size: tuple[int, int]) -> tuple[float, float]:
        return (self.x * image_size[0], self.y * image_size[1])


class PersonObservation(BaseModel):
    person_id: str
    head: BoundingBox
    gaze: Optional[GazePoint] = None
    looking_outside: bool = False
    body: Optional[BoundingBox] = None
    track_id: Optional[int] = None
    role: Optional[RoleLabel] = None

    @model_validator(mode="after")
    def _gaze_xor_outside(self) -> Self:
        if self.gaze is not None and self.looking_outside:
            raise ValueError("gaze must be absent when looking_outside is true")
        return self

    @property
    def annotated(self) -> bool:
        return self.gaze is not None or self.looking_outside


class FrameRecord(BaseModel):
    video_id: str
    frame_index: int = Field(ge=0)
    timestamp_s: float = Field(ge=0.0)
    image_size: tuple[int, int]
    persons: list[PersonObservation] = Field(default_factory=list)
    phase: Optional[PhaseLabel] = Field(
        default=None, description="Per-frame phase annotation, when the video is phase-labeled."
    )

    @model_validator(mode="after")
    def _frame_invariants(self) -> Self:
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        seen: set[str] = set()
        for person in self.persons:
            if person.person_id in seen:
                raise ValueError(f"duplicate person_id {person.person_id!r}")
            seen.add(person.person_id)
            if not person.head.contained_in(self.image_size):
                raise ValueError(f"head box of {person.person_id!r} exceeds image bounds")
            if person.body is not None and not person.body.contained_in(self.image_size):
                raise ValueError(f"body box of {person.person_id!r} exceeds image bounds")
        return self


class ActivitySegment(BaseModel):
    video_id: str
    activity: ActivityClass
    start_s: float
    end_s: float
    score: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> Self:
        if not self.end_s > self.start_s:
            raise ValueError(f"end_s ({self.end_s}) must exceed start_s ({self.start_s})")
        return self

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


class SegmentSet(BaseModel):
    """Ground-truth segments or scored detections of one video."""

    video_id: str
    duration_s: float = Field(gt=0.0)
    segments: list[ActivitySegment] = Field(default_factory=list)

    @model_validator(mode="after")
    def _within_video(self) -> Self:
        for i, seg in enumerate(self.segments):
            if seg.video_id != self.video_id:
                raise ValueError(f"segments[{i}] belongs to {seg.video_id!r}")
            if seg.start_s < -1e-6 or seg.end_s > self.duration_s + 1e-6:
                raise ValueError(
                    f"segments[{i}] [{seg.start_s}, {seg.end_s}] outside video duration "
                    f"{self.duration_s}"
                )
        return self


@dataclass(frozen=True)
class FeatureRecord:
    video_id: str
    clip_index: int
    t_center_s: float
    kind: FeatureKind
    vector: np.ndarray


@dataclass
class FeatureTable:
    """All clip vectors of one kind for one video, row-major [num_clips x dim]."""

    video_id: str
    kind: FeatureKind
    t_start_s: float
    t_stride_s: float
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"feature vectors must be 2D, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError(f"{self.video_id}/{self.kind}: non-finite feature entries")
        if self.t_stride_s <= 0:
            raise ValueError("t_stride_s must be positive")

    @property
    def num_clips(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def t_center(self, clip_index: int) -> float:
        return self.t_start_s + clip_index * self.t_stride_s

    def records(self) -> list[FeatureRecord]:
        return [
            FeatureRecord(self.video_id, i, self.t_center(i), self.kind, self.vectors[i])
            for i in range(self.num_clips)
        ]


class ValidationIssue(BaseModel):
    locator: str
    message: str

    def __str__(self) -> str:
        return f"{self.locator}: {self.message}"


class OrGazeError(Exception):
    """Base class of all package errors."""


class SchemaViolationError(OrGazeError):
    """Raised when a document violates its schema; lists every offending record."""

    def __init__(self, path: str | Path, issues: list[ValidationIssue]):
        self.path = str(path)
        self.issues = issues
        lines = "\n".join(f"  {issue}" for issue in issues)
        super().__init__(f"{self.path}: {len(issues)} schema violation(s)\n{lines}")


class UnsupportedFormatError(SchemaViolationError):
    pass


class DegenerateInputError(OrGazeError, ValueError):
    pass


class InfeasibleConfigError(OrGazeError, ValueError):
    pass


class ModelStateError(OrGazeError):
    pass


class OutputExistsError(OrGazeError):
    def __init__(self, path: str | Path):
        self.path = str(path)
        super().__init__(f"{self.path}: output exists, pass --force to overwrite")

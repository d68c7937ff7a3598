"""On-disk formats: annotations, segments, feature containers, rasters, manifests.

Every document carries ``format_version``; loaders reject unknown versions and report every
offending record with a locator such as ``v0.gaze.json: frames[3].persons[1].gaze``.
"""

import json
import os
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from or_gaze.models import (
    FORMAT_VERSION,
    ActivitySegment,
    FeatureKind,
    FeatureTable,
    FrameRecord,
    OutputExistsError,
    SchemaViolationError,
    SegmentSet,
    UnsupportedFormatError,
    ValidationIssue,
)
from or_gaze.settings import ScenarioConfig

log = getLogger(__name__)

ANNOTATION_SUFFIX = ".gaze.json"
SEGMENT_SUFFIX = ".segments.json"
DETECTION_SUFFIX = ".detections.json"


@dataclass
class VideoAnnotations:
    video_id: str
    fps: float
    image_size: tuple[int, int]
    frames: list[FrameRecord]


class CorpusManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    scenario: ScenarioConfig
    videos: list[str]
    train_videos: list[str]
    test_videos: list[str]


class _AnnotationHeader(BaseModel):
    video_id: str
    fps: float = Field(gt=0.0)
    image_size: tuple[int, int]
    frames: list[dict[str, Any]]


class _SegmentHeader(BaseModel):
    video_id: str
    duration_s: float = Field(gt=0.0)
    segments: list[dict[str, Any]]


class _FeatureSidecar(BaseModel):
    format_version: int
    kind: FeatureKind
    num_clips: int = Field(ge=0)
    dim: int = Field(ge=1)
    t_start_s: float
    t_stride_s: float = Field(gt=0.0)


class _RasterSidecar(BaseModel):
    format_version: int
    num_frames: int = Field(ge=0)
    height: int = Field(ge=1)
    width: int = Field(ge=1)


def _locator(prefix: str, loc: Iterable[Any]) -> str:
    out = prefix
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def _issues_from(error: ValidationError, prefix: str) -> list[ValidationIssue]:
    return [
        ValidationIssue(locator=_locator(prefix, err["loc"]), message=err["msg"])
        for err in error.errors()
    ]


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except UnicodeDecodeError:
        raise SchemaViolationError(
            path, [ValidationIssue(locator="$", message="not valid UTF-8")]
        )
    except json.JSONDecodeError as e:
        raise SchemaViolationError(
            path, [ValidationIssue(locator=f"line {e.lineno}", message=f"parse error: {e.msg}")]
        )


def _check_version(raw: Any, path: Path) -> None:
    if not isinstance(raw, dict):
        raise SchemaViolationError(
            path, [ValidationIssue(locator="$", message="top level must be an object")]
        )
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(
            path,
            [ValidationIssue(locator="format_version", message=f"unsupported version {version!r}")],
        )


def _dumps(document: Any) -> str:
    return json.dumps(document, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path: str | Path, payload: str | bytes, force: bool = False) -> Path:
    """Write through a temporary file and an atomic rename; never clobbers without force."""
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    try:
        if isinstance(payload, str):
            temp_file.write_text(payload)
        else:
            temp_file.write_bytes(payload)
        os.replace(temp_file, path)
    finally:
        try:
            os.unlink(temp_file)
        except OSError:
            pass
    return path


def write_document(path: str | Path, document: dict[str, Any], force: bool = False) -> Path:
    """Versioned JSON document with canonical key order."""
    return write_atomic(path, _dumps({"format_version": FORMAT_VERSION, **document}), force=force)


def read_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    raw = _read_json(path)
    _check_version(raw, path)
    return {k: v for k, v in raw.items() if k != "format_version"}


# annotations


def _frame_order_issues(
    frames: list[FrameRecord], indices: Optional[list[int]] = None
) -> list[ValidationIssue]:
    """Order violations between consecutive frames; locators use the original indices."""
    if indices is None:
        indices = list(range(len(frames)))
    issues = []
    for k in range(1, len(frames)):
        prev, cur, i = frames[k - 1], frames[k], indices[k]
        if cur.timestamp_s <= prev.timestamp_s:
            issues.append(
                ValidationIssue(
                    locator=f"frames[{i}].timestamp_s",
                    message="timestamps must be strictly increasing within a video",
                )
            )
        if cur.frame_index <= prev.frame_index:
            issues.append(
                ValidationIssue(
                    locator=f"frames[{i}].frame_index",
                    message="frame indices must be strictly increasing within a video",
                )
            )
    return issues


def load_video(path: str | Path) -> VideoAnnotations:
    path = Path(path)
    raw = _read_json(path)
    _check_version(raw, path)
    try:
        header = _AnnotationHeader.model_validate(
            {k: v for k, v in raw.items() if k != "format_version"}
        )
    except ValidationError as e:
        raise SchemaViolationError(path, _issues_from(e, "$"))

    issues: list[ValidationIssue] = []
    frames: list[FrameRecord] = []
    valid: list[int] = []
    for i, frame in enumerate(header.frames):
        try:
            frames.append(
                FrameRecord.model_validate(
                    {**frame, "video_id": header.video_id, "image_size": header.image_size}
                )
            )
            valid.append(i)
        except ValidationError as e:
            issues.extend(_issues_from(e, f"frames[{i}]"))
    issues.extend(_frame_order_issues(frames, valid))
    if issues:
        raise SchemaViolationError(path, issues)
    return VideoAnnotations(header.video_id, header.fps, header.image_size, frames)


def load_annotations(path: str | Path) -> list[FrameRecord]:
    return load_video(path).frames


def save_annotations(
    records: list[FrameRecord], path: str | Path, fps: float, force: bool = False
) -> Path:
    path = Path(path)
    if not records:
        raise SchemaViolationError(path, [ValidationIssue(locator="frames", message="no frames")])
    video_id, image_size = records[0].video_id, records[0].image_size
    issues = [
        ValidationIssue(locator=f"frames[{i}]", message="frame belongs to another video or size")
        for i, r in enumerate(records)
        if r.video_id != video_id or tuple(r.image_size) != tuple(image_size)
    ]
    issues.extend(_frame_order_issues(records))
    if issues:
        raise SchemaViolationError(path, issues)

    document = {
        "format_version": FORMAT_VERSION,
        "video_id": video_id,
        "fps": fps,
        "image_size": list(image_size),
        "frames": [
            r.model_dump(mode="json", exclude_none=True, exclude={"video_id", "image_size"})
            for r in records
        ],
    }
    return write_atomic(path, _dumps(document), force=force)


# segments


def load_segments(path: str | Path) -> SegmentSet:
    path = Path(path)
    raw = _read_json(path)
    _check_version(raw, path)
    try:
        header = _SegmentHeader.model_validate(
            {k: v for k, v in raw.items() if k != "format_version"}
        )
    except ValidationError as e:
        raise SchemaViolationError(path, _issues_from(e, "$"))

    issues: list[ValidationIssue] = []
    segments: list[ActivitySegment] = []
    for i, seg in enumerate(header.segments):
        try:
            segments.append(ActivitySegment.model_validate({**seg, "video_id": header.video_id}))
        except ValidationError as e:
            issues.extend(_issues_from(e, f"segments[{i}]"))
    for i, seg in enumerate(segments):
        if seg.start_s < -1e-6 or seg.end_s > header.duration_s + 1e-6:
            issues.append(
                ValidationIssue(locator=f"segments[{i}]", message="segment outside video duration")
            )
    if issues:
        raise SchemaViolationError(path, issues)
    return SegmentSet(video_id=header.video_id, duration_s=header.duration_s, segments=segments)


def save_segments(segment_set: SegmentSet, path: str | Path, force: bool = False) -> Path:
    # re-validate; the set may have been mutated after construction
    try:
        SegmentSet.model_validate(segment_set.model_dump())
    except ValidationError as e:
        raise SchemaViolationError(path, _issues_from(e, "$"))
    document = {
        "format_version": FORMAT_VERSION,
        "video_id": segment_set.video_id,
        "duration_s": segment_set.duration_s,
        "segments": [
            s.model_dump(mode="json", exclude_none=True, exclude={"video_id"})
            for s in segment_set.segments
        ],
    }
    return write_atomic(path, _dumps(document), force=force)


# feature containers


def feature_paths(root: str | Path, video_id: str, kind: FeatureKind | str) -> tuple[Path, Path]:
    directory = Path(root) / video_id
    return directory / f"features.{kind}.f32", directory / f"features.{kind}.json"


def save_features(table: FeatureTable, root: str | Path, force: bool = False) -> Path:
    blob_path, sidecar_path = feature_paths(root, table.video_id, table.kind)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "kind": str(table.kind),
        "num_clips": table.num_clips,
        "dim": table.dim,
        "t_start_s": table.t_start_s,
        "t_stride_s": table.t_stride_s,
    }
    write_atomic(blob_path, table.vectors.astype("<f4").tobytes(), force=force)
    write_atomic(sidecar_path, _dumps(sidecar), force=force)
    return blob_path


def load_features(root: str | Path, video_id: str, kind: FeatureKind | str) -> FeatureTable:
    blob_path, sidecar_path = feature_paths(root, video_id, kind)
    raw = _read_json(sidecar_path)
    _check_version(raw, sidecar_path)
    try:
        sidecar = _FeatureSidecar.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolationError(sidecar_path, _issues_from(e, "$"))
    if sidecar.kind != FeatureKind(kind):
        raise SchemaViolationError(
            sidecar_path, [ValidationIssue(locator="kind", message=f"expected {kind}")]
        )

    if not blob_path.exists():
        raise SchemaViolationError(
            blob_path, [ValidationIssue(locator="$", message="feature blob is missing")]
        )
    data = np.fromfile(blob_path, dtype="<f4")
    expected = sidecar.num_clips * sidecar.dim
    if data.size != expected or blob_path.stat().st_size != expected * 4:
        raise SchemaViolationError(
            blob_path,
            [
                ValidationIssue(
                    locator="$",
                    message=f"blob holds {blob_path.stat().st_size} bytes, sidecar shape "
                    f"[{sidecar.num_clips} x {sidecar.dim}] needs {expected * 4}",
                )
            ],
        )
    vectors = data.reshape(sidecar.num_clips, sidecar.dim).astype(np.float32)
    bad_rows = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
    if bad_rows.size:
        raise SchemaViolationError(
            blob_path,
            [ValidationIssue(locator=f"clips[{i}]", message="non-finite entry") for i in bad_rows],
        )
    return FeatureTable(video_id, FeatureKind(kind), sidecar.t_start_s, sidecar.t_stride_s, vectors)


# rasters


def save_rasters(rasters: np.ndarray, root: str | Path, video_id: str, force: bool = False) -> Path:
    rasters = np.ascontiguousarray(rasters, dtype=np.uint8)
    directory = Path(root) / video_id
    sidecar = {
        "format_version": FORMAT_VERSION,
        "num_frames": int(rasters.shape[0]),
        "height": int(rasters.shape[1]),
        "width": int(rasters.shape[2]),
    }
    write_atomic(directory / "rasters.u8", rasters.tobytes(), force=force)
    write_atomic(directory / "rasters.json", _dumps(sidecar), force=force)
    return directory / "rasters.u8"


def load_rasters(root: str | Path, video_id: str) -> np.ndarray:
    directory = Path(root) / video_id
    sidecar_path = directory / "rasters.json"
    raw = _read_json(sidecar_path)
    _check_version(raw, sidecar_path)
    try:
        sidecar = _RasterSidecar.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolationError(sidecar_path, _issues_from(e, "$"))
    blob_path = directory / "rasters.u8"
    if not blob_path.exists():
        raise SchemaViolationError(
            blob_path, [ValidationIssue(locator="$", message="raster blob is missing")]
        )
    data = np.fromfile(blob_path, dtype=np.uint8)
    shape = (sidecar.num_frames, sidecar.height, sidecar.width)
    if data.size != int(np.prod(shape)):
        raise SchemaViolationError(
            blob_path,
            [ValidationIssue(locator="$", message=f"size {data.size} does not match {shape}")],
        )
    return data.reshape(shape)


# manifests and per-frame predictions


def save_manifest(manifest: CorpusManifest, root: str | Path, force: bool = False) -> Path:
    return write_atomic(
        Path(root) / "corpus.json", _dumps(manifest.model_dump(mode="json")), force=force
    )


def load_manifest(root: str | Path) -> CorpusManifest:
    path = Path(root) / "corpus.json"
    raw = _read_json(path)
    _check_version(raw, path)
    try:
        return CorpusManifest.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolationError(path, _issues_from(e, "$"))


def save_frame_labels(
    video_id: str,
    labels: Mapping[int, Any],
    path: str | Path,
    force: bool = False,
) -> Path:
    """Per-frame predictions, e.g. ``{frame_index: phase}`` or ``{frame_index: {person: role}}``."""
    document = {
        "format_version": FORMAT_VERSION,
        "video_id": video_id,
        "frames": {str(k): labels[k] for k in sorted(labels)},
    }
    return write_atomic(path, _dumps(document), force=force)


def load_frame_labels(path: str | Path) -> tuple[str, dict[int, Any]]:
    path = Path(path)
    raw = _read_json(path)
    _check_version(raw, path)
    return raw["video_id"], {int(k): v for k, v in raw["frames"].items()}


def validate_directory(root: str | Path) -> dict[str, SchemaViolationError]:
    """Load every annotation, segment and feature file under root; map path -> failure."""
    root = Path(root)
    failures: dict[str, SchemaViolationError] = {}
    for path in sorted(root.glob(f"*{ANNOTATION_SUFFIX}")):
        try:
            load_video(path)
        except SchemaViolationError as e:
            failures[str(path)] = e
    for pattern in (f"*{SEGMENT_SUFFIX}", f"*{DETECTION_SUFFIX}"):
        for path in sorted(root.glob(pattern)):
            try:
                load_segments(path)
            except SchemaViolationError as e:
                failures[str(path)] = e
    for sidecar in sorted(root.glob("*/features.*.json")):
        kind = sidecar.name.split(".")[1]
        try:
            load_features(root, sidecar.parent.name, kind)
        except (SchemaViolationError, ValueError) as e:
            if not isinstance(e, SchemaViolationError):
                e = SchemaViolationError(sidecar, [ValidationIssue(locator="kind", message=str(e))])
            failures[str(sidecar)] = e
    log.debug("validated %s: %d failure(s)", root, len(failures))
    return failures


def annotation_path(root: str | Path, video_id: str, suffix: str = ANNOTATION_SUFFIX) -> Path:
    return Path(root) / f"{video_id}{suffix}"


def optional_segments(root: str | Path, video_id: str) -> Optional[SegmentSet]:
    path = annotation_path(root, video_id, SEGMENT_SUFFIX)
    return load_segments(path) if path.exists() else None

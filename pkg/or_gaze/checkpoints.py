"""Model checkpoints: one torch weight blob plus a JSON descriptor."""

import io as _bytes_io
from logging import getLogger
from pathlib import Path
from typing import Any

import torch
from pydantic import BaseModel, Field, ValidationError

from or_gaze.io import read_document, write_atomic, write_document
from or_gaze.models import ModelStateError, SchemaViolationError, ValidationIssue

log = getLogger(__name__)


class CheckpointDescriptor(BaseModel):
    name: str
    kind: str = Field(description="gaze_backend, role, phase, gaze_encoder or tad")
    config: dict[str, Any] = Field(default_factory=dict)
    extra: dict[str, Any] = Field(default_factory=dict)


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".pt"), path.with_suffix(".json")


def save_checkpoint(
    path: str | Path,
    state_dict: dict[str, torch.Tensor],
    descriptor: CheckpointDescriptor,
    force: bool = False,
) -> Path:
    blob_path, descriptor_path = checkpoint_paths(path)
    buffer = _bytes_io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state_dict.items()}, buffer)
    write_atomic(blob_path, buffer.getvalue(), force=force)
    write_document(descriptor_path, descriptor.model_dump(mode="json"), force=force)
    log.info("saved %s checkpoint to %s", descriptor.kind, blob_path)
    return blob_path


def load_checkpoint(
    path: str | Path, kind: str
) -> tuple[dict[str, torch.Tensor], CheckpointDescriptor]:
    blob_path, descriptor_path = checkpoint_paths(path)
    if not blob_path.exists() or not descriptor_path.exists():
        raise ModelStateError(f"{blob_path}: no trained {kind} model, train one first")
    try:
        descriptor = CheckpointDescriptor.model_validate(read_document(descriptor_path))
    except ValidationError as e:
        raise SchemaViolationError(
            descriptor_path,
            [ValidationIssue(locator=str(err["loc"]), message=err["msg"]) for err in e.errors()],
        )
    if descriptor.kind != kind:
        raise ModelStateError(f"{descriptor_path}: holds a {descriptor.kind} model, not {kind}")
    state_dict = torch.load(blob_path, map_location="cpu", weights_only=True)
    return state_dict, descriptor

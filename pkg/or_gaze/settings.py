import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Self

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from or_gaze.models import PhaseLabel, RoleLabel
from or_gaze.utils.durations import parse_duration

GazeMode = Literal["global", "local"]
BackendKind = Literal["geometric", "reference"]

REQUIRED_REGIONS = (
    "operating_table",
    "laparoscopic_monitor",
    "anesthesia_equipment",
    "instrument_table",
    "door",
)


class RegionBox(BaseModel):
    """Named scene region in normalized coordinates."""

    x1: float = Field(ge=0.0, le=1.0)
    y1: float = Field(ge=0.0, le=1.0)
    x2: float = Field(ge=0.0, le=1.0)
    y2: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> Self:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError("region must have x2>x1 and y2>y1")
        return self


class PhaseStep(BaseModel):
    phase: PhaseLabel
    duration_s: float = Field(gt=0.0)

    @field_validator("duration_s", mode="before")
    @classmethod
    def _parse(cls, v: Any) -> float:
        return parse_duration(v)


def _default_regions() -> dict[str, RegionBox]:
    return {
        "operating_table": RegionBox(x1=0.36, y1=0.42, x2=0.64, y2=0.70),
        "laparoscopic_monitor": RegionBox(x1=0.40, y1=0.04, x2=0.60, y2=0.18),
        # right edge, next to the anesthetist
        "anesthesia_equipment": RegionBox(x1=0.86, y1=0.40, x2=0.98, y2=0.66),
        "instrument_table": RegionBox(x1=0.05, y1=0.74, x2=0.25, y2=0.92),
        "door": RegionBox(x1=0.02, y1=0.08, x2=0.12, y2=0.40),
    }


def _default_phase_script() -> list[PhaseStep]:
    return [PhaseStep(phase=phase, duration_s=40.0) for phase in PhaseLabel]


class ScenarioConfig(BaseModel):
    """Synthetic operating-room scenario."""

    seed: int = Field(default=0, ge=0)
    num_videos: int = Field(default=6, ge=1)
    fps: float = Field(default=1.0, gt=0.0)
    duration_s: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Video duration; the phase script is rescaled to it. Defaults to the script length.",
    )
    image_size: tuple[int, int] = (640, 480)
    raster_size: int = Field(default=64, ge=16)
    persons_per_role: dict[RoleLabel, int] = Field(
        default_factory=lambda: {role: 1 for role in RoleLabel}
    )
    regions: dict[str, RegionBox] = Field(default_factory=_default_regions)
    phase_script: list[PhaseStep] = Field(default_factory=_default_phase_script, min_length=1)
    stop_episodes_per_video: int = Field(default=1, ge=0)
    aba_episodes_per_video: int = Field(default=3, ge=0)
    stop_duration_s: tuple[float, float] = (30.0, 90.0)
    aba_duration_s: tuple[float, float] = (1.0, 366.0)
    head_surgeon_dominance: float = Field(default=0.8, ge=0.0, le=1.0)
    gaze_jitter_deg: float = Field(default=12.0, ge=0.0)
    occlusion_rate: float = Field(default=0.05, ge=0.0, le=1.0)
    outside_rate: float = Field(default=0.03, ge=0.0, le=1.0)
    head_motion: float = Field(default=0.004, ge=0.0, description="Per-frame head wobble std.")
    visual_dim: int = Field(default=256, ge=1)
    action_dim: int = Field(default=64, ge=1)
    visual_snr: float = Field(default=1.0, ge=0.0)
    action_snr: float = Field(default=0.5, ge=0.0)
    clip_frames: int = Field(default=16, ge=1)
    clip_stride: int = Field(default=8, ge=1)
    test_fraction: float = Field(default=1 / 3, ge=0.0, lt=1.0)

    @field_validator("duration_s", mode="before")
    @classmethod
    def _parse_duration(cls, v: Any) -> Any:
        return None if v is None else parse_duration(v)

    @field_validator("stop_duration_s", "aba_duration_s", mode="before")
    @classmethod
    def _parse_range(cls, v: Any) -> Any:
        if isinstance(v, (list, tuple)):
            return tuple(parse_duration(x) for x in v)
        return v

    @model_validator(mode="after")
    def _scenario_invariants(self) -> Self:
        missing = [name for name in REQUIRED_REGIONS if name not in self.regions]
        if missing:
            raise ValueError(f"regions missing {missing}")
        for name, (lo, hi) in (("stop", self.stop_duration_s), ("aba", self.aba_duration_s)):
            if not 0 < lo <= hi:
                raise ValueError(f"{name}_duration_s must satisfy 0 < min <= max")
        if any(count < 0 for count in self.persons_per_role.values()):
            raise ValueError("persons_per_role counts must be >= 0")
        total = sum(step.duration_s for step in self.phase_script)
        if self.duration_s is None:
            self.duration_s = total
        elif abs(self.duration_s - total) > 1e-9:
            scale = self.duration_s / total
            self.phase_script = [
                PhaseStep(phase=step.phase, duration_s=step.duration_s * scale)
                for step in self.phase_script
            ]
        return self

    @property
    def num_frames(self) -> int:
        return max(1, int(round(self.duration_s * self.fps)))


class GazeBackendConfig(BaseModel):
    kind: BackendKind = "geometric"
    heatmap_size: int = 64
    feature_dim: int = Field(default=128, description="G, fixed across backends.")
    sigma_px: float = Field(default=3.0, gt=0.0)
    direction_noise_deg: float = Field(default=0.0, ge=0.0)
    snap_to_targets: bool = Field(
        default=True,
        description="Geometric backend: snap to the scene object nearest the facing direction.",
    )
    fixed_distance: float = Field(
        default=0.25, gt=0.0, description="Gaze distance used when snapping is off."
    )
    epochs: int = Field(default=15, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    base_channels: int = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)


class RoleModelConfig(BaseModel):
    embed_dim: int = Field(default=256, ge=1)
    num_layers: int = Field(default=3, ge=3, le=3)
    num_heads: int = Field(default=4, ge=1)
    max_length: int = Field(default=64, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    epochs: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-2, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    pooling: Literal["cls", "mean"] = "cls"
    downsample: bool = Field(default=True, description="Average-pool heatmaps to half size.")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _heads_divide(self) -> Self:
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self


class PhaseModelConfig(BaseModel):
    clip_frames: int = Field(default=25, ge=1, description="K, centered window.")
    embed_dim: int = Field(default=256, ge=1)
    num_layers: int = Field(default=3, ge=1)
    num_heads: int = Field(default=4, ge=1)
    position_dim: int = Field(default=64, ge=4, description="C, head map channels.")
    tcn_stages: int = Field(default=4, ge=1)
    tcn_layers: int = Field(default=10, ge=1)
    tcn_features: int = Field(default=64, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    epochs: int = Field(default=30, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-2, ge=0.0)
    train_window: int = Field(default=128, ge=1, description="Frames per training chunk.")
    pooling: Literal["mean", "cls"] = "mean"
    use_tcn: bool = True
    use_role_tokens: bool = True
    renormalize: bool = True
    gt_roles: bool = Field(default=False, description="Role presence from ground truth.")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _odd_window(self) -> Self:
        if self.clip_frames % 2 == 0:
            raise ValueError("clip_frames (K) must be odd")
        if self.position_dim % 4:
            raise ValueError("position_dim must be divisible by 4")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self


class GazeEncoderConfig(BaseModel):
    spatial_layers: int = Field(default=3, ge=1)
    temporal_layers: int = Field(default=3, ge=1)
    num_heads: int = Field(default=4, ge=1)
    output_dim: int = Field(default=256, ge=1, description="V, equals the visual feature dim.")
    max_frames: int = Field(default=64, ge=1)
    temperature: float = Field(default=0.07, gt=0.0)
    batch_size: int = Field(default=1024, ge=1)
    epochs: int = Field(default=40, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-2, ge=0.0)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    symmetric: bool = False
    seed: int = Field(default=0, ge=0)


class TadConfig(BaseModel):
    hidden_dim: int = Field(default=128, ge=1)
    pyramid_levels: int = Field(default=4, ge=1)
    regression_ranges: list[tuple[float, float]] = Field(
        default_factory=lambda: [(0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, 1e4)]
    )
    center_radius: float = Field(default=1.5, gt=0.0)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    epochs: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    pre_nms_threshold: float = 1e-3
    pre_nms_topk: int = 200
    nms_sigma: float = 0.5
    nms_iou_threshold: float = Field(default=0.75, gt=0.0, le=1.0)
    min_score: float = 1e-3
    max_detections: int = 100
    score_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    use_gaze: bool = True
    freeze_encoder: bool = True
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _ranges_per_level(self) -> Self:
        if len(self.regression_ranges) != self.pyramid_levels:
            raise ValueError("one regression range per pyramid level")
        return self


class EvalConfig(BaseModel):
    tiou_thresholds: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    point_estimate: Literal["argmax", "expected"] = "argmax"
    boundary_window: int = Field(default=3, ge=0)


class RunConfig(BaseSettings):
    """Top-level configuration; only explicit values are used, never the environment."""

    model_config = SettingsConfigDict(extra="forbid")

    seed: Optional[int] = Field(default=None, ge=0, description="Overrides every module seed.")
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    gaze: GazeBackendConfig = Field(default_factory=GazeBackendConfig)
    role: RoleModelConfig = Field(default_factory=RoleModelConfig)
    phase: PhaseModelConfig = Field(default_factory=PhaseModelConfig)
    encoder: GazeEncoderConfig = Field(default_factory=GazeEncoderConfig)
    tad: TadConfig = Field(default_factory=TadConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    train_gaze_mode: GazeMode = "global"
    test_gaze_mode: GazeMode = "global"

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    @model_validator(mode="after")
    def _propagate_seed(self) -> Self:
        if self.seed is not None:
            for section in (self.scenario, self.gaze, self.role, self.phase, self.encoder, self.tad):
                section.seed = self.seed
        return self

    @classmethod
    def load(cls, path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """Read a JSON config file and apply overrides; overrides win."""
        data: dict[str, Any] = {}
        if path is not None:
            data = json.loads(Path(path).read_text())
        if overrides:
            data = deep_merge(data, overrides)
        return cls(**data)


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]

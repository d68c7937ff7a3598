from or_gaze.backends import GazeBackend, GeometricBackend, ReferenceBackend, make_backend
from or_gaze.cache import ArtifactCache, CacheSettings, cached_arrays
from or_gaze.metrics import EvalReport
from or_gaze.models import (
    ActivityClass,
    ActivitySegment,
    DegenerateInputError,
    FrameRecord,
    ModelStateError,
    OrGazeError,
    PhaseLabel,
    RoleLabel,
    SchemaViolationError,
)
from or_gaze.phases import PhaseRecognizer
from or_gaze.roles import RoleClassifier
from or_gaze.settings import RunConfig, ScenarioConfig
from or_gaze.synth import SyntheticCorpus, generate_corpus, load_corpus
from or_gaze.tad import TadModel
from or_gaze.teamcomm import GazeEncoderModel

__all__ = [
    "ActivityClass",
    "ActivitySegment",
    "ArtifactCache",
    "CacheSettings",
    "DegenerateInputError",
    "EvalReport",
    "FrameRecord",
    "GazeBackend",
    "GazeEncoderModel",
    "GeometricBackend",
    "ModelStateError",
    "OrGazeError",
    "PhaseLabel",
    "PhaseRecognizer",
    "ReferenceBackend",
    "RoleClassifier",
    "RoleLabel",
    "RunConfig",
    "ScenarioConfig",
    "SyntheticCorpus",
    "TadModel",
    "cached_arrays",
    "generate_corpus",
    "load_corpus",
]

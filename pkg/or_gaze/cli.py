"""``or-gaze`` command line: corpus generation, training, inference, evaluation and reports.

Layout under ``--out``: trained models in ``models/``, per-video predictions in
``predictions/``, exported gaze features in ``features/``, reports as ``report.<task>.json``
and plots in ``plots/``.
"""

import argparse
import json
import logging
import sys
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from pydantic import ValidationError

from or_gaze import io
from or_gaze.backends import (
    GazeBackend,
    evaluate_backend,
    make_backend,
    predict_video,
    train_reference_backend,
)
from or_gaze.cache import ArtifactCache, CacheSettings
from or_gaze.metrics import EvalReport
from or_gaze.models import OrGazeError, SchemaViolationError, SegmentSet
from or_gaze.phases import (
    PhaseRecognizer,
    build_phase_inputs,
    evaluate_phases,
    infer_phase,
    save_phases,
    train_phase,
)
from or_gaze.plots import render_report
from or_gaze.roles import (
    RoleClassifier,
    evaluate_roles,
    predict_video_roles,
    role_dataset,
    save_roles,
    train_role,
)
from or_gaze.settings import RunConfig
from or_gaze.synth import CorpusVideo, SyntheticCorpus, generate_corpus, load_corpus, write_corpus
from or_gaze.tad import TadModel, evaluate_tad, tad_detect, tad_samples, train_tad
from or_gaze.teamcomm import (
    GazeEncoderModel,
    encoder_dataset,
    extract_clip_gazes,
    gaze_feature_table,
    mean_alignment,
    train_gaze_encoder,
)

log = getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

REFERENCE_CHECKPOINT = "gaze_reference"


class Run:
    """Resolved configuration, paths and shared resources of one invocation."""

    def __init__(self, args: argparse.Namespace, config: RunConfig):
        self.args = args
        self.config = config
        self.out = Path(args.out) if args.out else Path(".")
        self.force = args.force
        self.cache = (
            ArtifactCache(CacheSettings(cache_dir=args.cache_dir)) if args.cache_dir else None
        )
        self._corpus: Optional[SyntheticCorpus] = None
        self._backend: Optional[GazeBackend] = None

    def model_path(self, name: str) -> Path:
        return self.out / "models" / name

    def prediction_path(self, video_id: str, suffix: str) -> Path:
        return self.out / "predictions" / f"{video_id}{suffix}"

    def report_path(self, task: str) -> Path:
        return self.out / f"report.{task}.json"

    @property
    def corpus(self) -> SyntheticCorpus:
        if self._corpus is None:
            if not self.args.corpus:
                raise OrGazeError("--corpus is required for this command")
            self._corpus = load_corpus(self.args.corpus)
        return self._corpus

    def videos(self, default: str) -> list[CorpusVideo]:
        return self.corpus.split(self.args.split or default)

    @property
    def backend(self) -> GazeBackend:
        if self._backend is None:
            checkpoint = self.model_path(REFERENCE_CHECKPOINT)
            self._backend = make_backend(
                self.config.gaze, checkpoint if self.config.gaze.kind == "reference" else None
            )
        return self._backend

    def save_report(self, report: EvalReport) -> Path:
        path = report.save(self.report_path(report.task), force=self.force)
        print(json.dumps(report.metrics, indent=1, sort_keys=True))
        return path


# corpus and gaze backends


def synth_gen(run: Run) -> None:
    corpus = generate_corpus(run.config.scenario)
    write_corpus(corpus, run.out, force=run.force)


def gaze_train(run: Run) -> None:
    if run.config.gaze.kind != "reference":
        raise OrGazeError(f"the {run.config.gaze.kind} backend has nothing to train")
    backend = train_reference_backend(run.videos("train"), run.config.gaze)
    backend.save(run.model_path(REFERENCE_CHECKPOINT), force=run.force)


def gaze_eval(run: Run) -> None:
    report = evaluate_backend(
        run.backend, run.videos("test"), run.config.eval.point_estimate, cache=run.cache
    )
    run.save_report(report)


# roles


def role_train(run: Run) -> None:
    tracklets, labels = role_dataset(run.videos("train"), run.backend, cache=run.cache)
    classifier = train_role(tracklets, labels, run.config.role, run.config.gaze.heatmap_size)
    classifier.save(run.model_path("role"), force=run.force)


def role_infer(run: Run) -> None:
    classifier = RoleClassifier.load(run.model_path("role"))
    for video in run.videos("test"):
        frame_roles = predict_video_roles(video, classifier, run.backend, cache=run.cache)
        save_roles(
            video.video_id, frame_roles, run.prediction_path(video.video_id, ".roles.json"), run.force
        )


def role_eval(run: Run) -> None:
    classifier = RoleClassifier.load(run.model_path("role"))
    run.save_report(evaluate_roles(classifier, run.videos("test"), run.backend, cache=run.cache))


# phases


def _role_model(run: Run) -> Optional[RoleClassifier]:
    return None if run.config.phase.gt_roles else RoleClassifier.load(run.model_path("role"))


def _phase_inputs(run: Run, videos: Sequence[CorpusVideo]):
    return build_phase_inputs(videos, run.config.phase, run.backend, _role_model(run), run.cache)


def phase_train(run: Run) -> None:
    inputs = _phase_inputs(run, run.videos("train"))
    recognizer = train_phase(inputs, run.config.phase, run.config.gaze.heatmap_size)
    recognizer.save(run.model_path("phase"), force=run.force)


def phase_infer(run: Run) -> None:
    recognizer = PhaseRecognizer.load(run.model_path("phase"))
    for inputs in _phase_inputs(run, run.videos("test")):
        save_phases(
            inputs.video_id,
            infer_phase(recognizer, inputs),
            run.prediction_path(inputs.video_id, ".phases.json"),
            run.force,
        )


def phase_eval(run: Run) -> None:
    recognizer = PhaseRecognizer.load(run.model_path("phase"))
    inputs = _phase_inputs(run, run.videos("test"))
    run.save_report(evaluate_phases(recognizer, inputs, run.config.eval.boundary_window))


# team communication


def encoder_train(run: Run) -> None:
    clips, visual = encoder_dataset(
        run.videos("train"),
        run.backend,
        run.corpus.scenario,
        run.config.train_gaze_mode,
        cache=run.cache,
    )
    gaze_dim = run.backend.descriptor.feature_dim
    model = train_gaze_encoder(clips, visual, run.config.encoder, gaze_dim)
    log.info("mean f_g/f_v alignment after training: %.4f", mean_alignment(model, clips, visual))
    model.save(run.model_path("gaze_encoder"), force=run.force)


def encoder_extract(run: Run) -> None:
    model = GazeEncoderModel.load(run.model_path("gaze_encoder"))
    for video in run.videos("all"):
        predictions = predict_video(run.backend, video, cache=run.cache)
        clips = extract_clip_gazes(
            video, predictions, run.corpus.scenario, run.config.test_gaze_mode
        )
        table = gaze_feature_table(model, clips, run.corpus.scenario, video)
        io.save_features(table, run.out / "features", force=run.force)


def _encoder(run: Run) -> Optional[GazeEncoderModel]:
    if not run.config.tad.use_gaze:
        return None
    return GazeEncoderModel.load(run.model_path("gaze_encoder"))


def tad_train(run: Run) -> None:
    encoder = _encoder(run)
    samples = tad_samples(
        run.videos("train"),
        run.corpus.scenario,
        run.backend if encoder is not None else None,
        encoder,
        run.config.train_gaze_mode,
        keep_clips=not run.config.tad.freeze_encoder,
        cache=run.cache,
    )
    model = train_tad(samples, run.config.tad, encoder)
    model.save(run.model_path("tad"), force=run.force)


def _detections(run: Run) -> tuple[dict, dict]:
    model = TadModel.load(run.model_path("tad"))
    encoder = _encoder(run)
    samples = tad_samples(
        run.videos("test"),
        run.corpus.scenario,
        run.backend if encoder is not None else None,
        encoder,
        run.config.test_gaze_mode,
        keep_clips=model.net.encoder is not None,
        cache=run.cache,
    )
    detections = {s.video_id: tad_detect(model, s) for s in samples}
    ground_truth = {s.video_id: s.segments or [] for s in samples}
    return detections, ground_truth


def tad_infer(run: Run) -> None:
    detections, _ = _detections(run)
    for video in run.videos("test"):
        segment_set = SegmentSet(
            video_id=video.video_id,
            duration_s=video.duration_s,
            segments=detections[video.video_id],
        )
        io.save_segments(
            segment_set, run.prediction_path(video.video_id, io.DETECTION_SUFFIX), run.force
        )


def tad_eval(run: Run) -> None:
    detections, ground_truth = _detections(run)
    run.save_report(
        evaluate_tad(detections, ground_truth, run.config.tad, run.config.eval.tiou_thresholds)
    )


# validation, reports, schema


def validate(run: Run) -> int:
    root = run.args.annotations or run.args.corpus
    if not root:
        raise OrGazeError("--annotations is required")
    failures = io.validate_directory(root)
    for error in failures.values():
        log.error("%s", error)
    if failures:
        return EXIT_INVALID
    print(f"{root}: ok")
    return EXIT_OK


def report(run: Run) -> None:
    paths = sorted(run.out.glob("report.*.json"))
    if not paths:
        raise OrGazeError(f"{run.out}: no report.<task>.json files")
    for path in paths:
        loaded = EvalReport.load(path)
        print(f"{loaded.task}: {json.dumps(loaded.metrics, sort_keys=True)}")
        if run.args.plots:
            render_report(loaded, run.out / "plots", force=run.force)


def schema(run: Run) -> None:
    print(json.dumps(RunConfig.model_json_schema(), indent=1))


COMMANDS: dict[tuple[str, ...], Callable[[Run], Optional[int]]] = {
    ("synth-gen",): synth_gen,
    ("gaze", "train"): gaze_train,
    ("gaze", "eval"): gaze_eval,
    ("role", "train"): role_train,
    ("role", "infer"): role_infer,
    ("role", "eval"): role_eval,
    ("phase", "train"): phase_train,
    ("phase", "infer"): phase_infer,
    ("phase", "eval"): phase_eval,
    ("teamcomm", "train-encoder"): encoder_train,
    ("teamcomm", "extract"): encoder_extract,
    ("teamcomm", "train-tad"): tad_train,
    ("teamcomm", "infer"): tad_infer,
    ("teamcomm", "eval"): tad_eval,
    ("validate",): validate,
    ("report",): report,
    ("schema",): schema,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="overrides every module seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--corpus", help="corpus directory written by synth-gen")
    parser.add_argument("--split", choices=("train", "test", "all"), help="videos to use")
    parser.add_argument("--cache-dir", help="cache gaze-backend predictions here")
    parser.add_argument("--backend", choices=("geometric", "reference"))
    parser.add_argument("--gaze-mode", choices=("global", "local"), help="train and test mode")
    parser.add_argument("--train-gaze-mode", choices=("global", "local"))
    parser.add_argument("--test-gaze-mode", choices=("global", "local"))
    parser.add_argument("--annotations", help="directory to validate")
    parser.add_argument("--plots", action="store_true", help="render report curves to PNG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="or-gaze", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    groups: dict[str, argparse._SubParsersAction] = {}
    for key in COMMANDS:
        if len(key) == 1:
            _common(commands.add_parser(key[0]))
            continue
        if key[0] not in groups:
            groups[key[0]] = commands.add_parser(key[0]).add_subparsers(
                dest="action", required=True
            )
        _common(groups[key[0]].add_parser(key[1]))
    return parser


def overrides_from(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend:
        overrides["gaze"] = {"kind": args.backend}
    if args.gaze_mode:
        overrides["train_gaze_mode"] = overrides["test_gaze_mode"] = args.gaze_mode
    if args.train_gaze_mode:
        overrides["train_gaze_mode"] = args.train_gaze_mode
    if args.test_gaze_mode:
        overrides["test_gaze_mode"] = args.test_gaze_mode
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    key = (args.command,) + ((args.action,) if getattr(args, "action", None) else ())
    try:
        config = RunConfig.load(args.config, overrides_from(args))
    except (ValidationError, json.JSONDecodeError) as e:
        log.error("%s: invalid configuration\n%s", args.config or "<flags>", e)
        return EXIT_INVALID
    except OSError as e:
        log.error("%s", e)
        return EXIT_RUNTIME

    try:
        status = COMMANDS[key](Run(args, config))
    except (SchemaViolationError, ValidationError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except (OrGazeError, ValueError, KeyError, OSError, RuntimeError) as e:
        log.error("%s: %s", " ".join(key), e)
        return EXIT_RUNTIME
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import BackendError
from .cascade import CascadeError
from .config import ConfigError, load_config
from .corpus import IngestError, TopicValidationError, ingest_topics
from .definitions import GenerationError, TemplateError
from .evaluation.baseline import rank_topics, select_hard_subset
from .evaluation.metrics import MetricError
from .evaluation.report import ReportRow, render_report
from .export import export_training_data
from .pipeline import STAGES, Pipeline, StageError
from .retrieval import RetrievalError
from .scoring import ScoringError, SerializationError

logger = logging.getLogger("hcdcr")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_VALIDATION = 0, 2, 3, 4

BACKEND_ERRORS = (BackendError, GenerationError, ScoringError, RetrievalError, CascadeError)
VALIDATION_ERRORS = (IngestError, TopicValidationError, MetricError, SerializationError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ConfigError, TemplateError)):
        return EXIT_CONFIG
    if isinstance(exc, BACKEND_ERRORS):
        return EXIT_BACKEND
    if isinstance(exc, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    raise exc


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.output_dir"] = args.out
    return load_config(args.config, overrides)


def cmd_stage(args) -> int:
    pipe = Pipeline(_config(args), resume=not args.fresh)
    manifest = pipe.run(until=args.stage)
    print(json.dumps(manifest["counts"], sort_keys=True))
    if args.stage == "evaluate":
        print(pipe.path("report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_hard_subset(args) -> int:
    cfg = _config(args)
    topics = ingest_topics(cfg.data.topics)
    ranking = rank_topics(topics, cfg.evaluation.baseline_tau_c)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fractions = args.fraction or cfg.evaluation.hard_fractions
    scores = {s.topic_id: s.baseline_conll_f1 for s in ranking}
    for frac in fractions:
        ids = select_hard_subset(topics, frac, cfg.evaluation.baseline_tau_c, ranking)
        path = out / f"hard_{round(frac * 100)}.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("topic_id\tbaseline_conll_f1\n")
            for tid in ids:
                fh.write(f"{tid}\t{scores[tid]:.6f}\n")
        print(f"{path}: {len(ids)} topics")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _config(args)
    if args.with_definitions and not cfg.uses_definitions:
        raise ConfigError("--with-definitions needs definitions.mode other than none")
    pipe = Pipeline(cfg)
    topics = pipe.ingest()
    definitions = pipe.define_singleton() if args.with_definitions else None
    path = args.output or Path(cfg.run.output_dir) / f"train_{args.format}.jsonl"
    export_training_data(topics, path, args.format, definitions)
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "evaluation.json"
        try:
            evaluation = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"no evaluation at {path}: {exc}") from exc
        subsets = evaluation["subsets"]
        wanted = [args.subset] if args.subset else list(subsets)
        for subset in wanted:
            if subset not in subsets:
                raise ConfigError(f"{path} has no subset {subset!r}")
            name = Path(run_dir).name if args.subset else f"{Path(run_dir).name} ({subset})"
            rows.append(ReportRow.from_scores(name, subsets[subset]["macro"]))
    text, csv_text = render_report(rows)
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="override run.output_dir")

    parser = argparse.ArgumentParser(prog="hcdcr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the pipeline through the {stage} stage")
        p.add_argument("--fresh", action="store_true", help="recompute stages even if outputs exist")
        p.set_defaults(func=cmd_stage, stage=stage)
    p = sub.add_parser("run", parents=[common], help="run the full pipeline")
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_stage, stage="evaluate")

    p = sub.add_parser("hard-subset", parents=[common], help="rank topics by the edit-distance baseline")
    p.add_argument("--fraction", type=float, action="append")
    p.set_defaults(func=cmd_hard_subset)

    p = sub.add_parser("export-training-data", parents=[common], help="write scorer training files")
    p.add_argument("--format", choices=("chatml", "marker"), default="chatml")
    p.add_argument("--with-definitions", action="store_true")
    p.add_argument("--output")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="render evaluation tables from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--subset", help="only this subset, e.g. 'hard 10'")
    p.add_argument("--csv", help="also write CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line front end
─────────────────────────────────────────────────────────────────────────────
    python -m app.cli generate  --seed 7 --out data/synth.csv
    python -m app.cli train     --dataset data/synth.csv --detector DenseAE --seed 7 --out model.jsonl
    python -m app.cli score     --model model.jsonl --series data/synth.csv --fault-id 1 --run-id 3 --out s.csv
    python -m app.cli evaluate  --scores s.csv --labels data/synth.csv --fault-id 1 --run-id 3
    python -m app.cli benchmark --config bench.ini --seed 7 --out bench_out
    python -m app.cli rank      --results bench_out/results.jsonl --out ranking.csv

Config files are INI. Sections:
    [dataset]    csv, schema (default|tep), validation_fraction
    [synthetic]  any SynthConfig field
    [detectors]  names = comma list; every other key is a detector override
    [grid]       key = comma list of candidates
    [benchmark]  seed, budget_seconds, folds, exclusion_radius, workers, out_dir, database_url
Flags override file values.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 partial benchmark failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.errors import BenchmarkError, ConfigError, DataError, SchemaError
from app.schemas import GridSpec, RunConfig, SynthConfig, Variant
from app.services import benchproto, detectors, evalkit
from app.services.dataio import (
    CsvSchema,
    RunRecord,
    load_runs_csv,
    split_dataset,
    synth_dataset,
    write_runs_csv,
)
from app.services.result_store import ResultStore

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ── Config ───────────────────────────────────────────────────────────────────

def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def _split_list(text: str) -> list[Any]:
    return [_coerce(part.strip()) for part in text.split(",") if part.strip()]


def parse_variants(names: Sequence[str]) -> list[Variant]:
    variants = []
    for name in names:
        try:
            variants.append(Variant(name))
        except ValueError as exc:
            valid = ", ".join(v.value for v in Variant)
            raise ConfigError(f"unknown detector {name!r}; registered: {valid}") from exc
    return variants


def load_run_config(path: str | Path | None, overrides: dict[str, Any], *, require_seed: bool = True) -> RunConfig:
    fields: dict[str, Any] = {}
    synthetic: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case (SynthConfig has T and D)
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        if parser.has_section("dataset"):
            section = parser["dataset"]
            if "csv" in section:
                fields["dataset_csv"] = section["csv"]
            if "schema" in section:
                fields["dataset_schema"] = section["schema"]
            if "validation_fraction" in section:
                fields["validation_fraction"] = _coerce(section["validation_fraction"])
        if parser.has_section("synthetic"):
            synthetic = {key: _coerce(value) for key, value in parser["synthetic"].items()}
        if parser.has_section("detectors"):
            section = dict(parser["detectors"])
            if "names" in section:
                fields["detectors"] = [str(n) for n in _split_list(section.pop("names"))]
            fields["detector_overrides"] = {key: _coerce(value) for key, value in section.items()}
        if parser.has_section("grid"):
            fields["grid"] = {key: _split_list(value) for key, value in parser["grid"].items()}
        if parser.has_section("benchmark"):
            fields.update({key: _coerce(value) for key, value in parser["benchmark"].items()})
    fields.update({key: value for key, value in overrides.items() if value is not None})
    if "seed" not in fields:
        if require_seed:
            raise ConfigError("a seed is required (--seed or [benchmark] seed)")
        fields["seed"] = 0
    if overrides.get("seed") is not None:
        synthetic["seed"] = overrides["seed"]
    synthetic.setdefault("seed", fields["seed"])
    if "detectors" in fields:
        fields["detectors"] = parse_variants(fields["detectors"])
    try:
        return RunConfig(synthetic=SynthConfig(**synthetic), **fields)
    except (ValidationError, TypeError) as exc:
        if isinstance(exc, ValidationError):
            error = exc.errors()[0]
            raise ConfigError(f"invalid config field {'.'.join(map(str, error['loc']))}: {error['msg']}") from exc
        raise ConfigError(f"invalid config: {exc}") from exc


def _schema(name: str) -> CsvSchema:
    return CsvSchema.tep() if name == "tep" else CsvSchema()


def _load_runs(config: RunConfig) -> list[RunRecord]:
    if config.dataset_csv:
        return load_runs_csv(config.dataset_csv, _schema(config.dataset_schema))
    return synth_dataset(config.synthetic)


def _select_run(runs: Sequence[RunRecord], fault_id: int | None, run_id: int | None) -> RunRecord:
    matches = [
        r for r in runs if (fault_id is None or r.fault_id == fault_id) and (run_id is None or r.run_id == run_id)
    ]
    if len(matches) != 1:
        raise ConfigError(
            f"--fault-id {fault_id} / --run-id {run_id} select {len(matches)} runs; narrow the selection to one"
        )
    return matches[0]


# ── Commands ─────────────────────────────────────────────────────────────────

def cmd_generate(args: argparse.Namespace) -> int:
    overrides = {
        "runs": args.runs,
        "normal_runs": args.normal_runs,
        "T": args.T,
        "D": args.D,
        "fault_kind": args.fault_kind,
        "fault_onset": args.onset,
        "fault_magnitude": args.magnitude,
    }
    config = load_run_config(args.config, {"seed": args.seed}, require_seed=False)
    try:
        synth = SynthConfig(**{**config.synthetic.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})
    except ValidationError as exc:
        raise ConfigError(f"invalid synthetic config: {exc.errors()[0]['msg']}") from exc
    runs = synth_dataset(synth)
    out = Path(args.out or Path(config.out_dir) / "dataset.csv")
    write_runs_csv(runs, out)
    faults: dict[int, int] = {}
    for run in runs:
        faults[run.fault_id] = faults.get(run.fault_id, 0) + 1
    summary = ", ".join(f"fault {fid}: {n} runs" for fid, n in sorted(faults.items()))
    print(f"wrote {len(runs)} runs (T={synth.T}, D={synth.D}) to {out}; {summary}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(
        args.config, {"seed": args.seed, "dataset_csv": args.dataset, "dataset_schema": args.schema}
    )
    variant = parse_variants([args.detector])[0]
    runs = _load_runs(config)
    split = split_dataset(runs, config.validation_fraction)
    overrides = dict(config.detector_overrides)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    spec = benchproto.detector_spec(variant, overrides, config.seed)
    model = detectors.fit(spec, split)
    out = Path(args.out or Path(config.out_dir) / f"{variant.value}.model.jsonl")
    detectors.save_model(model, out)
    print(f"trained {variant.value} on {len(split.train)} runs; model written to {out}")
    return EXIT_OK


def _write_scores(scores: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"timestep": np.arange(scores.shape[0]), "score": scores})
    frame.to_csv(path, index=False, lineterminator="\n")


def cmd_score(args: argparse.Namespace) -> int:
    model = detectors.load_model(args.model)
    run = _select_run(load_runs_csv(args.series, _schema(args.schema or "default")), args.fault_id, args.run_id)
    result = detectors.score(model, run.series)
    _write_scores(result.scores, args.out)
    print(f"scored {len(result)} steps (warm-up {result.warmup}) to {args.out}")
    return EXIT_OK


def _read_scores(path: str | Path) -> np.ndarray:
    frame = pd.read_csv(path)
    if "score" not in frame.columns:
        raise SchemaError(f"{path}: missing column 'score'")
    return frame["score"].to_numpy(dtype=np.float64)


def _read_labels(args: argparse.Namespace) -> np.ndarray:
    header = pd.read_csv(args.labels, nrows=0).columns
    schema = _schema(args.schema or "default")
    if schema.fault_column in header:
        run = _select_run(load_runs_csv(args.labels, schema), args.fault_id, args.run_id)
        return run.series.labels
    if "label" not in header:
        raise SchemaError(f"{args.labels}: missing column 'label'")
    return pd.read_csv(args.labels)["label"].to_numpy()


def cmd_evaluate(args: argparse.Namespace) -> int:
    scores = _read_scores(args.scores)
    labels = _read_labels(args)
    if scores.shape[0] != labels.shape[0]:
        raise DataError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    report = evalkit.evaluate(scores, labels)
    print(json.dumps(report.model_dump(), indent=2))
    if args.curve_out:
        evalkit.write_pr_curve_csv(evalkit.pr_curve(scores, labels), args.curve_out)
    return EXIT_OK


def _save_history(url: str, results: Sequence, rows: Sequence, seed: int) -> None:
    from app.database import make_session_factory

    store = ResultStore()
    with make_session_factory(url)() as db:
        for result in results:
            store.save_benchmark(db, result, seed=seed)
        store.save_ranking(db, rows)
        db.commit()


def cmd_benchmark(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "budget_seconds": args.budget_seconds,
        "out_dir": args.out,
        "dataset_csv": args.dataset,
        "workers": args.workers,
        "folds": args.folds,
        "database_url": args.database_url,
        "dataset_schema": args.schema,
    }
    if args.detectors:
        overrides["detectors"] = [n.strip() for n in args.detectors.split(",") if n.strip()]
    config = load_run_config(args.config, overrides)
    if not config.detectors:
        raise ConfigError("no detectors selected")
    split = split_dataset(_load_runs(config), config.validation_fraction)
    plan = benchproto.make_folds(split.test, config.folds, config.exclusion_radius)
    logger.info(
        "Benchmarking %d detectors: %d train / %d validation / %d test runs, %d folds",
        len(config.detectors), len(split.train), len(split.validation), len(split.test), plan.K,
    )
    grids = [
        GridSpec(
            method=variant,
            candidates=config.grid,
            budget_seconds=config.budget_seconds,
            base=config.detector_overrides,
        )
        for variant in config.detectors
    ]
    results, failures = benchproto.benchmark_methods(grids, split, plan, seed=config.seed, workers=config.workers)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    benchproto.persist_results(results, out / "results.jsonl")
    rows = benchproto.rank_results(results) if results else []
    benchproto.export_ranking_csv(rows, out / "ranking.csv")
    benchproto.persist_rankings(rows, out / "rankings.jsonl")
    if config.database_url:
        _save_history(config.database_url, results, rows, config.seed)
    for row in rows:
        print(f"{row.total_rank:>3}  {row.method:<16} F1 {row.f1:.4f} ({row.f1_rank})  AUPRC {row.auprc:.4f} ({row.auprc_rank})")
    for method, message in failures.items():
        print(f"FAILED {method}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    rows = benchproto.rank_results(benchproto.load_results(args.results))
    benchproto.export_ranking_csv(rows, args.out)
    print(f"ranked {len(rows)} methods to {args.out}")
    return EXIT_OK


# ── Entry point ──────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anomaly-bench", description="Deep anomaly detection benchmark toolkit")
    parser.add_argument(
        "--log-level", type=str.upper, choices=LOG_LEVELS, default=os.getenv("BENCH_LOG_LEVEL", "INFO").upper()
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--schema", choices=["default", "tep"])

    def selection(p: argparse.ArgumentParser) -> None:
        p.add_argument("--fault-id", type=int)
        p.add_argument("--run-id", type=int)

    gen = sub.add_parser("generate", help="write a synthetic dataset CSV")
    common(gen)
    gen.add_argument("--out")
    gen.add_argument("--runs", type=int)
    gen.add_argument("--normal-runs", type=int)
    gen.add_argument("--T", type=int)
    gen.add_argument("--D", type=int)
    gen.add_argument("--fault-kind")
    gen.add_argument("--onset", type=int)
    gen.add_argument("--magnitude", type=float)
    gen.set_defaults(handler=cmd_generate)

    train = sub.add_parser("train", help="fit one detector and write a model dump")
    common(train)
    train.add_argument("--dataset")
    train.add_argument("--detector", required=True)
    train.add_argument("--epochs", type=int)
    train.add_argument("--out")
    train.set_defaults(handler=cmd_train)

    score = sub.add_parser("score", help="score one run with a saved model")
    common(score)
    selection(score)
    score.add_argument("--model", required=True)
    score.add_argument("--series", required=True)
    score.add_argument("--out", required=True)
    score.set_defaults(handler=cmd_score)

    evaluate = sub.add_parser("evaluate", help="best F1 and AUPRC of a score file")
    common(evaluate)
    selection(evaluate)
    evaluate.add_argument("--scores", required=True)
    evaluate.add_argument("--labels", required=True)
    evaluate.add_argument("--curve-out")
    evaluate.set_defaults(handler=cmd_evaluate)

    bench = sub.add_parser("benchmark", help="grid search every detector and rank them")
    common(bench)
    bench.add_argument("--dataset")
    bench.add_argument("--budget-seconds", type=float)
    bench.add_argument("--out")
    bench.add_argument("--detectors")
    bench.add_argument("--workers", type=int)
    bench.add_argument("--folds", type=int)
    bench.add_argument("--database-url")
    bench.set_defaults(handler=cmd_benchmark)

    rank = sub.add_parser("rank", help="rank the methods of a results file")
    rank.add_argument("--results", required=True)
    rank.add_argument("--out", required=True)
    rank.set_defaults(handler=cmd_rank)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level not in LOG_LEVELS:
        print(f"error: unknown log level {args.log_level!r} (choose from {', '.join(LOG_LEVELS)})", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BenchmarkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

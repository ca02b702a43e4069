"""
Evaluation protocol
─────────────────────────────────────────────────────────────────────────────
Test runs are cut into K contiguous folds. For every fold i, each grid
configuration is scored on fold i, the best-F1 configuration is kept, and it
is evaluated (micro-aggregated) on the folds more than r positions away.
Every configuration is fitted once and scores every test run once; folds only
regroup those scores.

Grid cells run in batches on a thread pool and are merged in config order,
so results do not depend on scheduling. The wall-clock budget is checked
between batches and the first batch always runs.
"""
from __future__ import annotations

import itertools
import json
import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.errors import BenchmarkError, ConfigError, ContractError, ParseError, SchemaError
from app.schemas import (
    BenchmarkResult,
    DetectorSpec,
    FoldOutcome,
    GridSpec,
    MethodScore,
    RankingRow,
    Variant,
    WindowSpec,
)
from app.services import detectors
from app.services.dataio import DatasetSplit
from app.services.evalkit import evaluate_runs

logger = logging.getLogger(__name__)

RESULTS_FORMAT = "anomaly-bench-results"
RANKING_FORMAT = "anomaly-bench-ranking"
FORMAT_VERSION = 1
RANKING_COLUMNS = [
    "Method",
    "Method Type",
    "F1-Score",
    "F1-Score Ranking",
    "AUPRC",
    "AUPRC Ranking",
    "Total Ranking",
]


@dataclass(frozen=True)
class FoldPlan:
    folds: list[list[int]]
    radius: int = 1

    @property
    def K(self) -> int:
        return len(self.folds)


def make_folds(test_runs: Sequence[Any], K: int = 5, radius: int = 1) -> FoldPlan:
    """Contiguous blocks of run indices; the first len % K folds get one extra run."""
    count = len(test_runs)
    if K < 1 or count < K:
        raise ContractError(f"cannot split {count} test runs into {K} folds")
    base, extra = divmod(count, K)
    folds, start = [], 0
    for i in range(K):
        size = base + (1 if i < extra else 0)
        folds.append(list(range(start, start + size)))
        start += size
    return FoldPlan(folds=folds, radius=radius)


def eval_folds_for(i: int, K: int, r: int) -> set[int]:
    if not 0 <= i < K:
        raise ContractError(f"fold index {i} outside [0, {K})")
    return {j for j in range(K) if abs(j - i) > r}


def expand_grid(grid: GridSpec) -> list[dict[str, Any]]:
    """Cartesian product of the candidate lists in key order, merged over grid.base."""
    keys = list(grid.candidates)
    for key in keys:
        if not grid.candidates[key]:
            raise ConfigError(f"grid candidate list for {key!r} is empty")
    return [
        {**grid.base, **dict(zip(keys, values))}
        for values in itertools.product(*(grid.candidates[k] for k in keys))
    ]


def detector_spec(method: Variant, config: dict[str, Any], seed: int) -> DetectorSpec:
    """Build a DetectorSpec from flat config keys; `window` and `stride` shape the WindowSpec."""
    fields = {"seed": seed, **config}
    window = {}
    if "window" in fields:
        window["width"] = fields.pop("window")
    if "stride" in fields:
        window["stride"] = fields.pop("stride")
    try:
        return DetectorSpec(variant=method, window=WindowSpec(**window), **fields)
    except ValidationError as exc:
        raise ConfigError(f"invalid {method.value} configuration {config}: {exc.errors()[0]['msg']}") from exc


def _score_config(
    method: Variant, config: dict[str, Any], split: DatasetSplit, seed: int
) -> list[np.ndarray]:
    model = detectors.fit(detector_spec(method, config, seed), split)
    return [detectors.score(model, run.series).scores for run in split.test]


def _fold_report(fold_runs: Sequence[int], scores: list[np.ndarray], split: DatasetSplit):
    return evaluate_runs((scores[i], split.test[i].series.labels) for i in fold_runs)


def grid_search(
    method: Variant,
    grid: GridSpec,
    data: DatasetSplit,
    plan: FoldPlan,
    *,
    seed: int = 0,
    workers: int = 1,
    clock: Callable[[], float] = time.monotonic,
) -> BenchmarkResult:
    configs = expand_grid(grid)
    evaluation = [eval_folds_for(i, plan.K, plan.radius) for i in range(plan.K)]
    if any(not folds for folds in evaluation):
        raise ContractError(f"{plan.K} folds leave no evaluation fold at exclusion radius {plan.radius}")

    started = clock()
    scored: list[tuple[dict[str, Any], list[np.ndarray]]] = []
    warnings: list[str] = []
    attempted = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while attempted < len(configs):
            if attempted and clock() - started >= grid.budget_seconds:
                message = f"budget of {grid.budget_seconds:g}s exhausted after {attempted} of {len(configs)} configs"
                logger.warning("%s: %s", method.value, message)
                warnings.append(message)
                break
            batch = configs[attempted : attempted + max(1, workers)]
            futures = [pool.submit(_score_config, method, config, data, seed) for config in batch]
            for config, future in zip(batch, futures):
                try:
                    scored.append((config, future.result()))
                except BenchmarkError as exc:
                    logger.warning("%s: config %s failed: %s", method.value, config, exc)
                    warnings.append(f"config {config} failed: {exc}")
            attempted += len(batch)
    if not scored:
        raise ContractError(f"{method.value}: every grid configuration failed")

    folds: list[FoldOutcome] = []
    for i, eval_set in enumerate(evaluation):
        selection = [_fold_report(plan.folds[i], scores, data).best_f1 for _, scores in scored]
        best = int(np.argmax(selection))
        config, scores = scored[best]
        eval_runs = [run for j in sorted(eval_set) for run in plan.folds[j]]
        report = _fold_report(eval_runs, scores, data)
        folds.append(
            FoldOutcome(
                fold=i,
                selected_config=config,
                selection_f1=selection[best],
                best_f1=report.best_f1,
                auprc=report.auprc,
            )
        )
        logger.info("%s fold %d: selected %s (F1 %.4f), eval F1 %.4f", method.value, i, config, selection[best], report.best_f1)

    return BenchmarkResult(
        method=method.value,
        method_type=detectors.method_type(method),
        folds=folds,
        configs_evaluated=len(scored),
        configs_total=len(configs),
        warnings=warnings,
    )


def benchmark_methods(
    grids: Sequence[GridSpec],
    data: DatasetSplit,
    plan: FoldPlan,
    *,
    seed: int = 0,
    workers: int = 1,
) -> tuple[list[BenchmarkResult], dict[str, str]]:
    """Run grid_search per method; a failing method is recorded and the rest continue."""
    results: list[BenchmarkResult] = []
    failures: dict[str, str] = {}
    for grid in grids:
        try:
            results.append(grid_search(grid.method, grid, data, plan, seed=seed, workers=workers))
        except BenchmarkError as exc:
            logger.warning("%s failed: %s", grid.method.value, exc)
            failures[grid.method.value] = str(exc)
        except Exception as exc:
            logger.exception("%s crashed", grid.method.value)
            failures[grid.method.value] = f"{type(exc).__name__}: {exc}"
    return results, failures


# ── Ranking ──────────────────────────────────────────────────────────────────

def _competition_ranks(values: Sequence[float], descending: bool) -> list[int]:
    return [1 + sum((other > v) if descending else (other < v) for other in values) for v in values]


def rank_methods(rows: Sequence[MethodScore | tuple[str, float, float]]) -> list[RankingRow]:
    scores = [row if isinstance(row, MethodScore) else MethodScore(method=row[0], f1=row[1], auprc=row[2]) for row in rows]
    if not scores:
        raise ContractError("rank_methods needs at least one row")
    f1_ranks = _competition_ranks([s.f1 for s in scores], descending=True)
    auprc_ranks = _competition_ranks([s.auprc for s in scores], descending=True)
    means = [(a + b) / 2.0 for a, b in zip(f1_ranks, auprc_ranks)]
    totals = _competition_ranks(means, descending=False)
    ranked = [
        RankingRow(
            method=s.method,
            method_type=s.method_type,
            f1=s.f1,
            f1_rank=f,
            auprc=s.auprc,
            auprc_rank=a,
            total_rank=t,
        )
        for s, f, a, t in zip(scores, f1_ranks, auprc_ranks, totals)
    ]
    return sorted(ranked, key=lambda row: (row.total_rank, row.method))


def rank_results(results: Sequence[BenchmarkResult]) -> list[RankingRow]:
    return rank_methods(
        [MethodScore(method=r.method, method_type=r.method_type, f1=r.best_f1, auprc=r.auprc) for r in results]
    )


# ── Persistence ──────────────────────────────────────────────────────────────

def _header(kind: str) -> str:
    return json.dumps({"format": kind, "version": FORMAT_VERSION})


def _records(path: str | Path, kind: str) -> list[tuple[int, dict[str, Any]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid header ({exc.msg})", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != kind or header.get("version") != FORMAT_VERSION:
        raise ParseError(f"not a {kind} v{FORMAT_VERSION} file", line=1)
    records = []
    for index, text in enumerate(lines[1:]):
        if not text.strip():
            continue
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=index + 2, record=index) from exc
        if not isinstance(payload, dict):
            raise ParseError("expected a JSON object", line=index + 2, record=index)
        records.append((index, payload))
    return records


def persist_results(results: Sequence[BenchmarkResult], path: str | Path) -> None:
    """One line per (method, fold); a result without folds is written as one fold-less line."""
    lines = [_header(RESULTS_FORMAT)]
    for result in results:
        shared = result.model_dump(exclude={"folds", "best_f1", "auprc"})
        for fold in result.folds or [None]:
            lines.append(json.dumps({**shared, "fold": None if fold is None else fold.model_dump()}))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def load_results(path: str | Path) -> list[BenchmarkResult]:
    grouped: dict[str, dict[str, Any]] = {}
    for index, payload in _records(path, RESULTS_FORMAT):
        try:
            method = payload["method"]
            entry = grouped.setdefault(
                method, {**{k: v for k, v in payload.items() if k != "fold"}, "folds": []}
            )
            if payload["fold"] is not None:
                entry["folds"].append(FoldOutcome.model_validate(payload["fold"]))
        except (KeyError, TypeError, ValidationError) as exc:
            raise ParseError(f"malformed result record: {exc}", line=index + 2, record=index) from exc
    return [BenchmarkResult.model_validate(entry) for entry in grouped.values()]


def persist_rankings(rows: Sequence[RankingRow], path: str | Path) -> None:
    lines = [_header(RANKING_FORMAT)] + [row.model_dump_json() for row in rows]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def load_rankings(path: str | Path) -> list[RankingRow]:
    rows = []
    for index, payload in _records(path, RANKING_FORMAT):
        try:
            rows.append(RankingRow.model_validate(payload))
        except ValidationError as exc:
            raise ParseError(f"malformed ranking record: {exc.errors()[0]['msg']}", line=index + 2, record=index) from exc
    return rows


def export_ranking_csv(rows: Sequence[RankingRow], path: str | Path) -> None:
    frame = pd.DataFrame(
        [[r.method, r.method_type, r.f1, r.f1_rank, r.auprc, r.auprc_rank, r.total_rank] for r in rows],
        columns=RANKING_COLUMNS,
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def load_ranking_csv(path: str | Path) -> list[RankingRow]:
    frame = pd.read_csv(path, keep_default_na=False)
    missing = [c for c in RANKING_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing ranking columns {missing}")
    return [
        RankingRow(
            method=str(rec["Method"]),
            method_type=str(rec["Method Type"]),
            f1=float(rec["F1-Score"]),
            f1_rank=int(rec["F1-Score Ranking"]),
            auprc=float(rec["AUPRC"]),
            auprc_rank=int(rec["AUPRC Ranking"]),
            total_rank=int(rec["Total Ranking"]),
        )
        for rec in frame.to_dict(orient="records")
    ]

"""
Pointwise detection metrics
─────────────────────────────────────────────────────────────────────────────
A time step is predicted anomalous when its score is strictly greater than the
threshold. Scores are sorted descending and tied scores form one block, so an
operating point always admits a whole tie block or none of it.

Thresholds reported for an operating point are midpoints between adjacent
distinct scores; the all-positive point uses min(score) - 1.
AUPRC uses the step-wise (average precision) sum Σ precision·Δrecall.
Several runs are evaluated by pooling their time steps (micro-aggregation).
"""
from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from app.errors import ContractError, MetricUndefinedError
from app.schemas import MetricReport, PRCurve, PRPoint


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class _OperatingPoints:
    tp: np.ndarray
    predicted: np.ndarray
    thresholds: np.ndarray
    positives: int


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores for {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be binary (0/1)")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    scores, labels = _check(scores, labels)
    predicted = scores > threshold
    positive = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & positive)),
        fp=int(np.sum(predicted & ~positive)),
        tn=int(np.sum(~predicted & ~positive)),
        fn=int(np.sum(~predicted & positive)),
    )


def f1(counts: ConfusionCounts) -> float:
    denominator = 2 * counts.tp + counts.fn + counts.fp
    return 0.0 if denominator == 0 else 2.0 * counts.tp / denominator


def _operating_points(scores, labels) -> _OperatingPoints:
    scores, labels = _check(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise MetricUndefinedError("no positive labels; best F1 and AUPRC are undefined")
    order = np.argsort(-scores, kind="stable")
    ranked = scores[order]
    block_end = np.flatnonzero(np.append(ranked[:-1] != ranked[1:], True))
    tp = np.cumsum(labels[order])[block_end]
    distinct = ranked[block_end]
    thresholds = np.append((distinct[:-1] + distinct[1:]) / 2.0, distinct[-1] - 1.0)
    return _OperatingPoints(tp=tp, predicted=block_end + 1, thresholds=thresholds, positives=positives)


def best_f1(scores, labels) -> tuple[float, float]:
    """(threshold, f1) maximizing F1; ties resolve to the highest threshold."""
    points = _operating_points(scores, labels)
    fp = points.predicted - points.tp
    fn = points.positives - points.tp
    values = 2.0 * points.tp / (2.0 * points.tp + fn + fp)
    best = 0.0
    threshold = float(points.thresholds[0] + 2.0)
    for value, candidate in zip(values, points.thresholds):
        if value > best:
            best, threshold = float(value), float(candidate)
    return threshold, best


def _curve_arrays(points: _OperatingPoints) -> tuple[np.ndarray, np.ndarray]:
    return points.tp / points.positives, points.tp / points.predicted


def pr_curve(scores, labels) -> PRCurve:
    points = _operating_points(scores, labels)
    recall, precision = _curve_arrays(points)
    return PRCurve(
        points=[
            PRPoint(recall=float(r), precision=float(p), threshold=float(t))
            for r, p, t in zip(recall, precision, points.thresholds)
        ]
    )


def _step_area(recall: np.ndarray, precision: np.ndarray) -> float:
    return float(np.sum(precision * np.diff(recall, prepend=0.0)))


def auprc(curve: PRCurve) -> float:
    recall = np.array([p.recall for p in curve.points])
    precision = np.array([p.precision for p in curve.points])
    return _step_area(recall, precision)


def evaluate(scores, labels) -> MetricReport:
    threshold, best = best_f1(scores, labels)
    recall, precision = _curve_arrays(_operating_points(scores, labels))
    return MetricReport(best_f1=best, best_threshold=threshold, auprc=min(1.0, _step_area(recall, precision)))


def evaluate_runs(pairs: Iterable[tuple[Sequence[float], Sequence[int]]]) -> MetricReport:
    """Pool the time steps of several (scores, labels) runs into one report."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate_runs needs at least one run")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s, _ in pairs])
    labels = np.concatenate([np.asarray(lab).ravel() for _, lab in pairs])
    return evaluate(scores, labels)


def write_pr_curve_csv(curve: PRCurve, path: str | Path) -> None:
    frame = pd.DataFrame([p.model_dump() for p in curve.points], columns=["recall", "precision", "threshold"])
    frame.to_csv(path, index=False, lineterminator="\n")

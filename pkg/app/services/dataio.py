"""
Dataset ingestion and preparation
─────────────────────────────────────────────────────────────────────────────
Runs in the plant-dataset CSV schema (one row per time step, grouped by
fault id and run id), training-only z-scoring, sliding windows, the two input
masking schemes, windowed signature matrices, and a seeded synthetic
process-with-faults generator that writes the same schema.

Synthetic process: x_t = A x_{t-1} + process noise, observed with additive
measurement noise. A is a random orthogonal matrix (QR of a Gaussian draw
seeded by process_seed) scaled by 0.9, so every eigenvalue has modulus 0.9
and the stationary per-feature std is
sqrt(process_std² / (1 - 0.81) + measurement_std²).
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from app.errors import ConfigError, ContractError, DataError, SchemaError
from app.schemas import SynthConfig, WindowSpec

logger = logging.getLogger(__name__)

SPECTRAL_RADIUS = 0.9
BURN_IN_STEPS = 100
FAULT_IDS: dict[str, int] = {"none": 0, "step": 1, "drift": 2, "stuck": 3, "noise": 4}
MIXED_CYCLE = ("step", "drift", "stuck", "noise")
GENAD_FOLDS = 5


# ── Types ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SeriesMatrix:
    values: np.ndarray
    dt_minutes: float = 3.0
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"series must be a non-empty T×D matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("series contains non-finite values")
        if self.dt_minutes <= 0:
            raise DataError(f"dt_minutes must be positive, got {self.dt_minutes}")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise DataError(f"labels length {labels.shape} does not match T={values.shape[0]}")
            if not np.all(np.isin(labels, (0, 1))):
                raise DataError("labels must be binary (0/1)")
            object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    fault_id: int
    series: SeriesMatrix
    affected: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.run_id < 0:
            raise DataError(f"run_id must be unsigned, got {self.run_id}")
        if not 0 <= self.fault_id <= 20:
            raise DataError(f"fault_id must lie in [0, 20], got {self.fault_id}")
        labels = self.series.labels
        if self.fault_id == 0 and labels is not None and labels.any():
            raise DataError(f"fault-free run {self.run_id} carries anomalous labels")


@dataclass(frozen=True)
class DatasetSplit:
    train: list[RunRecord]
    validation: list[RunRecord]
    test: list[RunRecord] = field(default_factory=list)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    std_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.std_floor <= 0 or np.any(self.std < self.std_floor):
            raise ContractError("std entries must be >= std_floor > 0")


@dataclass(frozen=True)
class CsvSchema:
    fault_column: str = "fault_id"
    run_column: str = "run_id"
    time_column: str = "timestep"
    label_column: str | None = "label"
    onset_column: str | None = "fault_onset"
    feature_prefixes: tuple[str, ...] = ("x",)
    default_onset: int = 160
    dt_minutes: float = 3.0

    @classmethod
    def tep(cls, default_onset: int = 160) -> CsvSchema:
        """Column layout of the public simulated-plant CSV release."""
        return cls(
            fault_column="faultNumber",
            run_column="simulationRun",
            time_column="sample",
            label_column=None,
            onset_column=None,
            feature_prefixes=("xmeas_", "xmv_"),
            default_onset=default_onset,
        )

    def feature_columns(self, columns: Sequence[str]) -> list[str]:
        reserved = {self.fault_column, self.run_column, self.time_column, self.label_column, self.onset_column}
        return [c for c in columns if c not in reserved and c.startswith(self.feature_prefixes)]


# ── CSV ingestion ────────────────────────────────────────────────────────────

def _run_labels(group: pd.DataFrame, fault_id: int, schema: CsvSchema) -> np.ndarray:
    if schema.label_column and schema.label_column in group and group[schema.label_column].notna().all():
        return group[schema.label_column].to_numpy()
    if fault_id == 0:
        return np.zeros(len(group), dtype=np.int8)
    if schema.onset_column and schema.onset_column in group and group[schema.onset_column].notna().all():
        onset = group[schema.onset_column].iloc[0]
        return (group[schema.time_column].to_numpy() >= onset).astype(np.int8)
    labels = np.zeros(len(group), dtype=np.int8)
    labels[schema.default_onset :] = 1
    return labels


def load_runs_csv(path: str | Path, schema: CsvSchema | None = None) -> list[RunRecord]:
    schema = schema or CsvSchema()
    frame = pd.read_csv(path)
    for column in (schema.fault_column, schema.run_column, schema.time_column):
        if column not in frame.columns:
            raise SchemaError(f"{path}: missing required column {column!r}")
    features = schema.feature_columns(list(frame.columns))
    if not features:
        raise SchemaError(f"{path}: no feature columns with prefixes {schema.feature_prefixes}")

    runs: list[RunRecord] = []
    lengths: dict[int, set[int]] = {}
    for (fault_id, run_id), group in frame.groupby([schema.fault_column, schema.run_column], sort=True):
        steps = group[schema.time_column].to_numpy()
        bad = np.nonzero(np.diff(steps) <= 0)[0]
        if bad.size:
            raise DataError(
                f"{path}: timestep not increasing in run (fault {fault_id}, run {run_id}) "
                f"at timestep {steps[bad[0] + 1]}"
            )
        series = SeriesMatrix(
            values=group[features].to_numpy(dtype=np.float64),
            dt_minutes=schema.dt_minutes,
            labels=_run_labels(group, int(fault_id), schema),
        )
        runs.append(RunRecord(run_id=int(run_id), fault_id=int(fault_id), series=series))
        lengths.setdefault(int(fault_id), set()).add(len(group))

    for fault_id, sizes in lengths.items():
        if len(sizes) > 1:
            raise DataError(
                f"{path}: row count not divisible among runs of fault {fault_id} (run lengths {sorted(sizes)})"
            )
    logger.info("Loaded %d runs with D=%d from %s", len(runs), len(features), path)
    return runs


def write_runs_csv(runs: Sequence[RunRecord], path: str | Path) -> None:
    if not runs:
        raise ContractError("no runs to write")
    width = runs[0].series.D
    columns = ["fault_id", "run_id", "timestep", "label"] + [f"x{j + 1}" for j in range(width)]
    blocks = []
    for run in runs:
        if run.series.D != width:
            raise DataError(f"run {run.run_id} has D={run.series.D}, expected {width}")
        T = run.series.T
        labels = run.series.labels if run.series.labels is not None else np.zeros(T, dtype=np.int8)
        block = pd.DataFrame(run.series.values, columns=columns[4:])
        block.insert(0, "label", labels.astype(int))
        block.insert(0, "timestep", np.arange(T))
        block.insert(0, "run_id", run.run_id)
        block.insert(0, "fault_id", run.fault_id)
        blocks.append(block)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.concat(blocks, ignore_index=True).to_csv(path, index=False, lineterminator="\n")


def split_runs(
    fault_free: Sequence[RunRecord],
    faulty: Sequence[RunRecord] = (),
    validation_fraction: float = 0.25,
) -> DatasetSplit:
    """Hold out the last ⌊n·fraction⌋ (at least one) fault-free runs for validation."""
    count = len(fault_free)
    n_val = max(1, math.floor(count * validation_fraction))
    if count - n_val < 1:
        raise ContractError(f"need at least two fault-free runs to split, got {count}")
    for run in faulty:
        if run.series.labels is None:
            raise DataError(f"test run {run.run_id} (fault {run.fault_id}) has no labels")
    return DatasetSplit(train=list(fault_free[: count - n_val]), validation=list(fault_free[count - n_val :]), test=list(faulty))


def split_dataset(runs: Sequence[RunRecord], validation_fraction: float = 0.25) -> DatasetSplit:
    fault_free = [r for r in runs if r.fault_id == 0]
    faulty = [r for r in runs if r.fault_id != 0]
    return split_runs(fault_free, faulty, validation_fraction)


# ── Normalization ────────────────────────────────────────────────────────────

def _as_values(item: RunRecord | SeriesMatrix) -> np.ndarray:
    return item.series.values if isinstance(item, RunRecord) else item.values


def fit_norm_stats(train: Sequence[RunRecord | SeriesMatrix], std_floor: float = 1e-6) -> NormStats:
    if not train:
        raise ContractError("fit_norm_stats needs at least one training run")
    stacked = np.concatenate([_as_values(item) for item in train], axis=0)
    std = np.maximum(stacked.std(axis=0), std_floor)
    return NormStats(mean=stacked.mean(axis=0), std=std, std_floor=std_floor)


def apply_norm(series: SeriesMatrix, stats: NormStats) -> SeriesMatrix:
    if series.D != stats.mean.shape[0]:
        raise ContractError(f"series has D={series.D}, stats were fitted on D={stats.mean.shape[0]}")
    return SeriesMatrix((series.values - stats.mean) / stats.std, series.dt_minutes, series.labels)


def invert_norm(series: SeriesMatrix, stats: NormStats) -> SeriesMatrix:
    if series.D != stats.mean.shape[0]:
        raise ContractError(f"series has D={series.D}, stats were fitted on D={stats.mean.shape[0]}")
    return SeriesMatrix(series.values * stats.std + stats.mean, series.dt_minutes, series.labels)


# ── Windows ──────────────────────────────────────────────────────────────────

def make_windows(series: SeriesMatrix | np.ndarray, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (windows of shape n×w×D, start indices)."""
    values = series.values if isinstance(series, SeriesMatrix) else np.asarray(series, dtype=np.float64)
    T = values.shape[0]
    if spec.width > T:
        raise ContractError(f"window width {spec.width} exceeds series length {T}")
    view = np.lib.stride_tricks.sliding_window_view(values, spec.width, axis=0)
    starts = np.arange(0, T - spec.width + 1, spec.stride)
    return np.ascontiguousarray(np.swapaxes(view[starts], 1, 2)), starts


def signature_matrices(
    series: SeriesMatrix | np.ndarray,
    window: int,
    scale: float | None = None,
    step: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed Gram matrices S_ij = Σ x_i x_j / scale over each window (scale defaults to w).

    Returns (matrices of shape n×D×D, end time of each window).
    """
    windows, starts = make_windows(series, WindowSpec(width=window, stride=step))
    gram = np.einsum("nti,ntj->nij", windows, windows) / float(scale or window)
    return 0.5 * (gram + np.swapaxes(gram, 1, 2)), starts + window - 1


# ── Masking ──────────────────────────────────────────────────────────────────

def _masked_count(fraction: float, width: int) -> int:
    count = int(math.floor(fraction * width + 0.5))
    if count < 1:
        raise ContractError(f"fraction {fraction} masks no feature out of {width}")
    return min(count, width)


def mask_features_genad(
    window: np.ndarray,
    fraction: float,
    fold_index: int,
    rng: np.random.Generator,
    *,
    features: Sequence[int] | None = None,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Zero round(fraction·D) feature columns inside one of five equal time folds."""
    w, width = window.shape
    if not 0 <= fold_index < GENAD_FOLDS:
        raise ContractError(f"fold_index must lie in [0, {GENAD_FOLDS}), got {fold_index}")
    if strict and w % GENAD_FOLDS:
        raise ContractError(f"window width {w} is not divisible by {GENAD_FOLDS}")
    bounds = np.cumsum([0] + [len(part) for part in np.array_split(np.arange(w), GENAD_FOLDS)])
    lo, hi = bounds[fold_index], bounds[fold_index + 1]
    if features is None:
        features = rng.choice(width, size=_masked_count(fraction, width), replace=False)
    mask = np.zeros(window.shape, dtype=np.int8)
    mask[lo:hi, np.asarray(features, dtype=int)] = 1
    return np.where(mask == 1, 0.0, window), mask


def genad_mask_sweep(width: int, fraction: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Feature groups for repeated GenAD calls so each feature is masked exactly once."""
    size = _masked_count(fraction, width)
    order = rng.permutation(width)
    return [np.sort(order[i : i + size]) for i in range(0, width, size)]


def mask_cells_donut(window: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= rate < 1:
        raise ContractError(f"mask rate must lie in [0, 1), got {rate}")
    mask = (rng.random(window.shape) < rate).astype(np.int8)
    return np.where(mask == 1, 0.0, window), mask


# ── Synthetic process ────────────────────────────────────────────────────────

def coupling_matrix(width: int, process_seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=process_seed))
    q, r = np.linalg.qr(rng.standard_normal((width, width)))
    q *= np.sign(np.diag(r))
    return SPECTRAL_RADIUS * q


def stationary_std(config: SynthConfig) -> float:
    return math.sqrt(config.process_noise_std**2 / (1.0 - SPECTRAL_RADIUS**2) + config.measurement_noise_std**2)


def _validate(config: SynthConfig) -> None:
    if config.D < 2:
        raise ConfigError(f"synthetic D must be >= 2, got {config.D}")
    if config.T < 16:
        raise ConfigError(f"synthetic T must be >= 16, got {config.T}")
    if config.fault_kind not in FAULT_IDS and config.fault_kind != "mixed":
        raise ConfigError(f"unknown fault_kind {config.fault_kind!r}; expected one of {sorted(FAULT_IDS) + ['mixed']}")
    if not 0 <= config.onset < config.T:
        raise ConfigError(f"fault_onset {config.onset} outside [0, {config.T})")
    if config.runs < 0 or config.normal_runs < 0:
        raise ConfigError("run counts must be non-negative")


def _simulate(A: np.ndarray, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    width = A.shape[0]
    steps = BURN_IN_STEPS + config.T
    shocks = rng.standard_normal((steps, width)) * config.process_noise_std
    state = rng.standard_normal(width) * config.process_noise_std / math.sqrt(1.0 - SPECTRAL_RADIUS**2)
    path = np.empty((steps, width))
    for t in range(steps):
        state = A @ state + shocks[t]
        path[t] = state
    observed = path[BURN_IN_STEPS:]
    return observed + rng.standard_normal(observed.shape) * config.measurement_noise_std


def _inject(values: np.ndarray, kind: str, config: SynthConfig, rng: np.random.Generator) -> tuple[int, ...]:
    T, width = values.shape
    onset = config.onset
    count = max(1, int(round(config.affected_fraction * width)))
    affected = np.sort(rng.choice(width, size=count, replace=False))
    magnitude = config.fault_magnitude * stationary_std(config)
    span = T - onset
    if kind == "step":
        values[onset:, affected] += magnitude
    elif kind == "drift":
        ramp = magnitude * np.arange(1, span + 1) / span
        values[onset:, affected] += ramp[:, None]
    elif kind == "stuck":
        values[onset:, affected] = values[onset, affected]
    elif kind == "noise":
        values[onset:, affected] += rng.standard_normal((span, count)) * magnitude
    return tuple(int(i) for i in affected)


def _generate(config: SynthConfig, kind: str, count: int, stream: int) -> list[RunRecord]:
    A = coupling_matrix(config.D, config.process_seed)
    runs: list[RunRecord] = []
    for index in range(count):
        rng = np.random.Generator(np.random.Philox(key=(config.seed << 40) | (stream << 32) | index))
        run_kind = MIXED_CYCLE[index % len(MIXED_CYCLE)] if kind == "mixed" else kind
        values = _simulate(A, config, rng)
        labels = np.zeros(config.T, dtype=np.int8)
        affected: tuple[int, ...] = ()
        if run_kind != "none":
            affected = _inject(values, run_kind, config, rng)
            labels[config.onset :] = 1
        runs.append(
            RunRecord(
                run_id=index + 1,
                fault_id=FAULT_IDS[run_kind],
                series=SeriesMatrix(values, config.dt_minutes, labels),
                affected=affected,
            )
        )
    return runs


def synth_generate(config: SynthConfig) -> list[RunRecord]:
    """config.runs runs of config.fault_kind ("none" gives fault-free runs)."""
    _validate(config)
    return _generate(config, config.fault_kind, config.runs, stream=1)


def synth_dataset(config: SynthConfig) -> list[RunRecord]:
    """config.normal_runs fault-free runs followed by config.runs faulty runs, one coupling matrix."""
    _validate(config)
    runs = _generate(config, "none", config.normal_runs, stream=0)
    if config.fault_kind != "none":
        runs += _generate(config, config.fault_kind, config.runs, stream=1)
    logger.info(
        "Generated %d fault-free and %d %s runs (T=%d, D=%d, seed=%d)",
        config.normal_runs, len(runs) - config.normal_runs, config.fault_kind, config.T, config.D, config.seed,
    )
    return runs

from __future__ import annotations

from datetime import datetime
from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.services.numkit import OptimizerKind


# ── Windows & detectors ──────────────────────────────────────────────────────

class WindowSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(32, ge=1)
    stride: int = Field(1, ge=1)


class Variant(str, Enum):
    DENSE_AE = "DenseAE"
    LSTM_AE = "LstmAE"
    LSTM_MAX_AE = "LstmMaxAE"
    UNTRAINED_LSTM_AE = "UntrainedLstmAE"
    USAD = "USAD"
    TCN_S2S_AE = "TcnS2SAE"
    LSTM_P = "LstmP"
    TCN_P = "TcnP"
    TCN_S2S_P = "TcnS2SP"
    LSTM_VAE = "LstmVAE"
    DONUT_MV = "DonutMV"
    LSTM_DVAE = "LstmDVAE"
    BEATGAN = "BeatGAN"


class DetectorSpec(BaseModel):
    """Variant plus hyperparameters. Defaults are desk-scale sizes."""

    model_config = ConfigDict(frozen=True, use_enum_values=False)

    variant: Variant
    window: WindowSpec = Field(default_factory=WindowSpec)
    hidden_size: int = Field(32, ge=1)
    latent_dim: int = Field(8, ge=1)
    layers: int = Field(1, ge=1)
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    grad_clip: float = Field(5.0, gt=0)
    horizon: int = Field(1, ge=1)
    mc_samples: int = Field(16, ge=1)
    usad_alpha: float = Field(0.5, ge=0)
    usad_beta: float = Field(0.5, ge=0)
    beatgan_lambda: float = Field(1.0, ge=0)
    kernel_size: int = Field(3, ge=1)
    tcn_levels: int = Field(3, ge=1)
    pool_factor: int = Field(4, ge=1)
    latent_pooling: Literal["max", "mean"] = "max"
    input_noise_std: float = Field(0.1, ge=0)
    mask_rate: float = Field(0.05, ge=0, lt=1)
    seed: int = Field(0, ge=0)


class DetectorInfo(BaseModel):
    variant: Variant
    method_type: str
    family: str
    calibrated: bool
    trained: bool


# ── Synthetic data ───────────────────────────────────────────────────────────

class SynthConfig(BaseModel):
    """Seeded stand-in for a simulated plant. Range checks happen in synth_generate."""

    runs: int = 20
    normal_runs: int = 8
    T: int = 400
    D: int = 8
    fault_kind: str = "step"
    fault_onset: int | None = None
    fault_magnitude: float = 5.0
    affected_fraction: float = Field(0.25, gt=0, le=1)
    process_noise_std: float = Field(1.0, gt=0)
    measurement_noise_std: float = Field(0.2, ge=0)
    dt_minutes: float = Field(3.0, gt=0)
    seed: int = Field(0, ge=0)
    process_seed: int = Field(0, ge=0)

    @property
    def onset(self) -> int:
        return self.T // 2 if self.fault_onset is None else self.fault_onset


# ── Metrics ──────────────────────────────────────────────────────────────────

class MetricReport(BaseModel):
    best_f1: float = Field(..., ge=0, le=1)
    best_threshold: float
    auprc: float = Field(..., ge=0, le=1)


class PRPoint(BaseModel):
    recall: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    threshold: float


class PRCurve(BaseModel):
    points: list[PRPoint]


# ── Protocol ─────────────────────────────────────────────────────────────────

class GridSpec(BaseModel):
    method: Variant
    candidates: dict[str, list[Any]] = Field(default_factory=dict)
    budget_seconds: float = Field(86400.0, gt=0)
    base: dict[str, Any] = Field(default_factory=dict)


class FoldOutcome(BaseModel):
    fold: int
    selected_config: dict[str, Any]
    selection_f1: float
    best_f1: float
    auprc: float


class BenchmarkResult(BaseModel):
    method: str
    method_type: str = ""
    folds: list[FoldOutcome]
    best_f1: float = 0.0
    auprc: float = 0.0
    configs_evaluated: int = 0
    configs_total: int = 0
    warnings: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _aggregate(self) -> BenchmarkResult:
        if self.folds:
            self.best_f1 = sum(f.best_f1 for f in self.folds) / len(self.folds)
            self.auprc = sum(f.auprc for f in self.folds) / len(self.folds)
        return self


class RankingRow(BaseModel):
    method: str
    method_type: str = ""
    f1: float
    f1_rank: int = Field(..., ge=1)
    auprc: float
    auprc_rank: int = Field(..., ge=1)
    total_rank: int = Field(..., ge=1)


# ── CLI run configuration ────────────────────────────────────────────────────

class RunConfig(BaseModel):
    dataset_csv: str | None = None
    dataset_schema: Literal["default", "tep"] = "default"
    synthetic: SynthConfig = Field(default_factory=SynthConfig)
    detectors: list[Variant] = Field(default_factory=lambda: list(Variant))
    detector_overrides: dict[str, Any] = Field(default_factory=dict)
    grid: dict[str, list[Any]] = Field(default_factory=dict)
    budget_seconds: float = Field(86400.0, gt=0)
    folds: int = Field(5, ge=1)
    exclusion_radius: int = Field(1, ge=0)
    validation_fraction: float = Field(0.25, gt=0, lt=1)
    workers: int = Field(1, ge=1)
    seed: int = Field(..., ge=0)
    out_dir: str = "bench_out"
    database_url: str | None = None


# ── HTTP bodies ──────────────────────────────────────────────────────────────

class EvaluateRequest(BaseModel):
    scores: list[float]
    labels: list[int]


class MethodScore(BaseModel):
    method: str
    method_type: str = ""
    f1: float
    auprc: float


class RankingRequest(BaseModel):
    rows: list[MethodScore] = Field(..., min_length=1)


class BenchmarkRunOut(BaseModel):
    id: int
    method: str
    method_type: str
    best_f1: float
    auprc: float
    configs_evaluated: int
    configs_total: int
    warnings: list[str]
    created_at: datetime
    folds: list[FoldOutcome] = Field(default_factory=list)

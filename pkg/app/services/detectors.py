"""
Detector interface
─────────────────────────────────────────────────────────────────────────────
fit() trains a variant on the z-scored fault-free training runs and, where the
variant scores through a Gaussian, calibrates it on the validation runs.
score() maps any series with the training feature count to one score per
time step (higher = more anomalous).

Model dump layout (text, one JSON object per line):
  line 1   header: format, version, spec, width, norm stats, calibration,
           loss history and the parameter names in declaration order
  line 2+  one block per parameter: {"name", "shape", "values"}
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.errors import ConfigError, ContractError, DataError, NumericError, ParseError, TrainingError
from app.schemas import DetectorInfo, DetectorSpec, Variant, WindowSpec
from app.services import numkit as nk
from app.services.dataio import DatasetSplit, NormStats, SeriesMatrix, apply_norm, fit_norm_stats, make_windows
from app.services.networks import (
    BeatGan,
    DenseAutoencoder,
    DonutMultivariate,
    LstmAutoencoder,
    LstmDenoisingVae,
    LstmMaxAutoencoder,
    LstmPredictor,
    LstmVae,
    Network,
    TcnPredictor,
    TcnSeq2SeqAutoencoder,
    TcnSeq2SeqPredictor,
    UntrainedLstmAutoencoder,
    Usad,
)
from app.services.scoring import GaussianModel, fit_gaussian

logger = logging.getLogger(__name__)

MODEL_FORMAT = "anomaly-bench-model"
MODEL_VERSION = 1

NETWORKS: dict[Variant, type[Network]] = {
    Variant.DENSE_AE: DenseAutoencoder,
    Variant.LSTM_AE: LstmAutoencoder,
    Variant.LSTM_MAX_AE: LstmMaxAutoencoder,
    Variant.UNTRAINED_LSTM_AE: UntrainedLstmAutoencoder,
    Variant.USAD: Usad,
    Variant.TCN_S2S_AE: TcnSeq2SeqAutoencoder,
    Variant.LSTM_P: LstmPredictor,
    Variant.TCN_P: TcnPredictor,
    Variant.TCN_S2S_P: TcnSeq2SeqPredictor,
    Variant.LSTM_VAE: LstmVae,
    Variant.DONUT_MV: DonutMultivariate,
    Variant.LSTM_DVAE: LstmDenoisingVae,
    Variant.BEATGAN: BeatGan,
}


@dataclass(frozen=True)
class ScoreSeries:
    scores: np.ndarray
    warmup: int

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass
class FittedDetector:
    spec: DetectorSpec
    network: Network
    norm: NormStats
    history: list[float] = field(default_factory=list)

    @property
    def params(self) -> nk.ParamStore:
        return self.network.store

    @property
    def calibration(self) -> GaussianModel | None:
        return self.network.calibration

    @property
    def D(self) -> int:
        return self.network.D


def registry() -> list[DetectorInfo]:
    return [
        DetectorInfo(
            variant=variant,
            method_type=cls.method_type,
            family=cls.family,
            calibrated=cls.calibrated,
            trained=cls.trained,
        )
        for variant, cls in NETWORKS.items()
    ]


def method_type(variant: Variant | str) -> str:
    return NETWORKS[Variant(variant)].method_type


def build_network(spec: DetectorSpec, width: int) -> Network:
    cls = NETWORKS.get(spec.variant)
    if cls is None:
        raise ConfigError(f"unknown detector variant {spec.variant!r}")
    return cls(spec, width, nk.ParamStore(spec.seed))


def training_windows(series: list[np.ndarray], span: int, stride: int) -> np.ndarray:
    """Stack the span-length windows of every run (runs shorter than span contribute none)."""
    blocks = [make_windows(values, WindowSpec(width=span, stride=stride))[0] for values in series if len(values) >= span]
    if not blocks:
        raise ContractError(f"no training run is long enough for windows of {span} steps")
    return np.concatenate(blocks)


def _train(network: Network, windows: np.ndarray, spec: DetectorSpec) -> list[float]:
    rng = network.store.stream("train")
    phases = network.phases()
    groups = [network.store if p.prefixes is None else network.store.subset(p.prefixes) for p in phases]
    optimizers = [nk.make_optimizer(spec.optimizer, spec.learning_rate, params) for params in groups]
    history: list[float] = []
    for epoch in range(spec.epochs):
        order = rng.permutation(len(windows))
        total = 0.0
        for start in range(0, len(windows), spec.batch_size):
            batch = windows[order[start : start + spec.batch_size]]
            for index, (phase, params, optimizer) in enumerate(zip(phases, groups, optimizers)):
                network.store.zero_grad()
                value = phase.objective(batch, rng, epoch)
                if not math.isfinite(value.item()):
                    raise TrainingError(f"{spec.variant.value}: non-finite {phase.name} loss", epoch=epoch + 1)
                nk.backward(value, params)
                nk.clip_grad_norm(params, spec.grad_clip)
                nk.optimizer_step(optimizer, params)
                if index == 0:
                    total += value.item() * len(batch)
        history.append(total / len(windows))
        logger.debug("%s epoch %d loss %.6f", spec.variant.value, epoch + 1, history[-1])
    return history


def fit(spec: DetectorSpec, split: DatasetSplit) -> FittedDetector:
    if not split.train:
        raise ContractError("fit needs at least one fault-free training run")
    width = split.train[0].series.D
    for run in list(split.train) + list(split.validation):
        if run.series.D != width:
            raise DataError(f"run {run.run_id} has D={run.series.D}, expected {width}")
    network = build_network(spec, width)
    if network.calibrated and not split.validation:
        raise ContractError(f"{spec.variant.value} calibrates on validation runs but none were given")

    norm = fit_norm_stats(split.train)
    train_values = [apply_norm(run.series, norm).values for run in split.train]
    history: list[float] = []
    if network.trained:
        windows = training_windows(train_values, network.span, spec.window.stride)
        history = _train(network, windows, spec)

    if network.calibrated:
        with nk.no_grad():
            errors = np.concatenate(
                [network.calibration_errors(apply_norm(run.series, norm).values) for run in split.validation]
            )
        network.calibration = fit_gaussian(errors)

    logger.info(
        "Fitted %s on %d runs (epochs=%d, final loss=%s)",
        spec.variant.value,
        len(split.train),
        len(history),
        f"{history[-1]:.6f}" if history else "n/a",
    )
    return FittedDetector(spec=spec, network=network, norm=norm, history=history)


def score(model: FittedDetector, series: SeriesMatrix) -> ScoreSeries:
    """One score per time step of series.

    Requires series.T >= w (w + 1 for forecasters, which also need one target step).
    """
    if series.D != model.D:
        raise ContractError(f"series has D={series.D}, detector was trained on D={model.D}")
    if series.T < model.network.min_length:
        raise ContractError(
            f"{model.spec.variant.value} needs at least {model.network.min_length} steps to score, got {series.T}"
        )
    values = apply_norm(series, model.norm).values
    with nk.no_grad():
        scores = model.network.score_series(values, model.params.stream("score"))
    if not np.all(np.isfinite(scores)):
        raise NumericError(f"{model.spec.variant.value} produced non-finite scores")
    return ScoreSeries(scores=scores, warmup=min(model.network.warmup, series.T))


# ── Model dump ───────────────────────────────────────────────────────────────

def save_model(model: FittedDetector, path: str | Path) -> None:
    calibration = model.calibration
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": model.spec.model_dump(mode="json"),
        "width": model.D,
        "norm": {
            "mean": model.norm.mean.tolist(),
            "std": model.norm.std.tolist(),
            "std_floor": model.norm.std_floor,
        },
        "calibration": None
        if calibration is None
        else {
            "mean": calibration.mean.tolist(),
            "variance": calibration.variance.tolist(),
            "variance_floor": calibration.variance_floor,
        },
        "history": model.history,
        "params": list(model.params),
    }
    lines = [json.dumps(header)]
    for name, tensor in model.params.items():
        lines.append(json.dumps({"name": name, "shape": list(tensor.shape), "values": tensor.values.tolist()}))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_line(text: str, line: int) -> dict:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=line) from exc
    if not isinstance(payload, dict):
        raise ParseError("expected a JSON object", line=line)
    return payload


def load_model(path: str | Path) -> FittedDetector:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("empty model file", line=1)
    header = _parse_line(lines[0], 1)
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ParseError(f"not a {MODEL_FORMAT} v{MODEL_VERSION} file", line=1)
    try:
        spec = DetectorSpec.model_validate(header["spec"])
        network = build_network(spec, int(header["width"]))
        norm = NormStats(
            mean=np.array(header["norm"]["mean"], dtype=np.float64),
            std=np.array(header["norm"]["std"], dtype=np.float64),
            std_floor=float(header["norm"]["std_floor"]),
        )
        names = list(header["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed header: {exc}", line=1) from exc

    arrays: dict[str, np.ndarray] = {}
    for offset, text in enumerate(lines[1:]):
        block = _parse_line(text, offset + 2)
        try:
            arrays[block["name"]] = np.array(block["values"], dtype=np.float64).reshape(block["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed parameter block: {exc}", line=offset + 2, record=offset) from exc
    if list(arrays) != names or names != list(network.store):
        raise ParseError("parameter blocks do not match the detector layout", line=len(lines))
    network.store.load(arrays)

    calibration = header.get("calibration")
    if calibration is not None:
        network.calibration = GaussianModel(
            mean=np.array(calibration["mean"], dtype=np.float64),
            variance=np.array(calibration["variance"], dtype=np.float64),
            variance_floor=float(calibration["variance_floor"]),
        )
    return FittedDetector(spec=spec, network=network, norm=norm, history=list(header.get("history", [])))

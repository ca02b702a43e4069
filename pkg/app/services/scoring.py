"""
Score calibration primitives
─────────────────────────────────────────────────────────────────────────────
Turns raw model errors into per-time-step anomaly scores: feature reduction,
diagonal Gaussian calibration (negative log-likelihood), EWMA smoothing,
overlap aggregation for sliding windows and forecast horizons, and the
closed-form pieces of the variational scores.

Warm-up rule: time steps no window scores are filled with the first computed
score (and any trailing gap carries the last one forward), so every score
series has the same length as its input.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np

from app.errors import ContractError, DimensionError

LOG_2PI = math.log(2.0 * math.pi)


def reduce_errors(errors: np.ndarray, reduction: Literal["mean", "max"] = "mean") -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2:
        raise DimensionError(f"error series must be T×D, got shape {errors.shape}")
    if reduction == "max":
        return errors.max(axis=1)
    return errors.mean(axis=1)


# ── Gaussian calibration ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    variance: np.ndarray
    variance_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.variance_floor <= 0 or np.any(self.variance < self.variance_floor):
            raise ContractError("variance entries must be >= variance_floor > 0")


def fit_gaussian(errors: np.ndarray, variance_floor: float = 1e-6) -> GaussianModel:
    """Population mean and variance per coordinate of N×M validation errors."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim == 1:
        errors = errors[:, None]
    if errors.shape[0] < 2:
        raise ContractError(f"fit_gaussian needs at least 2 error vectors, got {errors.shape[0]}")
    return GaussianModel(
        mean=errors.mean(axis=0),
        variance=np.maximum(errors.var(axis=0), variance_floor),
        variance_floor=variance_floor,
    )


def nll(model: GaussianModel, e: np.ndarray | float) -> np.ndarray | float:
    """Negative log-likelihood of e (shape (..., M)) under the diagonal model."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim == 0:
        e = e[None]
    if e.shape[-1] != model.mean.shape[0]:
        raise DimensionError(f"nll: error of width {e.shape[-1]} for a model of width {model.mean.shape[0]}")
    terms = LOG_2PI + np.log(model.variance) + (e - model.mean) ** 2 / model.variance
    out = 0.5 * terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ── Smoothing and aggregation ────────────────────────────────────────────────

def ewma(scores: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"ewma alpha must lie in (0, 1], got {alpha}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ContractError("ewma needs at least one value")
    out = np.empty_like(scores)
    out[0] = scores[0]
    for t in range(1, scores.shape[0]):
        out[t] = alpha * scores[t] + (1.0 - alpha) * out[t - 1]
    return out


def fill_warmup(values: np.ndarray, covered: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    covered = np.asarray(covered, dtype=bool)
    hits = np.flatnonzero(covered)
    if hits.size == 0:
        raise ContractError("no time step is covered by any score")
    values[: hits[0]] = values[hits[0]]
    # carry the last covered value across any later gap
    index = np.maximum.accumulate(np.where(covered, np.arange(values.shape[0]), 0))
    return values[index]


def coverage_counts(offsets: np.ndarray, horizon: int, T: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=int)
    targets = (offsets[:, None] + np.arange(horizon)[None, :]).ravel()
    return np.bincount(targets[(targets >= 0) & (targets < T)], minlength=T)


def aggregate_overlaps(scores: np.ndarray, offsets: np.ndarray, T: int) -> np.ndarray:
    """Average every score that targets a time step.

    scores has shape (n,), (n, k) or (n, k, ...); row i targets steps
    offsets[i] .. offsets[i]+k-1 and any trailing axes are averaged independently,
    so the result has shape (T,) + scores.shape[2:].
    Targets outside [0, T) are dropped; uncovered steps follow the warm-up rule.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    offsets = np.asarray(offsets, dtype=int)
    if scores.shape[0] != offsets.shape[0]:
        raise DimensionError(f"{scores.shape[0]} score rows for {offsets.shape[0]} offsets")
    targets = offsets[:, None] + np.arange(scores.shape[1])[None, :]
    keep = (targets >= 0) & (targets < T)
    trailing = scores.shape[2:]
    totals = np.zeros((T, *trailing))
    counts = np.zeros(T)
    np.add.at(totals, targets[keep], scores[keep])
    np.add.at(counts, targets[keep], 1.0)
    covered = counts > 0
    spread = counts.reshape((T,) + (1,) * len(trailing))
    averaged = np.divide(totals, spread, out=np.zeros_like(totals), where=spread > 0)
    return fill_warmup(averaged, covered)


# ── Variational pieces ───────────────────────────────────────────────────────

def _check_variance(*variances: np.ndarray) -> None:
    for var in variances:
        if np.any(np.asarray(var) <= 0):
            raise ContractError("Gaussian variance must be positive")


def kl_diag_gaussian(mu_q, var_q, mu_p=0.0, var_p=1.0) -> np.ndarray:
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over the last axis."""
    mu_q, var_q = np.asarray(mu_q, dtype=np.float64), np.asarray(var_q, dtype=np.float64)
    mu_p, var_p = np.asarray(mu_p, dtype=np.float64), np.asarray(var_p, dtype=np.float64)
    _check_variance(var_q, var_p)
    terms = np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0
    return 0.5 * np.sum(terms, axis=-1)


def gaussian_log_likelihood(x, mean, var) -> np.ndarray:
    x, mean, var = (np.asarray(a, dtype=np.float64) for a in (x, mean, var))
    _check_variance(var)
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (x - mean) ** 2 / var, axis=-1)


def _sum_beyond(values: np.ndarray, batch_axes: int) -> np.ndarray | float:
    """Sum every axis after the first batch_axes; a plain float when batch_axes is 0."""
    values = np.asarray(values, dtype=np.float64)
    if batch_axes == 0:
        return float(np.sum(values))
    if values.ndim < batch_axes:
        raise DimensionError(f"cannot keep {batch_axes} batch axes of an array with shape {values.shape}")
    return values.sum(axis=tuple(range(batch_axes, values.ndim)))


def elbo(
    x, post_mean, post_var, rec_mean, rec_var, prior_mean=0.0, prior_var=1.0, *, batch_axes: int = 0
) -> np.ndarray | float:
    """Single-sample ELBO: log p(x|z) minus the closed-form KL.

    Summed over all steps, or per item of the leading batch_axes (one value per window with batch_axes=1).
    """
    log_lik = gaussian_log_likelihood(x, rec_mean, rec_var)
    kl = kl_diag_gaussian(post_mean, post_var, prior_mean, prior_var)
    return _sum_beyond(log_lik, batch_axes) - _sum_beyond(kl, batch_axes)


def reconstruction_probability(
    x: np.ndarray,
    decode: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    post_mean: np.ndarray,
    post_var: np.ndarray,
    samples: int,
    rng: np.random.Generator,
    *,
    batch_axes: int = 0,
) -> np.ndarray | float:
    """Monte-Carlo mean over posterior draws of log p(x | z), reduced like elbo()."""
    if samples < 1:
        raise ContractError(f"reconstruction probability needs L >= 1 samples, got {samples}")
    post_mean = np.asarray(post_mean, dtype=np.float64)
    post_var = np.asarray(post_var, dtype=np.float64)
    _check_variance(post_var)
    total: np.ndarray | float = 0.0
    for _ in range(samples):
        z = post_mean + np.sqrt(post_var) * rng.standard_normal(post_mean.shape)
        mean, var = decode(z)
        total = total + _sum_beyond(gaussian_log_likelihood(x, mean, var), batch_axes)
    return total / samples


def convex_combine(a, b, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"convex weight must lie in [0, 1], got {lam}")
    return lam * np.asarray(a, dtype=np.float64) + (1.0 - lam) * np.asarray(b, dtype=np.float64)


def dvae_prior_mean(v1, vT, t, T: int) -> np.ndarray:
    """Linear interpolation (1 - t/T)·v1 + (t/T)·vT for scalar or array t."""
    if T <= 0:
        raise ContractError(f"prior horizon T must be positive, got {T}")
    frac = np.asarray(t, dtype=np.float64) / T
    v1, vT = np.asarray(v1, dtype=np.float64), np.asarray(vT, dtype=np.float64)
    return (1.0 - frac)[..., None] * v1 + frac[..., None] * vT if frac.ndim else (1.0 - frac) * v1 + frac * vT

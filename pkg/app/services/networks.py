"""
Detector architectures
─────────────────────────────────────────────────────────────────────────────
One class per variant. A network owns its named parameters (ParamStore),
declares the training phases (loss closure plus the parameter prefixes that
phase updates), and turns a normalized T×D matrix into per-step scores.

Tensors are batch-first: (N, time, features). Window scores are assigned to
the window's last point; forecasters score the steps they predict.
"""
from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from app.errors import ConfigError, ContractError
from app.schemas import DetectorSpec, WindowSpec
from app.services import numkit as nk
from app.services.dataio import make_windows, mask_cells_donut
from app.services.numkit import LossKind, ParamStore, Tensor
from app.services.scoring import (
    LOG_2PI,
    GaussianModel,
    aggregate_overlaps,
    coverage_counts,
    dvae_prior_mean,
    elbo,
    fill_warmup,
    nll,
    reconstruction_probability,
)

_VAR_EPS = 1e-4
_SCORE_CHUNK = 512

Objective = Callable[[np.ndarray, np.random.Generator, int], Tensor]


@dataclass(frozen=True)
class Phase:
    name: str
    objective: Objective
    prefixes: tuple[str, ...] | None = None


def _dense(x: Tensor, layer: tuple[Tensor, Tensor]) -> Tensor:
    return nk.linear_forward(x, *layer)


def _variance(x: Tensor) -> Tensor:
    return nk.softplus(x) + _VAR_EPS


def _sample(mu: Tensor, var: Tensor, rng: np.random.Generator) -> Tensor:
    return mu + nk.power(var, 0.5) * rng.standard_normal(mu.shape)


def _gaussian_nll(x, mu: Tensor, var: Tensor) -> Tensor:
    diff = nk.as_tensor(x) - mu
    return 0.5 * (LOG_2PI + nk.log(var) + diff * diff / var)


def _kl_unit(mu_q: Tensor, var_q: Tensor, mu_p) -> Tensor:
    """Elementwise KL(N(mu_q, var_q) || N(mu_p, 1))."""
    diff = mu_q - mu_p
    return 0.5 * (var_q + diff * diff - 1.0 - nk.log(var_q))


def _chunks(count: int, size: int = _SCORE_CHUNK) -> Iterator[slice]:
    for start in range(0, count, size):
        yield slice(start, min(start + size, count))


def _window_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a - b) ** 2).mean(axis=(1, 2))


class Network:
    method_type: ClassVar[str] = "Reconstruction"
    family: ClassVar[str] = "reconstruction"
    calibrated: ClassVar[bool] = False
    trained: ClassVar[bool] = True
    autoencoding: ClassVar[bool] = True
    target_steps: ClassVar[int] = 0

    def __init__(self, spec: DetectorSpec, width: int, store: ParamStore) -> None:
        self.spec = spec
        self.D = width
        self.w = spec.window.width
        self.store = store
        self.calibration: GaussianModel | None = None
        if self.autoencoding and spec.latent_dim >= self.w * width:
            raise ConfigError(f"latent_dim {spec.latent_dim} must be smaller than window·D = {self.w * width}")
        self.build()

    @property
    def span(self) -> int:
        """Length of one training example (input window plus targets)."""
        return self.w + self.target_steps

    @property
    def warmup(self) -> int:
        return self.w - 1

    @property
    def min_length(self) -> int:
        """Shortest series score_series accepts: one full input window."""
        return self.w

    def build(self) -> None:
        raise NotImplementedError

    def phases(self) -> list[Phase]:
        return [Phase("loss", self.loss)]

    def loss(self, batch: np.ndarray, rng: np.random.Generator, epoch: int) -> Tensor:
        raise NotImplementedError

    def window_scores(self, windows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def calibration_errors(self, values: np.ndarray) -> np.ndarray:
        raise ContractError(f"{type(self).__name__} is not calibrated")

    def score_series(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        windows, starts = make_windows(values, WindowSpec(width=self.w))
        per_window = np.concatenate([self.window_scores(windows[part], rng) for part in _chunks(len(windows))])
        return aggregate_overlaps(per_window, starts + self.w - 1, values.shape[0])

    def _gaussian(self) -> GaussianModel:
        if self.calibration is None:
            raise ContractError(f"{type(self).__name__} has no fitted calibration")
        return self.calibration


# ── Reconstruction ───────────────────────────────────────────────────────────

class DenseAutoencoder(Network):
    def build(self) -> None:
        flat, hidden, latent = self.w * self.D, self.spec.hidden_size, self.spec.latent_dim
        self.encoder = [self.store.linear("enc.0", flat, hidden), self.store.linear("enc.1", hidden, latent)]
        self.decoder = [self.store.linear("dec.0", latent, hidden), self.store.linear("dec.1", hidden, flat)]

    def encode(self, x: Tensor) -> Tensor:
        h = nk.relu(_dense(nk.reshape(x, (x.shape[0], -1)), self.encoder[0]))
        return _dense(h, self.encoder[1])

    def decode(self, z: Tensor, layers: list[tuple[Tensor, Tensor]] | None = None) -> Tensor:
        first, second = layers or self.decoder
        out = _dense(nk.relu(_dense(z, first)), second)
        return nk.reshape(out, (z.shape[0], self.w, self.D))

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def loss(self, batch, rng, epoch):
        return nk.loss(self.reconstruct(Tensor(batch)), batch, LossKind.MSE)

    def window_scores(self, windows, rng):
        return _window_mse(self.reconstruct(Tensor(windows)).numpy(), windows)


class Usad(DenseAutoencoder):
    """Shared encoder with two decoders trained in two competing phases."""

    def build(self) -> None:
        flat, hidden, latent = self.w * self.D, self.spec.hidden_size, self.spec.latent_dim
        self.encoder = [self.store.linear("enc.0", flat, hidden), self.store.linear("enc.1", hidden, latent)]
        self.decoder = [self.store.linear("dec1.0", latent, hidden), self.store.linear("dec1.1", hidden, flat)]
        self.decoder2 = [self.store.linear("dec2.0", latent, hidden), self.store.linear("dec2.1", hidden, flat)]

    def autoencode2(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x), self.decoder2)

    def _ae1_loss(self, batch, rng, epoch):
        x = Tensor(batch)
        w1 = self.reconstruct(x)
        w3 = self.autoencode2(w1)
        n = epoch + 1
        return (1.0 / n) * nk.loss(w1, batch) + (1.0 - 1.0 / n) * nk.loss(w3, batch)

    def _ae2_loss(self, batch, rng, epoch):
        x = Tensor(batch)
        w2 = self.autoencode2(x)
        w3 = self.autoencode2(self.reconstruct(x))
        n = epoch + 1
        return (1.0 / n) * nk.loss(w2, batch) - (1.0 - 1.0 / n) * nk.loss(w3, batch)

    def phases(self) -> list[Phase]:
        return [
            Phase("ae1", self._ae1_loss, ("enc.", "dec1.")),
            Phase("ae2", self._ae2_loss, ("enc.", "dec2.")),
        ]

    def window_scores(self, windows, rng):
        w1 = self.reconstruct(Tensor(windows))
        w3 = self.autoencode2(w1)
        return self.spec.usad_alpha * _window_mse(w1.numpy(), windows) + self.spec.usad_beta * _window_mse(
            w3.numpy(), windows
        )


def reversed_target(windows: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(windows[:, ::-1, :])


class LstmAutoencoder(Network):
    """Encoder state seeds the decoder, which emits the window in reverse order."""

    def build(self) -> None:
        hidden = self.spec.hidden_size
        self.encoder = self.store.lstm("enc", self.D, hidden)
        self.decoder = self.store.lstm("dec", self.D, hidden)
        self.head = self.store.linear("out", hidden, self.D)

    def forward(self, windows: np.ndarray, teacher_forcing: bool) -> Tensor:
        _, (h, c) = nk.lstm_sequence(Tensor(windows), self.encoder)
        target = reversed_target(windows)
        previous: Tensor = Tensor(np.zeros((windows.shape[0], self.D)))
        outputs = []
        for t in range(self.w):
            h, c = nk.lstm_cell_step(previous, h, c, self.decoder)
            y = _dense(h, self.head)
            outputs.append(y)
            previous = Tensor(target[:, t, :]) if teacher_forcing else y
        return nk.stack(outputs, axis=1)

    def loss(self, batch, rng, epoch):
        return nk.loss(self.forward(batch, teacher_forcing=True), reversed_target(batch))

    def window_scores(self, windows, rng):
        return _window_mse(self.forward(windows, teacher_forcing=False).numpy(), reversed_target(windows))


class UntrainedLstmAutoencoder(LstmAutoencoder):
    trained = False


class LstmMaxAutoencoder(Network):
    def build(self) -> None:
        hidden, latent = self.spec.hidden_size, self.spec.latent_dim
        self.encoder = self.store.lstm("enc", self.D, hidden)
        self.bottleneck = self.store.linear("latent", hidden, latent)
        self.decoder = self.store.lstm("dec", latent, hidden)
        self.head = self.store.linear("out", hidden, self.D)

    def reconstruct(self, x: Tensor) -> Tensor:
        states, _ = nk.lstm_sequence(x, self.encoder)
        stacked = nk.stack(states, axis=1)
        pooled = nk.max_(stacked, axis=1) if self.spec.latent_pooling == "max" else nk.mean(stacked, axis=1)
        z = _dense(pooled, self.bottleneck)
        h = c = Tensor(np.zeros((x.shape[0], self.spec.hidden_size)))
        outputs = []
        for _ in range(self.w):
            h, c = nk.lstm_cell_step(z, h, c, self.decoder)
            outputs.append(_dense(h, self.head))
        return nk.stack(outputs, axis=1)

    def loss(self, batch, rng, epoch):
        return nk.loss(self.reconstruct(Tensor(batch)), batch)

    def window_scores(self, windows, rng):
        return _window_mse(self.reconstruct(Tensor(windows)).numpy(), windows)


class TcnAutoencoder:
    """Causal TCN encoder, temporal mean pooling, anti-causal (transposed) TCN decoder."""

    def __init__(self, store: ParamStore, prefix: str, spec: DetectorSpec, width: int) -> None:
        window = spec.window.width
        if window % spec.pool_factor:
            raise ConfigError(f"window width {window} is not divisible by pool_factor {spec.pool_factor}")
        channels, taps, levels = spec.hidden_size, spec.kernel_size, spec.tcn_levels
        self.pool = spec.pool_factor
        self.levels = levels
        self.encoder = [store.conv(f"{prefix}.enc.{i}", taps, width if i == 0 else channels, channels) for i in range(levels)]
        self.bottleneck = store.conv(f"{prefix}.enc.latent", 1, channels, spec.latent_dim)
        self.decoder = [
            store.conv(f"{prefix}.dec.{i}", taps, spec.latent_dim if i == 0 else channels, channels) for i in range(levels)
        ]
        self.head = store.conv(f"{prefix}.dec.out", 1, channels, width)

    def encode(self, x: Tensor) -> Tensor:
        for i, (kernel, bias) in enumerate(self.encoder):
            x = nk.relu(nk.dilated_causal_conv1d(x, kernel, dilation=2**i, bias=bias))
        kernel, bias = self.bottleneck
        z = nk.dilated_causal_conv1d(x, kernel, bias=bias)
        n, length, channels = z.shape
        return nk.mean(nk.reshape(z, (n, length // self.pool, self.pool, channels)), axis=2)

    def decode(self, z: Tensor) -> Tensor:
        u = nk.repeat(z, self.pool, axis=1)
        for i, (kernel, bias) in enumerate(self.decoder):
            dilation = 2 ** (self.levels - 1 - i)
            u = nk.relu(nk.flip(nk.dilated_causal_conv1d(nk.flip(u, 1), kernel, dilation=dilation, bias=bias), 1))
        kernel, bias = self.head
        return nk.dilated_causal_conv1d(u, kernel, bias=bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class TcnSeq2SeqAutoencoder(Network):
    """LogCosh-trained TCN autoencoder scored by a Gaussian fitted on validation errors."""

    calibrated = True

    def build(self) -> None:
        self.autoencoder = TcnAutoencoder(self.store, "ae", self.spec, self.D)

    def loss(self, batch, rng, epoch):
        return nk.loss(self.autoencoder(Tensor(batch)), batch, LossKind.LOGCOSH)

    def _errors(self, windows: np.ndarray) -> np.ndarray:
        return self.autoencoder(Tensor(windows)).numpy() - windows

    def calibration_errors(self, values):
        windows, _ = make_windows(values, WindowSpec(width=self.w))
        return np.concatenate([self._errors(windows[part]).reshape(-1, self.D) for part in _chunks(len(windows))])

    def window_scores(self, windows, rng):
        return nll(self._gaussian(), self._errors(windows)).mean(axis=1)


# ── Forecasting ──────────────────────────────────────────────────────────────

class Forecaster(Network):
    family = "forecasting"
    method_type = "Forecasting"
    autoencoding = False

    @property
    def target_steps(self) -> int:  # type: ignore[override]
        return self.spec.horizon

    @property
    def warmup(self) -> int:
        return self.w

    @property
    def min_length(self) -> int:
        return self.w + 1

    def predict(self, windows: np.ndarray) -> Tensor:
        raise NotImplementedError

    def _inputs(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Input windows, their start offsets and the k targets after each (zero past the end)."""
        T = values.shape[0]
        if T < self.w + 1:
            raise ContractError(f"series of length {T} is too short for window {self.w} plus one target")
        windows, starts = make_windows(values[:-1], WindowSpec(width=self.w))
        padded = np.concatenate([values, np.zeros((self.target_steps, self.D))])
        offsets = starts + self.w
        targets = np.stack([padded[o : o + self.target_steps] for o in offsets])
        return windows, offsets, targets

    def _prediction_errors(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        windows, offsets, targets = self._inputs(values)
        preds = np.concatenate([self.predict(windows[part]).numpy() for part in _chunks(len(windows))])
        return preds - targets, offsets

    def calibration_errors(self, values):
        errors, offsets = self._prediction_errors(values)
        valid = offsets[:, None] + np.arange(self.target_steps)[None, :] < values.shape[0]
        return errors[valid]

    def loss(self, batch, rng, epoch):
        return nk.loss(self.predict(batch[:, : self.w]), batch[:, self.w :], LossKind.MSE)


class LstmPredictor(Forecaster):
    calibrated = True

    def build(self) -> None:
        hidden = self.spec.hidden_size
        self.layers = [
            self.store.lstm(f"lstm.{i}", self.D if i == 0 else hidden, hidden) for i in range(self.spec.layers)
        ]
        self.head = self.store.linear("head", hidden, self.target_steps * self.D)

    def predict(self, windows):
        sequence: Tensor = Tensor(windows)
        for params in self.layers:
            states, _ = nk.lstm_sequence(sequence, params)
            sequence = nk.stack(states, axis=1)
        last = sequence[:, -1, :]
        return nk.reshape(_dense(last, self.head), (windows.shape[0], self.target_steps, self.D))

    def score_series(self, values, rng):
        errors, offsets = self._prediction_errors(values)
        return aggregate_overlaps(nll(self._gaussian(), errors), offsets, values.shape[0])


class TcnPredictor(Forecaster):
    """Max-pooling TCN with an MLP head; MAE for training, MSE of averaged predictions for scoring."""

    def build(self) -> None:
        channels, taps = self.spec.hidden_size, self.spec.kernel_size
        self.convs = [
            self.store.conv(f"conv.{i}", taps, self.D if i == 0 else channels, channels) for i in range(self.spec.tcn_levels)
        ]
        length = self.w
        for _ in self.convs:
            length = length // 2 if length >= 2 else length
        self.fc = [
            self.store.linear("fc.0", length * channels, self.spec.hidden_size),
            self.store.linear("fc.1", self.spec.hidden_size, self.target_steps * self.D),
        ]

    def predict(self, windows):
        x: Tensor = Tensor(windows)
        for kernel, bias in self.convs:
            x = nk.relu(nk.dilated_causal_conv1d(x, kernel, bias=bias))
            n, length, channels = x.shape
            if length >= 2:
                if length % 2:
                    x = x[:, 1:, :]
                    length -= 1
                x = nk.max_(nk.reshape(x, (n, length // 2, 2, channels)), axis=2)
        hidden = nk.relu(_dense(nk.reshape(x, (windows.shape[0], -1)), self.fc[0]))
        return nk.reshape(_dense(hidden, self.fc[1]), (windows.shape[0], self.target_steps, self.D))

    def loss(self, batch, rng, epoch):
        return nk.loss(self.predict(batch[:, : self.w]), batch[:, self.w :], LossKind.MAE)

    def score_series(self, values, rng):
        windows, offsets, _ = self._inputs(values)
        preds = np.concatenate([self.predict(windows[part]).numpy() for part in _chunks(len(windows))])
        T = values.shape[0]
        averaged = aggregate_overlaps(preds, offsets, T)
        covered = coverage_counts(offsets, self.target_steps, T) > 0
        return fill_warmup(((averaged - values) ** 2).mean(axis=1), covered)


class TcnSeq2SeqPredictor(Forecaster):
    """Dilated causal TCN predicting the window shifted by one step."""

    calibrated = True
    target_steps = 1
    taps_concatenated = 3

    def build(self) -> None:
        channels, taps = self.spec.hidden_size, self.spec.kernel_size
        self.convs = [
            self.store.conv(f"conv.{i}", taps, self.D if i == 0 else channels, channels) for i in range(self.spec.tcn_levels)
        ]
        joined = min(self.taps_concatenated, len(self.convs)) * channels
        self.head = self.store.conv("head", 1, joined, self.D)

    def forward(self, windows: np.ndarray) -> Tensor:
        x: Tensor = Tensor(windows)
        outputs = []
        for i, (kernel, bias) in enumerate(self.convs):
            x = nk.relu(nk.dilated_causal_conv1d(x, kernel, dilation=2**i, bias=bias))
            outputs.append(x)
        kernel, bias = self.head
        joined = nk.concat(outputs[-self.taps_concatenated :], axis=-1)
        return nk.dilated_causal_conv1d(joined, kernel, bias=bias)

    def predict(self, windows):
        return self.forward(windows)[:, -1:, :]

    def loss(self, batch, rng, epoch):
        return nk.loss(self.forward(batch[:, : self.w]), batch[:, 1:], LossKind.MSE)

    def score_series(self, values, rng):
        errors, offsets = self._prediction_errors(values)
        return aggregate_overlaps(nll(self._gaussian(), errors[:, 0, :]), offsets, values.shape[0])


# ── Generative ───────────────────────────────────────────────────────────────

class LstmVae(Network):
    """Per-step Gaussian posterior and likelihood; prior mean from an LSTM over z_{t-1}."""

    family = "vae"
    method_type = "Generative-VAE"

    def build(self) -> None:
        hidden, latent = self.spec.hidden_size, self.spec.latent_dim
        self.encoder = self.store.lstm("enc", self.D, hidden)
        self.post_mu = self.store.linear("enc.mu", hidden, latent)
        self.post_var = self.store.linear("enc.var", hidden, latent)
        self.prior = self.store.lstm("prior", latent, hidden)
        self.prior_mu = self.store.linear("prior.mu", hidden, latent)
        self.decoder = self.store.lstm("dec", latent, hidden)
        self.rec_mu = self.store.linear("dec.mu", hidden, self.D)
        self.rec_var = self.store.linear("dec.var", hidden, self.D)

    def posterior(self, x: Tensor) -> tuple[Tensor, Tensor]:
        states, _ = nk.lstm_sequence(x, self.encoder)
        h = nk.stack(states, axis=1)
        return _dense(h, self.post_mu), _variance(_dense(h, self.post_var))

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        states, _ = nk.lstm_sequence(z, self.decoder)
        h = nk.stack(states, axis=1)
        return _dense(h, self.rec_mu), _variance(_dense(h, self.rec_var))

    def prior_mean(self, z: Tensor) -> Tensor:
        shifted = nk.concat([Tensor(np.zeros((z.shape[0], 1, z.shape[2]))), z[:, :-1, :]], axis=1)
        states, _ = nk.lstm_sequence(shifted, self.prior)
        return _dense(nk.stack(states, axis=1), self.prior_mu)

    def encode_input(self, batch: np.ndarray, rng: np.random.Generator) -> Tensor:
        return Tensor(batch)

    def negative_elbo(self, batch: np.ndarray, rng: np.random.Generator, inputs: Tensor | None = None) -> Tensor:
        """Per-window -ELBO divided by the window length, shape (N,)."""
        mu_q, var_q = self.posterior(inputs if inputs is not None else Tensor(batch))
        z = _sample(mu_q, var_q, rng)
        mu_x, var_x = self.decode(z)
        reconstruction = nk.sum_(_gaussian_nll(batch, mu_x, var_x), axis=(1, 2))
        kl = nk.sum_(_kl_unit(mu_q, var_q, self.prior_mean(z)), axis=(1, 2))
        return (reconstruction + kl) / float(self.w)

    def loss(self, batch, rng, epoch):
        return nk.mean(self.negative_elbo(batch, rng, self.encode_input(batch, rng)))

    def window_scores(self, windows, rng):
        mu_q, var_q = (t.numpy() for t in self.posterior(Tensor(windows)))
        draws = []
        for _ in range(self.spec.mc_samples):
            z = _sample(Tensor(mu_q), Tensor(var_q), rng)
            mu_x, var_x = (t.numpy() for t in self.decode(z))
            prior = self.prior_mean(z).numpy()
            draws.append(-elbo(windows, mu_q, var_q, mu_x, var_x, prior, 1.0, batch_axes=1) / self.w)
        return np.mean(draws, axis=0)

    def _decoder_moments(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.decode(Tensor(z))
        return mean.numpy(), var.numpy()


class LstmDenoisingVae(LstmVae):
    """Noise-injected inputs, interpolated prior mean, reconstruction-probability score."""

    def build(self) -> None:
        if self.w < 2:
            raise ConfigError("LstmDVAE needs a window of at least 2 steps")
        hidden, latent = self.spec.hidden_size, self.spec.latent_dim
        self.encoder = self.store.lstm("enc", self.D, hidden)
        self.post_mu = self.store.linear("enc.mu", hidden, latent)
        self.post_var = self.store.linear("enc.var", hidden, latent)
        self.v1 = self.store.uniform("prior.v1", (latent,), fan_in=latent)
        self.vT = self.store.uniform("prior.vT", (latent,), fan_in=latent)
        self.decoder = self.store.lstm("dec", latent, hidden)
        self.rec_mu = self.store.linear("dec.mu", hidden, self.D)
        self.rec_var = self.store.linear("dec.var", hidden, self.D)
        steps = np.arange(self.w, dtype=np.float64)
        self._frac = (steps / (self.w - 1))[:, None]

    def prior_mean(self, z: Tensor) -> Tensor:
        return (1.0 - self._frac) * self.v1 + self._frac * self.vT

    def prior_means(self) -> np.ndarray:
        return dvae_prior_mean(self.v1.numpy(), self.vT.numpy(), np.arange(self.w), self.w - 1)

    def encode_input(self, batch, rng):
        return Tensor(batch + self.spec.input_noise_std * rng.standard_normal(batch.shape))

    def window_scores(self, windows, rng):
        mu_q, var_q = self.posterior(Tensor(windows))
        log_prob = reconstruction_probability(
            windows, self._decoder_moments, mu_q.numpy(), var_q.numpy(), self.spec.mc_samples, rng, batch_axes=1
        )
        return -log_prob / (self.w * self.D)


class DonutMultivariate(Network):
    """MLP VAE on flattened windows trained with cell masking."""

    family = "vae"
    method_type = "Generative-VAE"

    def build(self) -> None:
        flat, hidden, latent = self.w * self.D, self.spec.hidden_size, self.spec.latent_dim
        self.encoder = [self.store.linear("enc.0", flat, hidden), self.store.linear("enc.1", hidden, hidden)]
        self.post_mu = self.store.linear("enc.mu", hidden, latent)
        self.post_var = self.store.linear("enc.var", hidden, latent)
        self.decoder = [self.store.linear("dec.0", latent, hidden), self.store.linear("dec.1", hidden, hidden)]
        self.rec_mu = self.store.linear("dec.mu", hidden, flat)
        self.rec_var = self.store.linear("dec.var", hidden, flat)

    def posterior(self, flat: np.ndarray) -> tuple[Tensor, Tensor]:
        h: Tensor = Tensor(flat)
        for layer in self.encoder:
            h = nk.relu(_dense(h, layer))
        return _dense(h, self.post_mu), _variance(_dense(h, self.post_var))

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h = z
        for layer in self.decoder:
            h = nk.relu(_dense(h, layer))
        return _dense(h, self.rec_mu), _variance(_dense(h, self.rec_var))

    def loss(self, batch, rng, epoch):
        masked, mask = mask_cells_donut(batch, self.spec.mask_rate, rng)
        n = batch.shape[0]
        observed = 1.0 - mask.reshape(n, -1)
        mu_q, var_q = self.posterior(masked.reshape(n, -1))
        mu_x, var_x = self.decode(_sample(mu_q, var_q, rng))
        reconstruction = nk.sum_(_gaussian_nll(batch.reshape(n, -1), mu_x, var_x) * observed, axis=1)
        kl = nk.sum_(_kl_unit(mu_q, var_q, 0.0), axis=1)
        return nk.mean(reconstruction + kl) / float(self.w)

    def _decoder_moments(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.decode(Tensor(z))
        return mean.numpy(), var.numpy()

    def window_scores(self, windows, rng):
        flat = windows.reshape(windows.shape[0], -1)
        mu_q, var_q = self.posterior(flat)
        log_prob = reconstruction_probability(
            flat, self._decoder_moments, mu_q.numpy(), var_q.numpy(), self.spec.mc_samples, rng, batch_axes=1
        )
        return -log_prob / flat.shape[1]


class BeatGan(Network):
    """TCN autoencoder generator with a TCN discriminator and feature matching."""

    family = "gan"
    method_type = "Generative-GAN"

    def build(self) -> None:
        channels, taps = self.spec.hidden_size, self.spec.kernel_size
        self.generator = TcnAutoencoder(self.store, "gen", self.spec, self.D)
        self.critic = [
            self.store.conv(f"disc.{i}", taps, self.D if i == 0 else channels, channels) for i in range(self.spec.tcn_levels)
        ]
        self.critic_out = self.store.linear("disc.out", channels, 1)

    def features(self, x: Tensor) -> Tensor:
        """Second-to-last discriminator layer: time-averaged conv features."""
        for i, (kernel, bias) in enumerate(self.critic):
            x = nk.relu(nk.dilated_causal_conv1d(x, kernel, dilation=2**i, bias=bias))
        return nk.mean(x, axis=1)

    def logit(self, x: Tensor) -> Tensor:
        return _dense(self.features(x), self.critic_out)

    def _generator_loss(self, batch, rng, epoch):
        fake = self.generator(Tensor(batch))
        with nk.no_grad():
            real_features = self.features(Tensor(batch)).numpy()
        return nk.loss(fake, batch) + self.spec.beatgan_lambda * nk.loss(self.features(fake), real_features)

    def _discriminator_loss(self, batch, rng, epoch):
        with nk.no_grad():
            fake = self.generator(Tensor(batch)).numpy()
        real_term = nk.mean(nk.softplus(-self.logit(Tensor(batch))))
        fake_term = nk.mean(nk.softplus(self.logit(Tensor(fake))))
        return real_term + fake_term

    def phases(self) -> list[Phase]:
        return [
            Phase("generator", self._generator_loss, ("gen.",)),
            Phase("discriminator", self._discriminator_loss, ("disc.",)),
        ]

    def window_scores(self, windows, rng):
        return _window_mse(self.generator(Tensor(windows)).numpy(), windows)

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from app.errors import ConfigError, ContractError, DataError, ParseError
from app.schemas import DetectorSpec, SynthConfig, Variant, WindowSpec
from app.services import dataio, detectors, evalkit
from app.services import numkit as nk
from app.services.dataio import SeriesMatrix
from app.services.networks import reversed_target


def tiny_spec(variant: Variant, **overrides) -> DetectorSpec:
    base = {
        "variant": variant,
        "window": WindowSpec(width=8),
        "hidden_size": 4,
        "latent_dim": 2,
        "epochs": 1,
        "batch_size": 16,
        "learning_rate": 1e-2,
        "tcn_levels": 2,
        "pool_factor": 2,
        "mc_samples": 2,
        "horizon": 2,
        "seed": 3,
    }
    base.update(overrides)
    return DetectorSpec(**base)


def tiny_split(T: int = 40, D: int = 3, **overrides) -> dataio.DatasetSplit:
    config = SynthConfig(runs=2, normal_runs=4, T=T, D=D, seed=5, affected_fraction=0.5, **overrides)
    return dataio.split_dataset(dataio.synth_dataset(config), validation_fraction=0.25)


def test_registry_lists_every_variant() -> None:
    infos = {info.variant: info for info in detectors.registry()}
    assert set(infos) == set(Variant)
    assert infos[Variant.UNTRAINED_LSTM_AE].trained is False
    assert infos[Variant.LSTM_P].calibrated is True
    assert infos[Variant.TCN_P].family == "forecasting"
    assert detectors.method_type("BeatGAN") == "Generative-GAN"


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_scores_every_step(variant: Variant) -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(variant), split)
    result = detectors.score(model, split.test[0].series)
    assert len(result) == split.test[0].series.T
    assert np.all(np.isfinite(result.scores))
    assert 0 <= result.warmup <= model.spec.window.width
    if model.network.trained:
        assert len(model.history) == 1


def test_warmup_prefix_copies_first_score() -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(Variant.DENSE_AE), split)
    result = detectors.score(model, split.test[0].series)
    assert result.warmup == 7
    assert np.all(result.scores[:7] == result.scores[7])


def test_fit_is_deterministic() -> None:
    split = tiny_split()
    first = detectors.fit(tiny_spec(Variant.LSTM_AE, epochs=2), split)
    second = detectors.fit(tiny_spec(Variant.LSTM_AE, epochs=2), split)
    assert first.history == second.history
    series = split.test[0].series
    assert np.array_equal(detectors.score(first, series).scores, detectors.score(second, series).scores)


def test_untrained_variant_keeps_initial_parameters() -> None:
    spec = tiny_spec(Variant.UNTRAINED_LSTM_AE)
    model = detectors.fit(spec, tiny_split())
    fresh = detectors.build_network(spec, model.D)
    for name in fresh.store:
        assert np.array_equal(model.params[name].data, fresh.store[name].data)
    assert model.history == []


def test_usad_with_only_first_term_is_autoencoder_error() -> None:
    network = detectors.build_network(tiny_spec(Variant.USAD, usad_alpha=1.0, usad_beta=0.0), 3)
    windows = np.random.default_rng(0).normal(size=(5, 8, 3))
    with nk.no_grad():
        scores = network.window_scores(windows, np.random.default_rng(1))
        recon = network.reconstruct(nk.Tensor(windows)).numpy()
    assert np.allclose(scores, ((recon - windows) ** 2).mean(axis=(1, 2)))


def test_usad_phases_update_disjoint_decoders() -> None:
    network = detectors.build_network(tiny_spec(Variant.USAD), 3)
    ae1, ae2 = network.phases()
    assert ae1.prefixes == ("enc.", "dec1.")
    assert ae2.prefixes == ("enc.", "dec2.")


def test_denoising_vae_prior_interpolates_endpoints() -> None:
    network = detectors.build_network(tiny_spec(Variant.LSTM_DVAE), 3)
    means = network.prior_means()
    assert means.shape == (8, 2)
    assert np.allclose(means[0], network.v1.numpy())
    assert np.allclose(means[-1], network.vT.numpy())
    assert np.allclose(np.diff(means, axis=0), (means[-1] - means[0]) / 7)

    taped = network.prior_mean(nk.Tensor(np.zeros((1, 8, 2)))).numpy()
    assert np.allclose(taped, means)


def test_reversed_target() -> None:
    windows = np.arange(12.0).reshape(1, 4, 3)
    assert np.array_equal(reversed_target(windows)[0, 0], windows[0, -1])


def test_dense_autoencoder_flags_faulty_steps() -> None:
    split = tiny_split(T=80, D=4, fault_magnitude=6.0)
    spec = tiny_spec(Variant.DENSE_AE, hidden_size=16, latent_dim=4, epochs=15)
    model = detectors.fit(spec, split)
    run = split.test[0]
    scores = detectors.score(model, run.series).scores
    labels = run.series.labels.astype(bool)
    assert scores[labels].mean() > scores[~labels][8:].mean()


def test_fit_errors() -> None:
    split = tiny_split()
    with pytest.raises(ContractError):
        detectors.fit(tiny_spec(Variant.DENSE_AE), dataio.DatasetSplit(train=[], validation=[], test=[]))
    with pytest.raises(ContractError):
        detectors.fit(tiny_spec(Variant.LSTM_P), dataio.DatasetSplit(train=split.train, validation=[], test=[]))
    with pytest.raises(ConfigError):
        detectors.fit(tiny_spec(Variant.DENSE_AE, latent_dim=24), split)
    with pytest.raises(ConfigError):
        detectors.build_network(tiny_spec(Variant.TCN_S2S_AE, pool_factor=3), 3)

    odd = dataio.RunRecord(run_id=9, fault_id=0, series=SeriesMatrix(np.zeros((40, 2))))
    with pytest.raises(DataError):
        detectors.fit(tiny_spec(Variant.DENSE_AE), dataio.DatasetSplit(train=split.train + [odd], validation=[], test=[]))


def test_score_rejects_wrong_width() -> None:
    model = detectors.fit(tiny_spec(Variant.DENSE_AE), tiny_split())
    with pytest.raises(ContractError):
        detectors.score(model, SeriesMatrix(np.zeros((40, 5))))


@pytest.mark.parametrize("variant", [Variant.LSTM_P, Variant.USAD])
def test_model_round_trip(tmp_path: Path, variant: Variant) -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(variant), split)
    path = tmp_path / f"{variant.value}.model.jsonl"
    detectors.save_model(model, path)
    restored = detectors.load_model(path)
    series = split.test[0].series
    assert np.allclose(detectors.score(model, series).scores, detectors.score(restored, series).scores)
    assert restored.spec == model.spec
    assert restored.history == model.history


def test_load_model_reports_bad_lines(tmp_path: Path) -> None:
    model = detectors.fit(tiny_spec(Variant.DENSE_AE), tiny_split())
    path = tmp_path / "dense.model.jsonl"
    detectors.save_model(model, path)
    lines = path.read_text().splitlines()

    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines[:2] + ["{not json"] + lines[3:]) + "\n")
    with pytest.raises(ParseError) as excinfo:
        detectors.load_model(broken)
    assert excinfo.value.line == 3

    foreign = tmp_path / "foreign.jsonl"
    foreign.write_text('{"format": "something-else", "version": 1}\n')
    with pytest.raises(ParseError):
        detectors.load_model(foreign)


def test_tcn_predictor_averages_each_feature_across_the_horizon() -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(Variant.TCN_P, horizon=3), split)
    series = split.test[0].series
    result = detectors.score(model, series)
    assert result.scores.shape == (series.T,)
    assert result.warmup == 8
    assert np.all(result.scores[:8] == result.scores[8])


def test_seq2seq_predictor_calibrates_on_last_point_errors() -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(Variant.TCN_S2S_P), split)
    network = model.network
    values = dataio.apply_norm(split.validation[0].series, model.norm).values
    windows, _ = dataio.make_windows(values[:-1], WindowSpec(width=8))
    with nk.no_grad():
        errors = network.calibration_errors(values)
        last_point = network.forward(windows).numpy()[:, -1, :] - values[8:]
    assert errors.shape == (values.shape[0] - 8, 3)
    assert np.allclose(errors, last_point)


def test_variational_scores_use_reconstruction_probability() -> None:
    from app.services.scoring import reconstruction_probability

    network = detectors.build_network(tiny_spec(Variant.DONUT_MV, mc_samples=3), 3)
    windows = np.random.default_rng(2).normal(size=(4, 8, 3))
    flat = windows.reshape(4, -1)
    with nk.no_grad():
        scores = network.window_scores(windows, np.random.default_rng(7))
        mu_q, var_q = (t.numpy() for t in network.posterior(flat))
        expected = reconstruction_probability(
            flat, network._decoder_moments, mu_q, var_q, 3, np.random.default_rng(7), batch_axes=1
        )
    assert np.allclose(scores, -expected / 24)


@pytest.mark.parametrize("variant,too_short", [(Variant.DENSE_AE, 7), (Variant.LSTM_P, 8), (Variant.TCN_P, 8)])
def test_score_needs_one_full_window(variant: Variant, too_short: int) -> None:
    split = tiny_split()
    model = detectors.fit(tiny_spec(variant), split)
    values = split.test[0].series.values
    with pytest.raises(ContractError):
        detectors.score(model, SeriesMatrix(values[:too_short]))
    assert len(detectors.score(model, SeriesMatrix(values[: too_short + 1]))) == too_short + 1


STEADY_VARIANTS = [
    v for v in Variant if v not in (Variant.USAD, Variant.BEATGAN, Variant.UNTRAINED_LSTM_AE)
]


@pytest.mark.parametrize("variant", STEADY_VARIANTS)
def test_training_loss_falls_across_five_epoch_spans(variant: Variant) -> None:
    model = detectors.fit(tiny_spec(variant, epochs=10), tiny_split())
    history = np.array(model.history)
    assert np.all(np.isfinite(history))
    spans = history.reshape(2, 5).mean(axis=1)
    assert spans[1] <= spans[0]


@pytest.mark.parametrize("variant", [Variant.USAD, Variant.BEATGAN])
def test_adversarial_training_stays_finite(variant: Variant) -> None:
    model = detectors.fit(tiny_spec(variant, epochs=5), tiny_split())
    assert len(model.history) == 5
    assert np.all(np.isfinite(model.history))


def permute_runs(runs: list[dataio.RunRecord], order: np.ndarray) -> list[dataio.RunRecord]:
    return [
        replace(run, series=SeriesMatrix(run.series.values[:, order], labels=run.series.labels)) for run in runs
    ]


def test_dense_autoencoder_is_feature_permutation_invariant(monkeypatch) -> None:
    split = tiny_split(D=4)
    order = np.array([2, 0, 3, 1])
    width = 8
    flat = (np.arange(width)[:, None] * 4 + order[None, :]).ravel()
    spec = tiny_spec(Variant.DENSE_AE, epochs=2)
    baseline = detectors.fit(spec, split)

    build = detectors.build_network

    def build_permuted(spec: DetectorSpec, D: int):
        network = build(spec, D)
        arrays = {name: tensor.numpy() for name, tensor in network.store.items()}
        arrays["enc.0.W"] = arrays["enc.0.W"][flat]
        arrays["dec.1.W"] = arrays["dec.1.W"][:, flat]
        arrays["dec.1.b"] = arrays["dec.1.b"][flat]
        network.store.load(arrays)
        return network

    monkeypatch.setattr(detectors, "build_network", build_permuted)
    shuffled = dataio.DatasetSplit(
        train=permute_runs(split.train, order),
        validation=permute_runs(split.validation, order),
        test=permute_runs(split.test, order),
    )
    permuted = detectors.fit(spec, shuffled)

    assert np.allclose(permuted.history, baseline.history, rtol=1e-9)
    for original, moved in zip(split.test, shuffled.test):
        expected = detectors.score(baseline, original.series).scores
        assert np.allclose(detectors.score(permuted, moved.series).scores, expected, rtol=1e-6, atol=1e-12)


RECONSTRUCTION_VARIANTS = [info.variant for info in detectors.registry() if info.family == "reconstruction"]


@pytest.mark.parametrize("variant", RECONSTRUCTION_VARIANTS)
def test_mean_score_rises_with_added_noise(variant: Variant) -> None:
    for seed in range(3):
        config = SynthConfig(runs=1, normal_runs=5, T=120, D=4, seed=seed, affected_fraction=0.5)
        split = dataio.split_dataset(dataio.synth_dataset(config), validation_fraction=0.25)
        model = detectors.fit(tiny_spec(variant, epochs=3, seed=seed), split)
        held_out = split.validation[-1].series.values
        noise = np.random.default_rng(100 + seed).normal(size=held_out.shape) * model.norm.std
        means = [
            detectors.score(model, SeriesMatrix(held_out + level * noise)).scores.mean() for level in (0.0, 1.0, 2.0)
        ]
        assert means[0] < means[1] < means[2], (seed, means)


def desk_scale_split() -> dataio.DatasetSplit:
    config = SynthConfig(runs=20, normal_runs=8, T=400, D=8, fault_kind="step", fault_magnitude=5.0, seed=7)
    return dataio.split_dataset(dataio.synth_dataset(config), validation_fraction=0.25)


def desk_spec(variant: Variant) -> DetectorSpec:
    return DetectorSpec(
        variant=variant,
        window=WindowSpec(width=16),
        hidden_size=16,
        latent_dim=4,
        epochs=5,
        learning_rate=3e-3,
        mc_samples=4,
        seed=7,
    )


def test_desk_scale_detectors_separate_step_faults() -> None:
    split = desk_scale_split()
    labels = [run.series.labels for run in split.test]
    prevalence = float(np.concatenate(labels).mean())
    rng = np.random.default_rng(0)
    random_auprc = evalkit.evaluate_runs((rng.uniform(size=len(y)), y) for y in labels).auprc

    for info in detectors.registry():
        model = detectors.fit(desk_spec(info.variant), split)
        report = evalkit.evaluate_runs((detectors.score(model, run.series).scores, run.series.labels) for run in split.test)
        if not info.trained:
            assert report.auprc > prevalence, info.variant
            continue
        assert report.auprc >= prevalence + 0.2, (info.variant, report.auprc)
        if info.family == "reconstruction":
            assert report.auprc >= random_auprc + 0.3, (info.variant, report.auprc)

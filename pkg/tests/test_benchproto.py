from itertools import count
from pathlib import Path

import pytest

from app.errors import ConfigError, ContractError, ParseError, SchemaError
from app.schemas import BenchmarkResult, FoldOutcome, GridSpec, MethodScore, SynthConfig, Variant
from app.services import benchproto, dataio, detectors

# (method, F1 rank, AUPRC rank, published total rank)
PUBLISHED_RANKS = [
    ("BeatGAN", 1, 2, 1),
    ("TCN-S2S-AE", 3, 1, 2),
    ("Dense-AE", 4, 3, 3),
    ("LSTM-AE", 5, 4, 4),
    ("LSTM-P", 2, 8, 5),
    ("MSCRED", 7, 5, 6),
    ("Donut", 6, 7, 7),
    ("LSTM-VAE", 11, 6, 8),
    ("OmniAnomaly", 9, 12, 9),
    ("SIS-VAE", 10, 14, 10),
    ("Untrained-LSTM-AE", 13, 13, 11),
    ("LSTM-DVAE", 16, 11, 12),
    ("USAD", 12, 16, 13),
    ("GMM-GRU-VAE", 21, 10, 14),
    ("TCN-S2S-P", 23, 9, 15),
    ("LSTM-MAX-AE", 18, 15, 16),
    ("LSTM-AE-OC-SVM", 8, 26, 17),
    ("LSTM-VAE-GAN", 14, 20, 17),
    ("GenAD", 19, 19, 19),
    ("TadGAN", 15, 23, 19),
    ("STGAT-MAD", 22, 17, 21),
    ("Mad-GAN", 17, 24, 22),
    ("MTAD-GAT", 25, 18, 23),
    ("DeepANT/TCN-P", 24, 22, 24),
    ("GDN", 26, 21, 25),
    ("LSTM-2S2-P", 20, 27, 25),
    ("THOC", 27, 25, 27),
]

BASE_CONFIG = {"window": 8, "hidden_size": 4, "latent_dim": 2, "epochs": 1, "batch_size": 16}


def bench_split() -> dataio.DatasetSplit:
    config = SynthConfig(runs=5, normal_runs=4, T=40, D=3, seed=2, affected_fraction=0.5)
    return dataio.split_dataset(dataio.synth_dataset(config))


def test_published_total_ranking_is_reproduced() -> None:
    rows = [(name, 1 - f1_rank / 100, 1 - auprc_rank / 100) for name, f1_rank, auprc_rank, _ in PUBLISHED_RANKS]
    ranked = {row.method: row for row in benchproto.rank_methods(rows)}
    for name, f1_rank, auprc_rank, total in PUBLISHED_RANKS:
        assert ranked[name].f1_rank == f1_rank
        assert ranked[name].auprc_rank == auprc_rank
        assert ranked[name].total_rank == total


def test_ranking_uses_competition_ranks_and_sorts_by_total() -> None:
    rows = benchproto.rank_methods(
        [
            MethodScore(method="b", f1=0.9, auprc=0.8),
            MethodScore(method="a", f1=0.9, auprc=0.8),
            MethodScore(method="c", f1=0.5, auprc=0.9),
        ]
    )
    assert [r.method for r in rows] == ["a", "b", "c"]
    assert [r.f1_rank for r in rows] == [1, 1, 3]
    assert [r.auprc_rank for r in rows] == [2, 2, 1]
    assert [r.total_rank for r in rows] == [1, 1, 3]
    with pytest.raises(ContractError):
        benchproto.rank_methods([])


def test_dominant_method_ranks_first() -> None:
    rows = benchproto.rank_methods([("weak", 0.4, 0.5), ("strong", 0.9, 0.95), ("middle", 0.6, 0.7)])
    assert rows[0].method == "strong"
    assert rows[0].total_rank == 1


def test_make_folds() -> None:
    assert [len(f) for f in benchproto.make_folds(list(range(10))).folds] == [2, 2, 2, 2, 2]
    plan = benchproto.make_folds(list(range(11)))
    assert [len(f) for f in plan.folds] == [3, 2, 2, 2, 2]
    assert sum(plan.folds, []) == list(range(11))
    with pytest.raises(ContractError):
        benchproto.make_folds(list(range(4)))


def test_eval_folds_exclude_neighbours() -> None:
    assert benchproto.eval_folds_for(0, 5, 1) == {2, 3, 4}
    assert benchproto.eval_folds_for(2, 5, 1) == {0, 4}
    assert benchproto.eval_folds_for(4, 5, 1) == {0, 1, 2}
    assert benchproto.eval_folds_for(2, 5, 0) == {0, 1, 3, 4}
    with pytest.raises(ContractError):
        benchproto.eval_folds_for(5, 5, 1)


def test_expand_grid_merges_base() -> None:
    grid = GridSpec(method=Variant.DENSE_AE, candidates={"epochs": [1, 2], "latent_dim": [2, 3]}, base={"window": 8})
    configs = benchproto.expand_grid(grid)
    assert len(configs) == 4
    assert configs[0] == {"window": 8, "epochs": 1, "latent_dim": 2}
    assert configs[-1] == {"window": 8, "epochs": 2, "latent_dim": 3}
    with pytest.raises(ConfigError):
        benchproto.expand_grid(GridSpec(method=Variant.DENSE_AE, candidates={"epochs": []}))


def test_detector_spec_maps_window_keys() -> None:
    spec = benchproto.detector_spec(Variant.LSTM_AE, {"window": 12, "stride": 2, "hidden_size": 5}, seed=4)
    assert spec.window.width == 12
    assert spec.window.stride == 2
    assert spec.seed == 4
    with pytest.raises(ConfigError):
        benchproto.detector_spec(Variant.LSTM_AE, {"hidden_size": 0}, seed=0)


def test_grid_search_selects_per_fold() -> None:
    split = bench_split()
    plan = benchproto.make_folds(split.test)
    grid = GridSpec(method=Variant.DENSE_AE, candidates={"latent_dim": [2, 3]}, base=BASE_CONFIG)
    result = benchproto.grid_search(Variant.DENSE_AE, grid, split, plan, seed=1)
    assert result.method == "DenseAE"
    assert result.method_type == "Reconstruction"
    assert [f.fold for f in result.folds] == [0, 1, 2, 3, 4]
    assert result.configs_evaluated == 2
    assert all(f.selected_config["latent_dim"] in (2, 3) for f in result.folds)
    assert result.best_f1 == pytest.approx(sum(f.best_f1 for f in result.folds) / 5)


def test_grid_search_budget_still_evaluates_one_config() -> None:
    split = bench_split()
    plan = benchproto.make_folds(split.test)
    ticks = count(step=100)
    grid = GridSpec(method=Variant.DENSE_AE, candidates={"epochs": [0, 1, 2]}, base=BASE_CONFIG, budget_seconds=1)
    result = benchproto.grid_search(Variant.DENSE_AE, grid, split, plan, clock=lambda: float(next(ticks)))
    assert result.configs_evaluated == 1
    assert result.configs_total == 3
    assert any("budget" in w for w in result.warnings)


def test_grid_search_skips_failing_configs() -> None:
    split = bench_split()
    plan = benchproto.make_folds(split.test)
    grid = GridSpec(method=Variant.DENSE_AE, candidates={"latent_dim": [2, 500]}, base=BASE_CONFIG)
    result = benchproto.grid_search(Variant.DENSE_AE, grid, split, plan, workers=2)
    assert result.configs_evaluated == 1
    assert any("failed" in w for w in result.warnings)

    broken = GridSpec(method=Variant.DENSE_AE, candidates={"latent_dim": [500]}, base=BASE_CONFIG)
    with pytest.raises(ContractError):
        benchproto.grid_search(Variant.DENSE_AE, broken, split, plan)


def test_grid_search_needs_an_evaluation_fold() -> None:
    split = bench_split()
    plan = benchproto.make_folds(split.test, K=3, radius=2)
    grid = GridSpec(method=Variant.DENSE_AE, base=BASE_CONFIG)
    with pytest.raises(ContractError):
        benchproto.grid_search(Variant.DENSE_AE, grid, split, plan)


def test_benchmark_methods_records_failures() -> None:
    split = bench_split()
    plan = benchproto.make_folds(split.test)
    grids = [
        GridSpec(method=Variant.DENSE_AE, base=BASE_CONFIG),
        GridSpec(method=Variant.TCN_S2S_AE, base={**BASE_CONFIG, "pool_factor": 3}),
    ]
    results, failures = benchproto.benchmark_methods(grids, split, plan)
    assert [r.method for r in results] == ["DenseAE"]
    assert set(failures) == {"TcnS2SAE"}
    assert benchproto.rank_results(results)[0].method == "DenseAE"


def test_benchmark_methods_records_unexpected_crashes(monkeypatch) -> None:
    fit = detectors.fit

    def crashing_fit(spec, split):
        if spec.variant is Variant.USAD:
            raise RuntimeError("exploded")
        return fit(spec, split)

    monkeypatch.setattr(detectors, "fit", crashing_fit)
    split = bench_split()
    grids = [GridSpec(method=Variant.USAD, base=BASE_CONFIG), GridSpec(method=Variant.DENSE_AE, base=BASE_CONFIG)]
    results, failures = benchproto.benchmark_methods(grids, split, benchproto.make_folds(split.test))
    assert [r.method for r in results] == ["DenseAE"]
    assert failures == {"USAD": "RuntimeError: exploded"}


def sample_results() -> list[BenchmarkResult]:
    folds = [
        FoldOutcome(fold=i, selected_config={"epochs": i}, selection_f1=0.5, best_f1=0.6 + 0.1 * i, auprc=0.7)
        for i in range(2)
    ]
    return [
        BenchmarkResult(method="DenseAE", method_type="Reconstruction", folds=folds, configs_total=2, configs_evaluated=2),
        BenchmarkResult(method="USAD", method_type="Reconstruction", folds=[]),
    ]


def test_results_persist_and_reload(tmp_path: Path) -> None:
    path = tmp_path / "results.jsonl"
    benchproto.persist_results(sample_results(), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 2 + 1
    assert '"fold": null' in lines[-1]

    loaded = benchproto.load_results(path)
    assert [r.method for r in loaded] == ["DenseAE", "USAD"]
    assert loaded[0].best_f1 == pytest.approx(0.65)
    assert loaded[1].folds == []


def test_results_parse_errors(tmp_path: Path) -> None:
    path = tmp_path / "results.jsonl"
    benchproto.persist_results(sample_results(), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2] + ["[1, 2]"] + lines[3:]) + "\n")
    with pytest.raises(ParseError) as excinfo:
        benchproto.load_results(path)
    assert excinfo.value.line == 3
    assert excinfo.value.record == 1

    other = tmp_path / "ranking.jsonl"
    benchproto.persist_rankings(benchproto.rank_methods([("a", 0.5, 0.5)]), other)
    with pytest.raises(ParseError):
        benchproto.load_results(other)


def test_rankings_persist_and_export(tmp_path: Path) -> None:
    rows = benchproto.rank_methods([("DenseAE", 0.9, 0.8), ("USAD", 0.7, 0.85)])
    jsonl = tmp_path / "rankings.jsonl"
    benchproto.persist_rankings(rows, jsonl)
    assert benchproto.load_rankings(jsonl) == rows

    csv_path = tmp_path / "ranking.csv"
    benchproto.export_ranking_csv(rows, csv_path)
    header = csv_path.read_text().splitlines()[0]
    assert header == ",".join(benchproto.RANKING_COLUMNS)
    assert benchproto.load_ranking_csv(csv_path) == rows

    bad = tmp_path / "bad.csv"
    bad.write_text("Method,F1-Score\nx,0.5\n")
    with pytest.raises(SchemaError):
        benchproto.load_ranking_csv(bad)

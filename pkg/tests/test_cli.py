import json
from pathlib import Path

import pandas as pd
import pytest
from sqlalchemy import select

from app.cli import load_run_config, main
from app.database import make_session_factory
from app.models import BenchmarkRun, RankingEntry
from app.schemas import Variant
from app.services import detectors

TINY_INI = """
[synthetic]
runs = 5
normal_runs = 4
T = 40
D = 3
affected_fraction = 0.5

[detectors]
names = DenseAE
window = 8
hidden_size = 4
latent_dim = 2
epochs = 1
batch_size = 16

[grid]
learning_rate = 0.01, 0.001

[benchmark]
seed = 3
folds = 5
"""


def write_config(tmp_path: Path) -> Path:
    path = tmp_path / "bench.ini"
    path.write_text(TINY_INI)
    return path


def generate(tmp_path: Path, name: str = "synth.csv", seed: int = 7) -> Path:
    out = tmp_path / name
    code = main(["generate", "--seed", str(seed), "--T", "40", "--D", "3", "--runs", "2", "--normal-runs", "4", "--out", str(out)])
    assert code == 0
    return out


def test_load_run_config_sections(tmp_path: Path) -> None:
    config = load_run_config(write_config(tmp_path), {"workers": 2})
    assert config.seed == 3
    assert config.synthetic.seed == 3
    assert config.synthetic.T == 40
    assert config.detectors == [Variant.DENSE_AE]
    assert config.detector_overrides["latent_dim"] == 2
    assert config.grid == {"learning_rate": [0.01, 0.001]}
    assert config.workers == 2

    flagged = load_run_config(write_config(tmp_path), {"seed": 9})
    assert flagged.seed == 9
    assert flagged.synthetic.seed == 9


def test_generate_is_deterministic(tmp_path: Path) -> None:
    first = generate(tmp_path, "a.csv")
    second = generate(tmp_path, "b.csv")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == "fault_id,run_id,timestep,label,x1,x2,x3"
    assert generate(tmp_path, "c.csv", seed=8).read_bytes() != first.read_bytes()


def test_generate_rejects_unknown_fault_kind(tmp_path: Path, capsys) -> None:
    code = main(["generate", "--seed", "1", "--fault-kind", "explode", "--out", str(tmp_path / "x.csv")])
    assert code == 1
    assert "explode" in capsys.readouterr().err


def test_benchmark_requires_a_seed(tmp_path: Path) -> None:
    assert main(["benchmark", "--out", str(tmp_path / "out")]) == 1


def test_unknown_detector_is_a_usage_error(tmp_path: Path) -> None:
    data = generate(tmp_path)
    assert main(["train", "--seed", "1", "--dataset", str(data), "--detector", "Nope"]) == 1


def test_evaluate_perfect_scorer(tmp_path: Path, capsys) -> None:
    scores = tmp_path / "scores.csv"
    labels = tmp_path / "labels.csv"
    pd.DataFrame({"timestep": range(6), "score": [0.1, 0.2, 0.1, 0.9, 0.8, 0.95]}).to_csv(scores, index=False)
    pd.DataFrame({"label": [0, 0, 0, 1, 1, 1]}).to_csv(labels, index=False)
    curve = tmp_path / "curve.csv"

    code = main(["evaluate", "--scores", str(scores), "--labels", str(labels), "--curve-out", str(curve)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["best_f1"] == 1.0
    assert report["auprc"] == 1.0
    assert curve.exists()


def test_evaluate_length_mismatch_is_a_data_error(tmp_path: Path) -> None:
    scores = tmp_path / "scores.csv"
    labels = tmp_path / "labels.csv"
    pd.DataFrame({"score": [0.1, 0.2, 0.3]}).to_csv(scores, index=False)
    pd.DataFrame({"label": [0, 1]}).to_csv(labels, index=False)
    assert main(["evaluate", "--scores", str(scores), "--labels", str(labels)]) == 2


def test_train_score_evaluate_round_trip(tmp_path: Path, capsys) -> None:
    data = generate(tmp_path)
    model = tmp_path / "dense.model.jsonl"
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config), "--dataset", str(data), "--detector", "DenseAE", "--out", str(model)]) == 0

    scores = tmp_path / "scores.csv"
    selection = ["--fault-id", "1", "--run-id", "1"]
    assert main(["score", "--model", str(model), "--series", str(data), "--out", str(scores), *selection]) == 0
    frame = pd.read_csv(scores)
    assert list(frame.columns) == ["timestep", "score"]
    assert len(frame) == 40

    capsys.readouterr()
    assert main(["evaluate", "--scores", str(scores), "--labels", str(data), *selection]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["best_f1"] <= 1.0

    assert main(["score", "--model", str(model), "--series", str(data), "--out", str(scores)]) == 1


def test_benchmark_writes_results_and_history(tmp_path: Path) -> None:
    out = tmp_path / "out"
    db_url = f"sqlite:///{tmp_path / 'history.db'}"
    code = main(["benchmark", "--config", str(write_config(tmp_path)), "--out", str(out), "--database-url", db_url])
    assert code == 0

    ranking = pd.read_csv(out / "ranking.csv")
    assert list(ranking.columns) == [
        "Method", "Method Type", "F1-Score", "F1-Score Ranking", "AUPRC", "AUPRC Ranking", "Total Ranking",
    ]
    assert ranking["Method"].tolist() == ["DenseAE"]
    assert (out / "rankings.jsonl").exists()

    records = (out / "results.jsonl").read_text().splitlines()
    assert len(records) == 1 + 5

    with make_session_factory(db_url)() as db:
        runs = db.scalars(select(BenchmarkRun)).all()
        assert [r.method for r in runs] == ["DenseAE"]
        assert len(runs[0].folds) == 5
        assert db.scalars(select(RankingEntry)).first().total_rank == 1

    reranked = tmp_path / "reranked.csv"
    assert main(["rank", "--results", str(out / "results.jsonl"), "--out", str(reranked)]) == 0
    assert pd.read_csv(reranked)["Method"].tolist() == ["DenseAE"]


def test_benchmark_reports_partial_failure(tmp_path: Path, capsys) -> None:
    config = write_config(tmp_path)
    config.write_text(TINY_INI.replace("batch_size = 16", "batch_size = 16\npool_factor = 3"))
    out = tmp_path / "out"
    code = main(["benchmark", "--config", str(config), "--out", str(out), "--detectors", "DenseAE,TcnS2SAE"])
    assert code == 3
    assert "TcnS2SAE" in capsys.readouterr().err
    assert pd.read_csv(out / "ranking.csv")["Method"].tolist() == ["DenseAE"]


def test_benchmark_survives_a_crashing_method(tmp_path: Path, capsys, monkeypatch) -> None:
    fit = detectors.fit

    def crashing_fit(spec, split):
        if spec.variant is Variant.USAD:
            raise RuntimeError("exploded")
        return fit(spec, split)

    monkeypatch.setattr(detectors, "fit", crashing_fit)
    out = tmp_path / "out"
    code = main(["benchmark", "--config", str(write_config(tmp_path)), "--out", str(out), "--detectors", "USAD,DenseAE"])
    assert code == 3
    assert "USAD" in capsys.readouterr().err
    assert pd.read_csv(out / "ranking.csv")["Method"].tolist() == ["DenseAE"]
    assert (out / "results.jsonl").exists()


def test_seeded_benchmarks_write_identical_rankings(tmp_path: Path) -> None:
    config = str(write_config(tmp_path))
    for name in ("first", "second"):
        assert main(["benchmark", "--config", config, "--out", str(tmp_path / name), "--detectors", "DenseAE,LstmAE"]) == 0
    for artifact in ("ranking.csv", "rankings.jsonl"):
        assert (tmp_path / "first" / artifact).read_bytes() == (tmp_path / "second" / artifact).read_bytes()


def test_log_level_is_validated(tmp_path: Path, monkeypatch) -> None:
    target = ["generate", "--seed", "1", "--T", "20", "--D", "2", "--out", str(tmp_path / "x.csv")]
    with pytest.raises(SystemExit) as excinfo:
        main(["--log-level", "chatty", *target])
    assert excinfo.value.code == 1

    monkeypatch.setenv("BENCH_LOG_LEVEL", "verbose")
    assert main(target) == 1
    assert main(["--log-level", "debug", *target]) == 0

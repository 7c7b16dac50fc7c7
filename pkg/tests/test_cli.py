import csv
import json

import pytest

from uqcast.cli import RunConfig, UsageError, main

SMALL = dict(lstm_units=[4], dense_units=[4, 6, 2], lookback=8, epochs=3, batch_size=64,
             dropout_rate=0.05, seed=2)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--days", "3", "--seed", "4", "--out", str(d / "train.csv")]) == 0
    assert main(["synth", "--profile", "shifted", "--days", "3", "--seed", "5",
                 "--out", str(d / "shifted.csv")]) == 0
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "train.csv"),
                 "--out", str(d / "run")]) == 0
    return d


def test_synth_row_count_and_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--days", "30", "--seed", "9", "--out", str(a)]) == 0
    assert main(["synth", "--days", "30", "--seed", "9", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 1 + 8640
    assert a.read_bytes() == b.read_bytes()


def test_synth_usage_errors(tmp_path):
    assert main(["synth", "--days", "0", "--out", str(tmp_path / "x.csv")]) == 1
    assert main(["synth", "--out", str(tmp_path / "x.csv")]) == 1
    assert main(["nonsense"]) == 1
    (tmp_path / "p.json").write_text('{"colour": 1}')
    assert main(["synth", "--days", "1", "--profile", str(tmp_path / "p.json"),
                 "--out", str(tmp_path / "x.csv")]) == 3


def test_train_outputs_and_determinism(work, tmp_path):
    run = work / "run"
    assert {p.name for p in run.iterdir()} >= {"model.json", "train_log.csv", "resolved_config.json"}
    assert len(rows(run / "train_log.csv")) == SMALL["epochs"]
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["lstm_units"] == [4] and resolved["data"].endswith("train.csv")
    assert main(["train", "--config", str(work / "cfg.json"), "--data", str(work / "train.csv"),
                 "--out", str(tmp_path / "again")]) == 0
    for name in ("model.json", "train_log.csv"):
        assert (run / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_train_spectral_hundred_epochs(work, tmp_path):
    cfg = dict(SMALL, epochs=100, norm_mode="spectral", batch_size=256)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(work / "train.csv"),
                 "--out", str(tmp_path / "sn")]) == 0
    assert len(rows(tmp_path / "sn" / "train_log.csv")) == 100


def test_train_errors(work, tmp_path):
    cfg = str(work / "cfg.json")
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps(dict(SMALL, colour="red")))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--data", str(work / "train.csv"),
                 "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "neg.csv").write_text("timestamp,flow\n0,1\n300,-2\n")
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "neg.csv"),
                 "--out", str(tmp_path / "o")]) == 3


def test_run_config_rejects_unknown_keys():
    with pytest.raises(UsageError, match="colour"):
        RunConfig.from_dict({"colour": 1})
    assert RunConfig.from_dict({"epochs": 5}).train_config().epochs == 5


def test_uq_outputs(work, tmp_path):
    model, data = str(work / "run" / "model.json"), str(work / "train.csv")
    out = tmp_path / "uq"
    assert main(["uq", "--model", model, "--data", data, "--passes", "5", "--seed", "1",
                 "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names >= {"uncertainty.csv", "metrics.csv", "box_summary.csv", "band.svg", "resolved_config.json"}
    n_windows = 3 * 288 - 8
    n_test = n_windows - int(0.6 * n_windows) - int(0.15 * n_windows)
    unc = rows(out / "uncertainty.csv")
    assert len(unc) == n_test
    assert list(unc[0]) == ["timestamp", "y_true", "mean", "epistemic_std", "aleatoric_std",
                            "total_std", "lower95", "upper95"]
    assert (out / "band.svg").read_text().startswith("<svg")
    again = tmp_path / "uq2"
    main(["uq", "--model", model, "--data", data, "--passes", "5", "--seed", "1", "--out", str(again)])
    for name in ("uncertainty.csv", "metrics.csv", "box_summary.csv", "band.svg"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_uq_dropout_zero_has_zero_epistemic(work, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(dict(SMALL, dropout_rate=0.0, epochs=1)))
    main(["train", "--config", str(tmp_path / "c.json"), "--data", str(work / "train.csv"),
          "--out", str(tmp_path / "r")])
    assert main(["uq", "--model", str(tmp_path / "r" / "model.json"), "--data", str(work / "train.csv"),
                 "--passes", "3", "--out", str(tmp_path / "u")]) == 0
    assert all(float(r["epistemic_std"]) == 0.0 for r in rows(tmp_path / "u" / "uncertainty.csv"))


def test_uq_errors(work, tmp_path):
    model, data = str(work / "run" / "model.json"), str(work / "train.csv")
    assert main(["uq", "--model", model, "--data", data, "--passes", "1", "--out", str(tmp_path)]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["uq", "--model", str(tmp_path / "broken.json"), "--data", data,
                 "--out", str(tmp_path)]) == 2


def test_transfer_writes_both_rows(work, tmp_path):
    out = tmp_path / "tl"
    assert main(["transfer", "--model", str(work / "run" / "model.json"), "--target",
                 str(work / "shifted.csv"), "--retrain", "--epochs", "2", "--passes", "3",
                 "--dataset", "shifted", "--out", str(out)]) == 0
    table = rows(out / "transfer.csv")
    assert list(table[0]) == ["dataset", "metric", "tl", "norm_mode", "value"]
    assert {r["tl"] for r in table} == {"no", "yes"}
    assert {r["metric"] for r in table} >= {"rmse", "mape", "r2"}
    assert all(r["dataset"] == "shifted" for r in table)


def test_similarity_ranking_and_missing_candidate(tmp_path):
    paths = {}
    for i, name in enumerate(["weekday", "station_a", "station_b", "station_c"]):
        paths[name] = tmp_path / f"{name}.csv"
        main(["synth", "--profile", name, "--days", "4", "--seed", str(i),
              "--station", name, "--out", str(paths[name])])
    out = tmp_path / "sim"
    cands = [str(paths[n]) for n in ("station_c", "station_a", "station_b")]
    assert main(["similarity", "--train", str(paths["weekday"]), "--candidates", *cands,
                 "--days", "4", "--out", str(out)]) == 0
    ranking = rows(out / "ranking.csv")
    assert [r["station"] for r in ranking] == ["station_a", "station_b", "station_c"]
    assert main(["similarity", "--train", str(paths["weekday"]), "--candidates",
                 str(paths["weekday"]), "--days", "4", "--out", str(tmp_path / "self")]) == 0
    self_rows = rows(tmp_path / "self" / "ranking.csv")
    assert float(self_rows[0]["median_kl"]) < 1e-12
    assert main(["similarity", "--train", str(paths["weekday"]), "--candidates",
                 str(tmp_path / "gone.csv"), "--out", str(out)]) == 2
    assert main(["similarity", "--train", str(paths["weekday"]), "--candidates",
                 str(paths["station_a"]), "--days", "30", "--out", str(out)]) == 3


def test_analyze_outputs(work, tmp_path):
    out = tmp_path / "an"
    assert main(["analyze", "--model", str(work / "run" / "model.json"), "--data",
                 str(work / "train.csv"), "--split", "train", "--out", str(out)]) == 0
    disp = rows(out / "dispersion.csv")
    assert [r["regime"] for r in disp] == ["low", "increasing", "high", "decreasing"]
    assert (out / "saliency.csv").exists() and (out / "saliency_raw.csv").exists()


def test_verify_fast_and_corrupted(capsys):
    assert main(["verify", "--fast"]) == 0
    assert main(["verify", "--fast", "--corrupt", "tanh"]) == 5
    assert "tanh" in capsys.readouterr().out
    assert main(["verify", "--corrupt", "no_such_rule"]) == 1

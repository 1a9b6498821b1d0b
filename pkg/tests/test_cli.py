import json

import numpy as np
import pytest

from flowimpute.cli import main
from flowimpute.dataset import load_csv, write_matrix_csv
from helpers import correlated_gaussian


@pytest.fixture
def data(tmp_path):
    x, _ = correlated_gaussian(40, 3, 0.8, 0)
    path = tmp_path / "data.csv"
    write_matrix_csv(path, x)
    return path, x


def run(*argv):
    return main([str(a) for a in argv])


def test_genmask_rate_zero_and_determinism(data, tmp_path, capsys):
    path, _ = data
    assert run("genmask", "--input", path, "--rate", 0, "--output", tmp_path / "m0.csv") == 0
    assert set((tmp_path / "m0.csv").read_text().replace("\n", ",").strip(",").split(",")) == {"0"}
    assert "missing fraction 0.000000" in capsys.readouterr().out
    for name in ("a.csv", "b.csv"):
        assert run("genmask", "--input", path, "--rate", 0.3, "--seed", 4, "--output", tmp_path / name) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    manifest = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 4


def test_genmask_errors(data, tmp_path, capsys):
    path, _ = data
    assert run("genmask", "--input", tmp_path / "nope.csv", "--rate", 0.1, "--output", tmp_path / "m.csv") == 2
    assert "nope.csv" in capsys.readouterr().err
    assert run("genmask", "--input", path, "--rate", 1.5, "--output", tmp_path / "m.csv") == 1
    assert run("genmask", "--input", path, "--rate", "x", "--output", tmp_path / "m.csv") == 1
    assert run("frobnicate") == 1


def test_train_and_impute(data, tmp_path, capsys):
    path, x = data
    out = tmp_path / "run"
    assert run("train", "--input", path, "--rate", 0.2, "--epochs", 5, "--batch", 16, "--outdir", out) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    cfg = manifest["config"]
    assert cfg["batch_size"] == 16 and cfg["epochs"] == 5
    assert manifest["status"] == "ok" and str(path) in manifest["inputs"]
    log = (out / "training_log.csv").read_text().splitlines()
    assert len(log) == 6 and [line[-1] for line in log[1:]] == ["1", "1", "0", "1", "0"]

    holey = tmp_path / "holey.csv"
    mask = np.zeros(x.shape, np.uint8)
    mask[::3, 1] = 1
    write_matrix_csv(holey, x, mask=mask)
    assert run("impute", "--input", holey, "--chain", out, "--output", tmp_path / "done.csv") == 0
    done = load_csv(tmp_path / "done.csv")
    assert not done.mask.any()
    assert np.array_equal(done.values[mask == 0], x[mask == 0])

    assert run("impute", "--input", path, "--chain", out, "--output", tmp_path / "same.csv") == 0
    assert (tmp_path / "same.csv").read_bytes() == path.read_bytes()


def test_train_defaults_echoed(data, tmp_path):
    path, _ = data
    out = tmp_path / "run"
    assert run("train", "--input", path, "--rate", 0.2, "--epochs", 1, "--outdir", out) == 0
    cfg = json.loads((out / "run_manifest.json").read_text())["config"]
    assert (cfg["learning_rate"], cfg["batch_size"], cfg["schedule_mode"]) == (1e-4, 128, "power-of-2")
    assert cfg["lam"] == 0.01
    assert (out / "manifest.txt").read_text().count("file.flow.") == 1


def test_train_usage_errors(data, tmp_path):
    path, x = data
    mask = tmp_path / "m.csv"
    assert run("genmask", "--input", path, "--rate", 0.2, "--output", mask) == 0
    assert run("train", "--input", path, "--mask", mask, "--rate", 0.2, "--outdir", tmp_path / "o") == 1
    assert run("train", "--input", path, "--outdir", tmp_path / "o") == 1
    assert run("train", "--input", path, "--rate", 0.2, "--epochs", 0, "--outdir", tmp_path / "o") == 1


def test_train_numerical_failure(data, tmp_path, capsys):
    path, _ = data
    out = tmp_path / "o"
    code = run("train", "--input", path, "--rate", 0.3, "--epochs", 6, "--batch", 8, "--lr", 1e6, "--outdir", out)
    assert code == 3
    assert "epoch" in capsys.readouterr().err
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "failed" and "epoch" in manifest["error"]


def test_impute_errors(data, tmp_path, capsys):
    path, _ = data
    out = tmp_path / "run"
    assert run("train", "--input", path, "--rate", 0.2, "--epochs", 2, "--batch", 16, "--outdir", out) == 0
    wide = tmp_path / "wide.csv"
    write_matrix_csv(wide, np.zeros((3, 4)))
    assert run("impute", "--input", wide, "--chain", out, "--output", tmp_path / "w.csv") == 2
    assert run("impute", "--input", path, "--chain", tmp_path / "nochain", "--output", tmp_path / "w.csv") == 2
    blob = out / "flow_000002.f64"
    blob.write_bytes(blob.read_bytes()[::-1])
    capsys.readouterr()
    assert run("impute", "--input", path, "--chain", out, "--output", tmp_path / "w.csv") == 2
    assert "flow_000002.f64" in capsys.readouterr().err


def test_eval_metrics_and_determinism(data, tmp_path):
    path, _ = data
    args = ["eval", "--input", path, "--rate", 0.2, "--folds", 5, "--epochs", 2, "--batch", 16, "--seed", 3]
    assert run(*args, "--output", tmp_path / "a.csv") == 0
    assert run(*args, "--output", tmp_path / "b.csv") == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = a.decode().splitlines()
    assert rows[0].startswith("dataset,missing_rate,fold,rmse_scaled,rmse_raw,n_imputed")
    assert [r.split(",")[2] for r in rows[1:]] == ["0", "1", "2", "3", "4", "mean"]
    scaled = [float(r.split(",")[3]) for r in rows[1:6]]
    agg = rows[6].split(",")
    assert float(agg[3]) == pytest.approx(np.mean(scaled))
    assert float(agg[6]) == pytest.approx(np.std(scaled, ddof=1))


def test_eval_baseline_and_incomplete_input(data, tmp_path):
    path, x = data
    assert run("eval", "--input", path, "--method", "mean", "--folds", 4, "--output", tmp_path / "m.csv") == 0
    holey = tmp_path / "holey.csv"
    mask = np.zeros(x.shape, np.uint8)
    mask[0, 0] = 1
    write_matrix_csv(holey, x, mask=mask)
    assert run("eval", "--input", holey, "--output", tmp_path / "e.csv") == 2


def test_replay_reproduces_and_checks_inputs(data, tmp_path):
    path, _ = data
    out = tmp_path / "m.csv"
    assert run("genmask", "--input", path, "--rate", 0.4, "--seed", 8, "--output", out) == 0
    first = out.read_bytes()
    out.unlink()
    assert run("replay", tmp_path / "m.csv.manifest.json") == 0
    assert out.read_bytes() == first
    path.write_text(path.read_text() + "1,2,3\n")
    assert run("replay", tmp_path / "m.csv.manifest.json") == 2

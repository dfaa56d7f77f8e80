import csv
import json

import pytest

from attnguide.cli import main, parse_layers
from attnguide.errors import InvalidArgumentError
from conftest import TINY_ARCH

TINY = {"arch": TINY_ARCH, "synthetic_n": 90, "epochs": 1, "batch_size": 16}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY), encoding="utf-8")
    return str(p)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_layers():
    assert parse_layers("all") is None
    assert parse_layers("10") == [True, False]
    assert parse_layers("0,1") == [False, True]
    with pytest.raises(InvalidArgumentError):
        parse_layers("12")


def test_train_writes_outputs(tmp_path, cfg_path, capsys):
    out = tmp_path / "t"
    assert main(["train", "--config", cfg_path, "--seed", "3", "--out", str(out),
                 "--alpha", "0.1", "--beta", "0.001", "--tau", "0.5", "--layers", "01"]) == 0
    rep = json.loads((out / "report.json").read_text())
    g = rep["config"]["guiding"]
    assert (g["alpha"], g["beta"], g["tau"], g["layer_mask"]) == (0.1, 0.001, 0.5, [False, True])
    assert rep["config"]["seed"] == 3
    for name in ("checkpoint.npz", "epochs.csv", "loss.png", "report.timing.json"):
        assert (out / name).exists()
    assert len(_rows(out / "epochs.csv")) == 1
    assert "accuracy" in json.loads(capsys.readouterr().out)["dev"]


def test_train_is_byte_deterministic(tmp_path, cfg_path):
    for d in ("a", "b"):
        assert main(["train", "--config", cfg_path, "--out", str(tmp_path / d), "--no-plots"]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_analyze_and_evaluate(tmp_path, cfg_path):
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "t"), "--no-plots"]) == 0
    ckpt = str(tmp_path / "t" / "checkpoint.npz")
    for d in ("a1", "a2"):
        assert main(["analyze", "--config", cfg_path, "--checkpoint", ckpt, "--samples", "3",
                     "--out", str(tmp_path / d)]) == 0
    for name in ("heatmap.csv", "pca.csv", "diversity.csv"):
        assert (tmp_path / "a1" / name).read_bytes() == (tmp_path / "a2" / name).read_bytes()
    assert (tmp_path / "a1" / "heatmap.png").exists() and (tmp_path / "a1" / "pca.png").exists()
    assert len(_rows(tmp_path / "a1" / "pca.csv")) == 3 * 4
    assert main(["gen-data", "--n", "30", "--seq-len", "24", "--out", str(tmp_path / "d")]) == 0
    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(tmp_path / "d" / "test.tsv"),
                 "--out", str(tmp_path / "e")]) == 0
    assert "accuracy" in json.loads((tmp_path / "e" / "metrics.json").read_text())


def test_sweeps(tmp_path, cfg_path):
    assert main(["grid", "--config", cfg_path, "--alphas", "0.1,0", "--betas", "0", "--no-plots",
                 "--out", str(tmp_path / "g")]) == 0
    rows = _rows(tmp_path / "g" / "grid.csv")
    assert [(r["alpha"], r["beta"]) for r in rows] == [("0.1", "0.0"), ("0.0", "0.0")]
    assert (tmp_path / "g" / "reports" / "alpha=0.1_beta=0.json").exists()
    assert main(["layer-sweep", "--config", cfg_path, "--no-plots", "--out", str(tmp_path / "l")]) == 0
    rows = _rows(tmp_path / "l" / "layer_sweep.csv")
    assert [(r["layer"], r["layer_mask"]) for r in rows] == [("0", "10"), ("1", "01"), ("all", "all")]
    assert main(["size-sweep", "--config", cfg_path, "--fractions", "0.5,1.0",
                 "--out", str(tmp_path / "s")]) == 0
    rows = _rows(tmp_path / "s" / "size_sweep.csv")
    assert [r["fraction"] for r in rows] == ["0.5", "0.5", "1.0", "1.0"]
    assert rows[0]["train_digest"] == rows[1]["train_digest"]
    assert (tmp_path / "s" / "size_sweep.png").exists()


def test_exit_codes(tmp_path, cfg_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["train", "--config", cfg_path, "--fraction", "1.5"]) == 1
    assert main(["train", "--config", cfg_path, "--layers", "1x"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochs": 1, "colour": 2}')
    assert main(["train", "--config", str(bad)]) == 1
    bad.write_text("{")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", cfg_path, "--data", str(tmp_path / "none.tsv")]) == 2
    tsv = tmp_path / "bad.tsv"
    tsv.write_text("entailment\tonly\n")
    assert main(["train", "--config", cfg_path, "--data", str(tsv)]) == 2
    assert main(["evaluate", "--checkpoint", str(tsv), "--data", str(tsv)]) == 2


def test_numerical_failure_exit_code(tmp_path, cfg_path, monkeypatch):
    from attnguide import harness
    from attnguide.errors import NumericalError

    def boom(cfg):
        raise NumericalError("loss became NaN")

    monkeypatch.setattr(harness, "run_training", boom)
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "x")]) == 3

import csv
import json

import numpy as np
import pytest

from sthl import model as model_mod
from sthl.cli import ConfigError, main, read_config
from sthl.dataset import SyntheticSpec, generate_synthetic, load_dataset, save_dataset

SMALL = """[data]
T = 40
N = 3
d = 4
num_classes = 3
[train]
epochs = 3
batch_size = 8
[model]
K = 2
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL)
    return path


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.sthl", tmp_path / "b.sthl"
    assert main(["generate", "--seed", "7", "--out", str(a)]) == 0
    assert main(["generate", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ds = load_dataset(a)
    assert (ds.T, ds.N, ds.d, ds.num_classes) == (200, 10, 16, 5)
    side = json.loads((tmp_path / "a.sthl.json").read_text())
    assert len(side["config_hash"]) == 16


def test_generate_missing_section(tmp_path, capsys):
    path = tmp_path / "x.ini"
    path.write_text("[train]\nepochs = 2\n")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "d")]) == 2
    assert "[data]" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    path = tmp_path / "x.ini"
    path.write_text("[train]\nepochz = 2\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "epochz" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="section"):
        path.write_text("[optim]\nlr = 1\n")
        read_config(path)


def test_invalid_value_fails_before_compute(tmp_path, capsys):
    path = tmp_path / "x.ini"
    path.write_text(SMALL + "alpha = 2.0\n")
    out = tmp_path / "never"
    assert main(["train", "--config", str(path), "--out", str(out)]) == 2
    assert not out.exists()


def test_train_outputs(cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--ablation", "no_attention",
                 "--dump-incidence"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["variant"] == "no_attention"
    assert 0.0 <= summary["weighted_f1"] <= 1.0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "split", "loss", "acc", "weighted_f1", "config_hash"]
    assert {r["config_hash"] for r in rows} == {summary["config_hash"]}
    assert (out / "model.ckpt").exists() and (out / "incidence.csv").exists()


def test_train_rerun_identical_csv(cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()


def test_train_from_file_does_not_mutate_input(tmp_path):
    data = tmp_path / "d.sthl"
    save_dataset(generate_synthetic(SyntheticSpec(num_classes=3, T=40, N=3, d=4)), data)
    before = data.read_bytes()
    path = tmp_path / "r.ini"
    path.write_text(f"[data]\npath = {data}\n[train]\nepochs = 1\nbatch_size = 8\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o"),
                 "--dump-attention"]) == 0
    assert data.read_bytes() == before
    with open(tmp_path / "o/attention.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["t", "master", "head", "w_spatial", "w_temporal"]
    assert all(abs(float(r[3]) + float(r[4]) - 1.0) < 1e-12 for r in rows[1:])


def test_eval_round_trip_and_mismatch(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    data = tmp_path / "d.sthl"
    save_dataset(generate_synthetic(SyntheticSpec(num_classes=3, T=40, N=3, d=4)), data)
    report_path = tmp_path / "eval.json"
    assert main(["eval", str(out / "model.ckpt"), str(data), "--out", str(report_path)]) == 0
    rep = json.loads(report_path.read_text())
    conf = np.array(rep["confusion"])
    assert conf.sum(axis=1).tolist() == rep["support"]
    n = sum(rep["support"])
    assert rep["weighted_f1"] == pytest.approx(
        sum(s * f for s, f in zip(rep["support"], rep["f1"])) / n)

    wrong = tmp_path / "wrong.sthl"
    save_dataset(generate_synthetic(SyntheticSpec(num_classes=3, T=20, N=3, d=6)), wrong)
    capsys.readouterr()
    assert main(["eval", str(out / "model.ckpt"), str(wrong)]) == 2
    err = capsys.readouterr().err
    assert "d=4" in err and "d=6" in err


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out", str(out)]) == 0
    assert "worst slot" in capsys.readouterr().out
    with open(out / "gradcheck.csv") as fh:
        rows = list(csv.reader(fh))
    from sthl.model import ModelConfig, init_model
    slots = init_model(ModelConfig(N=3, d=4, C=2, K=2)).store.names()
    assert [r[0] for r in rows[1:]] == slots
    assert "config_hash=" in (out / "gradcheck.txt").read_text()


def test_gradcheck_corrupted_backward_exits_nonzero(tmp_path, monkeypatch):
    real = model_mod.mlp_backward

    def broken(mlp, dout, cache):
        dx, dWs, dbs = real(mlp, dout, cache)
        return dx, dWs, [2.0 * b + 1e-3 for b in dbs]

    monkeypatch.setattr(model_mod, "mlp_backward", broken)
    assert main(["gradcheck", "--out", str(tmp_path / "gc")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    path = tmp_path / "x.ini"
    path.write_text(SMALL.replace("epochs = 3", "epochs = 2\noptimizer = sgd\nlearning_rate = 1e300"))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_ablate_command(tmp_path):
    path = tmp_path / "x.ini"
    path.write_text(SMALL.replace("epochs = 3", "epochs = 1\nablate_seeds = 2"))
    assert main(["ablate", "--config", str(path), "--out", str(tmp_path / "ab")]) == 0
    rep = json.loads((tmp_path / "ab/ablation.json").read_text())
    assert set(rep["mean_val_weighted_f1"]) == {"default", "no_attention", "no_hyperedge"}
    assert all(len(v) == 2 for v in rep["per_seed"].values())

import csv
import subprocess
import sys

import numpy as np
import pytest

from spikedict import cli
from spikedict.data import gen_synthetic, load_checkpoint, load_matrix, save_checkpoint, save_matrix


def _cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


SMALL = """
data.M = 8
net.N = 6
data.k = 2
data.P = 120
data.heldout = 40
learn.eval_every = 60
"""


def test_parse_config():
    cfg = cli.parse_config("sim.dt = 0.0625  # comment\nlearn.calibrate = yes\n\n")
    assert cfg == {"sim.dt": 0.0625, "learn.calibrate": True}
    with pytest.raises(cli.ConfigError, match="sim.dtt"):
        cli.parse_config("sim.dtt = 1")
    with pytest.raises(cli.ConfigError, match="net.N"):
        cli.parse_config("net.N = many")
    with pytest.raises(cli.ConfigError, match="duplicate"):
        cli.parse_config("seed = 1\nseed = 2")
    full = cli.resolve({"learn.eta_f": 0.02}, seed=5)
    assert (full["seed"], full["data.seed"], full["net.seed"]) == (5, 5, 6)
    assert full["learn.eta_h"] == pytest.approx(0.64)


def test_encode_identity(tmp_path):
    save_matrix(np.eye(2), tmp_path / "eye.dlm")
    save_matrix(np.array([[1.0, 0.0]]), tmp_path / "x.dlm")
    cfg = _cfg(tmp_path, f"encode.dictionary = {tmp_path / 'eye.dlm'}\n"
                         f"encode.inputs = {tmp_path / 'x.dlm'}\nnet.lam = 0\nsim.record = true\n")
    assert cli.main(["encode", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "encode_pairs.csv")
    assert rows[0] == ["input_idx", "atom", "snn_rate", "oracle_a"]
    z = [float(r[2]) for r in rows[1:]]
    # from rest the first input spike arrives one quantum late
    assert abs(z[0] - 1.0) <= 0.1 and z[1] == 0.0
    assert (tmp_path / "o" / "raster_0000.csv").exists()
    assert (tmp_path / "o" / "encode.png").stat().st_size > 0


def test_encode_random_instance_gap(tmp_path):
    rng = np.random.default_rng(0)
    D = rng.uniform(size=(8, 4)) ** 4
    D /= np.linalg.norm(D, axis=0)
    X = rng.uniform(0.5, 1.5, (5, 4)) @ D.T
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    save_matrix(D, tmp_path / "d.dlm")
    save_matrix(X, tmp_path / "x.dlm")
    cfg = _cfg(tmp_path, f"encode.dictionary = {tmp_path / 'd.dlm'}\n"
                         f"encode.inputs = {tmp_path / 'x.dlm'}\nsim.warmup = 20\n")
    assert cli.main(["encode", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    gaps = [float(r[2]) for r in _rows(tmp_path / "o" / "encode_gaps.csv")[1:]]
    assert max(gaps) <= 2.0


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    cfg = _cfg(tmp_path, "encode.dictionary = /nonexistent/dict.dlm\n")
    assert cli.main(["encode", "--config", cfg, "--out-dir", str(tmp_path)]) == 2
    assert "/nonexistent/dict.dlm" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg")]) == 2
    cfg = _cfg(tmp_path, "net.gamma = 1.5\n")
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    cfg = _cfg(tmp_path, "learn.mode = batch\n", "m.cfg")
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2


def test_train_zero_samples_keeps_init(tmp_path):
    cfg = _cfg(tmp_path, SMALL.replace("data.P = 120", "data.P = 0"))
    out = tmp_path / "o"
    assert cli.main(["train", "--config", cfg, "--out-dir", str(out)]) == 0
    a, b = load_checkpoint(out / "init.dlm"), load_checkpoint(out / "checkpoint.dlm")
    for name in ("F", "B", "H", "L"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_train_outputs_and_determinism(tmp_path):
    cfg = _cfg(tmp_path, SMALL)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert cli.main(["train", "--config", cfg, "--seed", "3", "--out-dir", str(o)]) == 0
    for name in ("metrics.csv", "checkpoint.dlm", "consistency.csv", "atoms.csv", "dictionary.dlm"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "metrics.png").exists() and (outs[0] / "consistency.png").exists()
    assert len(_rows(outs[0] / "consistency.csv")) == 1 + 36
    assert _rows(outs[0] / "atoms.csv")[0][:2] == ["dim", "atom_0"]
    manifest = (outs[0] / "manifest.txt").read_text()
    assert "output.metrics.csv = sha256:" in manifest
    assert "config.learn.eta_f = 0.01" in manifest
    assert cli.main(["train", "--config", cfg, "--seed", "4", "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != (outs[0] / "metrics.csv").read_bytes()


def test_train_divergence_exit_code(tmp_path):
    from spikedict.topology import random_init

    net = random_init(8, 6, seed=0, lateral_high=0.0)
    net = net.with_weights(F=np.full((6, 8), 4.0), B=np.full((8, 6), 4.0))
    save_checkpoint(net, tmp_path / "hot.dlm")
    cfg = _cfg(tmp_path, SMALL + f"net.init = {tmp_path / 'hot.dlm'}\nnet.gamma = 0.9\nsim.max_rate = 20\n")
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 1


def test_train_sgd(tmp_path):
    cfg = _cfg(tmp_path, SMALL.replace("data.P = 120", "data.P = 600"))
    out = tmp_path / "o"
    assert cli.main(["train-sgd", "--config", cfg, "--out-dir", str(out)]) == 0
    for tag in ("eta", "2eta", "half_eta"):
        rows = _rows(out / f"sgd_{tag}.csv")
        assert rows[0] == ["sample_idx", "heldout_objective"]
        assert float(rows[-1][1]) < float(rows[1][1])
    summary = _rows(out / "sgd_summary.csv")
    assert [r[0] for r in summary[1:]] == ["eta", "2eta", "half_eta"]
    frozen = _cfg(tmp_path, SMALL + "learn.eta_f = 0\n", "z.cfg")
    assert cli.main(["train-sgd", "--config", frozen, "--out-dir", str(tmp_path / "z")]) == 0
    np.testing.assert_allclose(load_matrix(tmp_path / "z" / "sgd_eta.dlm"),
                               load_matrix(tmp_path / "z" / "sgd_2eta.dlm"))


def test_eval_self_match(tmp_path, capsys):
    _, gt = gen_synthetic(16, 24, 3, 10, seed=0)
    save_matrix(gt.D_true, tmp_path / "true.dlm")
    cfg = _cfg(tmp_path, f"eval.checkpoint = {tmp_path / 'true.dlm'}\neval.threshold = 0.99\n"
                         "net.lam = 0.001\ndata.P = 10\ndata.heldout = 50\ndata.M = 16\nnet.N = 24\n"
                         "seed = 0\n")
    assert cli.main(["eval", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    rows = dict(_rows(tmp_path / "o" / "eval.csv")[1:])
    assert float(rows["recovery"]) == 1.0
    assert "recovery = 1.0000" in capsys.readouterr().out


def test_eval_random_dictionary_and_empty(tmp_path):
    D = np.random.default_rng(1).uniform(size=(16, 24))
    save_matrix(D, tmp_path / "r.dlm")
    cfg = _cfg(tmp_path, f"eval.checkpoint = {tmp_path / 'r.dlm'}\ndata.P = 10\ndata.heldout = 20\n")
    assert cli.main(["eval", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    assert 0.0 <= float(dict(_rows(tmp_path / "o" / "eval.csv")[1:])["recovery"]) < 1.0
    empty = _cfg(tmp_path, f"eval.checkpoint = {tmp_path / 'r.dlm'}\ndata.P = 10\ndata.heldout = 0\n", "e.cfg")
    assert cli.main(["eval", "--config", empty, "--out-dir", str(tmp_path / "e")]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "spikedict.cli", "--list-keys"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "sim.dt" in res.stdout

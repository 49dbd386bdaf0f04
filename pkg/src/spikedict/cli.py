"""Command-line experiment runner.

Subcommands ``encode``, ``train``, ``train-sgd`` and ``eval`` read a flat
``key = value`` config file (``#`` starts a comment) and write CSV tables,
DLM1 checkpoints, PNG figures and a ``manifest.txt`` into ``--out-dir``.

Exit codes: 0 success, 1 runtime failure or divergence, 2 usage or config
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import metadata

import numpy as np

from . import data, oracle, plasticity, topology
from .lif import RunawayRatesError, write_raster_csv

# name -> (type, default, help)
KEYS = {
    "seed": (int, 0, "master seed; --seed overrides"),
    "data.source": (str, "synthetic", "synthetic | matrix | idx | pgm"),
    "data.path": (str, "", "input file for matrix/idx/pgm sources"),
    "data.M": (int, 16, "synthetic input dimension"),
    "data.k": (int, 3, "synthetic nonzeros per sample"),
    "data.P": (int, 20000, "training samples"),
    "data.heldout": (int, 2000, "held-out samples (taken after the training ones)"),
    "data.noise_sigma": (float, 0.0, "synthetic Gaussian noise"),
    "data.seed": (int, None, "dataset seed (default: seed)"),
    "data.patch_edge": (int, 8, "patch edge for image sources"),
    "data.images": (int, 0, "IDX images to sample from (0 = all)"),
    "net.N": (int, 24, "number of atoms"),
    "net.gamma": (float, 0.5, "feedback gain"),
    "net.lam": (float, 0.1, "sparsity penalty"),
    "net.init": (str, "random", "random | path of a network checkpoint"),
    "net.seed": (int, None, "weight init seed (default: seed + 1)"),
    "net.lateral_high": (float, 0.5, "upper bound of initial lateral weights"),
    "sim.dt": (float, 1.0 / 32, "time step"),
    "sim.window": (float, 20.0, "stage window length"),
    "sim.tau_s": (float, 1.0, "synaptic time constant"),
    "sim.warmup": (float, 0.0, "unmeasured time before each stage window"),
    "sim.max_rate": (float, 100.0, "runaway guard, spikes per unit time"),
    "sim.v_init": (float, None, "initial potential as a fraction of threshold"),
    "sim.record": (bool, False, "write spike rasters (encode only)"),
    "learn.eta_f": (float, 0.01, "feedforward learning rate"),
    "learn.eta_b": (float, None, "feedback learning rate (default: eta_f)"),
    "learn.eta_h": (float, None, "lateral learning rate (default: 32 eta_f)"),
    "learn.decay": (float, 1e-4, "weight decay of F and B"),
    "learn.decay_h_ratio": (float, 3.0, "threshold decay / weight decay"),
    "learn.calibrate": (bool, False, "bisect learn.decay before training"),
    "learn.calibration_samples": (int, 1000, "samples per calibration probe"),
    "learn.mode": (str, "simultaneous", "simultaneous | two_phase"),
    "learn.consistency_samples": (int, 2000, "H-only samples per cycle in two_phase mode"),
    "learn.learn_ff": (bool, True, "update F and B"),
    "learn.learn_h": (bool, True, "update H"),
    "learn.engine": (str, "spiking", "spiking | rate"),
    "learn.theta_min": (float, 0.05, "threshold floor"),
    "learn.eval_every": (int, 1000, "held-out evaluation period (0 = never)"),
    "encode.dictionary": (str, "", "dictionary checkpoint (M x N)"),
    "encode.inputs": (str, "random", "random | path of a P x M matrix checkpoint"),
    "encode.count": (int, 50, "random inputs to encode"),
    "eval.checkpoint": (str, "", "network or dictionary checkpoint"),
    "eval.truth": (str, "", "ground-truth dictionary checkpoint (optional)"),
    "eval.threshold": (float, 0.9, "atom-recovery correlation threshold"),
}


class ConfigError(ValueError):
    pass


class MissingFile(ConfigError):
    pass


def _convert(key, raw):
    typ = KEYS[key][0]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; unknown keys and duplicates are errors."""
    cfg = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {n}: duplicate config key {key!r}")
        cfg[key] = _convert(key, value.strip())
    return cfg


def resolve(cfg: dict, seed=None) -> dict:
    """Fill defaults (including those derived from other keys)."""
    out = {k: spec[1] for k, spec in KEYS.items()}
    out.update(cfg)
    if seed is not None:
        out["seed"] = seed
    if out["data.seed"] is None:
        out["data.seed"] = out["seed"]
    if out["net.seed"] is None:
        out["net.seed"] = out["seed"] + 1
    if out["learn.eta_b"] is None:
        out["learn.eta_b"] = out["learn.eta_f"]
    if out["learn.eta_h"] is None:
        out["learn.eta_h"] = 32 * out["learn.eta_f"]
    return out


_RANGES = {
    "net.gamma": lambda v: 0 <= v < 1,
    "net.lam": lambda v: v >= 0,
    "net.N": lambda v: v >= 1,
    "data.M": lambda v: v >= 1,
    "data.P": lambda v: v >= 0,
    "data.heldout": lambda v: v >= 0,
    "data.k": lambda v: v >= 0,
    "data.noise_sigma": lambda v: v >= 0,
    "sim.dt": lambda v: v > 0,
    "sim.window": lambda v: v > 0,
    "sim.tau_s": lambda v: v > 0,
    "sim.warmup": lambda v: v >= 0,
    "sim.max_rate": lambda v: v > 0,
    "learn.eta_f": lambda v: v >= 0,
    "learn.decay": lambda v: 0 <= v < 1,
    "learn.decay_h_ratio": lambda v: v >= 0,
    "learn.eval_every": lambda v: v >= 0,
    "learn.mode": lambda v: v in ("simultaneous", "two_phase"),
    "learn.engine": lambda v: v in ("spiking", "rate"),
    "encode.count": lambda v: v >= 1,
}


def validate(cfg: dict) -> None:
    for key, ok in _RANGES.items():
        if not ok(cfg[key]):
            raise ConfigError(f"config key {key!r}: value {cfg[key]!r} is out of range")


def _need_file(path, key):
    if not path:
        raise ConfigError(f"config key {key!r} is required")
    if not os.path.isfile(path):
        raise MissingFile(f"{key}: file not found: {path}")
    return path


def _sim(cfg, v_init_default):
    v_init = cfg["sim.v_init"] if cfg["sim.v_init"] is not None else v_init_default
    return topology.SimConfig(dt=cfg["sim.dt"], window=cfg["sim.window"], tau_s=cfg["sim.tau_s"],
                              warmup=cfg["sim.warmup"], max_rate=cfg["sim.max_rate"],
                              record=cfg["sim.record"], v_init=v_init)


def load_samples(cfg):
    """Training and held-out samples plus the ground truth when synthetic."""
    src = cfg["data.source"]
    P, Q = cfg["data.P"], cfg["data.heldout"]
    truth = None
    if src == "synthetic":
        ds, truth = data.gen_synthetic(cfg["data.M"], cfg["net.N"], cfg["data.k"], P + Q,
                                       cfg["data.noise_sigma"], seed=cfg["data.seed"])
        X = ds.samples
    elif src == "matrix":
        X = data.load_matrix(_need_file(cfg["data.path"], "data.path"))
    elif src in ("idx", "pgm"):
        path = _need_file(cfg["data.path"], "data.path")
        images = data.load_idx(path) if src == "idx" else data.load_pgm(path)[None]
        if images.ndim != 3:
            raise ConfigError("data.path: IDX file holds labels, not images")
        if cfg["data.images"]:
            images = images[:cfg["data.images"]]
        rng = np.random.default_rng(cfg["data.seed"])
        which = rng.integers(len(images), size=P + Q)
        patches = np.concatenate([
            data.sample_patches(images[i], cfg["data.patch_edge"], int(np.sum(which == i)),
                                seed=int(rng.integers(2**32)))
            for i in np.unique(which)
        ])
        X = data.preprocess_split(patches[rng.permutation(len(patches))]).samples
    else:
        raise ConfigError(f"config key 'data.source': unknown source {src!r}")
    if X.shape[0] < P + Q:
        raise ConfigError(f"dataset has {X.shape[0]} samples, data.P + data.heldout = {P + Q}")
    return X[:P], X[P:P + Q], truth


def _init_params(cfg, M):
    init = cfg["net.init"]
    if init == "random":
        return topology.random_init(M, cfg["net.N"], seed=cfg["net.seed"], gamma=cfg["net.gamma"],
                                    lam=cfg["net.lam"], lateral_high=cfg["net.lateral_high"])
    obj = data.load_checkpoint(_need_file(init, "net.init"))
    if not isinstance(obj, topology.NetworkParams):
        obj = topology.configure_from_dictionary(obj, cfg["net.lam"], cfg["net.gamma"])
    if obj.M != M:
        raise ConfigError(f"net.init: checkpoint has M={obj.M}, data has M={M}")
    return obj


def _dictionary(obj):
    if isinstance(obj, topology.NetworkParams):
        return plasticity.snn_dictionary(obj)
    return np.asarray(obj)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add(self, path):
        with open(path, "rb") as fh:
            self.outputs[os.path.basename(path)] = hashlib.sha256(fh.read()).hexdigest()

    def write(self, out_dir):
        def ver(pkg):
            try:
                return metadata.version(pkg)
            except metadata.PackageNotFoundError:
                return "unknown"

        lines = [f"command = {self.command}", f"seed = {self.seed}",
                 f"version.python = {platform.python_version()}"]
        lines += [f"version.{p} = {ver(p)}" for p in ("artifact", "numpy", "numba", "matplotlib")]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.config.items())]
        lines += [f"output.{k} = sha256:{v}" for k, v in sorted(self.outputs.items())]
        lines += [f"time.{k} = {v:.3f}" for k, v in self.timings.items()]
        with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")


class _Run:
    def __init__(self, command, cfg, out_dir):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.manifest = RunManifest(command, cfg, cfg["seed"])
        self._t = time.perf_counter()

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def done(self, *names):
        for n in names:
            self.manifest.add(self.path(n))

    def lap(self, label):
        now = time.perf_counter()
        self.manifest.timings[label] = now - self._t
        self._t = now

    def finish(self):
        self.manifest.write(self.out_dir)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_encode(cfg, out_dir):
    from . import plotting

    run = _Run("encode", cfg, out_dir)
    D = _dictionary(data.load_checkpoint(_need_file(cfg["encode.dictionary"], "encode.dictionary")))
    params = topology.configure_from_dictionary(D, cfg["net.lam"], cfg["net.gamma"])
    if cfg["encode.inputs"] == "random":
        rng = np.random.default_rng(cfg["data.seed"])
        X = rng.uniform(size=(cfg["encode.count"], params.M))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    else:
        X = np.atleast_2d(data.load_matrix(_need_file(cfg["encode.inputs"], "encode.inputs")))
    sim = _sim(cfg, 0.0)
    pairs, gaps, snn_all, opt_all = [], [], [], []
    M = params.M
    for i, x in enumerate(X):
        ro = topology.run_feedforward(params, x, sim)
        a = oracle.solve(D, x, cfg["net.lam"]).a
        for j, (z, aj) in enumerate(zip(ro.z, a)):
            pairs.append([i, j, f"{z:.6f}", repr(float(aj))])
        gap = float(np.max(np.abs(ro.z - a)))
        gaps.append([i, repr(gap), f"{gap / ro.quantum:.3f}"])
        snn_all.append(ro.z)
        opt_all.append(a)
        if sim.record:
            name = f"raster_{i:04d}.csv"
            code_ids = set(range(M, M + params.N))
            log = [(n, t) for n, t in ro.state.spike_log if n in code_ids]
            write_raster_csv(run.path(name), log, offset=M, t_offset=sim.warmup)
            run.done(name)
    run.lap("encode")
    _write_rows(run.path("encode_pairs.csv"), ["input_idx", "atom", "snn_rate", "oracle_a"], pairs)
    _write_rows(run.path("encode_gaps.csv"), ["input_idx", "max_abs_gap", "gap_in_quanta"], gaps)
    plotting.plot_encode(np.concatenate(snn_all), np.concatenate(opt_all), run.path("encode.png"))
    run.done("encode_pairs.csv", "encode_gaps.csv", "encode.png")
    run.finish()
    worst = max(float(g[1]) for g in gaps)
    print(f"encoded {len(X)} inputs; largest |z - a*| = {worst:.4f}")
    return 0


def _train_config(cfg):
    rates = plasticity.LearnRates(eta_f=cfg["learn.eta_f"], eta_b=cfg["learn.eta_b"],
                                  eta_h=cfg["learn.eta_h"], eta_sgd=cfg["learn.eta_f"])
    rates = rates.with_decay(cfg["learn.decay"], cfg["learn.decay_h_ratio"])
    try:
        return plasticity.TrainConfig(
            rates=rates, gamma=cfg["net.gamma"], lam=cfg["net.lam"], sim=_sim(cfg, 0.5),
            mode=cfg["learn.mode"], consistency_samples=cfg["learn.consistency_samples"],
            learn_ff=cfg["learn.learn_ff"], learn_h=cfg["learn.learn_h"],
            engine=cfg["learn.engine"], theta_min=cfg["learn.theta_min"],
            eval_every=cfg["learn.eval_every"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg, out_dir):
    from . import plotting

    run = _Run("train", cfg, out_dir)
    train, held, _ = load_samples(cfg)
    params = _init_params(cfg, train.shape[1])
    tcfg = _train_config(cfg)
    data.save_checkpoint(params, run.path("init.dlm"))
    run.done("init.dlm")
    if cfg["learn.calibrate"]:
        decay, history = plasticity.calibrate_decay(
            params, train, tcfg, n_samples=cfg["learn.calibration_samples"],
            h_ratio=cfg["learn.decay_h_ratio"])
        tcfg = replace(tcfg, rates=tcfg.rates.with_decay(decay, cfg["learn.decay_h_ratio"]))
        _write_rows(run.path("calibration.csv"), ["decay", "mean_threshold"],
                    [[repr(d), repr(t)] for d, t in history])
        run.done("calibration.csv")
        run.lap("calibrate")
        print(f"calibrated decay = {decay:.6g}")
    res = plasticity.train_snn(params, train, tcfg, heldout=held if len(held) else None)
    run.lap("train")
    p = res.params
    plasticity.write_metrics_csv(run.path("metrics.csv"), res.metrics)
    data.save_checkpoint(p, run.path("checkpoint.dlm"))
    D = plasticity.snn_dictionary(p)
    data.save_matrix(D, run.path("dictionary.dlm"))
    h, fb = topology.consistency_pairs(p)
    N = p.N
    _write_rows(run.path("consistency.csv"), ["i", "j", "h_ij", "fb_ij"],
                [[k // N, k % N, repr(float(a)), repr(float(b))] for k, (a, b) in enumerate(zip(h, fb))])
    _write_rows(run.path("atoms.csv"), ["dim"] + [f"atom_{j}" for j in range(N)],
                [[i] + [repr(float(v)) for v in row] for i, row in enumerate(D)])
    run.done("metrics.csv", "checkpoint.dlm", "dictionary.dlm", "consistency.csv", "atoms.csv")
    if res.metrics:
        plotting.plot_metrics(res.metrics, run.path("metrics.png"))
        run.done("metrics.png")
    plotting.plot_consistency(h, fb, run.path("consistency.png"))
    side = int(round(np.sqrt(p.M / 2)))
    shape = (side, side) if cfg["data.source"] in ("idx", "pgm") else None
    plotting.plot_atoms(D if shape is None else D[:side * side] - D[side * side:], run.path("atoms.png"), shape)
    run.done("consistency.png", "atoms.png")
    run.finish()
    last = res.metrics[-1] if res.metrics else None
    if last:
        msg = f"residual {last['consistency_residual']:.4f}, mean threshold {last['mean_threshold']:.4f}"
        if "heldout_objective" in last:
            msg += f", held-out objective {last['heldout_objective']:.6f}"
        print(msg)
    return 0


def cmd_train_sgd(cfg, out_dir):
    from . import plotting

    run = _Run("train-sgd", cfg, out_dir)
    train, held, _ = load_samples(cfg)
    D0 = plasticity.project_dictionary(_init_params(cfg, train.shape[1]).F.T)
    eta = cfg["learn.eta_f"]
    every = cfg["learn.eval_every"] if len(held) else 0
    curves, summary = {}, []
    for tag, rate in (("eta", eta), ("2eta", 2 * eta), ("half_eta", 0.5 * eta)):
        res = plasticity.train_sgd(D0, train, rate, cfg["net.lam"], heldout=held if every else None,
                                   eval_every=every, seed=cfg["seed"])
        run.lap(f"sgd_{tag}")
        name = f"sgd_{tag}.csv"
        _write_rows(run.path(name), ["sample_idx", "heldout_objective"],
                    [[i, repr(v)] for i, v in res.curve])
        data.save_matrix(res.D, run.path(f"sgd_{tag}.dlm"))
        run.done(name, f"sgd_{tag}.dlm")
        if res.curve:
            curves[f"eta={rate:g}"] = tuple(zip(*res.curve))
            summary.append([tag, repr(rate), repr(res.curve[-1][1])])
    if summary:
        _write_rows(run.path("sgd_summary.csv"), ["rate", "eta", "final_heldout_objective"], summary)
        plotting.plot_curves(curves, run.path("sgd.png"))
        run.done("sgd_summary.csv", "sgd.png")
        for tag, rate, obj in summary:
            print(f"eta = {float(rate):g}: held-out objective {float(obj):.6f}")
    run.finish()
    return 0


def cmd_eval(cfg, out_dir):
    run = _Run("eval", cfg, out_dir)
    D = _dictionary(data.load_checkpoint(_need_file(cfg["eval.checkpoint"], "eval.checkpoint")))
    _, held, truth = load_samples(cfg)
    if len(held) == 0:
        raise ConfigError("test set is empty (data.heldout = 0)")
    obj = oracle.dict_objective(D, held, cfg["net.lam"])
    obj_w = oracle.dict_objective(D, held, cfg["net.lam"], weighted=True)
    rows = [["objective", repr(obj)], ["objective_weighted", repr(obj_w)]]
    print(f"objective = {obj:.6f} (weighted penalty: {obj_w:.6f})")
    D_true = None
    if cfg["eval.truth"]:
        D_true = data.load_matrix(_need_file(cfg["eval.truth"], "eval.truth"))
    elif truth is not None:
        D_true = truth.D_true
    if D_true is not None:
        rec = oracle.atom_recovery(D, D_true, cfg["eval.threshold"])
        rows.append(["recovery", repr(rec)])
        print(f"recovery = {rec:.4f} (threshold {cfg['eval.threshold']})")
    _write_rows(run.path("eval.csv"), ["metric", "value"], rows)
    run.done("eval.csv")
    run.lap("eval")
    run.finish()
    return 0


COMMANDS = {"encode": cmd_encode, "train": cmd_train, "train-sgd": cmd_train_sgd, "eval": cmd_eval}


def build_parser():
    ap = argparse.ArgumentParser(prog="spikedict", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out-dir", default="out", help="directory for all outputs")
    ap.add_argument("--list-keys", action="store_true", help="print the config keys and exit")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if "--list-keys" in argv:
        for k, (typ, default, text) in KEYS.items():
            print(f"{k:28s} {typ.__name__:6s} {default!s:12s} {text}")
        return 0
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        text = ""
        if args.config:
            if not os.path.isfile(args.config):
                raise MissingFile(f"--config: file not found: {args.config}")
            with open(args.config) as fh:
                text = fh.read()
        cfg = resolve(parse_config(text), args.seed)
        validate(cfg)
        return COMMANDS[args.command](cfg, args.out_dir)
    except (ConfigError, data.CheckpointError, data.ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (plasticity.TrainingDiverged, RunawayRatesError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

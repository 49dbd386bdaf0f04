"""Weight-update rules and training loops.

The spiking learner updates feedforward/feedback weights from the shift of
input-layer rates between the two stages, and the lateral weights and
thresholds ``H`` from the shift of code-layer imbalances.  The classical
projected SGD baseline is kept alongside for comparison.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import oracle
from .lif import RunawayRatesError
from .topology import (
    NetworkParams,
    SimConfig,
    consistency_residual,
    equilibrium_feedback,
    equilibrium_feedforward,
    run_feedback,
    run_feedforward,
)

__all__ = [
    "LearnRates",
    "TrainConfig",
    "TrainingDiverged",
    "TrainResult",
    "SGDResult",
    "update_ff_fb",
    "grad_H",
    "update_H",
    "project_dictionary",
    "sgd_step",
    "train_snn",
    "train_sgd",
    "calibrate_decay",
    "snn_dictionary",
    "write_metrics_csv",
]


@dataclass(frozen=True)
class LearnRates:
    eta_f: float = 0.01
    eta_b: float = 0.01
    eta_h: float = 0.32
    decay_f: float = 0.0
    decay_b: float = 0.0
    decay_h: float = 0.0
    eta_sgd: float = 0.01

    @classmethod
    def from_eta(cls, eta_f: float, decay: float = 0.0) -> "LearnRates":
        """Default ratios: ``eta_b = eta_f`` and ``eta_h = 32 * eta_f``."""
        return cls(eta_f, eta_f, 32 * eta_f, decay, decay, decay, eta_f)

    def with_decay(self, decay: float, h_ratio: float = 1.0) -> "LearnRates":
        """Shared weight decay; the threshold decay is ``h_ratio`` times larger."""
        return replace(self, decay_f=decay, decay_b=decay, decay_h=h_ratio * decay)


@dataclass(frozen=True)
class TrainConfig:
    rates: LearnRates = LearnRates()
    gamma: float = 0.5
    lam: float = 0.1
    sim: SimConfig = SimConfig(v_init=0.5)
    mode: str = "simultaneous"
    consistency_samples: int = 2000
    learn_ff: bool = True
    learn_h: bool = True
    engine: str = "spiking"
    theta_min: float = 0.05
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.sim.dt <= 0 or self.sim.window <= 0:
            raise ValueError("dt and window must be positive")
        if self.mode not in ("simultaneous", "two_phase"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.engine not in ("spiking", "rate"):
            raise ValueError(f"unknown engine {self.engine!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, sample_idx: int, cause: Exception, params: NetworkParams):
        self.sample_idx = sample_idx
        self.params = params
        super().__init__(f"training diverged at sample {sample_idx}: {cause}")


def update_ff_fb(F, B, y1, y2, z2, rates: LearnRates):
    """Local rules for feedforward and feedback weights, truncated at zero."""
    err = np.asarray(y1) - np.asarray(y2)
    z2 = np.asarray(z2)
    F_new = F + rates.eta_f * np.outer(z2, err) - rates.decay_f * F
    B_new = B + rates.eta_b * np.outer(err, z2) - rates.decay_b * B
    return np.maximum(F_new, 0.0), np.maximum(B_new, 0.0)


def grad_H(H, e1, e2, z1, z2, gamma: float) -> np.ndarray:
    """Estimate of ``(H - FB) z2 z2^T`` from stage imbalances and rates."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("grad_H needs a feedback stage with 0 < gamma < 1")
    z1 = np.asarray(z1)
    z2 = np.asarray(z2)
    v = (-np.asarray(e2) + (1 - gamma) * np.asarray(e1) - (1 - gamma) * (H @ (z2 - z1))) / gamma
    return np.outer(v, z2)


def update_H(H, grad, rates: LearnRates, theta_min: float = 0.05) -> np.ndarray:
    H_new = H - rates.eta_h * grad - rates.decay_h * H
    diag = np.maximum(np.diag(H_new), theta_min)
    np.maximum(H_new, 0.0, out=H_new)
    np.fill_diagonal(H_new, diag)
    return H_new


def project_dictionary(D, rng=None, pool=None) -> np.ndarray:
    """Clamp to the nonnegative orthant and renormalize every column.

    Columns that end up all-zero are replaced by a normalized random row of
    ``pool`` (or a random nonnegative vector when no pool is given).
    """
    D = np.maximum(np.asarray(D, dtype=np.float64), 0.0)
    norms = np.linalg.norm(D, axis=0)
    dead = np.flatnonzero(norms == 0)
    if dead.size:
        rng = np.random.default_rng() if rng is None else rng
        for j in dead:
            col = None
            if pool is not None and len(pool):
                col = np.asarray(pool[rng.integers(len(pool))], dtype=np.float64)
            if col is None or not np.any(col > 0):
                col = rng.uniform(size=D.shape[0])
            D[:, j] = col
        norms = np.linalg.norm(D, axis=0)
    return D / norms


def sgd_step(D, x, a_star, eta: float, lam: float = 0.0, rng=None, pool=None) -> np.ndarray:
    """One projected stochastic gradient step on the reconstruction loss.

    ``lam`` is accepted for symmetry with the objective; the gradient with
    respect to ``D`` does not depend on it.
    """
    D = np.asarray(D, dtype=np.float64)
    a_star = np.asarray(a_star, dtype=np.float64)
    resid = D @ a_star - np.asarray(x, dtype=np.float64)
    return project_dictionary(D - eta * np.outer(resid, a_star), rng=rng, pool=pool)


def snn_dictionary(params: NetworkParams) -> np.ndarray:
    """Unit-column dictionary read off the feedforward weights."""
    return project_dictionary(params.F.T)


@dataclass
class TrainResult:
    params: NetworkParams
    metrics: list = field(default_factory=list)
    thresholds: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None


def _stages(params, x, cfg: TrainConfig):
    if cfg.engine == "rate":
        return equilibrium_feedforward(params, x), equilibrium_feedback(params, x)
    ff = run_feedforward(params, x, cfg.sim)
    fb = run_feedback(params, x, ff.state, cfg.sim)
    return ff, fb


def _heldout(params, heldout, lam):
    return oracle.dict_objective(snn_dictionary(params), heldout, lam)


def train_snn(params: NetworkParams, samples, cfg: TrainConfig, heldout=None,
              on_sample: Optional[Callable] = None) -> TrainResult:
    """Online learning with the two-stage protocol, one sample at a time.

    Every entry of ``metrics`` is a dict with ``sample_idx``,
    ``consistency_residual``, ``mean_threshold`` and, every ``eval_every``
    samples when ``heldout`` is given, ``heldout_objective``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    params = replace(params, gamma=cfg.gamma, lam=cfg.lam)
    P = samples.shape[0]
    rates = cfg.rates
    thresholds = np.empty((P + 1, params.N))
    thresholds[0] = params.thresholds
    active = np.zeros((P, params.N), dtype=bool)
    metrics = []
    if heldout is not None and cfg.eval_every:
        metrics.append({"sample_idx": 0,
                        "consistency_residual": consistency_residual(params),
                        "mean_threshold": float(thresholds[0].mean()),
                        "heldout_objective": _heldout(params, heldout, cfg.lam)})
    F, B, H = params.F, params.B, params.H
    cycle = cfg.consistency_samples + 1
    for i, x in enumerate(samples):
        cur = replace(params, F=F, B=B, H=H, L=-np.diag(H))
        try:
            ff, fb = _stages(cur, x, cfg)
        except (RunawayRatesError, RuntimeError) as exc:
            raise TrainingDiverged(i, exc, cur) from exc
        active[i] = (ff.z > 0) | (fb.z > 0)
        learn_ff = cfg.learn_ff and (cfg.mode == "simultaneous" or i % cycle == cycle - 1)
        if cfg.learn_h:
            H = update_H(H, grad_H(H, ff.e, fb.e, ff.z, fb.z, cfg.gamma), rates, cfg.theta_min)
        if learn_ff:
            F, B = update_ff_fb(F, B, ff.y, fb.y, fb.z, rates)
        thresholds[i + 1] = np.diag(H)
        params = replace(cur, F=F, B=B, H=H, L=-np.diag(H))
        row = {"sample_idx": i + 1,
               "consistency_residual": consistency_residual(params),
               "mean_threshold": float(thresholds[i + 1].mean())}
        if heldout is not None and cfg.eval_every and (i + 1) % cfg.eval_every == 0:
            row["heldout_objective"] = _heldout(params, heldout, cfg.lam)
        metrics.append(row)
        if on_sample is not None:
            on_sample(i, params, ff, fb)
    return TrainResult(params=params, metrics=metrics, thresholds=thresholds, active=active)


@dataclass
class SGDResult:
    D: np.ndarray
    eta: float
    curve: list = field(default_factory=list)


def train_sgd(D0, samples, eta: float, lam: float, heldout=None, eval_every: int = 0,
              seed: int = 0) -> SGDResult:
    """Projected SGD with batch size 1; codes come from the exact solver."""
    rng = np.random.default_rng(seed)
    samples = np.asarray(samples, dtype=np.float64)
    D = project_dictionary(D0, rng=rng, pool=samples)
    curve = []
    if heldout is not None and eval_every:
        curve.append((0, oracle.dict_objective(D, heldout, lam)))
    a = None
    for i, x in enumerate(samples):
        a = oracle.solve(D, x, lam).a
        D = sgd_step(D, x, a, eta, lam, rng=rng, pool=samples)
        if heldout is not None and eval_every and (i + 1) % eval_every == 0:
            curve.append((i + 1, oracle.dict_objective(D, heldout, lam)))
    return SGDResult(D=D, eta=eta, curve=curve)


def calibrate_decay(params: NetworkParams, samples, cfg: TrainConfig, n_samples: int = 1000,
                    lo: float = 1e-6, hi: float = 1e-1, target=(0.8, 1.2),
                    max_steps: int = 12, h_ratio: float = 3.0):
    """Bisect (in log scale) a shared decay so thresholds settle near 1.

    Runs ``n_samples`` of training per probe and returns ``(decay, history)``
    where ``history`` lists ``(decay, mean_threshold)`` probes.  More decay
    means lower thresholds.  The threshold decay is ``h_ratio`` times the
    weight decay: with equal decays a silent atom's threshold and weights
    shrink together and it never becomes active again.
    """
    samples = np.asarray(samples)[:n_samples]
    history = []
    for _ in range(max_steps):
        mid = math.sqrt(lo * hi)
        trial = replace(cfg, rates=cfg.rates.with_decay(mid, h_ratio), eval_every=0)
        try:
            res = train_snn(params, samples, trial)
            mean_theta = float(res.thresholds[-1].mean())
        except TrainingDiverged:
            mean_theta = math.inf
        history.append((mid, mean_theta))
        if target[0] <= mean_theta <= target[1]:
            return mid, history
        if mean_theta > target[1]:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi), history


def write_metrics_csv(path, metrics) -> None:
    with_obj = any("heldout_objective" in m for m in metrics)
    cols = ["sample_idx", "consistency_residual", "mean_threshold"]
    if with_obj:
        cols.append("heldout_objective")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for m in metrics:
            row = [m["sample_idx"], repr(m["consistency_residual"]), repr(m["mean_threshold"])]
            if with_obj:
                v = m.get("heldout_objective")
                row.append("" if v is None else repr(v))
            w.writerow(row)

"""Two-layer dictionary-learning network and its feedforward/feedback stages.

Neurons are laid out as ``[input (M) | sparse code (N) | bias (1)]``.  Input
and bias neurons have threshold 1 and are driven by constant currents; the
code layer receives feedforward synapses ``F`` from the input layer, bias
synapses ``L`` from the bias neuron, and lateral inhibition from the
off-diagonal of ``H`` (whose diagonal holds the code-layer thresholds).  In
the feedback stage the code layer also excites the input layer through
``gamma * B`` while the external drives are scaled by ``1 - gamma``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit

from .lif import DEFAULT_MAX_RATE, NeuronPopulation, SimState, run_window

__all__ = [
    "NetworkParams",
    "SimConfig",
    "StageReadout",
    "configure_from_dictionary",
    "random_init",
    "build_network",
    "run_feedforward",
    "run_feedback",
    "run_stages",
    "equilibrium_feedforward",
    "equilibrium_feedback",
    "consistency_residual",
    "consistency_pairs",
    "write_readout_csv",
]


@dataclass(frozen=True)
class NetworkParams:
    F: np.ndarray
    B: np.ndarray
    H: np.ndarray
    L: np.ndarray
    gamma: float = 0.5
    lam: float = 0.1

    def __post_init__(self):
        for name in ("F", "B", "H", "L"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        N, M = self.F.shape
        if self.B.shape != (M, N) or self.H.shape != (N, N) or self.L.shape != (N,):
            raise ValueError(
                f"inconsistent shapes F{self.F.shape} B{self.B.shape} H{self.H.shape} L{self.L.shape}"
            )
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def M(self) -> int:
        return self.F.shape[1]

    @property
    def N(self) -> int:
        return self.F.shape[0]

    @property
    def thresholds(self) -> np.ndarray:
        return np.diag(self.H).copy()

    def violations(self) -> list[str]:
        """Names of the sign/range invariants the parameters break."""
        bad = []
        off = self.H - np.diag(np.diag(self.H))
        if np.any(self.F < 0):
            bad.append("F >= 0")
        if np.any(self.B < 0):
            bad.append("B >= 0")
        if np.any(off < 0):
            bad.append("offdiag(H) >= 0")
        if np.any(np.diag(self.H) <= 0):
            bad.append("diag(H) > 0")
        if np.any(self.L > 0):
            bad.append("L <= 0")
        return bad

    def with_weights(self, **kw) -> "NetworkParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 32
    window: float = 20.0
    tau_s: float = 1.0
    warmup: float = 0.0
    max_rate: float = DEFAULT_MAX_RATE
    record: bool = False
    v_init: float = 0.0


@dataclass(frozen=True)
class StageReadout:
    y: np.ndarray
    z: np.ndarray
    e: np.ndarray
    stage: str
    quantum: float = 0.0
    e_input: Optional[np.ndarray] = None
    state: Optional[SimState] = field(default=None, compare=False, repr=False)


def configure_from_dictionary(D, lam: float = 0.0, gamma: float = 0.5) -> NetworkParams:
    """Feedback-consistent, symmetric network encoding dictionary ``D``."""
    D = np.asarray(D, dtype=np.float64)
    G = D.T @ D
    if np.any(np.diag(G) <= 0):
        raise ValueError("dictionary has a zero-norm column; its threshold would be 0")
    return NetworkParams(F=D.T.copy(), B=D.copy(), H=G, L=-np.diag(G).copy(), gamma=gamma, lam=lam)


def random_init(M: int, N: int, seed=None, gamma: float = 0.5, lam: float = 0.1,
                lateral_high: float = 0.5) -> NetworkParams:
    """Asymmetric, inconsistent initial weights.

    ``F`` and ``B`` are uniform on ``[0, 1/sqrt(M)]``, thresholds are 1 and
    lateral weights uniform on ``[0, lateral_high]``.  The default is about
    twice the mean of ``(FB)_ij`` at this scale, which keeps the feedback
    stage stable; much weaker inhibition lets rates run away.
    """
    if M < 1 or N < 1:
        raise ValueError("M and N must be positive")
    rng = np.random.default_rng(seed)
    hi = 1.0 / np.sqrt(M)
    F = rng.uniform(0.0, hi, size=(N, M))
    B = rng.uniform(0.0, hi, size=(M, N))
    H = rng.uniform(0.0, lateral_high, size=(N, N))
    np.fill_diagonal(H, 1.0)
    return NetworkParams(F=F, B=B, H=H, L=-np.diag(H).copy(), gamma=gamma, lam=lam)


def build_network(params: NetworkParams, x, feedback_gain: float):
    """Full weight matrix and population for one stage.

    ``feedback_gain`` is 0 in the feedforward stage and ``gamma`` in the
    feedback stage; drives of the input and bias neurons are scaled by
    ``1 - feedback_gain``.
    """
    M, N = params.M, params.N
    n = M + N + 1
    W = np.zeros((n, n))
    W[M:M + N, :M] = params.F
    W[M:M + N, M:M + N] = -(params.H - np.diag(np.diag(params.H)))
    W[M:M + N, M + N] = params.L
    if feedback_gain:
        W[:M, M:M + N] = feedback_gain * params.B
    scale = 1.0 - feedback_gain
    drive = np.concatenate([scale * np.asarray(x, dtype=np.float64), np.zeros(N), [scale * params.lam]])
    theta = np.concatenate([np.ones(M), np.diag(params.H), [1.0]])
    return np.asfortranarray(W), NeuronPopulation(theta, drive)


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.M,):
        raise ValueError(f"input must have length {params.M}")
    if np.any(x < 0):
        raise ValueError("input drive must be nonnegative")
    return x


def _readout(params, r, stage, state):
    M, N = params.M, params.N
    return StageReadout(
        y=r.rates[:M].copy(),
        z=r.rates[M:M + N].copy(),
        e=r.imbalance[M:M + N].copy(),
        stage=stage,
        quantum=r.quantum,
        e_input=r.imbalance[:M].copy(),
        state=state,
    )


def run_feedforward(params: NetworkParams, x, sim: SimConfig = SimConfig()) -> StageReadout:
    """Feedforward stage from a fresh state; the readout carries the end state."""
    x = _check_input(params, x)
    W, pop = build_network(params, x, 0.0)
    state = SimState.zeros(pop.count, record=sim.record)
    state.v[:] = sim.v_init * pop.thresholds
    r = run_window(state, W, pop, sim.warmup, sim.warmup + sim.window, sim.dt, sim.tau_s, sim.max_rate)
    return _readout(params, r, "feedforward", state)


def run_feedback(params: NetworkParams, x, carry_state: SimState,
                 sim: SimConfig = SimConfig()) -> StageReadout:
    """Feedback stage continuing from ``carry_state`` (modified in place)."""
    if not 0.0 <= params.gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {params.gamma}")
    x = _check_input(params, x)
    W, pop = build_network(params, x, params.gamma)
    t0 = carry_state.t + sim.warmup
    r = run_window(carry_state, W, pop, t0, t0 + sim.window, sim.dt, sim.tau_s, sim.max_rate)
    return _readout(params, r, "feedback", carry_state)


def run_stages(params: NetworkParams, x, sim: SimConfig = SimConfig()):
    ff = run_feedforward(params, x, sim)
    fb = run_feedback(params, x, ff.state, sim)
    return ff, fb


@njit(cache=True)
def _pgs_kernel(A, q, z, tol, max_sweeps):
    n = q.shape[0]
    for sweep in range(max_sweeps):
        delta = 0.0
        zmax = 1.0
        for i in range(n):
            s = q[i]
            for j in range(n):
                s -= A[i, j] * z[j]
            new = z[i] + s / A[i, i]
            if new < 0.0:
                new = 0.0
            d = abs(new - z[i])
            if d > delta:
                delta = d
            z[i] = new
            if new > zmax:
                zmax = new
        if not np.isfinite(delta) or zmax > 1e12:
            return -1
        if delta <= tol * zmax:
            return sweep + 1
    return -1


def _pgs(A, q, tol=1e-12, max_sweeps=100000):
    """Projected Gauss-Seidel for ``z >= 0, A z - q >= 0, z.(A z - q) = 0``."""
    if np.any(np.diag(A) <= 0):
        raise ValueError("equilibrium requires positive thresholds")
    z = np.zeros(q.size)
    if _pgs_kernel(np.ascontiguousarray(A), np.ascontiguousarray(q), z, tol, max_sweeps) < 0:
        raise RuntimeError("equilibrium iteration did not converge; the network may have no stable equilibrium")
    return z


def equilibrium_feedforward(params: NetworkParams, x) -> StageReadout:
    """Exact steady-state rates of the feedforward stage (no simulation)."""
    x = _check_input(params, x)
    q = params.F @ x + params.lam * params.L
    z = _pgs(params.H, q)
    return StageReadout(y=x.copy(), z=z, e=q - params.H @ z, stage="feedforward")


def equilibrium_feedback(params: NetworkParams, x) -> StageReadout:
    """Exact steady-state rates of the feedback stage (no simulation)."""
    x = _check_input(params, x)
    g = params.gamma
    FB = params.F @ params.B
    q = (1 - g) * (params.F @ x + params.lam * params.L)
    z = _pgs(params.H - g * FB, q)
    y = (1 - g) * x + g * params.B @ z
    e = params.F @ y + (1 - g) * params.lam * params.L - params.H @ z
    return StageReadout(y=y, z=z, e=e, stage="feedback")


def consistency_pairs(params: NetworkParams):
    """Pairs ``(h_ij, (FB)_ij)`` over all entries, for scatter plots."""
    FB = params.F @ params.B
    return params.H.ravel().copy(), FB.ravel()


def consistency_residual(params: NetworkParams, return_flag: bool = False):
    """``||H - FB||_F / ||FB||_F``, or the absolute residual when ``FB = 0``.

    With ``return_flag`` a tuple ``(residual, is_relative)`` is returned.
    """
    FB = params.F @ params.B
    num = float(np.linalg.norm(params.H - FB))
    den = float(np.linalg.norm(FB))
    rel = den > 0
    res = num / den if rel else num
    return (res, rel) if return_flag else res


def write_readout_csv(path, readouts) -> None:
    """``stage,layer,neuron_id,rate,imbalance`` rows for each readout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "layer", "neuron_id", "rate", "imbalance"])
        for ro in readouts:
            e_in = ro.e_input if ro.e_input is not None else np.full(ro.y.size, np.nan)
            for i, (rate, e) in enumerate(zip(ro.y, e_in)):
                w.writerow([ro.stage, "input", i, f"{rate:.6f}", f"{e:.6f}"])
            for i, (rate, e) in enumerate(zip(ro.z, ro.e)):
                w.writerow([ro.stage, "code", i, f"{rate:.6f}", f"{e:.6f}"])

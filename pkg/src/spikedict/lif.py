"""Fixed-step integrate-and-fire simulation with exponentially filtered synapses.

Every neuron integrates its soma current ``mu = b + W @ r`` without leak and
fires when the membrane potential reaches its threshold, after which the
potential is reset to zero.  ``r`` holds the synaptically filtered spike
trains, i.e. each spike adds ``1/tau_s`` to the emitting neuron's trace and
the trace then decays as ``exp(-t/tau_s)``.

Within one step the order is: decay traces, compute currents from the decayed
traces, integrate, fire and reset, then add the new spike impulses so they act
from the next step on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from numba import njit

__all__ = [
    "RunawayRatesError",
    "NeuronPopulation",
    "SimState",
    "RateReadout",
    "step",
    "run_window",
    "balance_residual",
    "write_raster_csv",
]

DEFAULT_MAX_RATE = 100.0


class RunawayRatesError(RuntimeError):
    """A neuron fired faster than the configured guard allows."""

    def __init__(self, neuron_id: int, rate: float, t: float):
        self.neuron_id = int(neuron_id)
        self.rate = float(rate)
        self.t = float(t)
        super().__init__(
            f"runaway rates: neuron {self.neuron_id} reached {self.rate:.3f} "
            f"spikes per unit time at t={self.t:.6f}"
        )


@dataclass(frozen=True)
class NeuronPopulation:
    thresholds: np.ndarray
    drive: np.ndarray

    def __post_init__(self):
        theta = np.ascontiguousarray(self.thresholds, dtype=np.float64)
        b = np.ascontiguousarray(self.drive, dtype=np.float64)
        if theta.ndim != 1 or b.shape != theta.shape:
            raise ValueError("thresholds and drive must be 1-d vectors of equal length")
        if theta.size == 0:
            raise ValueError("population must contain at least one neuron")
        if not np.all(theta > 0):
            raise ValueError("all thresholds must be strictly positive")
        if not np.all(np.isfinite(b)):
            raise ValueError("external drive must be finite")
        object.__setattr__(self, "thresholds", theta)
        object.__setattr__(self, "drive", b)

    @property
    def count(self) -> int:
        return self.thresholds.size


@dataclass
class SimState:
    """Mutable simulation state.

    ``u_accum`` is the running integral of the soma current and
    ``lost_charge`` the running sum of threshold overshoot discarded by the
    reset-to-zero, so that per neuron
    ``u_accum = theta * spikes + lost_charge + v`` holds at all times.
    """

    v: np.ndarray
    r: np.ndarray
    u_accum: np.ndarray
    lost_charge: np.ndarray
    spike_counts: np.ndarray
    t: float = 0.0
    steps: int = 0
    record: bool = False
    spike_log: List[Tuple[int, float]] = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int, record: bool = False) -> "SimState":
        return cls(
            v=np.zeros(n),
            r=np.zeros(n),
            u_accum=np.zeros(n),
            lost_charge=np.zeros(n),
            spike_counts=np.zeros(n, dtype=np.int64),
            record=record,
        )

    @property
    def size(self) -> int:
        return self.v.size

    def copy(self) -> "SimState":
        return SimState(
            v=self.v.copy(),
            r=self.r.copy(),
            u_accum=self.u_accum.copy(),
            lost_charge=self.lost_charge.copy(),
            spike_counts=self.spike_counts.copy(),
            t=self.t,
            steps=self.steps,
            record=self.record,
            spike_log=list(self.spike_log),
        )


@dataclass(frozen=True)
class RateReadout:
    rates: np.ndarray
    mean_current: np.ndarray
    imbalance: np.ndarray
    window: Tuple[float, float]
    counts: np.ndarray

    @property
    def quantum(self) -> float:
        return 1.0 / (self.window[1] - self.window[0])


@njit(cache=True)
def _integrate(v, r, isyn, u_acc, lost, counts, total, W, b, theta,
               decay, inv_tau, dt, nsteps, t0, max_rate, record,
               out_ids, out_steps):
    """Advance ``nsteps`` steps in place.

    Returns ``(n_logged, runaway_neuron, runaway_step)``; ``runaway_neuron`` is
    -1 when the guard did not trip.
    """
    n = v.shape[0]
    n_logged = 0
    fired = np.empty(n, dtype=np.int64)
    for k in range(nsteps):
        for i in range(n):
            r[i] *= decay
            isyn[i] *= decay
        nf = 0
        for i in range(n):
            mu = b[i] + isyn[i]
            q = mu * dt
            v[i] += q
            u_acc[i] += q
            if v[i] >= theta[i]:
                lost[i] += v[i] - theta[i]
                v[i] = 0.0
                fired[nf] = i
                nf += 1
        if nf == 0:
            continue
        elapsed = t0 + (k + 1) * dt
        limit = max_rate * max(elapsed, 1.0)
        for s in range(nf):
            j = fired[s]
            counts[j] += 1
            total[j] += 1
            r[j] += inv_tau
            for i in range(n):
                isyn[i] += W[i, j] * inv_tau
            if record:
                out_ids[n_logged] = j
                out_steps[n_logged] = k
                n_logged += 1
            if total[j] > limit:
                return n_logged, j, k
    return n_logged, -1, nsteps


def _check_shapes(state: SimState, weights: np.ndarray, pop: NeuronPopulation):
    n = pop.count
    if weights.shape != (n, n):
        raise ValueError(f"weight matrix shape {weights.shape} does not match population of {n}")
    if state.size != n:
        raise ValueError(f"state has {state.size} neurons, population has {n}")


def _advance(state, weights, pop, dt, nsteps, tau_s, max_rate):
    W = np.asarray(weights, dtype=np.float64)
    isyn = W @ state.r
    counts = np.zeros(state.size, dtype=np.int64)
    cap = nsteps * state.size if state.record else 0
    out_ids = np.empty(cap, dtype=np.int64)
    out_steps = np.empty(cap, dtype=np.int64)
    t0 = state.t
    n_logged, bad, bad_step = _integrate(
        state.v, state.r, isyn, state.u_accum, state.lost_charge, counts,
        state.spike_counts, W, pop.drive, pop.thresholds,
        math.exp(-dt / tau_s), 1.0 / tau_s, dt, nsteps, t0, max_rate,
        state.record, out_ids, out_steps,
    )
    done = bad_step + 1 if bad >= 0 else nsteps
    state.steps += done
    state.t = t0 + done * dt
    if state.record:
        state.spike_log.extend(
            (int(i), t0 + (int(k) + 1) * dt) for i, k in zip(out_ids[:n_logged], out_steps[:n_logged])
        )
    if bad >= 0:
        rate = state.spike_counts[bad] / max(state.t, 1.0)
        raise RunawayRatesError(bad, rate, state.t)
    return counts


def step(state: SimState, weights: np.ndarray, pop: NeuronPopulation, dt: float,
         tau_s: float = 1.0, max_rate: float = DEFAULT_MAX_RATE) -> np.ndarray:
    """Advance the network by one time step and return the ids that fired."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_shapes(state, weights, pop)
    counts = _advance(state, weights, pop, dt, 1, tau_s, max_rate)
    return np.flatnonzero(counts)


def _n_steps(length: float, dt: float) -> int:
    n = int(round(length / dt))
    if n < 1 or abs(n * dt - length) > 1e-9 * max(1.0, length):
        raise ValueError(f"dt={dt} does not divide the interval length {length}")
    return n


def run_window(state: SimState, weights: np.ndarray, pop: NeuronPopulation,
               t_start: float, t_end: float, dt: float, tau_s: float = 1.0,
               max_rate: float = DEFAULT_MAX_RATE) -> RateReadout:
    """Simulate up to ``t_end`` and measure rates over ``[t_start, t_end]``.

    If the state clock lies before ``t_start`` the gap is simulated first
    without being measured (a warm-up).
    """
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_shapes(state, weights, pop)
    if state.t > t_start + 1e-9 * max(1.0, abs(t_start)):
        raise ValueError(f"state clock {state.t} is already past t_start={t_start}")
    if t_start - state.t > 1e-9 * max(1.0, abs(t_start)):
        _advance(state, weights, pop, dt, _n_steps(t_start - state.t, dt), tau_s, max_rate)
    nsteps = _n_steps(t_end - t_start, dt)
    u0 = state.u_accum.copy()
    counts = _advance(state, weights, pop, dt, nsteps, tau_s, max_rate)
    length = nsteps * dt
    rates = counts / length
    u = (state.u_accum - u0) / length
    return RateReadout(
        rates=rates,
        mean_current=u,
        imbalance=u - pop.thresholds * rates,
        window=(float(t_start), float(t_start + length)),
        counts=counts,
    )


def balance_residual(readout: RateReadout) -> float:
    """Largest violation of the equilibrium condition over all neurons.

    Active neurons must be balanced (zero imbalance); silent neurons may only
    carry a nonpositive imbalance.
    """
    e = readout.imbalance
    active = readout.rates > 0
    viol = np.where(active, np.abs(e), np.maximum(e, 0.0))
    return float(viol.max()) if viol.size else 0.0


def write_raster_csv(path, spike_log, offset: int = 0, t_offset: float = 0.0) -> None:
    """Write a spike log as ``neuron_id,time`` rows, shifting ids and times."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron_id", "time"])
        for nid, t in spike_log:
            w.writerow([nid - offset, f"{t - t_offset:.6f}"])

"""Figure rendering for the command-line reports (PNG files, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metrics(metrics, path):
    """Consistency residual, mean threshold and held-out objective vs samples."""
    idx = np.array([m["sample_idx"] for m in metrics])
    res = np.array([m["consistency_residual"] for m in metrics])
    theta = np.array([m["mean_threshold"] for m in metrics])
    obj = [(m["sample_idx"], m["heldout_objective"]) for m in metrics if "heldout_objective" in m]
    ncol = 3 if obj else 2
    fig, ax = plt.subplots(1, ncol, figsize=(4 * ncol, 3.2))
    ax[0].semilogy(idx, np.maximum(res, 1e-12))
    ax[0].set(xlabel="samples", ylabel="||H - FB|| / ||FB||")
    ax[1].plot(idx, theta)
    ax[1].set(xlabel="samples", ylabel="mean threshold")
    if obj:
        o = np.array(obj)
        ax[2].plot(o[:, 0], o[:, 1], marker="o", ms=3)
        ax[2].set(xlabel="samples", ylabel="held-out objective")
    _save(fig, path)


def plot_consistency(h, fb, path):
    """Scatter of lateral weights/thresholds against the products FB."""
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.scatter(fb, h, s=4, alpha=0.6)
    lo = min(np.min(h), np.min(fb), 0.0)
    hi = max(np.max(h), np.max(fb))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set(xlabel="(FB)_ij", ylabel="h_ij")
    _save(fig, path)


def plot_atoms(D, path, patch_shape=None):
    """Dictionary atoms, either as image tiles or as a heat map of columns."""
    D = np.asarray(D)
    M, N = D.shape
    if patch_shape is None:
        fig, ax = plt.subplots(figsize=(min(12, 1 + 0.25 * N), 3))
        ax.imshow(D, aspect="auto", cmap="viridis")
        ax.set(xlabel="atom", ylabel="dimension")
        _save(fig, path)
        return
    side = int(np.ceil(np.sqrt(N)))
    fig, axes = plt.subplots(side, side, figsize=(side, side))
    for j, ax in enumerate(np.ravel(axes)):
        ax.axis("off")
        if j < N:
            ax.imshow(D[:, j].reshape(patch_shape), cmap="gray")
    _save(fig, path)


def plot_curves(curves, path, ylabel="held-out objective"):
    """One line per labelled ``(samples, values)`` series."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, (x, y) in curves.items():
        ax.plot(x, y, label=label)
    ax.set(xlabel="samples", ylabel=ylabel)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_encode(snn, oracle_a, path):
    """Spike rates against the optimal sparse code."""
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.scatter(oracle_a, snn, s=5, alpha=0.6)
    hi = max(np.max(oracle_a), np.max(snn), 1e-3)
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set(xlabel="optimal code a*", ylabel="spike rate z")
    _save(fig, path)

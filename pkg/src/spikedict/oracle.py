"""Reference solver for nonnegative sparse coding.

Solves ``min_{a >= 0} 0.5 * ||x - D a||^2 + lam * sum_j g_jj * a_j`` with
``G = D^T D`` by cyclic coordinate descent.  Every coordinate update is the
exact one-dimensional minimizer, a nonnegative soft threshold.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "SparseCode",
    "solve",
    "kkt_residual",
    "sparse_objective",
    "dict_objective",
    "atom_recovery",
]


@dataclass(frozen=True)
class SparseCode:
    a: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool


@njit(cache=True)
def _kkt(G, c, a):
    worst = 0.0
    for i in range(a.shape[0]):
        s = c[i]
        for j in range(a.shape[0]):
            s -= G[i, j] * a[j]
        v = abs(s) if a[i] > 0.0 else max(s, 0.0)
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _cd(G, c, a, tol, max_updates):
    # grad holds c - G a, kept in sync with a
    n = a.shape[0]
    grad = c - G @ a
    updates = 0
    res = _kkt(G, c, a)
    while res > tol and updates < max_updates:
        for i in range(n):
            gii = G[i, i]
            new = a[i] + grad[i] / gii
            if new < 0.0:
                new = 0.0
            delta = new - a[i]
            if delta != 0.0:
                a[i] = new
                for j in range(n):
                    grad[j] -= G[j, i] * delta
            updates += 1
        res = _kkt(G, c, a)
    return updates, res


def _prepare(D, x, lam):
    D = np.asarray(D, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if D.ndim != 2 or x.shape != (D.shape[0],):
        raise ValueError("D must be M x N and x an M-vector")
    G = D.T @ D
    if np.any(np.diag(G) <= 0):
        raise ValueError("dictionary has a zero-norm column")
    c = D.T @ x - lam * np.diag(G)
    return D, x, G, c


def sparse_objective(D, x, lam, a, weighted=True) -> float:
    """``0.5 ||x - D a||^2`` plus the weighted (``g_jj``) or plain l1 penalty."""
    D = np.asarray(D, dtype=np.float64)
    r = np.asarray(x, dtype=np.float64) - D @ a
    w = np.einsum("ij,ij->j", D, D) if weighted else 1.0
    return float(0.5 * r @ r + lam * np.sum(w * a))


def solve(D, x, lam: float, tol: float = 1e-8, max_iter: int | None = None,
          a0=None) -> SparseCode:
    """Minimize the weighted nonnegative l1 problem for one sample.

    ``max_iter`` counts single-coordinate updates and defaults to ``10000*N``.
    The result carries ``converged=False`` when the KKT residual is still above
    ``tol`` after ``max_iter`` updates.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    D, x, G, c = _prepare(D, x, lam)
    n = G.shape[0]
    if max_iter is None:
        max_iter = 10000 * n
    a = np.zeros(n) if a0 is None else np.maximum(np.array(a0, dtype=np.float64), 0.0)
    updates, res = _cd(G, c, a, tol, max_iter)
    return SparseCode(
        a=a,
        objective=sparse_objective(D, x, lam, a),
        kkt_residual=float(res),
        iterations=int(updates),
        converged=bool(res <= tol),
    )


def kkt_residual(D, x, lam: float, a) -> float:
    """Violation of the optimality conditions at a nonnegative point ``a``."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("a must be nonnegative")
    _, _, G, c = _prepare(D, x, lam)
    return float(_kkt(G, c, a))


def dict_objective(D, X, lam: float, weighted: bool = False, tol: float = 1e-8) -> float:
    """Mean sparse-coding loss of dictionary ``D`` over the rows of ``X``.

    Codes are always computed with the weighted penalty; ``weighted`` only
    selects which penalty enters the reported loss (plain l1 by default).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    total = 0.0
    failed = 0
    for x in X:
        code = solve(D, x, lam, tol=tol)
        failed += not code.converged
        total += sparse_objective(D, x, lam, code.a, weighted=weighted)
    if failed:
        warnings.warn(f"{failed} of {X.shape[0]} sparse codes did not converge", RuntimeWarning)
    return total / X.shape[0]


def atom_recovery(D, D_true, threshold: float = 0.99) -> float:
    """Fraction of true atoms matched by a learned atom at ``|cos| >= threshold``.

    Matching is greedy on the largest remaining correlation, without
    replacement on either side.
    """
    A = np.asarray(D, dtype=np.float64)
    T = np.asarray(D_true, dtype=np.float64)
    A = A / np.maximum(np.linalg.norm(A, axis=0), 1e-300)
    T = T / np.maximum(np.linalg.norm(T, axis=0), 1e-300)
    C = np.abs(T.T @ A)
    matched = 0
    for _ in range(min(C.shape)):
        i, j = np.unravel_index(np.argmax(C), C.shape)
        if C[i, j] < threshold:
            break
        matched += 1
        C[i, :] = -1.0
        C[:, j] = -1.0
    return matched / T.shape[1]

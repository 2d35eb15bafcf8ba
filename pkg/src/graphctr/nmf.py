"""Least-squares NMF with Lee-Seung multiplicative updates on a sparse adjacency."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .svd import DimensionError, as_matrix

log = logging.getLogger(__name__)

EPS = 1e-12
NONZERO_REL = 1e-8
_CHUNK = 1 << 16


class NumericError(FloatingPointError):
    pass


@dataclass
class NmfFactors:
    W: np.ndarray  # M x K
    H: np.ndarray  # K x N
    objective_trace: list[float] = field(default_factory=list)
    residual_fro: float = 0.0
    n_iter: int = 0
    converged: bool = False

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def user_loadings(self) -> np.ndarray:
        """W with entries at or below the non-zero threshold set to 0."""
        return threshold_loadings(self.W)

    def url_loadings(self) -> np.ndarray:
        """H transposed to N x K, thresholded like :meth:`user_loadings`."""
        return threshold_loadings(self.H.T)


def threshold_loadings(L: np.ndarray) -> np.ndarray:
    """Zero entries not exceeding ``1e-8 * max`` of their component column."""
    cut = NONZERO_REL * L.max(axis=0, initial=0.0)
    return np.where(L > cut, L, 0.0)


def loading_stats(L: np.ndarray) -> dict:
    """``p`` (components), ``nnz`` and ``sparsity`` of a thresholded loading matrix."""
    nnz = int(np.count_nonzero(threshold_loadings(L)))
    return {"p": L.shape[1], "nnz": nnz, "sparsity": 1.0 - nnz / L.size if L.size else 1.0}


def nmf_init(X, K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (0, 1] entries scaled by sqrt(mean(X) / K)."""
    X = as_matrix(X)
    m, n = X.shape
    mean = X.sum() / (m * n) if m * n else 0.0
    scale = np.sqrt(mean / K) if mean > 0 else 1.0
    rng = np.random.default_rng(seed)
    W = (1.0 - rng.random((m, K))) * scale
    H = (1.0 - rng.random((K, n))) * scale
    return W, H


def _cross_term(X: sp.csr_matrix, W: np.ndarray, H: np.ndarray) -> float:
    # sum over stored entries of X_ij * (W H)_ij, chunked over non-zeros
    coo = X.tocoo()
    total = 0.0
    for s in range(0, coo.nnz, _CHUNK):
        r = coo.row[s : s + _CHUNK]
        c = coo.col[s : s + _CHUNK]
        total += float(coo.data[s : s + _CHUNK] @ np.einsum("ij,ji->i", W[r], H[:, c]))
    return total


def nmf_objective(g, W: np.ndarray, H: np.ndarray) -> float:
    """0.5 * ||X - W H||_F^2 without forming W H densely."""
    X = as_matrix(g)
    m, n = X.shape
    if W.ndim != 2 or H.ndim != 2 or W.shape[0] != m or H.shape[1] != n or W.shape[1] != H.shape[0]:
        raise DimensionError(f"W {W.shape} and H {H.shape} do not factor X {X.shape}")
    xx = float(X.data @ X.data)
    whwh = float(np.sum((W.T @ W) * (H @ H.T)))
    return max(0.5 * (xx - 2.0 * _cross_term(X, W, H) + whwh), 0.0)


def nmf_factorize(
    g,
    K: int,
    max_iter: int = 500,
    tol: float = 1e-5,
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    check: bool = False,
) -> NmfFactors:
    """Factorize X ~ W H by alternating multiplicative updates.

    Each iteration updates H then W::

        H <- H * (W^T X) / (W^T W H + eps)
        W <- W * (X H^T) / (W H H^T + eps)

    and stops once the relative change of the objective drops below ``tol``.
    ``init`` overrides the seeded initialization. ``check`` asserts
    non-negativity after every update.
    """
    if K < 1:
        raise DimensionError(f"K must be >= 1, got {K}")
    X = as_matrix(g)
    XT = X.T.tocsr()
    if init is None:
        W, H = nmf_init(X, K, seed)
    else:
        W, H = (np.array(a, dtype=float) for a in init)
    f = nmf_objective(X, W, H)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        H *= (XT @ W).T / ((W.T @ W) @ H + EPS)
        W *= (X @ H.T) / (W @ (H @ H.T) + EPS)
        if not (np.isfinite(W).all() and np.isfinite(H).all()):
            raise NumericError(f"non-finite factor entries at iteration {it}")
        if check:
            assert W.min() >= 0 and H.min() >= 0, f"negative entry at iteration {it}"
        f_new = nmf_objective(X, W, H)
        trace.append(f_new)
        rel = abs(f - f_new) / max(f, np.finfo(float).tiny)
        f = f_new
        if rel < tol:
            converged = True
            break
    log.debug("nmf K=%d stopped after %d iterations, objective %.6g", K, it, f)
    return NmfFactors(
        W=W,
        H=H,
        objective_trace=trace,
        residual_fro=float(np.sqrt(2.0 * f)),
        n_iter=it,
        converged=converged,
    )


def save_nmf(f: NmfFactors, directory) -> None:
    """Write thresholded W and H as "row col value" triplets under a shape header."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, L in (("nmf_W.txt", f.user_loadings()), ("nmf_H.txt", threshold_loadings(f.H.T).T)):
        r, c = np.nonzero(L)
        with open(d / name, "w") as fh:
            fh.write(f"{L.shape[0]} {L.shape[1]} {r.size}\n")
            fh.writelines(f"{i} {j} {float(L[i, j])!r}\n" for i, j in zip(r, c))
    with open(d / "nmf_trace.txt", "w") as fh:
        fh.writelines(f"{float(v)!r}\n" for v in f.objective_trace)


def _read_triplets(path: Path) -> np.ndarray:
    with open(path) as fh:
        m, n, e = (int(x) for x in fh.readline().split())
        L = np.zeros((m, n))
        for line in fh:
            i, j, v = line.split()
            L[int(i), int(j)] = float(v)
    return L


def load_nmf(directory) -> NmfFactors:
    d = Path(directory)
    trace = [float(x) for x in (d / "nmf_trace.txt").read_text().split()]
    f = trace[-1] if trace else 0.0
    return NmfFactors(
        W=_read_triplets(d / "nmf_W.txt"),
        H=_read_triplets(d / "nmf_H.txt"),
        objective_trace=trace,
        residual_fro=float(np.sqrt(2.0 * f)),
        n_iter=len(trace) - 1,
    )

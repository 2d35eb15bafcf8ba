"""Truncated SVD of the adjacency by randomized subspace iteration."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .graph import BipartiteGraph


class DimensionError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class SvdFactors:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    achieved_tol: float
    n_iter: int
    converged: bool

    @property
    def K(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(g) -> sp.csr_matrix:
    if isinstance(g, BipartiteGraph):
        return g.csr
    if sp.issparse(g):
        return sp.csr_matrix(g, dtype=float)
    return sp.csr_matrix(np.asarray(g, dtype=float))


def _orth(A: np.ndarray) -> np.ndarray:
    q, _ = sla.qr(A, mode="economic", check_finite=False)
    return q


def fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular pairs so the largest-magnitude entry of each U column is positive."""
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s, V * s


def truncated_svd(
    g,
    K: int,
    max_iter: int = 100,
    tol: float = 1e-10,
    seed: int = 0,
    oversample: int = 10,
    min_power_iter: int = 4,
) -> SvdFactors:
    """Top-``K`` singular triplets of the binary adjacency (uncentered).

    Runs subspace iteration on a Gaussian starting block of width
    ``K + oversample`` with a Rayleigh-Ritz step after each pass once
    ``min_power_iter`` passes are done. Stops when
    ``max_k ||X v_k - s_k u_k|| / s_1 < tol``; otherwise returns the last
    estimate with ``converged=False`` and a :class:`ConvergenceWarning`.
    """
    X = as_matrix(g)
    m, n = X.shape
    if not 1 <= K <= min(m, n):
        raise DimensionError(f"K={K} outside [1, {min(m, n)}]")
    width = min(K + oversample, m, n)
    rng = np.random.default_rng(seed)
    Q = _orth(X @ rng.standard_normal((n, width)))
    XT = X.T.tocsr()

    resid = np.inf
    it = 0
    for it in range(1, max(max_iter, min_power_iter) + 1):
        Q = _orth(X @ _orth(XT @ Q))
        if it < min_power_iter:
            continue
        Bt = XT @ Q  # n x width, equals (Q^T X)^T
        Vb, s, Ubt = sla.svd(Bt, full_matrices=False, check_finite=False)
        U = Q @ Ubt.T[:, :K]
        V = Vb[:, :K]
        S = s[:K]
        scale = S[0] if S[0] > 0 else 1.0
        resid = float(np.max(np.linalg.norm(X @ V - U * S, axis=0)) / scale)
        if resid < tol:
            break

    converged = resid < tol
    if not converged:
        warnings.warn(
            f"truncated_svd: residual {resid:.3g} >= tol {tol:.3g} after {it} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    U, V = fix_signs(U, V)
    return SvdFactors(U=U, S=S.copy(), V=V, achieved_tol=resid, n_iter=it, converged=converged)


def save_svd(f: SvdFactors, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "svd_U.npy", np.ascontiguousarray(f.U))
    np.save(d / "svd_V.npy", np.ascontiguousarray(f.V))
    with open(d / "svd_S.txt", "w") as fh:
        fh.write(f"# K={f.K} achieved_tol={float(f.achieved_tol)!r} n_iter={f.n_iter} converged={int(f.converged)}\n")
        fh.writelines(f"{float(v)!r}\n" for v in f.S)


def load_svd(directory) -> SvdFactors:
    d = Path(directory)
    with open(d / "svd_S.txt") as fh:
        meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
        S = np.array([float(x) for x in fh if x.strip()])
    return SvdFactors(
        U=np.load(d / "svd_U.npy"),
        S=S,
        V=np.load(d / "svd_V.npy"),
        achieved_tol=float(meta["achieved_tol"]),
        n_iter=int(meta["n_iter"]),
        converged=bool(int(meta["converged"])),
    )

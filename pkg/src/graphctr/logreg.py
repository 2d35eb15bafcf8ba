"""L1-penalized logistic regression trained with OWL-QN, plus fast prediction.

The objective is

    F(w, w0) = sum_n [log(1 + exp(z_n)) - y_n z_n] + sum_i lam_i |w_i|,
    z_n = x_n . w + w0

with an unpenalized intercept ``w0``. For binary rows the probability is a
ratio of products of exp-weights, so a :class:`WeightTable` stores
``exp(w_i)`` and prediction needs one multiplication per active column.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

MEMORY = 10
BACKTRACK = 0.5
MAX_BACKTRACKS = 50
ARMIJO = 1e-4


class ConvergenceError(RuntimeError):
    """Line search failed; ``model`` carries the last accepted iterate."""

    def __init__(self, message: str, model: "LogRegModel"):
        super().__init__(message)
        self.model = model


@dataclass
class LogRegModel:
    weights: np.ndarray
    intercept: float
    penalty: np.ndarray
    converged: bool = False
    final_objective: float = float("nan")
    train_seconds: float = 0.0
    n_iter: int = 0
    group_ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.weights.size

    @property
    def nnz_total(self) -> int:
        return int(np.count_nonzero(self.weights))

    @property
    def nnz_by_group(self) -> dict[str, int]:
        out = {
            name: int(np.count_nonzero(self.weights[a:b]))
            for name, (a, b) in self.group_ranges.items()
        }
        covered = sum(out.values())
        if covered != self.nnz_total:
            out["other"] = self.nnz_total - covered
        return out


@dataclass
class WeightTable:
    entries: dict[int, float]
    intercept_exp: float
    dimension: int = 0


def _as_csr(X) -> sp.csr_matrix:
    if hasattr(X, "X") and sp.issparse(getattr(X, "X")):
        X = X.X
    return X.tocsr() if sp.issparse(X) else sp.csr_matrix(np.asarray(X, dtype=float))


def _xy(X, y) -> tuple[sp.csr_matrix, np.ndarray]:
    if y is None:
        y = getattr(X, "labels", None)
        if y is None:
            raise ValueError("labels are required unless X is a DesignMatrix")
    X = _as_csr(X)
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValueError(f"{y.size} labels for {X.shape[0]} rows")
    return X, y


def loss_grad(X, w: np.ndarray, w0: float = 0.0, y=None) -> tuple[float, np.ndarray, float]:
    """Negative Bernoulli log-likelihood and its gradient in ``w`` and ``w0``.

    ``X`` is a design matrix carrying its labels, or any matrix with ``y`` given.
    """
    X, y = _xy(X, y)
    w = np.asarray(w, dtype=float)
    if w.shape != (X.shape[1],):
        raise ValueError(f"weights have shape {w.shape}, expected ({X.shape[1]},)")
    z = X @ w + w0
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z))
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is {loss}")
    r = expit(z) - y
    return loss, X.T @ r, float(r.sum())


def _pseudo_gradient(theta: np.ndarray, g: np.ndarray, lam: np.ndarray) -> np.ndarray:
    pg = np.where(theta > 0, g + lam, np.where(theta < 0, g - lam, 0.0))
    at0 = theta == 0
    right = g + lam  # derivative moving up from 0
    left = g - lam  # derivative moving down from 0
    pg = np.where(at0 & (right < 0), right, pg)
    pg = np.where(at0 & (left > 0), left, pg)
    return pg


def _two_loop(pg: np.ndarray, hist: deque) -> np.ndarray:
    q = pg.copy()
    alphas = []
    for s, yv, rho in reversed(hist):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * yv
    if hist:
        s, yv, _ = hist[-1]
        q *= (s @ yv) / (yv @ yv)
    for (s, yv, rho), a in zip(hist, reversed(alphas)):
        b = rho * (yv @ q)
        q += (a - b) * s
    return -q


def train_owlqn(
    X,
    penalty,
    memory: int = MEMORY,
    max_iter: int = 1000,
    tol: float = 1e-6,
    *,
    y=None,
    gtol: float = 0.0,
    fit_intercept: bool = True,
    group_ranges: Mapping[str, tuple[int, int]] | None = None,
    callback: Callable[[int, np.ndarray, np.ndarray, float], None] | None = None,
) -> LogRegModel:
    """Minimize the L1-penalized logistic loss by orthant-wise L-BFGS.

    Stops when the relative objective decrease falls below ``tol`` or the
    largest pseudo-gradient entry is at most ``gtol``. Raises
    :class:`ConvergenceError` if a line search needs more than 50 halvings.
    ``callback(it, old, new, objective)`` sees each accepted step; the last
    entry of the parameter vectors is the intercept.
    """
    t_start = time.perf_counter()
    if group_ranges is None:
        group_ranges = getattr(X, "group_ranges", None)
    X, y = _xy(X, y)
    n, p = X.shape
    lam = np.asarray(penalty, dtype=float)
    if lam.shape != (p,):
        raise ValueError(f"penalty has shape {lam.shape}, expected ({p},)")
    if np.any(lam < 0):
        raise ValueError("penalty must be non-negative")
    lam_full = np.append(lam, 0.0)  # intercept is never penalized
    XT = X.T.tocsr()

    def smooth(theta):
        w, w0 = theta[:p], (theta[p] if fit_intercept else 0.0)
        z = X @ w + w0
        loss = float(np.sum(np.logaddexp(0.0, z) - y * z))
        r = expit(z) - y
        g = np.empty(p + 1)
        g[:p] = XT @ r
        g[p] = r.sum() if fit_intercept else 0.0
        return loss, g

    def objective(theta, loss):
        return loss + float(lam_full @ np.abs(theta))

    theta = np.zeros(p + 1)
    loss, g = smooth(theta)
    f = objective(theta, loss)
    hist: deque = deque(maxlen=memory)
    converged = False
    it = 0

    def model(conv):
        return LogRegModel(
            weights=theta[:p].copy(),
            intercept=float(theta[p]),
            penalty=lam.copy(),
            converged=conv,
            final_objective=f,
            train_seconds=time.perf_counter() - t_start,
            n_iter=it,
            group_ranges=dict(group_ranges or {}),
        )

    for it in range(1, max_iter + 1):
        pg = _pseudo_gradient(theta, g, lam_full)
        if np.max(np.abs(pg)) <= gtol:
            converged = True
            break
        d = _two_loop(pg, hist)
        d[d * pg >= 0] = 0.0  # keep only components descending along -pg
        if d @ pg >= 0:
            hist.clear()
            d = -pg
        orthant = np.where(theta != 0, np.sign(theta), np.sign(-pg))

        step = 1.0 if hist else 1.0 / max(np.linalg.norm(pg), 1.0)
        for _ in range(MAX_BACKTRACKS):
            cand = theta + step * d
            cand[np.sign(cand) != orthant] = 0.0
            c_loss, c_g = smooth(cand)
            c_f = objective(cand, c_loss)
            if c_f <= f + ARMIJO * (pg @ (cand - theta)):
                break
            step *= BACKTRACK
        else:
            raise ConvergenceError(
                f"line search failed after {MAX_BACKTRACKS} backtracks at iteration {it}",
                model(False),
            )

        s = cand - theta
        yv = c_g - g
        sy = s @ yv
        if sy > 1e-12 * (yv @ yv):
            hist.append((s, yv, 1.0 / sy))
        rel = (f - c_f) / max(abs(f), 1e-300)
        if callback is not None:
            callback(it, theta, cand, c_f)
        theta, loss, g, f = cand, c_loss, c_g, c_f
        if rel < tol:
            converged = True
            break
    return model(converged)


def kkt_violation(model: LogRegModel, X, y=None) -> float:
    """Largest breach of the L1 optimality conditions at ``model``.

    Zero weights need ``|g_i| <= lam_i``, non-zero ones ``g_i + lam_i sign(w_i) = 0``,
    and the intercept gradient must vanish.
    """
    _, g, g0 = loss_grad(X, model.weights, model.intercept, y=y)
    w, lam = model.weights, model.penalty
    at0 = w == 0
    viol = np.where(at0, np.maximum(np.abs(g) - lam, 0.0), np.abs(g + lam * np.sign(w)))
    return float(max(viol.max(initial=0.0), abs(g0)))


def predict_proba(model: LogRegModel, X) -> np.ndarray | float:
    """sigma(x . w + w0) for each row of ``X``; a single ``(indices, values)`` row gives a float."""
    if isinstance(X, tuple):
        idx, val = X
        return float(expit(np.dot(model.weights[np.asarray(idx, dtype=np.int64)], val) + model.intercept))
    return expit(_as_csr(X) @ model.weights + model.intercept)


def export_weight_table(model: LogRegModel) -> WeightTable:
    nz = np.flatnonzero(model.weights)
    return WeightTable(
        entries={int(i): float(np.exp(model.weights[i])) for i in nz},
        intercept_exp=float(np.exp(model.intercept)),
        dimension=model.dimension,
    )


def fast_predict(table: WeightTable, active: Iterable[int]) -> float:
    """Probability for a binary row given its active columns.

    ``q = exp(w0) * prod_{i in active} exp(w_i)`` and the result is
    ``q / (1 + q)``. Columns without a table entry have zero weight.
    """
    q = table.intercept_exp
    entries = table.entries
    seen = set()
    for i in active:
        if i in seen:
            raise ValueError(f"duplicate active column {i}")
        seen.add(i)
        q *= entries.get(i, 1.0)
    if q == np.inf:
        return 1.0
    return q / (1.0 + q)


def save_model(model: LogRegModel, path) -> None:
    """Header lines then "col weight" per non-zero weight."""
    with open(path, "w") as fh:
        fh.write(f"# dimension {model.dimension}\n")
        fh.write(f"# intercept {float(model.intercept)!r}\n")
        fh.write(f"# objective {float(model.final_objective)!r}\n")
        fh.write(f"# converged {int(model.converged)}\n")
        fh.write(f"# n_iter {model.n_iter}\n")
        for name, (a, b) in model.group_ranges.items():
            fh.write(f"# group {name} {a} {b}\n")
        fh.write("# penalty " + " ".join(repr(float(v)) for v in model.penalty) + "\n")
        for i in np.flatnonzero(model.weights):
            fh.write(f"{i} {float(model.weights[i])!r}\n")


def load_model(path) -> LogRegModel:
    header: dict[str, str] = {}
    groups: dict[str, tuple[int, int]] = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# group "):
                _, _, name, a, b = line.split()
                groups[name] = (int(a), int(b))
            elif line.startswith("# "):
                key, _, val = line[2:].rstrip("\n").partition(" ")
                header[key] = val
            elif line.strip():
                i, v = line.split()
                rows.append((int(i), float(v)))
    p = int(header["dimension"])
    w = np.zeros(p)
    for i, v in rows:
        w[i] = v
    pen = header.get("penalty", "").split()
    return LogRegModel(
        weights=w,
        intercept=float(header["intercept"]),
        penalty=np.array([float(v) for v in pen]) if pen else np.zeros(p),
        converged=bool(int(header["converged"])),
        final_objective=float(header["objective"]),
        n_iter=int(header.get("n_iter", 0)),
        group_ranges=groups,
    )


def save_weight_table(table: WeightTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# dimension {table.dimension}\n")
        fh.write(f"intercept_exp {float(table.intercept_exp)!r}\n")
        for i in sorted(table.entries):
            fh.write(f"{i} {float(table.entries[i])!r}\n")


def load_weight_table(path) -> WeightTable:
    dim = 0
    c = None
    entries: dict[int, float] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.startswith("# dimension"):
                dim = int(line.split()[2])
            elif line.startswith("intercept_exp"):
                c = float(line.split()[1])
            elif line.strip() and not line.startswith("#"):
                i, v = line.split()
                i, v = int(i), float(v)
                if i < 0 or (dim and i >= dim):
                    raise ValueError(f"{path}:{n}: column {i} outside dimension {dim}")
                if not v > 0:
                    raise ValueError(f"{path}:{n}: exp-weight must be positive")
                entries[i] = v
    if c is None:
        raise ValueError(f"{path}: missing intercept_exp line")
    return WeightTable(entries, c, dim)

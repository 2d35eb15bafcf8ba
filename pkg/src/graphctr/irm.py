"""Infinite Relational Model co-clustering of a bipartite graph.

Blocked (uncollapsed) Gibbs sampling under a truncated stick-breaking
approximation. Given the block link probabilities ``eta`` and the stick
weights ``mu``, the cluster labels of all nodes in one mode are conditionally
independent, so a mode is resampled in parallel chunks. Every random draw is
keyed by ``(seed, sweep, step, node)`` and chunk boundaries are fixed, which
makes results independent of the worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import betaln, xlog1py, xlogy

from . import rng as crng
from .graph import BipartiteGraph

log = logging.getLogger(__name__)

USER, URL = "user", "url"
CHUNK = 2048

# stream ids for the counter-based RNG
_STEP_INIT = 0
_STEP_Z = {USER: 1, URL: 2}
_STEP_ETA = 3
_STEP_STICKS = {USER: 4, URL: 5}

_TINY = np.finfo(float).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class IrmHyperParams:
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta_pos: float = 1.0
    beta_neg: float = 1.0
    K1_max: int = 50
    K2_max: int = 50

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta_pos", "beta_neg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.K1_max < 2 or self.K2_max < 2:
            raise ValueError("truncation levels must be >= 2")


@dataclass
class IrmState:
    z1: np.ndarray
    z2: np.ndarray
    eta: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    v1: np.ndarray  # stick proportions, last one fixed at 1
    v2: np.ndarray
    hyper: IrmHyperParams
    seed: int
    iteration: int = 0

    def copy(self) -> "IrmState":
        return replace(
            self,
            **{k: getattr(self, k).copy() for k in ("z1", "z2", "eta", "mu1", "mu2", "v1", "v2")},
        )


@dataclass
class IrmResult:
    """Outcome of :func:`irm_run`.

    ``log_posterior_trace`` holds the joint log posterior after each sweep and
    ``marginal_trace`` the log posterior of the partition alone (``eta`` and
    the sticks integrated out). ``best_state`` maximizes the trace named by
    ``selected_by``.
    """

    best_state: IrmState
    k1_used: int
    k2_used: int
    log_posterior_trace: list[float]
    marginal_trace: list[float]
    best_sweep: int
    initial_log_posterior: float
    selected_by: str = "marginal"
    top_stick_mass: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def best_score(self) -> float:
        trace = self.marginal_trace if self.selected_by == "marginal" else self.log_posterior_trace
        return trace[self.best_sweep - 1]


def sticks_to_weights(v: np.ndarray) -> np.ndarray:
    """mu_k = v_k * prod_{j<k} (1 - v_j), with the remainder on the last stick."""
    mu = np.empty_like(v)
    rest = 1.0
    for k in range(v.size - 1):
        mu[k] = v[k] * rest
        rest -= mu[k]
    mu[-1] = max(rest, 0.0)
    return mu


def block_counts(
    g: BipartiteGraph, z1: np.ndarray, z2: np.ndarray, K1: int, K2: int
) -> tuple[np.ndarray, np.ndarray]:
    """Link counts ``Npos`` and pair counts ``Ntot`` per (user cluster, URL cluster)."""
    M, N = g.shape
    Z1 = sp.csr_matrix((np.ones(M), (np.arange(M), z1)), shape=(M, K1))
    Z2 = sp.csc_matrix((np.ones(N), (np.arange(N), z2)), shape=(N, K2))
    npos = np.rint((Z1.T @ g.csr @ Z2).toarray()).astype(np.int64)
    ntot = np.outer(np.bincount(z1, minlength=K1), np.bincount(z2, minlength=K2))
    return npos, ntot


def _categorical(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    thresh = u * cdf[:, -1]
    k = (cdf <= thresh[:, None]).sum(axis=1)
    return np.minimum(k, logp.shape[1] - 1)


def assignment_logits(
    X: sp.csr_matrix, z_other: np.ndarray, eta: np.ndarray, mu: np.ndarray
) -> np.ndarray:
    """Unnormalized log p(z_node = k) for every row of ``X``.

    ``eta`` is (clusters of this mode) x (clusters of the other mode). For a
    node with ``r_l`` links into other-mode cluster ``l`` of size ``n_l``::

        log mu_k + sum_l r_l log eta_kl + (n_l - r_l) log(1 - eta_kl)
    """
    K_other = eta.shape[1]
    n_other = X.shape[1]
    Z = sp.csc_matrix((np.ones(n_other), (np.arange(n_other), z_other)), shape=(n_other, K_other))
    r = (X @ Z).toarray()
    sizes = np.bincount(z_other, minlength=K_other).astype(float)
    log_eta = np.log(eta)
    log_1m = np.log1p(-eta)
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
    return log_mu + r @ (log_eta - log_1m).T + sizes @ log_1m.T


def sample_assignments(
    state: IrmState, g: BipartiteGraph, mode: str, workers: int = 1
) -> IrmState:
    """Redraw every label of one mode given ``eta``, ``mu`` and the other mode."""
    if mode == USER:
        X, z_other, eta, mu = g.csr, state.z2, state.eta, state.mu1
    elif mode == URL:
        X, z_other, eta, mu = g.csc.T.tocsr(), state.z1, state.eta.T, state.mu2
    else:
        raise ValueError(f"mode must be {USER!r} or {URL!r}")
    n = X.shape[0]
    bounds = [(s, min(n, s + CHUNK)) for s in range(0, n, CHUNK)]
    step = _STEP_Z[mode]

    def run(b):
        lo, hi = b
        logp = assignment_logits(X[lo:hi], z_other, eta, mu)
        best = logp.max(axis=1)
        bad = ~np.isfinite(best) | np.isnan(logp).any(axis=1)
        if bad.any():
            node = lo + int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite {mode} log-probability at node {node}")
        u = crng.uniforms(state.seed, state.iteration, step, np.arange(lo, hi))
        return _categorical(logp, u)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    z = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    out = state.copy()
    if mode == USER:
        out.z1 = z
    else:
        out.z2 = z
    return out


def sample_eta(state: IrmState, g: BipartiteGraph) -> IrmState:
    """Conjugate Beta update of every block link probability."""
    h = state.hyper
    npos, ntot = block_counts(g, state.z1, state.z2, h.K1_max, h.K2_max)
    r = crng.generator(state.seed, state.iteration, _STEP_ETA)
    out = state.copy()
    out.eta = np.clip(r.beta(h.beta_pos + npos, h.beta_neg + (ntot - npos)), _TINY, _ONE_MINUS)
    return out


def _draw_sticks(r: np.random.Generator, z: np.ndarray, K: int, alpha: float) -> np.ndarray:
    counts = np.bincount(z, minlength=K)
    tail = np.cumsum(counts[::-1])[::-1]  # tail[k] = sum_{k' >= k} n_k'
    v = np.ones(K)
    v[:-1] = r.beta(1.0 + counts[:-1], alpha + tail[1:])
    v[:-1] = np.clip(v[:-1], _TINY, _ONE_MINUS)
    return v


def sample_sticks(state: IrmState, mode: str) -> IrmState:
    """Redraw the truncated sticks of one mode from their Beta posteriors."""
    h = state.hyper
    r = crng.generator(state.seed, state.iteration, _STEP_STICKS[mode])
    out = state.copy()
    if mode == USER:
        out.v1 = _draw_sticks(r, state.z1, h.K1_max, h.alpha1)
        out.mu1 = sticks_to_weights(out.v1)
    elif mode == URL:
        out.v2 = _draw_sticks(r, state.z2, h.K2_max, h.alpha2)
        out.mu2 = sticks_to_weights(out.v2)
    else:
        raise ValueError(f"mode must be {USER!r} or {URL!r}")
    return out


def irm_init(g: BipartiteGraph, hyper: IrmHyperParams, seed: int) -> IrmState:
    """Initial state drawn from the generative model.

    Labels come from a symmetric Dirichlet(alpha / K) draw of cluster
    weights; sticks are then drawn given those labels, and ``eta`` from its
    Beta prior.
    """
    if g.n_users == 0 or g.n_urls == 0:
        raise ValueError("graph is empty")
    r = crng.generator(seed, 0, _STEP_INIT)
    K1, K2 = hyper.K1_max, hyper.K2_max
    w1 = r.dirichlet(np.full(K1, hyper.alpha1 / K1))
    w2 = r.dirichlet(np.full(K2, hyper.alpha2 / K2))
    z1 = r.choice(K1, size=g.n_users, p=w1 / w1.sum())
    z2 = r.choice(K2, size=g.n_urls, p=w2 / w2.sum())
    v1 = _draw_sticks(r, z1, K1, hyper.alpha1)
    v2 = _draw_sticks(r, z2, K2, hyper.alpha2)
    eta = np.clip(r.beta(hyper.beta_pos, hyper.beta_neg, size=(K1, K2)), _TINY, _ONE_MINUS)
    return IrmState(
        z1=z1.astype(np.int64),
        z2=z2.astype(np.int64),
        eta=eta,
        mu1=sticks_to_weights(v1),
        mu2=sticks_to_weights(v2),
        v1=v1,
        v2=v2,
        hyper=hyper,
        seed=seed,
    )


def log_likelihood(state: IrmState, g: BipartiteGraph) -> float:
    """Bernoulli log-likelihood of all M x N pairs, via block aggregates."""
    h = state.hyper
    npos, ntot = block_counts(g, state.z1, state.z2, h.K1_max, h.K2_max)
    return float(np.sum(xlogy(npos, state.eta) + xlog1py(ntot - npos, -state.eta)))


def log_prior_eta(state: IrmState) -> float:
    h = state.hyper
    e = state.eta
    return float(
        np.sum(xlogy(h.beta_pos - 1, e) + xlog1py(h.beta_neg - 1, -e))
        - e.size * betaln(h.beta_pos, h.beta_neg)
    )


def log_prior_sticks(v: np.ndarray, alpha: float) -> float:
    """sum_k log Beta(v_k; 1, alpha) over the free sticks."""
    free = v[:-1]
    return float(np.sum(xlog1py(alpha - 1, -free)) - free.size * betaln(1.0, alpha))


def log_prior_labels(z: np.ndarray, mu: np.ndarray) -> float:
    counts = np.bincount(z, minlength=mu.size)
    return float(np.sum(xlogy(counts, mu)))


def joint_log_posterior(state: IrmState, g: BipartiteGraph) -> float:
    """Unnormalized log posterior: sticks, labels, eta prior and likelihood."""
    h = state.hyper
    total = (
        log_prior_sticks(state.v1, h.alpha1)
        + log_prior_sticks(state.v2, h.alpha2)
        + log_prior_labels(state.z1, state.mu1)
        + log_prior_labels(state.z2, state.mu2)
        + log_prior_eta(state)
        + log_likelihood(state, g)
    )
    if not np.isfinite(total):
        raise NumericError(f"joint log posterior is {total}")
    return total


def log_marginal_labels(z: np.ndarray, K: int, alpha: float) -> float:
    """log p(z) with the truncated sticks integrated out.

    Each free stick contributes B(1 + n_k, alpha + n_{>k}) / B(1, alpha).
    """
    counts = np.bincount(z, minlength=K)
    tail = np.cumsum(counts[::-1])[::-1]
    return float(np.sum(betaln(1.0 + counts[:-1], alpha + tail[1:])) - (K - 1) * betaln(1.0, alpha))


def marginal_log_posterior(state: IrmState, g: BipartiteGraph) -> float:
    """Unnormalized log p(z1, z2 | X), integrating out ``eta`` and the sticks.

    Unlike :func:`joint_log_posterior` this charges each block for its free
    link probability, so it does not reward clusters fitted to one outlier.
    """
    h = state.hyper
    npos, ntot = block_counts(g, state.z1, state.z2, h.K1_max, h.K2_max)
    lik = np.sum(
        betaln(h.beta_pos + npos, h.beta_neg + (ntot - npos)) - betaln(h.beta_pos, h.beta_neg)
    )
    return float(
        lik
        + log_marginal_labels(state.z1, h.K1_max, h.alpha1)
        + log_marginal_labels(state.z2, h.K2_max, h.alpha2)
    )


def sweep(state: IrmState, g: BipartiteGraph, workers: int = 1) -> IrmState:
    """One blocked Gibbs sweep; advances ``state.iteration``."""
    s = state.copy()
    s.iteration += 1
    s = sample_assignments(s, g, USER, workers)
    s = sample_assignments(s, g, URL, workers)
    s = sample_eta(s, g)
    s = sample_sticks(s, USER)
    s = sample_sticks(s, URL)
    return s


def n_used(z: np.ndarray) -> int:
    return int(np.unique(z).size)


def irm_run(
    g: BipartiteGraph,
    hyper: IrmHyperParams,
    n_sweeps: int,
    seed: int,
    workers: int = 1,
    init: IrmState | None = None,
    select: str = "marginal",
    warm_eta: bool = True,
) -> IrmResult:
    """Run ``n_sweeps`` sweeps and keep the best-scoring state.

    ``select="marginal"`` (default) scores sweeps by
    :func:`marginal_log_posterior`; ``select="joint"`` by
    :func:`joint_log_posterior`. Both traces are always recorded.

    With ``warm_eta`` (default) ``eta`` of a freshly initialized state is
    redrawn from its posterior given the initial labels before the first
    sweep. On sparse graphs a prior draw of ``eta`` (mean 0.5 for Beta(1, 1))
    makes every node prefer the block row with the smallest ``eta`` and the
    first sweep collapses all nodes into one cluster.
    """
    if n_sweeps < 1:
        raise ValueError("n_sweeps must be >= 1")
    if select not in ("marginal", "joint"):
        raise ValueError(f"select must be 'marginal' or 'joint', got {select!r}")
    if init is not None:
        state = init.copy()
    else:
        state = irm_init(g, hyper, seed)
        if warm_eta:
            state = sample_eta(state, g)
    initial = joint_log_posterior(state, g)
    trace: list[float] = []
    mtrace: list[float] = []
    best, best_score, best_sweep = None, -np.inf, 0
    for i in range(1, n_sweeps + 1):
        try:
            state = sweep(state, g, workers)
            lp = joint_log_posterior(state, g)
        except NumericError as exc:
            raise NumericError(f"sweep {i}: {exc}") from exc
        mlp = marginal_log_posterior(state, g)
        trace.append(lp)
        mtrace.append(mlp)
        score = mlp if select == "marginal" else lp
        if score > best_score:
            best, best_score, best_sweep = state.copy(), score, i
        if i % 50 == 0:
            log.info("irm sweep %d: log posterior %.6g, clusters %d x %d",
                     i, lp, n_used(state.z1), n_used(state.z2))
    return IrmResult(
        best_state=best,
        k1_used=n_used(best.z1),
        k2_used=n_used(best.z2),
        log_posterior_trace=trace,
        marginal_trace=mtrace,
        best_sweep=best_sweep,
        initial_log_posterior=initial,
        selected_by=select,
        top_stick_mass=(float(best.mu1[-1]), float(best.mu2[-1])),
    )


def compact_labels(z: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Renumber non-empty clusters 0..k-1 in increasing label order."""
    used = np.unique(z)
    mapping = {int(c): i for i, c in enumerate(used)}
    return np.searchsorted(used, z), mapping


def save_irm(result: IrmResult, directory) -> None:
    """Write ``irm_users.txt``/``irm_urls.txt`` ("node_idx cluster_idx") and the trace."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    best = result.best_state
    lp = result.log_posterior_trace[result.best_sweep - 1]
    for name, z, k in (("irm_users.txt", best.z1, result.k1_used), ("irm_urls.txt", best.z2, result.k2_used)):
        with open(d / name, "w") as fh:
            fh.write(
                f"# k_used={k} best_log_posterior={float(lp)!r} best_score={float(result.best_score)!r}"
                f" selected_by={result.selected_by} best_sweep={result.best_sweep}\n"
            )
            fh.writelines(f"{i} {c}\n" for i, c in enumerate(z))
    with open(d / "irm_trace.txt", "w") as fh:
        fh.write("# joint_log_posterior marginal_log_posterior\n")
        fh.writelines(f"{float(a)!r} {float(b)!r}\n" for a, b in zip(result.log_posterior_trace, result.marginal_trace))


def load_irm_labels(directory) -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    out = []
    for name in ("irm_users.txt", "irm_urls.txt"):
        a = np.loadtxt(d / name, dtype=np.int64, comments="#", ndmin=2)
        z = np.empty(a.shape[0], dtype=np.int64)
        z[a[:, 0]] = a[:, 1]
        out.append(z)
    return out[0], out[1]

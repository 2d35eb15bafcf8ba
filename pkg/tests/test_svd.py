import numpy as np
import pytest
import scipy.sparse as sp

from graphctr.svd import ConvergenceWarning, DimensionError, load_svd, save_svd, truncated_svd
from conftest import random_graph


def dense_oracle(X: np.ndarray, K: int):
    # singular values from the eigenvalues of X^T X
    evals = np.linalg.eigvalsh(X.T @ X)[::-1]
    return np.sqrt(np.clip(evals[:K], 0.0, None))


def test_identity():
    f = truncated_svd(np.eye(4), 2)
    assert np.allclose(f.S, [1.0, 1.0], atol=1e-12)


def test_rank_one():
    r = np.random.default_rng(0)
    a = r.standard_normal(7)
    b = r.standard_normal(5)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    f = truncated_svd(3.0 * np.outer(a, b), 1)
    assert f.S[0] == pytest.approx(3.0, abs=1e-12)
    s = np.sign(f.U[:, 0] @ a)
    assert np.allclose(f.U[:, 0], s * a, atol=1e-10)
    assert np.allclose(f.V[:, 0], s * b, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_oracle(seed):
    g = random_graph(20, 15, 0.3, seed)
    f = truncated_svd(g, 5)
    assert np.max(np.abs(f.S - dense_oracle(g.toarray(), 5))) < 1e-8
    assert f.converged


def test_orthonormal_and_sorted():
    g = random_graph(60, 40, 0.1, 3)
    f = truncated_svd(g, 8)
    assert np.abs(f.U.T @ f.U - np.eye(8)).max() < 1e-8
    assert np.abs(f.V.T @ f.V - np.eye(8)).max() < 1e-8
    assert np.all(np.diff(f.S) <= 0) and f.S.min() >= 0


def test_sign_convention():
    f = truncated_svd(random_graph(30, 20, 0.2, 1), 4)
    idx = np.argmax(np.abs(f.U), axis=0)
    assert np.all(f.U[idx, np.arange(4)] > 0)


def test_eckart_young():
    g = random_graph(20, 15, 0.3, 11)
    X = g.toarray()
    K = 4
    f = truncated_svd(g, K)
    best = np.linalg.norm(X - f.reconstruct())
    r = np.random.default_rng(0)
    for _ in range(20):
        B = r.standard_normal((20, K)) @ r.standard_normal((K, 15))
        assert np.linalg.norm(X - B) >= best - 1e-9
        # also perturbations of the optimum
        P = (f.U + 1e-3 * r.standard_normal(f.U.shape)) * f.S @ f.V.T
        assert np.linalg.norm(X - P) >= best - 1e-9


def test_deterministic_given_seed():
    g = random_graph(50, 30, 0.2, 2)
    a, b = truncated_svd(g, 5, seed=3), truncated_svd(g, 5, seed=3)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.S, b.S)


def test_sparse_input_equivalent():
    X = random_graph(25, 18, 0.25, 4).toarray()
    a = truncated_svd(X, 3)
    b = truncated_svd(sp.csr_matrix(X), 3)
    assert np.allclose(a.S, b.S, atol=1e-12)


@pytest.mark.parametrize("K", [0, 16])
def test_bad_rank(K):
    with pytest.raises(DimensionError):
        truncated_svd(random_graph(20, 15, 0.3, 0), K)


def test_non_convergence_is_flagged():
    g = random_graph(200, 150, 0.05, 0)
    with pytest.warns(ConvergenceWarning):
        f = truncated_svd(g, 20, max_iter=1, tol=1e-15, min_power_iter=1, oversample=0)
    assert not f.converged and f.achieved_tol >= 1e-15


def test_roundtrip(tmp_path):
    f = truncated_svd(random_graph(30, 20, 0.2, 5), 3)
    save_svd(f, tmp_path)
    h = load_svd(tmp_path)
    assert np.array_equal(h.U, f.U) and np.array_equal(h.V, f.V) and np.array_equal(h.S, f.S)
    assert h.converged == f.converged

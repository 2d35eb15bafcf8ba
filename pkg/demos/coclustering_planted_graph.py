"""
Co-clustering a planted bipartite graph
=======================================

Two user groups and two URL groups, linked densely inside matching groups
and sparsely across. The sampler should find the blocks without being told
how many there are; SVD and NMF give continuous loadings for comparison.
"""

import numpy as np

from graphctr.graph import BipartiteGraph
from graphctr.irm import IrmHyperParams, irm_run
from graphctr.nmf import nmf_factorize
from graphctr.svd import truncated_svd

rng = np.random.default_rng(0)
zu = np.r_[np.zeros(60, int), np.ones(40, int)]
zv = np.r_[np.zeros(50, int), np.ones(50, int)]
P = np.where(zu[:, None] == zv[None, :], 0.9, 0.1)
rows, cols = np.nonzero(rng.random(P.shape) < P)
g = BipartiteGraph.from_edges(rows, cols, [f"u{i}" for i in range(100)], [f"v{j}" for j in range(100)])
print(f"{g.n_users} users, {g.n_urls} urls, {g.n_edges} edges")

# up to 10 clusters per side; the prior is free to leave most of them empty
res = irm_run(g, IrmHyperParams(K1_max=10, K2_max=10), n_sweeps=200, seed=0)
print(f"clusters used: {res.k1_used} x {res.k2_used} (best sweep {res.best_sweep})")

# a contingency table against the truth, labels are arbitrary
z1 = res.best_state.z1
for k in np.unique(z1):
    print(f"  user cluster {k}: {np.bincount(zu[z1 == k], minlength=2)}")

# block link probabilities for the occupied blocks
used1, used2 = np.unique(z1), np.unique(res.best_state.z2)
print(np.round(res.best_state.eta[np.ix_(used1, used2)], 3))

# the leading singular vector separates the groups by sign
f = truncated_svd(g, 2)
print("svd singular values:", np.round(f.S, 2))
print("second left vector sign agrees with groups:",
      np.mean((f.U[:, 1] > 0) == (zu == zu[np.argmax(f.U[:, 1])])))

# NMF: each user's dominant component
nm = nmf_factorize(g, 2, seed=0)
print("nmf objective", round(nm.objective_trace[0], 1), "->", round(nm.objective_trace[-1], 1))
dominant = nm.W.argmax(axis=1)
print("dominant component per true group:", [np.bincount(dominant[zu == k], minlength=2) for k in (0, 1)])

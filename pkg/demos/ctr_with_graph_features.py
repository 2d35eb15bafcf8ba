"""
Click prediction with graph features
====================================

A synthetic browsing log where click rates depend on which user and URL
cluster meet. We hold out the last day, co-cluster the training graph, and
compare logistic models with and without cluster indicators.
"""

import numpy as np

from graphctr import eval as ev
from graphctr import features as ft
from graphctr import ingest, irm
from graphctr.cli import DEFAULT_CTR
from graphctr.graph import build_bipartite

txns, planted = ingest.generate_synthetic(
    n_users=3000, n_urls=600, k_user=4, k_url=4, density_in=0.05, density_out=0.005,
    ctr_by_block=DEFAULT_CTR, n_impressions=60_000, seed=1)
train, test = ingest.split_by_day(txns, ingest.last_day(txns))
print(f"{len(train)} training and {len(test)} test events")

g = build_bipartite(train)
res = irm.irm_run(g, irm.IrmHyperParams(K1_max=15, K2_max=15), n_sweeps=100, seed=1)
print(f"graph {g.shape}, {g.n_edges} edges; clusters {res.k1_used} x {res.k2_used}")

train_obs = ingest.label_impressions(train)
test_obs = ingest.label_impressions(test)
hist = ft.user_histories(train)
vocab = ft.build_vocab(train_obs, ft.Artifacts(graph=g, irm=res), ft.FeatureSpec(("f1", "f2", "f3", "f4")), hist)
print("columns per group:", {k: b - a for k, (a, b) in vocab.group_ranges.items()})

dtr = ft.encode(train_obs, hist, vocab)
dte = ft.encode(test_obs, hist, vocab)

# small grids keep this quick; the library defaults are finer
grids = ev.LambdaGrids(f1=[0.25, 1, 4, 16], f2=[2, 8, 32], rest=[0.01, 0.1, 1.0])
out = ev.tune_lambda(ev.FeatureBlocks(dtr, dte.X), ev.Scorer(dte.labels),
                     {"IRM": [("f3",), ("f4",), ("f3", "f4")]}, grids)

print(f"\ntest CTR {out.baseline_ctr:.4f}")
print(ev.TSV_HEADER)
for r in out.reports:
    print(r.tsv_row())

"""
Serving from a weight table
===========================

With binary features a prediction is the product of the stored exp-weights of
the active columns. This script trains a small f1 + cluster model, builds a
serving bundle, checks it against the offline model and times requests.
"""

import itertools
import socket
import threading

import numpy as np

from graphctr import features as ft
from graphctr import ingest, irm
from graphctr.bidserver import BidServer, handle_request, make_bundle
from graphctr.cli import DEFAULT_CTR
from graphctr.graph import build_bipartite
from graphctr.logreg import predict_proba, train_owlqn

txns, _ = ingest.generate_synthetic(2000, 400, 4, 4, 0.05, 0.005, DEFAULT_CTR, 30_000, seed=2)
train, test = ingest.split_by_day(txns, ingest.last_day(txns))
g = build_bipartite(train)
res = irm.irm_run(g, irm.IrmHyperParams(K1_max=10, K2_max=10), n_sweeps=50, seed=2)

obs = ingest.label_impressions(train)
vocab = ft.build_vocab(obs, ft.Artifacts(graph=g, irm=res), ft.FeatureSpec(("f1", "f3", "f4")))
model = train_owlqn(ft.encode(obs, None, vocab), ft.per_feature_lambda(vocab, 2.0, 0.0, 0.05))
print(f"{model.nnz_total} non-zero weights of {model.dimension}")

bundle = make_bundle(model, vocab)
requests = ingest.label_impressions(test)

# offline and online agree on every test request
offline = predict_proba(model, ft.encode(requests, None, vocab).X)
online = np.array([handle_request(bundle, o.user_id, o.banner_id, o.url, 1e9).probability for o in requests])
print("max difference vs offline:", np.max(np.abs(offline - online)))

answers = [handle_request(bundle, o.user_id, o.banner_id, o.url, 100_000)
           for o in itertools.islice(itertools.cycle(requests), 10_000)]
lat = np.array([a.elapsed_us for a in answers])
print("active features per request:", np.bincount([a.active_feature_count for a in answers]))
print(f"latency p50 {np.percentile(lat, 50):.1f}us  p99 {np.percentile(lat, 99):.1f}us")

# the same over TCP, one line per request
with BidServer(("127.0.0.1", 0), bundle) as server:
    threading.Thread(target=server.serve_forever, daemon=True).start()
    with socket.create_connection(server.server_address[:2]) as s:
        f = s.makefile("rw")
        o = requests[0]
        f.write(f"{o.user_id}\t{o.banner_id}\t{o.url}\t100000\n")
        f.flush()
        print("server replied:", f.readline().strip())
    server.shutdown()

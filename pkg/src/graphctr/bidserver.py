"""Low-latency CTR serving from an exported weight table and cluster maps.

A bundle directory holds

    weights.txt        weight table ("# dimension D", "intercept_exp c", "col exp_w")
    user_clusters.tsv  user_id <TAB> column        (f3)
    url_clusters.tsv   url <TAB> column            (f4)
    f1_vocab.tsv       banner_id <TAB> url <TAB> column
    f2_vocab.tsv       url <TAB> column
    user_history.tsv   user_id <TAB> col,col,...   (f2 columns of the user's history)

Requests travel over TCP as newline-delimited lines
``user_id \\t banner_id \\t url \\t deadline_us`` and are answered with
``probability \\t active \\t elapsed_us \\t met``.
"""

from __future__ import annotations

import bisect
import logging
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

from .features import Vocabularies
from .logreg import LogRegModel, WeightTable, export_weight_table, fast_predict, load_weight_table, save_weight_table

log = logging.getLogger(__name__)

WEIGHTS = "weights.txt"
USER_CLUSTERS = "user_clusters.tsv"
URL_CLUSTERS = "url_clusters.tsv"
F1_VOCAB = "f1_vocab.tsv"
F2_VOCAB = "f2_vocab.tsv"
USER_HISTORY = "user_history.tsv"
BUNDLE_FILES = (WEIGHTS, USER_CLUSTERS, URL_CLUSTERS, F1_VOCAB, F2_VOCAB, USER_HISTORY)

# histogram bucket upper bounds in microseconds; the last bucket is open
BUCKETS_US = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000, 100000, float("inf"))


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class ServingBundle:
    weight_table: WeightTable
    user_cluster: Mapping[str, int]
    url_cluster: Mapping[str, int]
    f1_vocab: Mapping[tuple[str, str], int]
    f2_vocab: Mapping[str, int]
    user_history: Mapping[str, tuple[int, ...]]
    load_seconds: float = 0.0

    def columns(self, user_id: str, banner_id: str, url: str) -> list[int]:
        """Active binary columns for a request, unknown keys skipped."""
        cols = []
        c = self.f1_vocab.get((banner_id, url))
        if c is not None:
            cols.append(c)
        h = self.user_history.get(user_id)
        if h:
            cols.extend(h)
        c = self.user_cluster.get(user_id)
        if c is not None:
            cols.append(c)
        c = self.url_cluster.get(url)
        if c is not None:
            cols.append(c)
        return cols


@dataclass(frozen=True)
class Response:
    probability: float
    active_feature_count: int
    elapsed_us: float
    deadline_met: bool

    def line(self) -> str:
        return f"{float(self.probability)!r}\t{self.active_feature_count}\t{self.elapsed_us:.3f}\t{int(self.deadline_met)}"


def handle_request(bundle: ServingBundle, user_id: str, banner_id: str, url: str,
                   deadline_us: float) -> Response:
    """Resolve features, apply the product-form predictor and time both.

    The active count includes the intercept.
    """
    t0 = time.perf_counter_ns()
    cols = bundle.columns(user_id, banner_id, url)
    p = fast_predict(bundle.weight_table, cols)
    elapsed = (time.perf_counter_ns() - t0) / 1000.0
    return Response(p, len(cols) + 1, elapsed, elapsed <= deadline_us)


def make_bundle(model: LogRegModel, vocab: Vocabularies,
                histories: Mapping[str, Sequence[str]] | None = None) -> ServingBundle:
    """Build a bundle in memory from a trained model and its feature layout.

    Only binary groups (f1..f4) are servable this way.
    """
    dense = [n for n in vocab.groups if n not in ("f1", "f2", "f3", "f4")]
    if dense:
        raise BundleError(f"groups {dense} are not binary and cannot be served from a weight table")
    if vocab.intercept_col is not None:
        raise BundleError("explicit intercept column is not servable; use the model intercept")
    ranges = vocab.group_ranges

    def shifted(name):
        if name not in vocab.groups:
            return {}
        start = ranges[name][0]
        return {k: start + c for k, c in vocab.groups[name].keys.items()}

    f2 = shifted("f2")
    user_history = {}
    if f2 and histories:
        for u, urls in histories.items():
            cols = tuple(sorted({f2[x] for x in urls if x in f2}))
            if cols:
                user_history[u] = cols
    return ServingBundle(
        weight_table=export_weight_table(model),
        user_cluster=MappingProxyType(shifted("f3")),
        url_cluster=MappingProxyType(shifted("f4")),
        f1_vocab=MappingProxyType(shifted("f1")),
        f2_vocab=MappingProxyType(f2),
        user_history=MappingProxyType(user_history),
    )


def _check_field(value: str, path: Path) -> str:
    if not value or "\t" in value or "\n" in value:
        raise BundleError(f"{path}: key {value!r} cannot be written as a TSV field")
    return value


def save_bundle(bundle: ServingBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weight_table(bundle.weight_table, d / WEIGHTS)
    with open(d / USER_CLUSTERS, "w") as fh:
        for k, c in bundle.user_cluster.items():
            fh.write(f"{_check_field(k, d / USER_CLUSTERS)}\t{c}\n")
    with open(d / URL_CLUSTERS, "w") as fh:
        for k, c in bundle.url_cluster.items():
            fh.write(f"{_check_field(k, d / URL_CLUSTERS)}\t{c}\n")
    with open(d / F1_VOCAB, "w") as fh:
        for (b, u), c in bundle.f1_vocab.items():
            fh.write(f"{_check_field(b, d / F1_VOCAB)}\t{_check_field(u, d / F1_VOCAB)}\t{c}\n")
    with open(d / F2_VOCAB, "w") as fh:
        for k, c in bundle.f2_vocab.items():
            fh.write(f"{_check_field(k, d / F2_VOCAB)}\t{c}\n")
    with open(d / USER_HISTORY, "w") as fh:
        for k, cols in bundle.user_history.items():
            fh.write(f"{_check_field(k, d / USER_HISTORY)}\t{','.join(map(str, cols))}\n")
    return d


def export_bundle(model: LogRegModel, vocab: Vocabularies, histories, directory) -> Path:
    return save_bundle(make_bundle(model, vocab, histories), directory)


def _read_tsv(path: Path, n_fields: int):
    try:
        fh = open(path)
    except OSError as e:
        raise BundleError(f"{path}: cannot open ({e.strerror})") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise BundleError(f"{path}:{n}: expected {n_fields} fields, got {len(parts)}")
            yield n, parts


def _column(text: str, dim: int, path: Path, n: int) -> int:
    try:
        c = int(text)
    except ValueError:
        raise BundleError(f"{path}:{n}: bad column {text!r}") from None
    if c < 0 or c >= dim:
        raise BundleError(f"{path}:{n}: column {c} outside model dimension {dim}")
    return c


def load_bundle(directory) -> ServingBundle:
    """Read every bundle file into immutable in-memory maps."""
    t0 = time.perf_counter()
    d = Path(directory)
    wpath = d / WEIGHTS
    if not wpath.is_file():
        raise BundleError(f"{wpath}: missing")
    try:
        table = load_weight_table(wpath)
    except (ValueError, IndexError) as e:
        raise BundleError(str(e) if str(wpath) in str(e) else f"{wpath}: {e}") from None
    dim = table.dimension
    if dim <= 0 and table.entries:
        raise BundleError(f"{wpath}: dimension header missing")

    def keyed(name):
        p = d / name
        return {k: _column(c, dim, p, n) for n, (k, c) in _read_tsv(p, 2)}

    user_cluster = keyed(USER_CLUSTERS)
    url_cluster = keyed(URL_CLUSTERS)
    f2 = keyed(F2_VOCAB)
    f1 = {}
    p = d / F1_VOCAB
    for n, (b, u, c) in _read_tsv(p, 3):
        f1[(b, u)] = _column(c, dim, p, n)
    hist = {}
    p = d / USER_HISTORY
    for n, (k, cols) in _read_tsv(p, 2):
        hist[k] = tuple(_column(c, dim, p, n) for c in cols.split(",") if c)
    bundle = ServingBundle(
        weight_table=table,
        user_cluster=MappingProxyType(user_cluster),
        url_cluster=MappingProxyType(url_cluster),
        f1_vocab=MappingProxyType(f1),
        f2_vocab=MappingProxyType(f2),
        user_history=MappingProxyType(hist),
        load_seconds=time.perf_counter() - t0,
    )
    log.info("bundle %s loaded in %.3fs", d, bundle.load_seconds)
    return bundle


class LatencyHistogram:
    def __init__(self, bounds: Sequence[float] = BUCKETS_US):
        self.bounds = tuple(bounds)
        self.counts = [0] * len(self.bounds)
        self._lock = threading.Lock()

    def record(self, elapsed_us: float) -> None:
        i = bisect.bisect_left(self.bounds, elapsed_us)
        with self._lock:
            self.counts[i] += 1

    @property
    def total(self) -> int:
        return sum(self.counts)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("bucket_upper_us\tcount\n")
            for b, c in zip(self.bounds, self.counts):
                fh.write(f"{'inf' if b == float('inf') else int(b)}\t{c}\n")


class BidServer(socketserver.ThreadingTCPServer):
    """Threaded line-protocol server. ``swap`` replaces the bundle atomically.

    Handlers read ``self.bundle`` once per request, so an in-flight request
    finishes against the bundle it started with.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], bundle: ServingBundle,
                 default_deadline_us: float = 100_000.0):
        self.bundle = bundle
        self.default_deadline_us = default_deadline_us
        self.histogram = LatencyHistogram()
        super().__init__(address, _Handler)

    def swap(self, bundle: ServingBundle) -> None:
        self.bundle = bundle

    def answer(self, line: str) -> str:
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) not in (3, 4):
            return "ERR expected user_id, banner_id, url[, deadline_us]"
        try:
            deadline = float(parts[3]) if len(parts) == 4 else self.default_deadline_us
        except ValueError:
            return f"ERR bad deadline {parts[3]!r}"
        resp = handle_request(self.bundle, parts[0], parts[1], parts[2], deadline)
        self.histogram.record(resp.elapsed_us)
        return resp.line()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", "replace")
            if not line.strip():
                continue
            self.wfile.write((self.server.answer(line) + "\n").encode())
            self.wfile.flush()


def serve(bundle: ServingBundle, host: str = "127.0.0.1", port: int = 0,
          histogram_path=None, ready=None) -> None:
    """Serve until interrupted, then dump the latency histogram."""
    with BidServer((host, port), bundle) as server:
        h, p = server.server_address[:2]
        log.info("serving on %s:%d", h, p)
        if ready is not None:
            ready(server)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("interrupted; shutting down")
        finally:
            if histogram_path is not None:
                server.histogram.dump(histogram_path)

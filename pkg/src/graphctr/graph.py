"""Binary user x URL bipartite graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Transaction


class EmptyGraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Unweighted user x URL incidence held in CSR (per user) and CSC (per URL).

    ``user_ids[i]`` is the original id of row ``i``; ``user_index`` is the
    inverse map. Same for URLs and columns. ``user_origin``/``url_origin``
    record row/column positions in the graph this one was filtered from.
    """

    csr: sp.csr_matrix
    csc: sp.csc_matrix
    user_ids: tuple[str, ...]
    url_ids: tuple[str, ...]
    user_index: dict[str, int] = field(repr=False)
    url_index: dict[str, int] = field(repr=False)
    user_origin: np.ndarray | None = field(default=None, repr=False)
    url_origin: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_edges(
        cls,
        rows: np.ndarray,
        cols: np.ndarray,
        user_ids: Sequence[str],
        url_ids: Sequence[str],
        **origin,
    ) -> "BipartiteGraph":
        m, n = len(user_ids), len(url_ids)
        coo = sp.coo_matrix(
            (np.ones(len(rows)), (np.asarray(rows), np.asarray(cols))), shape=(m, n)
        )
        csr = coo.tocsr()
        csr.sum_duplicates()
        csr.data[:] = 1.0
        csr.sort_indices()
        csc = csr.tocsc()
        csc.sort_indices()
        return cls(
            csr=csr,
            csc=csc,
            user_ids=tuple(user_ids),
            url_ids=tuple(url_ids),
            user_index={u: i for i, u in enumerate(user_ids)},
            url_index={u: j for j, u in enumerate(url_ids)},
            **origin,
        )

    @property
    def n_users(self) -> int:
        return self.csr.shape[0]

    @property
    def n_urls(self) -> int:
        return self.csr.shape[1]

    @property
    def n_edges(self) -> int:
        return self.csr.nnz

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    def user_degree(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def url_degree(self) -> np.ndarray:
        return np.diff(self.csc.indptr)

    def urls_of(self, row: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[row] : self.csr.indptr[row + 1]]

    def users_of(self, col: int) -> np.ndarray:
        return self.csc.indices[self.csc.indptr[col] : self.csc.indptr[col + 1]]

    def edge_set(self) -> set[tuple[str, str]]:
        """Edges as (user_id, url) pairs, for comparisons across indexings."""
        coo = self.csr.tocoo()
        return {(self.user_ids[i], self.url_ids[j]) for i, j in zip(coo.row, coo.col)}

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


def build_bipartite(train: Iterable[Transaction]) -> BipartiteGraph:
    """Edge (user, url) iff the user has at least one view of the url.

    Row and column indices follow first appearance in ``train``.
    """
    users: dict[str, int] = {}
    urls: dict[str, int] = {}
    rows, cols = [], []
    n_txn = 0
    for t in train:
        n_txn += 1
        if t.event != "view":
            continue
        rows.append(users.setdefault(t.user_id, len(users)))
        cols.append(urls.setdefault(t.url, len(urls)))
    if not rows:
        raise EmptyGraphError(f"no view transactions among {n_txn} transactions")
    return BipartiteGraph.from_edges(
        np.array(rows), np.array(cols), list(users), list(urls)
    )


def filter_graph(
    g: BipartiteGraph, top_users: int, min_unique_users_per_url: int
) -> BipartiteGraph:
    """Keep the ``top_users`` users with most URLs, then URLs with enough of them.

    Degree ties at the cutoff go to the user seen first. Index order within
    the kept sets is preserved.
    """
    if top_users < 1 or min_unique_users_per_url < 1:
        raise ValueError("top_users and min_unique_users_per_url must be >= 1")
    deg = g.user_degree()
    ranked = np.argsort(-deg, kind="stable")
    keep_users = np.sort(ranked[:top_users])

    sub = g.csr[keep_users]
    url_counts = np.diff(sub.tocsc().indptr)
    keep_urls = np.flatnonzero(url_counts >= min_unique_users_per_url)
    if keep_urls.size == 0:
        raise EmptyGraphError("no URL reaches the unique-user threshold")
    sub = sub[:, keep_urls].tocoo()
    return BipartiteGraph.from_edges(
        sub.row,
        sub.col,
        [g.user_ids[i] for i in keep_users],
        [g.url_ids[j] for j in keep_urls],
        user_origin=keep_users,
        url_origin=keep_urls,
    )


def restrict_transactions(
    transactions: Iterable[Transaction], g: BipartiteGraph
) -> list[Transaction]:
    """Transactions whose user and URL both survive in ``g``."""
    return [t for t in transactions if t.user_id in g.user_index and t.url in g.url_index]


def save_graph(g: BipartiteGraph, directory) -> None:
    """Write ``graph.txt`` ("M N E" then "user_idx url_idx") plus id lists."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    coo = g.csr.tocoo()
    with open(d / "graph.txt", "w") as fh:
        fh.write(f"{g.n_users} {g.n_urls} {g.n_edges}\n")
        for i, j in zip(coo.row, coo.col):
            fh.write(f"{i} {j}\n")
    (d / "users.txt").write_text("".join(f"{u}\n" for u in g.user_ids))
    (d / "urls.txt").write_text("".join(f"{u}\n" for u in g.url_ids))


def load_graph(directory) -> BipartiteGraph:
    d = Path(directory)
    with open(d / "graph.txt") as fh:
        m, n, e = (int(x) for x in fh.readline().split())
        edges = np.loadtxt(fh, dtype=np.int64, ndmin=2).reshape(-1, 2)
    if edges.shape[0] != e:
        raise ValueError(f"{d / 'graph.txt'}: header says {e} edges, found {edges.shape[0]}")
    users = (d / "users.txt").read_text().splitlines()
    urls = (d / "urls.txt").read_text().splitlines()
    if len(users) != m or len(urls) != n:
        raise ValueError(f"{d}: id lists do not match header shape {m}x{n}")
    return BipartiteGraph.from_edges(edges[:, 0], edges[:, 1], users, urls)

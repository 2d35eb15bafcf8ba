"""Sparse design matrices from the predictor families f1..f8.

======  ==================  ===========================================
group   source              columns
======  ==================  ===========================================
f1      cross_banner_url    one-of-K over (banner_id, url) seen in train
f2      urls_visited        ones at the user's training-window URLs
f3      irm_user_cluster    one-of-K over non-empty IRM user clusters
f4      irm_url_cluster     one-of-K over non-empty IRM URL clusters
f5      svd_user            the user's row of U (dense, K wide)
f6      svd_url             the URL's row of V (dense, K wide)
f7      nmf_user            the user's row of W (non-zeros only)
f8      nmf_url             the URL's column of H (non-zeros only)
======  ==================  ===========================================

Entities unknown to a group's source contribute nothing to that group.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import BipartiteGraph
from .ingest import LabeledObservation, Transaction
from .irm import IrmResult, compact_labels
from .nmf import NmfFactors
from .svd import SvdFactors

SOURCES = {
    "f1": "cross_banner_url",
    "f2": "urls_visited",
    "f3": "irm_user_cluster",
    "f4": "irm_url_cluster",
    "f5": "svd_user",
    "f6": "svd_url",
    "f7": "nmf_user",
    "f8": "nmf_url",
}
INTERCEPT = "intercept"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    groups: tuple[str, ...]
    include_intercept: bool = False

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(set(self.groups)) != len(self.groups):
            raise ConfigurationError(f"duplicate groups in {self.groups}")
        unknown = [g for g in self.groups if g not in SOURCES]
        if unknown:
            raise ConfigurationError(f"unknown feature groups {unknown}")

    @classmethod
    def parse(cls, text: str, include_intercept: bool = False) -> "FeatureSpec":
        return cls(tuple(s.strip() for s in text.split(",") if s.strip()), include_intercept)

    @property
    def label(self) -> str:
        return ", ".join(self.groups)


@dataclass
class Artifacts:
    """Outputs of the reduction stage, indexed through the graph they were fit on."""

    graph: BipartiteGraph | None = None
    irm: IrmResult | tuple[np.ndarray, np.ndarray] | None = None
    svd: SvdFactors | None = None
    nmf: NmfFactors | None = None

    def irm_labels(self) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(self.irm, IrmResult):
            return self.irm.best_state.z1, self.irm.best_state.z2
        return self.irm


def user_histories(train: Iterable[Transaction]) -> dict[str, list[str]]:
    """Distinct viewed URLs per user, in first-seen order, from the training window."""
    hist: dict[str, dict[str, None]] = {}
    for t in train:
        if t.event == "view":
            hist.setdefault(t.user_id, {})[t.url] = None
    return {u: list(urls) for u, urls in hist.items()}


@dataclass
class GroupVocab:
    """Column layout of one group.

    ``keys`` maps an entity key to a local index. For cluster groups the
    local index is the compact cluster column; for loading groups it is the
    row of ``loadings`` holding that entity's values.
    """

    name: str
    kind: str  # "onehot" | "multihot" | "dense"
    width: int
    keys: dict = field(default_factory=dict)
    loadings: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Vocabularies:
    spec: FeatureSpec
    groups: "OrderedDict[str, GroupVocab]"
    group_ranges: dict[str, tuple[int, int]]
    n_cols: int

    def sizes(self) -> dict[str, int]:
        return {name: len(g.keys) for name, g in self.groups.items()}

    @property
    def intercept_col(self) -> int | None:
        return self.group_ranges[INTERCEPT][0] if INTERCEPT in self.group_ranges else None


def _require(artifact, name: str, group: str):
    if artifact is None:
        raise ConfigurationError(f"group {group} needs the {name} artifact")
    return artifact


def build_vocab(
    train_obs: Sequence[LabeledObservation],
    artifacts: Artifacts | None,
    spec: FeatureSpec,
    histories: Mapping[str, Sequence[str]] | None = None,
) -> Vocabularies:
    """Fix every group's columns from training data and reduction outputs only."""
    artifacts = artifacts or Artifacts()
    groups: OrderedDict[str, GroupVocab] = OrderedDict()
    for name in spec.groups:
        if name == "f1":
            keys: dict = {}
            for o in train_obs:
                keys.setdefault((o.banner_id, o.url), len(keys))
            groups[name] = GroupVocab(name, "onehot", len(keys), keys)
        elif name == "f2":
            keys = {}
            if histories is None:
                for o in train_obs:
                    keys.setdefault(o.url, len(keys))
            else:
                for urls in histories.values():
                    for u in urls:
                        keys.setdefault(u, len(keys))
            groups[name] = GroupVocab(name, "multihot", len(keys), keys)
        elif name in ("f3", "f4"):
            g = _require(artifacts.graph, "graph", name)
            labels = _require(artifacts.irm, "irm", name) and artifacts.irm_labels()
            z = labels[0] if name == "f3" else labels[1]
            ids = g.user_ids if name == "f3" else g.url_ids
            compact, _ = compact_labels(np.asarray(z))
            width = int(compact.max()) + 1 if compact.size else 0
            groups[name] = GroupVocab(name, "onehot", width, dict(zip(ids, compact.tolist())))
        else:
            g = _require(artifacts.graph, "graph", name)
            if name in ("f5", "f6"):
                f = _require(artifacts.svd, "svd", name)
                L = f.U if name == "f5" else f.V
            else:
                f = _require(artifacts.nmf, "nmf", name)
                L = f.user_loadings() if name == "f7" else f.url_loadings()
            ids = g.user_ids if name in ("f5", "f7") else g.url_ids
            groups[name] = GroupVocab(
                name, "dense", L.shape[1], {k: i for i, k in enumerate(ids)}, np.asarray(L)
            )

    ranges: dict[str, tuple[int, int]] = {}
    col = 0
    for name, gv in groups.items():
        ranges[name] = (col, col + gv.width)
        col += gv.width
    if spec.include_intercept:
        ranges[INTERCEPT] = (col, col + 1)
        col += 1
    return Vocabularies(spec, groups, ranges, col)


def encode_row(
    obs: LabeledObservation,
    user_history: Iterable[str] | None,
    vocab: Vocabularies,
) -> tuple[np.ndarray, np.ndarray]:
    """Column indices (ascending) and values of one observation's feature row."""
    idx: list[int] = []
    val: list[float] = []
    for name, gv in vocab.groups.items():
        start = vocab.group_ranges[name][0]
        if name == "f1":
            c = gv.keys.get((obs.banner_id, obs.url))
            if c is not None:
                idx.append(start + c)
                val.append(1.0)
        elif name == "f2":
            cols = sorted({gv.keys[u] for u in (user_history or ()) if u in gv.keys})
            idx.extend(start + c for c in cols)
            val.extend([1.0] * len(cols))
        else:
            key = obs.user_id if name in ("f3", "f5", "f7") else obs.url
            c = gv.keys.get(key)
            if c is None:
                continue
            if gv.kind == "onehot":
                idx.append(start + c)
                val.append(1.0)
            else:
                row = gv.loadings[c]
                nz = np.flatnonzero(row)
                idx.extend((start + nz).tolist())
                val.extend(row[nz].tolist())
    if vocab.intercept_col is not None:
        idx.append(vocab.intercept_col)
        val.append(1.0)
    return np.asarray(idx, dtype=np.int64), np.asarray(val, dtype=float)


@dataclass
class DesignMatrix:
    X: sp.csr_matrix
    labels: np.ndarray
    group_ranges: dict[str, tuple[int, int]]
    vocab: Vocabularies | None = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    def unlabeled(self) -> sp.csr_matrix:
        return self.X


def encode(
    observations: Sequence[LabeledObservation],
    histories: Mapping[str, Sequence[str]] | None,
    vocab: Vocabularies,
) -> DesignMatrix:
    """Stack :func:`encode_row` over ``observations``. Vocabularies stay untouched."""
    indptr = [0]
    indices, data = [], []
    histories = histories or {}
    for o in observations:
        i, v = encode_row(o, histories.get(o.user_id), vocab)
        indices.append(i)
        data.append(v)
        indptr.append(indptr[-1] + i.size)
    X = sp.csr_matrix(
        (
            np.concatenate(data) if data else np.zeros(0),
            np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
            np.asarray(indptr),
        ),
        shape=(len(observations), vocab.n_cols),
    )
    y = np.fromiter((o.label for o in observations), dtype=float, count=len(observations))
    return DesignMatrix(X, y, dict(vocab.group_ranges), vocab)


def per_feature_lambda(
    group_ranges: Mapping[str, tuple[int, int]] | Vocabularies | DesignMatrix,
    lambda_f1: float,
    lambda_f2: float,
    lambda_rest: float,
) -> np.ndarray:
    """Per-column L1 strengths: f1, f2, and one shared value for f3..f8.

    The intercept column, if any, gets exactly 0.
    """
    if isinstance(group_ranges, (Vocabularies, DesignMatrix)):
        group_ranges = group_ranges.group_ranges
    for name, lam in (("lambda_f1", lambda_f1), ("lambda_f2", lambda_f2), ("lambda_rest", lambda_rest)):
        if lam < 0:
            raise ValueError(f"{name} must be >= 0, got {lam}")
    n = max((stop for _, stop in group_ranges.values()), default=0)
    lam = np.zeros(n)
    for name, (a, b) in group_ranges.items():
        if name == "f1":
            lam[a:b] = lambda_f1
        elif name == "f2":
            lam[a:b] = lambda_f2
        elif name != INTERCEPT:
            lam[a:b] = lambda_rest
    return lam


def save_design(dm: DesignMatrix, path) -> None:
    """Write "label idx:val idx:val ..." lines."""
    X = dm.X
    with open(path, "w") as fh:
        for r in range(X.shape[0]):
            a, b = X.indptr[r], X.indptr[r + 1]
            cells = " ".join(f"{i}:{float(v)!r}" for i, v in zip(X.indices[a:b], X.data[a:b]))
            fh.write(f"{int(dm.labels[r])} {cells}".rstrip() + "\n")


def load_design(path, group_ranges: Mapping[str, tuple[int, int]]) -> DesignMatrix:
    n_cols = max((stop for _, stop in group_ranges.values()), default=0)
    indptr, indices, data, labels = [0], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(float(parts[0]))
            for cell in parts[1:]:
                i, v = cell.split(":")
                indices.append(int(i))
                data.append(float(v))
            indptr.append(len(indices))
    X = sp.csr_matrix((np.array(data), np.array(indices, dtype=np.int64), np.array(indptr)),
                      shape=(len(labels), n_cols))
    return DesignMatrix(X, np.array(labels), dict(group_ranges))

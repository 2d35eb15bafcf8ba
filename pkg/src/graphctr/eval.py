"""Normalized log-likelihood, lift, and the staged lambda-selection protocol.

The protocol follows a fixed order:

1. tune ``lambda_f1`` on the f1-only model;
2. with ``lambda_f1`` fixed, tune ``lambda_f2`` for f1+f2 and a shared
   ``lambda_rest`` for every reduction variant (f1 plus some of f3..f8);
3. take the best variant of each reduction family, fix its lambdas, append
   f2 and tune ``lambda_f2``.

Selection uses the normalized test log-likelihood, and every report says
so. Test labels are only reachable through a :class:`Scorer`.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .features import DesignMatrix, per_feature_lambda
from .logreg import LogRegModel, predict_proba, train_owlqn

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-15
SELECTION_NOTE = "lambdas selected on the test set"


class ConfigurationError(ValueError):
    pass


def bernoulli_nll(preds, labels) -> float:
    p = np.clip(np.asarray(preds, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=float)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def normalized_ll(preds, labels) -> float:
    """Model NLL divided by the NLL of the constant test-set CTR; lower is better."""
    y = np.asarray(labels, dtype=float)
    p = np.asarray(preds, dtype=float)
    if y.size == 0 or p.shape != y.shape:
        raise ValueError("preds and labels must be non-empty and the same length")
    ctr = float(y.mean())
    if ctr in (0.0, 1.0):
        warnings.warn("labels are all one class; baseline uses the probability floor", RuntimeWarning, stacklevel=2)
    return bernoulli_nll(p, y) / bernoulli_nll(np.full(y.shape, ctr), y)


def lift(ll_model: float, ll_reference: float) -> float:
    """Percent reduction of normalized NLL relative to a reference model."""
    if not ll_reference > 0:
        raise ValueError(f"reference log-likelihood must be positive, got {ll_reference}")
    return 100.0 * (ll_reference - ll_model) / ll_reference


class Scorer:
    """Holds test labels; exposes only the selection metric."""

    def __init__(self, labels):
        self.__labels = np.asarray(labels, dtype=float)

    @property
    def n(self) -> int:
        return self.__labels.size

    @property
    def baseline_ctr(self) -> float:
        return float(self.__labels.mean())

    def __call__(self, preds) -> float:
        return normalized_ll(preds, self.__labels)


@dataclass
class EvalReport:
    model_label: str
    ll_normalized: float
    lift_percent: float
    lambda_f1: float
    lambda_f2: float | None
    lambda_rest: float | None
    train_seconds: float
    nnz_all: int
    nnz_f2: int | None
    converged: bool = True
    note: str = ""

    def tsv_row(self) -> str:
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        return "\t".join(
            [
                self.model_label,
                fmt(self.lambda_f1, "g"),
                fmt(self.lambda_f2, "g"),
                fmt(self.lambda_rest, "g"),
                f"{self.train_seconds:.2f}",
                str(self.nnz_all),
                fmt(self.nnz_f2, "d"),
                f"{100 * self.ll_normalized:.2f}",
                f"{self.lift_percent:.2f}",
            ]
        )


TSV_HEADER = "Model\tlambda_f1\tlambda_f2\tlambda_rest\tTime(s)\tnnz_all\tnnz_f2\tLL*100\t%Lift"


def write_reports_tsv(reports: Sequence[EvalReport], path, baseline_ctr: float | None = None) -> None:
    with open(path, "w") as fh:
        if baseline_ctr is not None:
            fh.write(f"# baseline: constant test-set CTR {baseline_ctr!r}; {SELECTION_NOTE}\n")
        fh.write(TSV_HEADER + "\n")
        fh.writelines(r.tsv_row() + "\n" for r in reports)


def write_reports_jsonl(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def geometric_grid(lo: float, hi: float, factor: float = 1.4) -> list[float]:
    n = int(math.floor(math.log(hi / lo) / math.log(factor) + 1e-9)) + 1
    return [lo * factor**i for i in range(n)]


DEFAULT_GRID_F1 = geometric_grid(0.01, 100.0)
DEFAULT_GRID_F2 = geometric_grid(0.01, 100.0)
DEFAULT_GRID_REST = geometric_grid(1e-4, 1.0)


@dataclass
class LambdaGrids:
    f1: Sequence[float] = field(default_factory=lambda: list(DEFAULT_GRID_F1))
    f2: Sequence[float] = field(default_factory=lambda: list(DEFAULT_GRID_F2))
    rest: Sequence[float] = field(default_factory=lambda: list(DEFAULT_GRID_REST))

    def __post_init__(self):
        for name in ("f1", "f2", "rest"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"lambda grid {name!r} is empty")


@dataclass
class Trial:
    groups: tuple[str, ...]
    lambda_f1: float
    lambda_f2: float | None
    lambda_rest: float | None
    ll: float
    model: LogRegModel = field(repr=False)


@dataclass
class TuningResult:
    """Selected rows (one per experiment) and every fitted trial."""

    reports: list[EvalReport]
    trials: list[Trial]
    baseline_ctr: float


class FeatureBlocks:
    """Per-group train/test column blocks, stacked on demand in a given group order."""

    def __init__(self, train: DesignMatrix, test_X: sp.csr_matrix):
        self.labels = train.labels
        self.ranges = train.group_ranges
        self._train = {}
        self._test = {}
        for name, (a, b) in train.group_ranges.items():
            self._train[name] = train.X[:, a:b].tocsr()
            self._test[name] = test_X[:, a:b].tocsr()

    def design(self, groups: Sequence[str]) -> tuple[sp.csr_matrix, sp.csr_matrix, dict]:
        ranges, col = {}, 0
        for g in groups:
            w = self._train[g].shape[1]
            ranges[g] = (col, col + w)
            col += w
        Xtr = sp.hstack([self._train[g] for g in groups], format="csr")
        Xte = sp.hstack([self._test[g] for g in groups], format="csr")
        return Xtr, Xte, ranges


def tune_lambda(
    blocks: FeatureBlocks,
    scorer: Scorer,
    reductions: Mapping[str, Sequence[Sequence[str]]],
    grids: LambdaGrids | None = None,
    train_opts: Mapping | None = None,
    workers: int = 1,
) -> TuningResult:
    """Run the staged protocol and return one report row per experiment.

    ``reductions`` maps a family name to its variants, e.g.
    ``{"IRM": [("f3",), ("f3", "f4")]}``. Lifts are relative to the f1 row.
    The f2 experiments run only when ``blocks`` has an f2 group.
    """
    grids = grids or LambdaGrids()
    opts = {"tol": 1e-6, "max_iter": 1000, **(train_opts or {})}
    trials: list[Trial] = []

    def fit(groups, l1, l2, lr) -> Trial:
        Xtr, Xte, ranges = blocks.design(groups)
        lam = per_feature_lambda(ranges, l1, l2 or 0.0, lr or 0.0)
        model = train_owlqn(Xtr, lam, y=blocks.labels, group_ranges=ranges, **opts)
        return Trial(tuple(groups), l1, l2, lr, scorer(predict_proba(model, Xte)), model)

    def search(groups, points) -> Trial:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                found = list(ex.map(lambda a: fit(groups, *a), points))
        else:
            found = [fit(groups, *a) for a in points]
        trials.extend(found)
        best = min(found, key=lambda t: t.ll)  # first minimum in grid order
        log.info("%s: best ll %.5f at %s", ", ".join(groups), best.ll,
                 (best.lambda_f1, best.lambda_f2, best.lambda_rest))
        return best

    rows: list[tuple[str, Trial]] = []
    base = search(("f1",), [(l, None, None) for l in grids.f1])
    lf1 = base.lambda_f1
    rows.append(("f1", base))
    has_f2 = "f2" in blocks.ranges
    if has_f2:
        rows.append(("f1, f2", search(("f1", "f2"), [(lf1, l, None) for l in grids.f2])))

    for family, variants in reductions.items():
        best_variant = None
        for v in variants:
            groups = ("f1", *v)
            t = search(groups, [(lf1, None, l) for l in grids.rest])
            rows.append((", ".join(groups), t))
            if best_variant is None or t.ll < best_variant.ll:
                best_variant = t
        if has_f2 and best_variant is not None:
            groups = (*best_variant.groups, "f2")
            t = search(groups, [(lf1, l, best_variant.lambda_rest) for l in grids.f2])
            rows.append((f"{family}* + f2 ({', '.join(best_variant.groups)})", t))

    ref = base.ll
    reports = []
    for label, t in rows:
        nnz = t.model.nnz_by_group
        reports.append(
            EvalReport(
                model_label=label,
                ll_normalized=t.ll,
                lift_percent=lift(t.ll, ref),
                lambda_f1=t.lambda_f1,
                lambda_f2=t.lambda_f2,
                lambda_rest=t.lambda_rest,
                train_seconds=t.model.train_seconds,
                nnz_all=t.model.nnz_total,
                nnz_f2=nnz.get("f2") if "f2" in t.groups else None,
                converged=t.model.converged,
                note=SELECTION_NOTE,
            )
        )
    return TuningResult(reports, trials, scorer.baseline_ctr)


def evaluate_model(model: LogRegModel, X_test, scorer: Scorer, label: str,
                   lambdas: tuple[float, float | None, float | None],
                   ll_reference: float | None = None) -> EvalReport:
    ll = scorer(predict_proba(model, X_test))
    nnz = model.nnz_by_group
    return EvalReport(
        model_label=label,
        ll_normalized=ll,
        lift_percent=lift(ll, ll_reference) if ll_reference else 0.0,
        lambda_f1=lambdas[0],
        lambda_f2=lambdas[1],
        lambda_rest=lambdas[2],
        train_seconds=model.train_seconds,
        nnz_all=model.nnz_total,
        nnz_f2=nnz.get("f2") if "f2" in model.group_ranges else None,
        converged=model.converged,
    )

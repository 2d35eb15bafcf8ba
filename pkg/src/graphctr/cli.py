"""Command-line pipeline: synth, ingest, graph, reduce, features, train, eval, tune, serve.

Every stage writes into ``<workdir>/<stage>/`` and leaves a ``manifest.json``
(input and output hashes, parameters, seed) plus a ``timing.json``. Only
prior-stage directories are read, so stages can be rerun one at a time.

Configuration is a flat ``key=value`` file (``--config``); ``--set key=value``
and the dedicated flags override it. Run ``graphctr keys`` for the key list.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import bidserver, eval as ev, features as ft, graph as gr, ingest, irm, logreg, nmf, svd

log = logging.getLogger("graphctr")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _matrix(text: str) -> list[list[float]]:
    return [_floats(row) for row in text.split(";") if row.strip()]


# key: (parser, default, help)
KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "workdir": (str, "work", "pipeline directory"),
    "log": (str, "", "transaction log (default: <workdir>/synth/log.tsv)"),
    "seed": (int, 0, "seed for every stochastic stage"),
    "workers": (int, 1, "threads for parallel kernels; never changes results"),
    # synth
    "n_users": (int, 2000, "synthetic users"),
    "n_urls": (int, 500, "synthetic URLs"),
    "k_user": (int, 4, "planted user clusters"),
    "k_url": (int, 4, "planted URL clusters"),
    "density_in": (float, 0.05, "edge probability in diagonal blocks"),
    "density_out": (float, 0.005, "edge probability off the diagonal"),
    "ctr_by_block": (_matrix, None, "rows separated by ';', entries by ',' (default: spread 0.2%..5%)"),
    "n_impressions": (int, 50000, "synthetic impressions"),
    "n_banners": (int, 4, "synthetic banners"),
    "n_days": (int, 7, "synthetic days"),
    # ingest / graph
    "test_day": (str, "", "YYYY-MM-DD held-out day (default: last day in the log)"),
    "top_users": (int, 0, "keep this many highest-degree users (0: all)"),
    "min_unique_users": (int, 1, "drop URLs seen by fewer retained users"),
    # reduce
    "reducer": (str, "irm", "svd, nmf or irm"),
    "K": (int, 10, "rank for svd and nmf"),
    "svd_max_iter": (int, 100, ""),
    "svd_tol": (float, 1e-10, ""),
    "nmf_max_iter": (int, 500, ""),
    "nmf_tol": (float, 1e-5, ""),
    "irm_k_max": (int, 50, "truncation level for both modes"),
    "irm_sweeps": (int, 200, ""),
    "irm_alpha": (float, 1.0, "stick concentration for both modes"),
    "irm_beta_pos": (float, 1.0, ""),
    "irm_beta_neg": (float, 1.0, ""),
    # features / train
    "features": (str, "f1,f3,f4", "comma-separated groups f1..f8"),
    "lambda_f1": (float, 1.0, ""),
    "lambda_f2": (float, 1.0, ""),
    "lambda_rest": (float, 1e-3, "shared strength for f3..f8"),
    "train_tol": (float, 1e-6, "relative objective change to stop at"),
    "train_max_iter": (int, 1000, ""),
    # tune
    "grid_f1": (_floats, None, "comma list (default geometric)"),
    "grid_f2": (_floats, None, ""),
    "grid_rest": (_floats, None, ""),
    # serve
    "host": (str, "127.0.0.1", ""),
    "port": (int, 7070, ""),
    "deadline_us": (float, 100_000.0, "default request budget"),
}

REDUCER_GROUPS = {"irm": ("f3", "f4"), "svd": ("f5", "f6"), "nmf": ("f7", "f8")}
FAMILY = {"irm": "IRM", "svd": "SVD", "nmf": "NMF"}
DEFAULT_CTR = [[0.05, 0.002, 0.01, 0.002],
               [0.002, 0.03, 0.002, 0.02],
               [0.01, 0.002, 0.04, 0.005],
               [0.002, 0.02, 0.005, 0.002]]


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def resolve_config(raw: dict[str, str]) -> dict[str, Any]:
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for k, (parse, default, _) in KEYS.items():
        if k in raw and raw[k] != "":
            try:
                cfg[k] = parse(raw[k])
            except ValueError:
                raise ConfigError(f"bad value for {k}: {raw[k]!r}") from None
        else:
            cfg[k] = default
    if cfg["ctr_by_block"] is None:
        if (cfg["k_user"], cfg["k_url"]) == (4, 4):
            cfg["ctr_by_block"] = DEFAULT_CTR
        else:
            cfg["ctr_by_block"] = [[0.01] * cfg["k_url"] for _ in range(cfg["k_user"])]
    return cfg


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: dict[str, Any], stage: str) -> None:
    """Reject configurations before any work starts."""
    _check(cfg["workers"] >= 1, "workers must be >= 1")
    if stage == "synth":
        _check(np.shape(cfg["ctr_by_block"]) == (cfg["k_user"], cfg["k_url"]),
               "ctr_by_block must be k_user x k_url")
        _check(cfg["n_impressions"] >= 1, "n_impressions must be >= 1")
    if stage == "graph":
        _check(cfg["top_users"] >= 0, "top_users must be >= 0")
        _check(cfg["min_unique_users"] >= 1, "min_unique_users must be >= 1")
    if stage == "reduce":
        _check(cfg["reducer"] in REDUCER_GROUPS, f"reducer must be one of {sorted(REDUCER_GROUPS)}")
        if cfg["reducer"] in ("svd", "nmf"):
            _check(cfg["K"] >= 1, "K must be >= 1")
        else:
            _check(cfg["irm_k_max"] >= 2, "irm_k_max must be >= 2")
            _check(cfg["irm_sweeps"] >= 1, "irm_sweeps must be >= 1")
            for k in ("irm_alpha", "irm_beta_pos", "irm_beta_neg"):
                _check(cfg[k] > 0, f"{k} must be > 0")
    if stage in ("features", "train", "tune"):
        try:
            spec = ft.FeatureSpec.parse(cfg["features"])
        except ft.ConfigurationError as e:
            raise ConfigError(str(e)) from None
        _check(len(spec.groups) > 0, "features is empty")
    if stage == "train":
        for k in ("lambda_f1", "lambda_f2", "lambda_rest"):
            _check(cfg[k] >= 0, f"{k} must be >= 0")
    if stage == "tune":
        spec = ft.FeatureSpec.parse(cfg["features"])
        _check("f1" in spec.groups, "tune needs f1 in features")
        for k in ("grid_f1", "grid_f2", "grid_rest"):
            _check(cfg[k] is None or len(cfg[k]) > 0, f"{k} is empty")
    if stage == "serve":
        _check(0 <= cfg["port"] < 65536, "port out of range")


# ---------------------------------------------------------------- manifests


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Stage:
    name: str
    root: Path
    params: dict[str, Any]
    seed: int

    @property
    def dir(self) -> Path:
        return self.root / self.name

    def need(self, stage: str, *files: str) -> Path:
        d = self.root / stage
        for f in files:
            if not (d / f).is_file():
                raise MissingArtifact(f"{stage} artifact missing: {d / f} not found; run `graphctr {stage}` first")
        return d

    def finish(self, inputs: dict[str, Path], outputs: list[str], seconds: dict[str, float],
               unhashed: list[str] = ()) -> None:
        manifest = {
            "stage": self.name,
            "params": self.params,
            "seed": self.seed,
            "inputs": {k: sha256(p) for k, p in sorted(inputs.items())},
            "outputs": {f: sha256(self.dir / f) for f in sorted(outputs)},
            "reports": sorted(unhashed),
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (self.dir / "timing.json").write_text(json.dumps(seconds, indent=2, sort_keys=True) + "\n")


def _stage(cfg, name, keys) -> Stage:
    st = Stage(name, Path(cfg["workdir"]), {k: cfg[k] for k in keys}, cfg["seed"])
    st.dir.mkdir(parents=True, exist_ok=True)
    return st


def _files(d: Path, *names) -> list[str]:
    return [n for n in names if (d / n).is_file()]


# ---------------------------------------------------------------- stages


def cmd_synth(cfg) -> None:
    st = _stage(cfg, "synth", ["n_users", "n_urls", "k_user", "k_url", "density_in", "density_out",
                               "ctr_by_block", "n_impressions", "n_banners", "n_days"])
    t0 = time.perf_counter()
    txns, planted = ingest.generate_synthetic(
        cfg["n_users"], cfg["n_urls"], cfg["k_user"], cfg["k_url"], cfg["density_in"],
        cfg["density_out"], cfg["ctr_by_block"], cfg["n_impressions"], cfg["seed"],
        n_banners=cfg["n_banners"], n_days=cfg["n_days"])
    ingest.write_transactions(txns, st.dir / "log.tsv")
    with open(st.dir / "planted_users.tsv", "w") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in planted.true_user_cluster.items())
    with open(st.dir / "planted_urls.tsv", "w") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in planted.true_url_cluster.items())
    st.finish({}, ["log.tsv", "planted_users.tsv", "planted_urls.tsv"], {"total": time.perf_counter() - t0})
    log.info("synth: %d transactions", len(txns))


def _log_path(cfg) -> Path:
    if cfg["log"]:
        return Path(cfg["log"])
    p = Path(cfg["workdir"]) / "synth" / "log.tsv"
    if not p.is_file():
        raise MissingArtifact(f"synth artifact missing: {p} not found; set log= or run `graphctr synth`")
    return p


def _write_obs(obs, path: Path) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{o.user_id}\t{o.banner_id}\t{o.url}\t{o.label}\n" for o in obs)


def _read_obs(path: Path) -> list[ingest.LabeledObservation]:
    out = []
    with open(path) as fh:
        for line in fh:
            u, b, url, y = line.rstrip("\n").split("\t")
            out.append(ingest.LabeledObservation(u, b, url, int(y)))
    return out


def cmd_ingest(cfg) -> None:
    src = _log_path(cfg)
    if not src.is_file():
        raise MissingArtifact(f"log artifact missing: {src} not found")
    st = _stage(cfg, "ingest", ["test_day"])
    t0 = time.perf_counter()
    parsed = ingest.read_transactions(src)
    day = date.fromisoformat(cfg["test_day"]) if cfg["test_day"] else ingest.last_day(parsed)
    train, test = ingest.split_by_day(parsed, day)
    ingest.write_transactions(train, st.dir / "train.tsv")
    ingest.write_transactions(test, st.dir / "test.tsv")
    _write_obs(ingest.label_impressions(train), st.dir / "train_obs.tsv")
    _write_obs(ingest.label_impressions(test), st.dir / "test_obs.tsv")
    (st.dir / "summary.json").write_text(json.dumps({
        "lines": parsed.n_lines, "malformed": parsed.n_malformed, "test_day": day.isoformat(),
        "train_transactions": len(train), "test_transactions": len(test)}, indent=2, sort_keys=True) + "\n")
    st.finish({"log": src}, ["train.tsv", "test.tsv", "train_obs.tsv", "test_obs.tsv", "summary.json"],
              {"total": time.perf_counter() - t0})


def cmd_graph(cfg) -> None:
    st = _stage(cfg, "graph", ["top_users", "min_unique_users"])
    d = st.need("ingest", "train.tsv")
    t0 = time.perf_counter()
    g = gr.build_bipartite(ingest.read_transactions(d / "train.tsv"))
    top = cfg["top_users"] or g.n_users
    g = gr.filter_graph(g, top, cfg["min_unique_users"])
    gr.save_graph(g, st.dir)
    st.finish({"train.tsv": d / "train.tsv"}, ["graph.txt", "users.txt", "urls.txt"],
              {"total": time.perf_counter() - t0})
    log.info("graph: %d users x %d urls, %d edges", g.n_users, g.n_urls, g.n_edges)


def _graph_inputs(d: Path) -> dict[str, Path]:
    return {f: d / f for f in ("graph.txt", "users.txt", "urls.txt")}


def cmd_reduce(cfg) -> None:
    red = cfg["reducer"]
    keys = {"svd": ["reducer", "K", "svd_max_iter", "svd_tol"],
            "nmf": ["reducer", "K", "nmf_max_iter", "nmf_tol"],
            "irm": ["reducer", "irm_k_max", "irm_sweeps", "irm_alpha", "irm_beta_pos", "irm_beta_neg"]}[red]
    st = _stage(cfg, f"reduce_{red}", keys)
    d = st.need("graph", "graph.txt", "users.txt", "urls.txt")
    g = gr.load_graph(d)
    t0 = time.perf_counter()
    if red == "svd":
        f = svd.truncated_svd(g, cfg["K"], cfg["svd_max_iter"], cfg["svd_tol"], cfg["seed"])
        svd.save_svd(f, st.dir)
        outs = ["svd_U.npy", "svd_V.npy", "svd_S.txt"]
    elif red == "nmf":
        f = nmf.nmf_factorize(g, cfg["K"], cfg["nmf_max_iter"], cfg["nmf_tol"], cfg["seed"])
        nmf.save_nmf(f, st.dir)
        outs = ["nmf_W.txt", "nmf_H.txt", "nmf_trace.txt"]
    else:
        hyper = irm.IrmHyperParams(cfg["irm_alpha"], cfg["irm_alpha"], cfg["irm_beta_pos"],
                                   cfg["irm_beta_neg"], cfg["irm_k_max"], cfg["irm_k_max"])
        res = irm.irm_run(g, hyper, cfg["irm_sweeps"], cfg["seed"], workers=cfg["workers"])
        irm.save_irm(res, st.dir)
        outs = ["irm_users.txt", "irm_urls.txt", "irm_trace.txt"]
        log.info("irm: %d user clusters, %d url clusters", res.k1_used, res.k2_used)
    st.finish(_graph_inputs(d), outs, {"reduce": time.perf_counter() - t0})


def _artifacts(st: Stage, spec: ft.FeatureSpec) -> tuple[ft.Artifacts, dict[str, Path]]:
    needed = {r for r, gs in REDUCER_GROUPS.items() if set(gs) & set(spec.groups)}
    inputs: dict[str, Path] = {}
    art = ft.Artifacts()
    if needed:
        d = st.need("graph", "graph.txt", "users.txt", "urls.txt")
        art.graph = gr.load_graph(d)
        inputs.update(_graph_inputs(d))
    if "irm" in needed:
        d = st.need("reduce_irm", "irm_users.txt", "irm_urls.txt")
        art.irm = irm.load_irm_labels(d)
        inputs.update({"irm_users.txt": d / "irm_users.txt", "irm_urls.txt": d / "irm_urls.txt"})
    if "svd" in needed:
        d = st.need("reduce_svd", "svd_U.npy", "svd_V.npy", "svd_S.txt")
        art.svd = svd.load_svd(d)
        inputs.update({f: d / f for f in ("svd_U.npy", "svd_V.npy", "svd_S.txt")})
    if "nmf" in needed:
        d = st.need("reduce_nmf", "nmf_W.txt", "nmf_H.txt")
        art.nmf = nmf.load_nmf(d)
        inputs.update({f: d / f for f in ("nmf_W.txt", "nmf_H.txt")})
    return art, inputs


def _save_vocab(vocab: ft.Vocabularies, path: Path) -> None:
    """Binary-group keys and all group ranges, enough to rebuild a serving bundle."""
    out = {"ranges": vocab.group_ranges, "n_cols": vocab.n_cols, "keys": {}}
    for name, gv in vocab.groups.items():
        if name == "f1":
            out["keys"][name] = [[b, u, c] for (b, u), c in gv.keys.items()]
        elif gv.kind != "dense":
            out["keys"][name] = [[k, c] for k, c in gv.keys.items()]
    path.write_text(json.dumps(out, sort_keys=True) + "\n")


def _load_vocab(path: Path, spec: ft.FeatureSpec) -> ft.Vocabularies:
    raw = json.loads(path.read_text())
    groups = {}
    for name in spec.groups:
        if name not in raw["keys"]:
            continue
        if name == "f1":
            keys = {(b, u): c for b, u, c in raw["keys"][name]}
        else:
            keys = {k: c for k, c in raw["keys"][name]}
        a, b = raw["ranges"][name]
        kind = "multihot" if name == "f2" else "onehot"
        groups[name] = ft.GroupVocab(name, kind, b - a, keys)
    ranges = {k: tuple(v) for k, v in raw["ranges"].items()}
    return ft.Vocabularies(spec, groups, ranges, raw["n_cols"])


def cmd_features(cfg) -> None:
    spec = ft.FeatureSpec.parse(cfg["features"])
    st = _stage(cfg, "features", ["features"])
    d = st.need("ingest", "train.tsv", "train_obs.tsv", "test_obs.tsv")
    art, inputs = _artifacts(st, spec)
    t0 = time.perf_counter()
    train_obs, test_obs = _read_obs(d / "train_obs.tsv"), _read_obs(d / "test_obs.tsv")
    hist = ft.user_histories(ingest.read_transactions(d / "train.tsv"))
    vocab = ft.build_vocab(train_obs, art, spec, hist)
    ft.save_design(ft.encode(train_obs, hist, vocab), st.dir / "train.svm")
    ft.save_design(ft.encode(test_obs, hist, vocab), st.dir / "test.svm")
    (st.dir / "ranges.json").write_text(json.dumps(vocab.group_ranges, sort_keys=True) + "\n")
    _save_vocab(vocab, st.dir / "vocab.json")
    with open(st.dir / "history.tsv", "w") as fh:
        fh.writelines(f"{u}\t{' '.join(urls)}\n" for u, urls in hist.items())
    inputs.update({f: d / f for f in ("train.tsv", "train_obs.tsv", "test_obs.tsv")})
    st.finish(inputs, ["train.svm", "test.svm", "ranges.json", "vocab.json", "history.tsv"],
              {"total": time.perf_counter() - t0})


def _load_features(st: Stage):
    d = st.need("features", "train.svm", "test.svm", "ranges.json")
    ranges = {k: tuple(v) for k, v in json.loads((d / "ranges.json").read_text()).items()}
    return d, ft.load_design(d / "train.svm", ranges), ft.load_design(d / "test.svm", ranges)


def _feature_groups(ranges) -> tuple[str, ...]:
    return tuple(g for g in ranges if g != ft.INTERCEPT)


def cmd_train(cfg) -> None:
    st = _stage(cfg, "train", ["lambda_f1", "lambda_f2", "lambda_rest", "train_tol", "train_max_iter"])
    d, train, _ = _load_features(st)
    lam = ft.per_feature_lambda(train.group_ranges, cfg["lambda_f1"], cfg["lambda_f2"], cfg["lambda_rest"])
    model = logreg.train_owlqn(train, lam, max_iter=cfg["train_max_iter"], tol=cfg["train_tol"])
    if not model.converged:
        log.warning("training stopped at max_iter=%d before reaching tol", cfg["train_max_iter"])
    logreg.save_model(model, st.dir / "model.txt")
    logreg.save_weight_table(logreg.export_weight_table(model), st.dir / "weights.txt")
    outs = ["model.txt", "weights.txt"]
    groups = _feature_groups(train.group_ranges)
    if set(groups) <= {"f1", "f2", "f3", "f4"} and (d / "vocab.json").is_file():
        vocab = _load_vocab(d / "vocab.json", ft.FeatureSpec(groups))
        hist = _read_history(d / "history.tsv")
        bidserver.export_bundle(model, vocab, hist, st.dir / "bundle")
        outs += [f"bundle/{f}" for f in bidserver.BUNDLE_FILES]
    st.finish({f: d / f for f in ("train.svm", "ranges.json")}, outs,
              {"train_seconds": model.train_seconds})
    log.info("train: %d non-zero weights, converged=%s", model.nnz_total, model.converged)


def _read_history(path: Path) -> dict[str, list[str]]:
    out = {}
    if path.is_file():
        with open(path) as fh:
            for line in fh:
                u, _, urls = line.rstrip("\n").partition("\t")
                out[u] = urls.split()
    return out


def cmd_eval(cfg) -> None:
    st = _stage(cfg, "eval", [])
    d, train, test = _load_features(st)
    md = st.need("train", "model.txt")
    tm = json.loads((md / "timing.json").read_text()) if (md / "timing.json").is_file() else {}
    model = logreg.load_model(md / "model.txt")
    model.train_seconds = float(tm.get("train_seconds", 0.0))
    params = json.loads((md / "manifest.json").read_text())["params"] if (md / "manifest.json").is_file() else {}
    scorer = ev.Scorer(test.labels)
    groups = _feature_groups(train.group_ranges)
    rep = ev.evaluate_model(
        model, test.X, scorer, ", ".join(groups),
        (params.get("lambda_f1", float("nan")),
         params.get("lambda_f2") if "f2" in groups else None,
         params.get("lambda_rest") if set(groups) - {"f1", "f2"} else None))
    _write_reports(st.dir, [rep], scorer.baseline_ctr)
    st.finish({"model.txt": md / "model.txt", "test.svm": d / "test.svm"}, ["metrics.json"],
              {"train_seconds": model.train_seconds}, unhashed=["report.tsv", "report.jsonl"])
    print(ev.TSV_HEADER)
    print(rep.tsv_row())


def _write_reports(d: Path, reports, baseline_ctr: float) -> None:
    ev.write_reports_tsv(reports, d / "report.tsv", baseline_ctr)
    ev.write_reports_jsonl(reports, d / "report.jsonl")
    metrics = [{"model": r.model_label, "ll_normalized": r.ll_normalized, "lift_percent": r.lift_percent,
                "lambda_f1": r.lambda_f1, "lambda_f2": r.lambda_f2, "lambda_rest": r.lambda_rest,
                "nnz_all": r.nnz_all, "nnz_f2": r.nnz_f2} for r in reports]
    (d / "metrics.json").write_text(json.dumps(
        {"baseline_ctr": baseline_ctr, "note": ev.SELECTION_NOTE, "rows": metrics}, indent=2, sort_keys=True) + "\n")


def reduction_variants(groups) -> dict[str, list[tuple[str, ...]]]:
    """Per available reducer: each mode alone and both together."""
    out = {}
    for red, (a, b) in REDUCER_GROUPS.items():
        have = [g for g in (a, b) if g in groups]
        if not have:
            continue
        variants = [(g,) for g in have]
        if len(have) == 2:
            variants.append((a, b))
        out[FAMILY[red]] = variants
    return out


def cmd_tune(cfg) -> None:
    st = _stage(cfg, "tune", ["grid_f1", "grid_f2", "grid_rest", "train_tol", "train_max_iter"])
    d, train, test = _load_features(st)
    groups = _feature_groups(train.group_ranges)
    if "f1" not in groups:
        raise ConfigError("tune needs f1 in the features stage output")
    grids = ev.LambdaGrids(
        cfg["grid_f1"] or ev.DEFAULT_GRID_F1, cfg["grid_f2"] or ev.DEFAULT_GRID_F2,
        cfg["grid_rest"] or ev.DEFAULT_GRID_REST)
    scorer = ev.Scorer(test.labels)
    res = ev.tune_lambda(
        ev.FeatureBlocks(train, test.X), scorer, reduction_variants(groups), grids,
        train_opts={"tol": cfg["train_tol"], "max_iter": cfg["train_max_iter"]},
        workers=cfg["workers"])
    _write_reports(st.dir, res.reports, res.baseline_ctr)
    with open(st.dir / "trials.tsv", "w") as fh:
        fh.write("groups\tlambda_f1\tlambda_f2\tlambda_rest\tll_normalized\n")
        for t in res.trials:
            fh.write(f"{','.join(t.groups)}\t{t.lambda_f1!r}\t{t.lambda_f2!r}\t{t.lambda_rest!r}\t{t.ll!r}\n")
    st.finish({f: d / f for f in ("train.svm", "test.svm", "ranges.json")}, ["metrics.json", "trials.tsv"],
              {"train_seconds": sum(t.model.train_seconds for t in res.trials)},
              unhashed=["report.tsv", "report.jsonl"])
    print(ev.TSV_HEADER)
    for r in res.reports:
        print(r.tsv_row())


def cmd_serve(cfg) -> None:
    st = Stage("serve", Path(cfg["workdir"]), {}, cfg["seed"])
    d = st.need("train", "bundle/weights.txt")
    bundle = bidserver.load_bundle(d / "bundle")
    st.dir.mkdir(parents=True, exist_ok=True)
    print(f"bundle loaded in {bundle.load_seconds:.3f}s; listening on {cfg['host']}:{cfg['port']}", flush=True)
    bidserver.serve(bundle, cfg["host"], cfg["port"], histogram_path=st.dir / "latency.tsv")


def cmd_keys(cfg) -> None:
    for k, (_, default, text) in KEYS.items():
        print(f"{k}={'' if default is None else default}\t{text}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "graph": cmd_graph, "reduce": cmd_reduce,
    "features": cmd_features, "train": cmd_train, "eval": cmd_eval, "tune": cmd_tune,
    "serve": cmd_serve, "keys": cmd_keys,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphctr", description="Graph-feature CTR pipeline.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--workdir")
    p.add_argument("--seed", type=str)
    p.add_argument("--reducer")
    p.add_argument("--features")
    p.add_argument("--workers", type=str)
    p.add_argument("--host")
    p.add_argument("--port", type=str)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        raw = read_config(args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        for k in ("workdir", "seed", "reducer", "features", "workers", "host", "port"):
            if getattr(args, k) is not None:
                raw[k] = getattr(args, k)
        cfg = resolve_config(raw)
        validate(cfg, args.command)
        COMMANDS[args.command](cfg)
    except (ConfigError, ft.ConfigurationError, ev.ConfigurationError, FileNotFoundError,
            ingest.LogFormatError, ingest.LeakageError, gr.EmptyGraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

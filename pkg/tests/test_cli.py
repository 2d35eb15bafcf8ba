import json
import subprocess
import sys

import pytest

from graphctr import bidserver
from graphctr.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, read_config, reduction_variants, resolve_config, run

SMALL = ["n_users=300", "n_urls=80", "n_impressions=6000", "n_days=4", "density_in=0.1", "density_out=0.01",
         "irm_k_max=8", "irm_sweeps=10", "grid_f1=0.5,4", "grid_f2=2", "grid_rest=0.01,0.1"]


def cli(workdir, command, *extra):
    argv = [command, "--workdir", str(workdir)]
    for item in SMALL:
        argv += ["--set", item]
    return run(argv + list(extra))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    w = tmp_path_factory.mktemp("work")
    for stage in ("synth", "ingest", "graph", "reduce"):
        assert cli(w, stage) == EXIT_OK, stage
    assert cli(w, "features", "--features", "f1,f2,f3,f4") == EXIT_OK
    for stage in ("train", "eval", "tune"):
        assert cli(w, stage) == EXIT_OK, stage
    return w


def test_stage_directories(pipeline):
    for stage in ("synth", "ingest", "graph", "reduce_irm", "features", "train", "eval", "tune"):
        d = pipeline / stage
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["stage"] == stage and manifest["seed"] == 0
        assert all(len(h) == 64 for h in manifest["outputs"].values())
        assert (d / "timing.json").is_file()


def test_tune_report(pipeline):
    lines = (pipeline / "tune" / "report.tsv").read_text().splitlines()
    assert lines[0].startswith("# baseline")
    labels = [ln.split("\t")[0] for ln in lines[2:]]
    assert labels == ["f1", "f1, f2", "f1, f3", "f1, f4", "f1, f3, f4", labels[-1]]
    assert labels[-1].startswith("IRM* + f2")
    metrics = json.loads((pipeline / "tune" / "metrics.json").read_text())
    assert metrics["rows"][0]["lift_percent"] == 0.0
    assert len((pipeline / "tune" / "trials.tsv").read_text().splitlines()) == 1 + 2 + 1 + 3 * 2 + 1


def test_train_exports_loadable_bundle(pipeline):
    b = bidserver.load_bundle(pipeline / "train" / "bundle")
    assert b.weight_table.dimension > 0 and len(b.f1_vocab) > 0


def test_rerun_gives_identical_manifests(pipeline, tmp_path):
    for stage in ("synth", "ingest", "graph", "reduce"):
        assert cli(tmp_path, stage) == EXIT_OK
    for stage in ("synth", "ingest", "graph", "reduce_irm"):
        a = json.loads((pipeline / stage / "manifest.json").read_text())
        b = json.loads((tmp_path / stage / "manifest.json").read_text())
        assert a["outputs"] == b["outputs"] and a["params"] == b["params"]


def test_missing_upstream(tmp_path, capsys):
    assert cli(tmp_path, "reduce") == EXIT_MISSING
    assert "graph artifact missing" in capsys.readouterr().err


def test_bad_configuration(tmp_path, capsys):
    assert cli(tmp_path, "reduce", "--set", "reducer=pca") == EXIT_CONFIG
    assert cli(tmp_path, "synth", "--set", "no_such_key=1") == EXIT_CONFIG
    assert cli(tmp_path, "synth", "--set", "n_users=many") == EXIT_CONFIG
    assert cli(tmp_path, "features", "--features", "f1,f9") == EXIT_CONFIG
    assert cli(tmp_path, "reduce", "--set", "irm_k_max=1") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "reducer" in err and "no_such_key" in err


def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 4\nK=3\n")
    raw = read_config(path)
    assert raw == {"seed": "4", "K": "3"}
    cfg = resolve_config(raw)
    assert cfg["seed"] == 4 and cfg["K"] == 3 and cfg["reducer"] == "irm"


def test_reduction_variants():
    assert reduction_variants(("f1", "f3", "f4", "f5")) == {"IRM": [("f3",), ("f4",), ("f3", "f4")], "SVD": [("f5",)]}


def test_entry_point_lists_keys():
    out = subprocess.run([sys.executable, "-m", "graphctr.cli", "keys"], capture_output=True, text=True, check=True)
    assert "irm_sweeps=200" in out.stdout

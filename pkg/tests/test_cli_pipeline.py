import json
import shutil
import subprocess
import sys

import pytest
import yaml

from mpep import config as cfgmod
from mpep.artifacts import ArtifactStore, MissingArtifactError, read_csv
from mpep.cli import build_parser, main
from mpep.pipeline import SCHEMAS, export_plot_data

from conftest import OM_EPS

UPSTREAM = ["orbit", "manifold", "heteroclinics", "maslov"]


@pytest.fixture
def workdir(pipe, tmp_path):
    """Copy of the session artifacts, so CLI runs start from a warm cache."""
    out = tmp_path / "out"
    shutil.copytree(pipe.root, out)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "action": {"epsilon": OM_EPS, "epsilon_scan": {"lo": 5e-4, "hi": 0.1024, "n": 16}},
        "montecarlo": {"n": 4000, "tmax": 100.0, "convergence": False},
    }))
    return out, cfg


def _run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, (json.loads(cap.out) if code == 0 else None), cap.err


def test_yaml_reads_exponent_floats():
    cfg = cfgmod.parse("integrator: {rtol: 1e-10, atol: 1E-13}\nmontecarlo: null\n")
    assert cfg["integrator"]["rtol"] == 1e-10 and cfg["integrator"]["atol"] == 1e-13
    assert cfg["montecarlo"] is None
    assert cfgmod.parse(cfgmod.dump(cfg)) == cfg


def test_config_rejects_unknown_and_invalid_keys():
    with pytest.raises(cfgmod.ConfigError, match="manifold"):
        cfgmod.build({"manifold": {"orders": 3}})
    with pytest.raises(cfgmod.ConfigError, match="river/refine_ratio"):
        cfgmod.build({"river": {"refine_ratio": 1.5}})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("- 1\n- 2\n")


def test_config_hash_is_order_independent():
    a = cfgmod.build({"seed": 3, "jobs": 2})
    b = cfgmod.build({"jobs": 2, "seed": 3})
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.build({"seed": 4}))


def test_parser_global_flags_on_either_side():
    p = build_parser()
    a = p.parse_args(["--jobs", "3", "maslov", "--theta-range", "1:2:5"])
    b = p.parse_args(["maslov", "--theta-range", "1:2:5", "--jobs", "3"])
    assert a.jobs == b.jobs == 3
    assert a.theta_range == (1.0, 2.0, 5)
    with pytest.raises(SystemExit):
        p.parse_args(["maslov", "--theta-range", "1:2"])
    with pytest.raises(SystemExit):
        p.parse_args(["maslov", "--theta-list", "1", "--theta-range", "1:2:3"])


def test_bad_config_exits_with_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("manifold: {order: -1}\n")
    code, _, err = _run(capsys, ["manifold", "--config", str(bad)])
    assert code == 2 and "[config]" in err


def test_disabled_montecarlo_exits_with_1(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("montecarlo: null\n")
    code, _, err = _run(capsys, ["montecarlo", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 1 and "montecarlo" in err


def test_missing_artifact(tmp_path):
    with pytest.raises(MissingArtifactError):
        ArtifactStore(tmp_path).load("river")
    with pytest.raises(ValueError):
        export_plot_data(tmp_path, "nonsense")


def test_river_from_warm_cache(workdir, capsys):
    out, _ = workdir
    code, rep, _ = _run(capsys, ["river", "--out", str(out)])
    assert code == 0
    assert rep["stages_run"] == []
    assert set(UPSTREAM + ["river", "pivot"]) <= set(rep["cache_hits"])
    assert rep["theta_hat"] == pytest.approx(3.628, abs=5e-3)
    rows = read_csv(out / "river" / "river.csv")
    assert list(rows[0]) == SCHEMAS["river"]["river"]
    assert len(rows) == 64
    assert (out / "pivot" / "mouth.csv").exists()
    assert (out / "config.yaml").exists()


def test_changed_option_reruns_downstream_only(workdir, capsys):
    out, _ = workdir
    code, rep, _ = _run(capsys, ["river", "--out", str(out), "--collar", "0.3"])
    assert code == 0
    assert rep["stages_run"] == ["river", "pivot"]
    assert set(UPSTREAM) <= set(rep["cache_hits"])


def test_maslov_extra_angles_and_json_export(workdir, capsys):
    out, _ = workdir
    code, rep, _ = _run(capsys, ["maslov", "--out", str(out), "--theta-list", "3.0,4.0",
                                 "--format", "json"])
    assert code == 0 and "maslov" in rep["stages_run"]
    doc = json.loads((out / "maslov" / "maslov.json").read_text())
    assert doc["columns"] == SCHEMAS["maslov"]["maslov"]
    extra = {r["theta"]: r for r in doc["rows"] if not r["label"]}
    assert set(extra) == {3.0, 4.0}
    # inside the River, index 1 below the pivot and 0 above
    assert extra[3.0]["index"] == 1 and extra[4.0]["index"] == 0


def test_compare_runs_montecarlo_and_reports(workdir, capsys):
    out, cfg = workdir
    code, rep, _ = _run(capsys, ["compare", "--config", str(cfg), "--out", str(out)])
    assert code == 0
    assert rep["stages_run"] == ["montecarlo", "compare"]
    assert 0 < rep["escape_fraction"] < 1
    cmp_ = rep["compare"]
    assert cmp_["om_eps"] == pytest.approx(0.1024)
    assert cmp_["om_mode_distance"] >= 0
    assert (out / "montecarlo" / "artifact.json").exists()
    kinds = {r["kind"] for r in read_csv(out / "compare" / "markers.csv")}
    assert {"om", "pivot", "mode"} <= kinds


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mpep", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("manifold", "heteroclinics", "maslov", "river", "action", "montecarlo",
                "compare", "pipeline"):
        assert cmd in res.stdout

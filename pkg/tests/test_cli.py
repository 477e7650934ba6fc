import json
import shutil
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from jkolab.cli import main
from jkolab.config import ExperimentConfig, load_config
from jkolab.io import read_json
from jkolab.schema import load_schema, schema_name_for

ALL_CHECKS = ["diff-harnack", "harnack", "recursion", "ma-residual", "optimality",
              "ctransform", "convergence", "ot-selftest"]
# the fest transfer identity converges slowly; M=32 needs a looser bound than M=128
COARSE = {"fest": 0.5}


def _config(tmp_path, name="cfg.json", **kw):
    path = tmp_path / name
    path.write_text(json.dumps(kw))
    return path


def _validate_tree(root: Path) -> int:
    count = 0
    for path in sorted(root.rglob("*.json")):
        jsonschema.validate(read_json(path), load_schema(schema_name_for(path)))
        count += 1
    return count


# ---------------------------------------------------------------- config


def test_config_defaults_and_rejections(tmp_path):
    cfg = ExperimentConfig()
    assert (cfg.K, cfg.N, cfg.M, cfg.dim, cfg.C) == (0.05, 32, 128, 1, 1.0)
    assert cfg.jko_config().inner.bias_correction
    with pytest.raises(ValueError):
        load_config(_config(tmp_path, unknown=1))
    with pytest.raises(ValueError):
        load_config(_config(tmp_path, inner={"eps": 1e-3}))
    with pytest.raises(ValueError):
        load_config(_config(tmp_path, C=0.4))
    with pytest.raises(ValueError):
        load_config(_config(tmp_path, checks=["harnack", "harnack"]))
    with pytest.raises(ValueError):
        load_config(_config(tmp_path, convergence={"N_list": [8, 4]}))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError):
        load_config(bad)


# ---------------------------------------------------------------- run


def test_run_uniform_all_checks(tmp_path, capsys):
    cfg = _config(tmp_path, M=32, N=8, initial={"family": "uniform"}, checks=ALL_CHECKS,
                  output_dir=str(tmp_path / "out"))
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    summary = read_json(out / "summary.json")
    assert summary["passed"] and set(ALL_CHECKS) <= set(summary["checks"])
    inv = read_json(out / "reports" / "invariants.json")
    assert all(r["descent_slack"] is None or r["descent_slack"] >= -1e-12 for r in inv["rows"])
    dh = read_json(out / "reports" / "diff_harnack.json")
    assert all(r["slack"] >= 0 for r in dh["records"])
    conv = (out / "convergence.csv").read_text().splitlines()
    assert conv[0] == "N,l1_gap,linf_gap,runtime_ms" and len(conv) == 5
    assert _validate_tree(out) >= 20
    assert "PASS  invariants" in capsys.readouterr().out


def test_run_is_byte_identical(tmp_path):
    outs = []
    for i in range(2):
        cfg = _config(tmp_path, name=f"c{i}.json", M=32, N=4, checks=ALL_CHECKS[:6],
                      tolerances=COARSE)
        d = tmp_path / f"run{i}"
        assert main(["run", str(cfg), "-o", str(d)]) == 0
        outs.append(d)
    a = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    b = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_run_violation_exits_1(tmp_path):
    cfg = _config(tmp_path, M=32, N=4, checks=["ma-residual"], tolerances={"ma_residual": 1e-12})
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 1
    assert not read_json(tmp_path / "o" / "summary.json")["checks"]["ma-residual"]


def test_run_huge_tau_exits_3(tmp_path, capsys):
    cfg = _config(tmp_path, K=5.0, N=1, M=64)
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 3
    assert "degenerate map" in capsys.readouterr().err


@pytest.mark.parametrize("content", ['{"K": 0.05, "bogus": 1}', "{", '{"M": 4}', '{"N": 0}'])
def test_run_config_errors_exit_2(tmp_path, content):
    path = tmp_path / "c.json"
    path.write_text(content)
    assert main(["run", str(path)]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert main(["harnack", str(tmp_path / "nowhere")]) == 2


def test_thread_env(tmp_path, monkeypatch):
    cfg = _config(tmp_path, M=32, N=2, checks=["recursion"])
    monkeypatch.setenv("JKO_THREADS", "1")
    assert main(["run", str(cfg), "-o", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("JKO_THREADS", "many")
    assert main(["run", str(cfg), "-o", str(tmp_path / "b")]) == 2
    monkeypatch.setenv("JKO_THREADS", "-1")
    assert main(["run", str(cfg), "-o", str(tmp_path / "c")]) == 2


# ---------------------------------------------------------------- other subcommands


def test_convergence_uniform_and_single_row(tmp_path):
    cfg = _config(tmp_path, M=32, initial={"family": "uniform"})
    assert main(["convergence", str(cfg), "-o", str(tmp_path / "u")]) == 0
    rep = read_json(tmp_path / "u" / "convergence.json")
    assert all(r["l1_gap"] <= 1e-9 for r in rep["rows"])
    one = _config(tmp_path, name="one.json", M=32, convergence={"N_list": [4]})
    assert main(["convergence", str(one), "-o", str(tmp_path / "s")]) == 0
    assert len((tmp_path / "s" / "convergence.csv").read_text().splitlines()) == 2
    _validate_tree(tmp_path / "u")


def test_ot_selftest_exit_codes(tmp_path, capsys):
    assert main(["ot-selftest"]) == 0
    from jkolab.selftest import load_battery

    battery = load_battery()
    battery["sinkhorn_eps"] = 0.1
    biased = tmp_path / "biased.json"
    biased.write_text(json.dumps(battery))
    assert main(["ot-selftest", str(biased), "-o", str(tmp_path)]) == 1
    worst = read_json(tmp_path / "ot_selftest_worst.json")
    jsonschema.validate(worst, load_schema("selftest_worst"))
    assert worst["instance"]["kind"] == "grid"
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    assert main(["ot-selftest", str(empty)]) == 2


def test_harnack_recheck(tmp_path):
    cfg = _config(tmp_path, M=32, N=8, tolerances=COARSE)
    assert main(["run", str(cfg), "-o", str(tmp_path / "r")]) == 0
    assert main(["harnack", str(tmp_path / "r")]) == 0
    assert main(["harnack", str(tmp_path / "r" / "trajectory"), "-o", str(tmp_path / "h")]) == 0
    assert read_json(tmp_path / "h" / "summary.json")["passed"]
    _validate_tree(tmp_path / "r")


def test_console_script(tmp_path):
    exe = shutil.which("jkolab")
    cmd = [exe] if exe else [sys.executable, "-m", "jkolab.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ot-selftest" in res.stdout
    res = subprocess.run(cmd + ["ot-selftest"], capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 0 and "PASS" in res.stdout

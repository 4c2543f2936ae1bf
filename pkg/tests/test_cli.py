import json
import os
import re
import subprocess
import sys

import pytest

from degen_rwre.cli import config_hash, resolve_config, run

ALT_ENV = {"model": {"kind": "deterministic", "d_off": 1.0, "d_on": 1.0}, "L": 8,
           "window": [0.0, 2.0], "periodic": True, "time_period": 2.0, "x_min": 0}


def invoke(capsys, *argv):
    code = run(list(argv))
    cap = capsys.readouterr()
    return code, cap.out.strip(), cap.err.strip()


def outputs(run_dir):
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        man = json.load(fh)
    return man, {o["file"]: o["sha256"] for o in man["outputs"]}


@pytest.fixture
def out(tmp_path):
    return str(tmp_path / "runs")


def write_config(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_model_spec_matches_package(out, capsys):
    code, path, _ = invoke(capsys, "gen-env", "--out", out, "--set", "env=" + json.dumps(ALT_ENV))
    assert code == 0
    with open(os.path.join(path, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["n_edges"] == 8 and summary["time_period"] == 2.0


def test_certify_constant_environment(out, capsys, tmp_path):
    cfg = write_config(tmp_path, {"env": {"constant": 1.0, "L": 8, "window": [0.0, 1.0],
                                          "periodic": True, "time_period": 1.0},
                                  "eps_grid": [0.5, 0.1]})
    code, path, _ = invoke(capsys, "certify", "--config", cfg, "--out", out)
    assert code == 0
    with open(os.path.join(path, "certificates.json")) as fh:
        assert json.load(fh)["all_pass"]


def test_certificate_failure_exit_code(out, capsys):
    code, _, err = invoke(capsys, "certify", "--out", out, "--set", "env=" + json.dumps(ALT_ENV),
                          "--set", "heat_tol=1e-300", "--set", "eps_grid=[0.5]")
    assert code == 3
    assert json.loads(err)["error"] == "CertificateFailure"
    runs = os.listdir(out)
    man, _ = outputs(os.path.join(out, runs[0]))
    assert man["status"] == "CertificateFailure"


def test_qip_is_reproducible(out, capsys):
    argv = ["qip", "--out", out, "--seed", "7", "--tolerance-profile", "fast",
            "--set", "env=" + json.dumps(ALT_ENV), "--set", "n_paths=200",
            "--set", "scales=[1, 10]", "--set", "n_boot=20"]
    code1, first, _ = invoke(capsys, *argv)
    code2, second, _ = invoke(capsys, *argv)
    assert code1 == code2 == 0
    assert second == first + "-r2"
    m1, sums1 = outputs(first)
    m2, sums2 = outputs(second)
    assert sums1 == sums2
    assert set(sums1) == {"report.json", "raw.csv", "variance.dat", "ks.dat"}
    assert m1["config_hash"] == m2["config_hash"]
    assert m1["seeds"]["master"] == 7


def test_subdiff_reports_both_runs(out, capsys):
    code, path, _ = invoke(capsys, "subdiff", "--out", out, "--tolerance-profile", "fast",
                           "--set", "t_grid=[10, 100, 1000]", "--set", "n_paths=30",
                           "--set", "n_boot=20")
    assert code == 0
    with open(os.path.join(path, "report.json")) as fh:
        rep = json.load(fh)
    assert {"positive", "control", "verdict"} <= set(rep)
    with open(os.path.join(path, "max_growth.dat")) as fh:
        assert fh.readline().strip() == "t,positive,control"


def test_report_checks_integrity(out, capsys):
    _, kpath, _ = invoke(capsys, "kernel", "--out", out, "--set",
                         'env={"constant": 1.0, "L": 60, "window": [0.0, 2.0]}')
    code, rpath, _ = invoke(capsys, "report", "--out", out, "--set", "runs=" + json.dumps([kpath]))
    assert code == 0
    with open(os.path.join(rpath, "report.json")) as fh:
        assert json.load(fh)["runs"][0]["checksums_intact"]
    with open(os.path.join(kpath, "kernel.csv"), "a") as fh:
        fh.write("tampered\n")
    _, rpath, _ = invoke(capsys, "report", "--out", out, "--set", "runs=" + json.dumps([kpath]))
    with open(os.path.join(rpath, "report.json")) as fh:
        assert not json.load(fh)["runs"][0]["checksums_intact"]


@pytest.mark.parametrize("argv", [
    ["sim-x", "--set", "bogus=1"],
    ["sim-x", "--set", 'env={"constant": -1, "L": 4, "window": [0, 1]}'],
    ["qip", "--set", 'env={"constant": 1, "L": 4, "window": [0, 1]}',
     "--set", 'model={"kind": "deterministic", "d_off": 1, "d_on": 1}'],
    ["gen-env", "--set", 'env={"model": {"kind": "renewal"}, "L": 4, "window": [0, 1]}'],
    ["no-such-command"],
])
def test_validation_errors_exit_2(out, capsys, argv):
    code, _, err = invoke(capsys, *argv, "--out", out)
    assert code == 2
    # argparse prints its usage first; the JSON error follows
    body = err[re.search(r"^\{", err, re.M).start():]
    assert json.loads(body)["error"] == "ValidationError"


def test_boundary_hit_exit_4(out, capsys):
    code, _, err = invoke(capsys, "sim-x", "--out", out, "--set",
                          'env={"constant": 1.0, "L": 4, "window": [0.0, 100.0]}',
                          "--set", "t_end=100")
    assert code == 4
    assert json.loads(err)["error"] == "BoundaryHit"


def test_profile_changes_hash():
    cfg = resolve_config("qip", {"env": ALT_ENV}, profile="strict")
    fast = resolve_config("qip", {"env": ALT_ENV}, profile="fast")
    assert cfg["n_paths"] == 10_000 and fast["n_paths"] == 1000
    assert config_hash("qip", cfg, "strict") != config_hash("qip", fast, "fast")
    assert config_hash("qip", cfg, "strict") == config_hash("qip", dict(cfg), "strict")


def test_console_script(tmp_path):
    env = dict(os.environ, DEGEN_RWRE_OUT=str(tmp_path))
    res = subprocess.run([sys.executable, "-m", "degen_rwre.cli", "sim-x", "--set",
                          'env={"constant": 1.0, "L": 200, "window": [0.0, 5.0]}',
                          "--set", "t_end=5", "--set", "n_paths=2"],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip().startswith(str(tmp_path))

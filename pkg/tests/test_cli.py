import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from critflow.checkpoint import read_checkpoint
from critflow.cli import (EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, ConfigError, load_config, main,
                          parse_config, read_csv)

SMALL = """
[domain]
kind = annulus
n = 3
r_in = 0.5
r_out = 1.0

[grid]
mode = radial
n_nodes = 64

[initial]
preset = dome

[flow]
dt0 = 1e-3
max_steps = 400
s_end = 0.5
checkpoint_every = 10
"""


def _write(tmp_path, text, name="small.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("text, needle", [
    ("[domain]\nkind = ball\n[bogus]\nx = 1\n", ":3 [bogus]"),
    ("[domain]\nkind = ball\nradius = 1\nwidth = 2\n", ":4 [domain] width"),
    ("[domain]\nkind = ball\nn = three\n", "[domain] n"),
    ("[grid]\nmode = radial\n", "kind is required"),
    ("[domain]\nkind = box\n[grid]\nmode = radial\n", "[grid] mode"),
    ("[domain]\nkind = ball\n[initial]\npreset = spike\n", "[initial] preset"),
    ("[domain]\nkind = ball\n[flow]\ndt_min = 1\ndt_max = 0.1\n", "dt_min"),
    ("[domain]\nkind = ball\n[grid]\nn_nodes = 64\n[flow]\nlam_ceiling = 1e6\n", "not resolved"),
    ("[domain]\nkind = ball\n[initial]\na = 0 0\n", "[initial] a"),
])
def test_config_errors_carry_location(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="cfg.ini")
    assert needle in str(info.value)


def test_digest_ignores_output_dir():
    a = parse_config(SMALL + "[output]\ndir = x\n")
    b = parse_config(SMALL + "[output]\ndir = y\n")
    c = parse_config(SMALL.replace("n_nodes = 64", "n_nodes = 65"))
    assert a.digest() == b.digest() != c.digest()


def test_presets_load():
    for name in ("ball-blowup-n3-radial", "annulus-steady-n3-radial"):
        assert load_config(name).name == name
    with pytest.raises(ConfigError):
        load_config("no-such-thing")


def test_constants_command(capsys):
    assert main(["constants", "3"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 3 and len(out["kappa"]) == 4
    assert main(["constants", "7"]) == EXIT_CONFIG


def test_run_outputs_and_report(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["out_dir"] == str(out)
    lines = (out / "flow.csv").read_text().splitlines()
    digest = load_config(str(cfg)).digest()
    assert lines[0].startswith("#") and f"config_sha256={digest}" in lines[0]
    assert lines[1].split(",")[:3] == ["step", "s", "t"]
    assert lines[2].startswith("# units:")
    rows = read_csv(out / "flow.csv")
    assert rows[-1]["s"] == pytest.approx(0.5)
    for name in ("fits.csv", "classification.json", "rates.json", "config.json"):
        assert (out / name).exists()
    ck = read_checkpoint(out / "checkpoint.bin")
    assert ck.step_index == int(rows[-1]["step"])
    assert main(["report", str(out)]) == EXIT_OK
    assert (out / "r_of_s.tsv").read_text().startswith("s\tr\n")
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_CONFIG


def test_run_config_error_exit(tmp_path):
    cfg = _write(tmp_path, "[domain]\nkind = cube\n")
    assert main(["run", str(cfg)]) == EXIT_CONFIG


def test_solver_abort_leaves_failure_record(tmp_path):
    text = SMALL.replace("dt0 = 1e-3", "dt0 = 1e3").replace("s_end = 0.5\n", "")
    cfg = _write(tmp_path, text)
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_SOLVER
    fail = json.loads((out / "failure.json").read_text())
    assert fail["error"] == "FlowAbort"
    assert read_checkpoint(out / "checkpoint.bin").step_index == 0


def _cli(args, threads, cwd):
    env = dict(os.environ, CRITFLOW_THREADS=str(threads))
    return subprocess.run([sys.executable, "-m", "critflow", *args], cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=300)


def test_outputs_identical_across_thread_counts(tmp_path):
    cfg = _write(tmp_path, SMALL)
    for threads in (1, 4):
        res = _cli(["run", str(cfg), "--out", str(tmp_path / f"t{threads}")], threads, tmp_path)
        assert res.returncode == EXIT_OK, res.stderr
    for name in ("flow.csv", "fits.csv", "checkpoint.bin", "classification.json"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t4" / name).read_bytes()


def test_sweep_reports_worst_exit(tmp_path):
    d = tmp_path / "cfgs"
    d.mkdir()
    for k in range(2):
        _write(d, SMALL + f"[output]\ndir = {tmp_path / f'out{k}'}\n", f"ok{k}.ini")
    res = _cli(["sweep", str(d / "ok*.ini"), "--workers", "2"], 1, tmp_path)
    assert res.returncode == EXIT_OK, res.stderr
    # the header hashes the config name, so compare the data lines only
    body = [(tmp_path / f"out{k}" / "flow.csv").read_text().splitlines()[1:] for k in range(2)]
    assert body[0] == body[1]
    _write(d, "[domain]\nkind = cube\n", "ok9.ini")
    res = _cli(["sweep", str(d / "ok*.ini")], 1, tmp_path)
    assert res.returncode == EXIT_CONFIG
    assert main(["sweep", str(d / "none*.ini")]) == EXIT_CONFIG


def test_verify_command(capsys):
    assert main(["verify", "unknown"]) == EXIT_CONFIG
    assert main(["verify", "constants"]) == EXIT_OK
    checks = json.loads(capsys.readouterr().out)
    assert all(c["passed"] for c in checks)

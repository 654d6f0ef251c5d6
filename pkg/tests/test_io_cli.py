"""Problem-file parsing, CSV round-trips, subcommand exit codes."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dfbsde import io
from dfbsde.cli import main
from dfbsde.errors import ProblemFormatError

MED = {
    "A": 0.3, "Abar": 0.25, "B": 0.3, "Bbar": 0.15,
    "C": 0.2, "Cbar": 0.15, "D": -0.4, "Dbar": 0.2,
    "Q": 0.6, "PT": 0.5, "h": 0.2, "T": 1.0, "x0": 1.0,
}
LQ = {
    "A": 0.3, "Abar": 0.3, "B": 1.0, "Bbar": 0.2,
    "Q": 1.0, "R": 0.5, "H": 0.3, "h": 0.2, "T": 1.0, "x0": 1.0,
}


def _write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def test_load_problem_accepts_scalars_and_matrices(tmp_path):
    path = _write(tmp_path, "p.json", MED)
    spec = io.load_problem(path)
    assert spec.n == 1
    assert spec.coeff("A", 0.0)[0, 0] == 0.3
    mat = dict(MED)
    mat["A"] = [[0.3, 0.0], [0.0, 0.3]]
    for k in ("Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar", "Q", "PT"):
        mat[k] = [[MED[k], 0.0], [0.0, MED[k]]]
    mat["x0"] = [1.0, 2.0]
    spec2 = io.load_problem(_write(tmp_path, "p2.json", mat))
    assert spec2.n == 2


def test_load_problem_supports_piecewise_tables(tmp_path):
    payload = dict(MED)
    payload["A"] = {"breakpoints": [0.0, 0.5], "values": [0.3, -0.1]}
    spec = io.load_problem(_write(tmp_path, "p.json", payload))
    assert spec.time_varying
    assert spec.coeff("A", 0.49)[0, 0] == 0.3
    assert spec.coeff("A", 0.51)[0, 0] == -0.1


def test_load_problem_diagnostics(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": 0.3, "h": }')
    with pytest.raises(ProblemFormatError, match="line 1 column"):
        io.load_problem(str(bad))
    with pytest.raises(ProblemFormatError, match="missing"):
        io.load_problem(_write(tmp_path, "m.json", {"A": 0.3}))
    payload = dict(MED)
    payload["B"] = "big"
    with pytest.raises(ProblemFormatError, match="'B'"):
        io.load_problem(_write(tmp_path, "t.json", payload))
    with pytest.raises(ProblemFormatError, match="not found"):
        io.load_problem(str(tmp_path / "absent.json"))


def test_float_format_round_trips():
    rng = np.random.default_rng(2)
    for v in rng.normal(size=50) * 10.0 ** rng.integers(-12, 12, 50):
        assert float(io.fmt(v)) == v


def test_solve_discrete_cli_outputs(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    out = str(tmp_path / "run")
    assert main(["solve-discrete", "--problem", prob, "--d", "2",
                 "--out", out, "--no-plot"]) == 0
    listed = sorted(os.listdir(out))
    assert listed == ["Mbar.csv", "P.csv", "band.csv", "manifest.json"]
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert sorted(manifest["outputs"]) == ["Mbar.csv", "P.csv", "band.csv"]
    assert manifest["mode"] == "solve-discrete"
    header = (tmp_path / "run" / "P.csv").read_text().splitlines()[0]
    assert header == "k,row,col,value"


def test_simulate_cli_is_seed_and_thread_deterministic(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    outs = []
    for name, threads in (("a", "1"), ("b", "4")):
        out = tmp_path / name
        env = dict(os.environ, DFBSDE_THREADS=threads)
        r = subprocess.run(
            [sys.executable, "-m", "dfbsde", "simulate", "--problem", prob,
             "--d", "2", "--paths", "50", "--seed", "9", "--out", str(out),
             "--no-plot"],
            env=env, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append(out)
    a = (outs[0] / "paths.csv").read_bytes()
    b = (outs[1] / "paths.csv").read_bytes()
    assert a == b
    ra = (outs[0] / "residuals.json").read_bytes()
    rb = (outs[1] / "residuals.json").read_bytes()
    assert ra == rb


def test_simulate_rerun_is_byte_identical(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["simulate", "--problem", prob, "--d", "2", "--paths",
                     "40", "--seed", "4", "--mode", "continuous",
                     "--out", str(out), "--no-plot"]) == 0
        blobs.append((out / "paths.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_oracle_cli_pass_and_mismatch_exit(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    assert main(["oracle", "--problem", prob, "--d", "1",
                 "--out", str(tmp_path / "ok"), "--no-plot"]) == 0
    report = json.loads((tmp_path / "ok" / "oracle.json").read_text())
    assert report["pass"] is True
    assert report["max_rel_p"] < 1e-8
    # an absurd tolerance forces the mismatch exit path
    assert main(["oracle", "--problem", prob, "--d", "1",
                 "--out", str(tmp_path / "bad"), "--no-plot",
                 "--oracle-tol", "1e-20"]) == 4


def test_malformed_problem_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": }')
    rc = main(["solve-discrete", "--problem", str(bad), "--d", "2",
               "--out", str(tmp_path / "o"), "--no-plot"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "line 1" in err


def test_numerical_failure_exits_3(tmp_path):
    blow = dict(MED, A=0.4, Abar=0.3, B=0.5, Bbar=0.2, C=0.3, Cbar=0.2,
                D=-0.3, Dbar=0.25, Q=1.0, PT=0.8)
    prob = _write(tmp_path, "p.json", blow)
    rc = main(["solve-continuous", "--problem", prob, "--eta", "0.003125",
               "--out", str(tmp_path / "o"), "--no-plot"])
    assert rc == 3


def test_converge_cli_table_and_slope(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    out = tmp_path / "cv"
    assert main(["converge", "--problem", prob, "--out", str(out),
                 "--no-plot"]) == 0
    lines = (out / "converge.csv").read_text().splitlines()
    assert lines[0] == "delta,err_P,err_S"
    assert len(lines) == 5
    deltas = [float(l.split(",")[0]) for l in lines[1:]]
    assert deltas == [0.1, 0.05, 0.025, 0.0125]
    errs = [float(l.split(",")[1]) for l in lines[1:]]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_lq_cli_round_trip(tmp_path):
    prob = _write(tmp_path, "lq.json", LQ)
    out = tmp_path / "g"
    assert main(["lq-synth", "--problem", prob, "--eta", "0.0125",
                 "--out", str(out), "--no-plot"]) == 0
    lines = (out / "gains.csv").read_text().splitlines()
    assert lines[0] == "t,row,col,K_value,P_value"
    out2 = tmp_path / "c"
    assert main(["lq-eval", "--problem", prob, "--eta", "0.0125", "--d", "4",
                 "--paths", "200", "--seed", "7", "--out", str(out2),
                 "--no-plot"]) == 0
    cost = json.loads((out2 / "cost.json").read_text())
    assert set(cost) == {"mean", "stderr", "paths", "seed", "gain_scale"}
    assert cost["paths"] == 200


def test_figures_are_emitted_and_listed(tmp_path):
    prob = _write(tmp_path, "p.json", MED)
    out = tmp_path / "fig"
    assert main(["solve-continuous", "--problem", prob, "--eta", "0.0125",
                 "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert "kernel.png" in manifest["outputs"]
    assert (out / "kernel.png").stat().st_size > 0
    # nothing on disk that the manifest does not claim
    listed = set(manifest["outputs"]) | {"manifest.json"}
    assert set(os.listdir(out)) == listed

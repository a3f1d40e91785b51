import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from chb_control.cli import main
from chb_control.config import ConfigError, load_config, parse_config
from chb_control.mesh import StructuredGrid, write_scalar_csv
from chb_control.output import code_version, read_control_csv, read_history_csv

SMALL = {
    "grid": {"nx": 7, "ny": 7, "lx": 4.0, "ly": 4.0},
    "params": {"proliferation_P": 1.0, "apoptosis_A": 0.2, "chemotaxis_chi": 0.5, "final_time_T": 0.05},
    "solver": {"dt": 0.01, "velocity_enabled": False},
    "initial": {"phi0": {"disc": {"center": [2.0, 2.0], "radius": 1.0, "width": 0.5}}},
    "objective": {"alpha0": 1.0, "alpha1": 1.0, "kappa": 0.1, "phi_f": -1.0, "phi_d": -1.0},
    "control": {"lower": 0.0, "upper": 5.0},
    "optimizer": {"max_iter": 10},
    "verify": {"n_samples": 2},
    "certify": {"n_pairs": 3, "n_sobolev_starts": 2},
    "output": {"every": 2},
    "seed": 3,
}


def _write(tmp_path, cfg, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _merge(base, **blocks):
    out = json.loads(json.dumps(base))
    for block, vals in blocks.items():
        if isinstance(vals, dict):
            out.setdefault(block, {}).update(vals)
        else:
            out[block] = vals
    return out


@pytest.fixture
def small(tmp_path):
    return _write(tmp_path, SMALL)


def _run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


# -- configuration ------------------------------------------------------------------

def test_config_round_trip(tmp_path, small):
    cfg = load_config(small)
    again = parse_config(yaml.safe_load(cfg.dump()), tmp_path)
    assert again.to_dict() == cfg.to_dict()
    assert cfg.data["solver"]["nonlinear_mode"] == "stabilized_linear"    # default filled in


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"solver": {"dt": 0.01, "tolerance": 1}})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"extras": 1})
    with pytest.raises(ConfigError, match="params"):
        parse_config({"params": {"epsilon": 0.5}})
    with pytest.raises(ConfigError, match="h.variant"):
        parse_config({"h": {"variant": "cubic"}})
    with pytest.raises(ConfigError, match="control"):
        parse_config({"control": {"lower": 2.0, "upper": 1.0}})


def test_config_missing_field_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match=r"initial\.phi0.*not found"):
        parse_config({"initial": {"phi0": "nowhere.csv"}}, tmp_path)


def test_config_reads_csv_fields(tmp_path):
    g = StructuredGrid(5, 5)
    phi0 = np.linspace(-1, 1, g.n_nodes)
    write_scalar_csv(tmp_path / "phi0.csv", g, phi0)
    cfg = parse_config({"grid": {"nx": 5, "ny": 5}, "initial": {"phi0": "phi0.csv"}}, tmp_path)
    assert np.array_equal(cfg.phi0(), phi0)
    with pytest.raises(ConfigError, match="initial.phi0"):
        parse_config({"grid": {"nx": 6, "ny": 5}, "initial": {"phi0": "phi0.csv"}}, tmp_path)


# -- exit codes ----------------------------------------------------------------------

def test_exit_code_config_errors(tmp_path, small, capsys):
    assert _run("simulate", str(tmp_path / "missing.yaml"), tmp_path / "o") == 2
    bad = _write(tmp_path, _merge(SMALL, solver={"dt": 0.01, "typo": 1}), "bad.yaml")
    assert _run("simulate", bad, tmp_path / "o") == 2
    assert "unknown key" in capsys.readouterr().err
    assert _run("certify", small, tmp_path / "empty") == 2
    assert "missing_artifacts" in capsys.readouterr().err
    assert _run("optimize", small, tmp_path / "fresh", "--resume") == 2


def test_exit_code_solver_failure(tmp_path):
    cfg = _merge(SMALL, solver={"nonlinear_mode": "newton", "newton_max_iter": 1, "newton_tol": 1e-14})
    assert _run("simulate", _write(tmp_path, cfg), tmp_path / "o") == 3


def test_exit_code_verification_failure(tmp_path, capsys):
    cfg = _merge(SMALL, verify={"n_samples": 2, "state_order": 5.0})
    assert _run("verify", _write(tmp_path, cfg), tmp_path / "o", "--check", "taylor-state") == 4
    assert "taylor-state: FAIL" in capsys.readouterr().out
    report = json.loads((tmp_path / "o" / "verify_report.json").read_text())
    assert report["passed"] is False


def test_module_entry_point(tmp_path, small):
    r = subprocess.run([sys.executable, "-m", "chb_control", "simulate", "--config", small, "--out",
                        str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "chb_control", "simulate", "--config", small, "--mode", "sideways"],
                       capture_output=True, text=True)
    assert r.returncode == 2


# -- simulate ------------------------------------------------------------------------

def _tree(d: Path):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simulate_byte_identical_reruns(tmp_path, small):
    out = tmp_path / "o"
    assert _run("simulate", small, out, "--mode", "full") == 0
    first = _tree(out)
    assert _run("simulate", small, out, "--mode", "full") == 0
    assert _tree(out) == first


def test_simulate_outputs_and_manifest(tmp_path, small):
    out = tmp_path / "o"
    assert _run("simulate", small, out) == 0
    traj = out / "trajectory"
    m = json.loads((traj / "manifest.json").read_text())
    assert m["kind"] == "state" and m["code_version"] == code_version()
    assert m["config"]["grid"]["nx"] == 7 and m["n_steps"] == 5
    assert "fields/phi_00005.csv" in m["files"] and "fields/phi_00001.csv" not in m["files"]
    for fn in m["files"]:
        assert (traj / fn).is_file()
    header = (traj / "timeseries.csv").read_text().splitlines()[0].split(",")
    assert header == m["timeseries_columns"] and len(header) == 6


def test_simulate_pure_phase(tmp_path):
    cfg = _merge(SMALL, initial={"phi0": -1.0})
    out = tmp_path / "o"
    assert _run("simulate", _write(tmp_path, cfg), out, "--mode", "full") == 0
    phi = np.loadtxt(out / "trajectory" / "fields" / "phi_00005.csv", delimiter=",", skiprows=1)[:, 2]
    assert np.max(np.abs(phi + 1.0)) <= 1e-12


# -- optimize ------------------------------------------------------------------------

def test_optimize_outputs(tmp_path, small):
    out = tmp_path / "o"
    assert _run("optimize", small, out) == 0
    assert (out / "history.csv").read_text().splitlines()[0] == "iter,J,residual,step"
    hist = read_history_csv(out / "history.csv")
    J = [r["J"] for r in hist]
    assert all(b <= a for a, b in zip(J, J[1:]))
    cfg = load_config(small)
    sc = cfg.scheme()
    u = read_control_csv(out / "control.csv", sc.grid, sc.n_steps)
    assert np.all(u >= 0.0) and np.all(u <= 5.0)
    for sub, kind in (("state", "state"), ("costate", "costate")):
        assert json.loads((out / sub / "manifest.json").read_text())["kind"] == kind
    summary = json.loads((out / "optimize_manifest.json").read_text())["summary"]
    assert summary["iterations"] == hist[-1]["iter"]
    assert "projection_fixed_point_residual" in summary


def test_optimize_zero_tracking_projects_origin(tmp_path):
    # with step0 * kappa = 1 the first projected step lands on P(0)
    cfg = _merge(SMALL, objective={"alpha0": 0.0, "alpha1": 0.0, "kappa": 1.0},
                 control={"lower": 0.2, "upper": 1.0, "initial": 0.7})
    out = tmp_path / "o"
    assert _run("optimize", _write(tmp_path, cfg), out) == 0
    hist = read_history_csv(out / "history.csv")
    assert len(hist) <= 2
    sc = load_config(_write(tmp_path, cfg)).scheme()
    assert np.allclose(read_control_csv(out / "control.csv", sc.grid, sc.n_steps), 0.2, atol=1e-12)


def test_optimize_resume_matches_uninterrupted(tmp_path):
    full_cfg = _write(tmp_path, SMALL, "full.yaml")
    short_cfg = _write(tmp_path, _merge(SMALL, optimizer={"max_iter": 3}), "short.yaml")
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("optimize", full_cfg, a) == 0
    assert _run("optimize", short_cfg, b) == 0
    assert len(read_history_csv(b / "history.csv")) == 4
    assert _run("optimize", full_cfg, b, "--resume") == 0
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    assert (a / "control.csv").read_bytes() == (b / "control.csv").read_bytes()


# -- verify, certify, constants ---------------------------------------------------------

def test_verify_passes_and_writes_linearized(tmp_path, small, capsys):
    out = tmp_path / "o"
    assert _run("verify", small, out) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["gradient: PASS", "taylor-state: PASS", "taylor-costate: PASS", "duality: PASS"]
    assert json.loads((out / "linearized" / "manifest.json").read_text())["kind"] == "linearized"


def test_certify_provenance(tmp_path):
    cfg = _merge(SMALL, certify={"n_pairs": 3, "n_sobolev_starts": 2, "L1": 0.05})
    path, out = _write(tmp_path, cfg), tmp_path / "o"
    assert _run("optimize", path, out) == 0
    assert _run("certify", path, out) == 0
    cert = yaml.safe_load((out / "certificate.yaml").read_text())
    assert cert["constants"]["L1"]["provenance"] == "configured"
    assert cert["constants"]["L3"]["provenance"] == "estimated"
    assert cert["constants"]["theta"]["provenance"] == "derived"
    assert {"G1", "G2", "U1", "U2"} <= set(cert["flags"])
    assert cert["label"].startswith("heuristic")
    assert cert["uniqueness"]["T_bound"] > 0


def test_certify_smoothed_potential(tmp_path):
    cfg = _merge(SMALL, potential={"kind": "smoothed", "delta": 1.1})
    path, out = _write(tmp_path, cfg), tmp_path / "o"
    assert _run("optimize", path, out) == 0
    assert _run("certify", path, out) == 0
    cert = yaml.safe_load((out / "certificate.yaml").read_text())
    assert cert["norms"]["psi_third_bound"] == pytest.approx(6 * 2.1, rel=1e-15)


def test_estimate_constants(tmp_path, small):
    out = tmp_path / "o"
    assert _run("estimate-constants", small, out) == 0
    c = yaml.safe_load((out / "constants.yaml").read_text())
    assert c["label"] == "estimated lower bounds"
    assert {"L1", "L3", "c_p", "c_q"} <= set(c["constants"])
    assert all(v["provenance"] == "estimated" for v in c["constants"].values())

import json
import os
import warnings

import numpy as np
import pytest

from fbflow.cli import (
    ConfigError,
    ExprError,
    compile_expression,
    expression_eval,
    main,
    validate_config,
)


# ----------------------------------------------------------------------
# expression grammar


def test_expression_polynomial_exact():
    assert expression_eval("y^3*(1-y^2)^3", 0.0, 0.5) == 0.052734375


def test_expression_sin_pi():
    assert abs(expression_eval("sin(pi*y)", 0.0, 1.0)) <= 1e-15


def test_expression_truncated_reports_position():
    with pytest.raises(ExprError, match="position 2"):
        expression_eval("x*", 0.0, 0.0)


def test_expression_unknown_name():
    with pytest.raises(ExprError, match="unknown name 'foo'"):
        expression_eval("foo(x)", 0.0, 0.0)


def test_expression_bad_character_position():
    with pytest.raises(ExprError, match="'@' at position 2"):
        expression_eval("x @ y", 0.0, 0.0)


def test_expression_unbalanced_paren():
    with pytest.raises(ExprError, match="expected '\\)'"):
        expression_eval("(x+1", 0.0, 0.0)


def test_expression_power_binds_right():
    assert expression_eval("2^3^2", 0.0, 0.0) == 512.0
    assert expression_eval("-2^2", 0.0, 0.0) == -4.0


def test_expression_constants_and_functions():
    assert expression_eval("exp(x)*cos(y)", 1.0, 0.0) == pytest.approx(np.e)
    assert expression_eval("e", 0.0, 0.0) == pytest.approx(np.e)


def test_expression_arrays_broadcast():
    f = compile_expression("x*y + 1")
    out = f(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert np.array_equal(out, [4.0, 9.0])


# ----------------------------------------------------------------------
# config schema


def _linear_cfg():
    return {
        "kind": "linear-shear",
        "domain": {"x0": 0.0, "x1": 1.0},
        "grid": {"nx": 17, "ny": 17},
        "data": {"f": "0"},
    }


def test_config_unknown_key_named():
    cfg = _linear_cfg()
    cfg["bogus"] = 1
    with pytest.raises(ConfigError, match="unknown config key: bogus"):
        validate_config(cfg)


def test_config_unknown_nested_key_named():
    cfg = _linear_cfg()
    cfg["grid"]["spacing"] = 0.1
    with pytest.raises(ConfigError, match="grid.spacing"):
        validate_config(cfg)


def test_config_missing_grid_named():
    cfg = _linear_cfg()
    del cfg["grid"]
    with pytest.raises(ConfigError, match="missing required field: grid"):
        validate_config(cfg)


def test_config_bad_kind():
    with pytest.raises(ConfigError, match="kind"):
        validate_config({"kind": "spectral"})


def test_config_general_needs_coefficients():
    cfg = _linear_cfg()
    cfg["kind"] = "linear-general"
    with pytest.raises(ConfigError, match="coefficients"):
        validate_config(cfg)


# ----------------------------------------------------------------------
# pipelines through main()


def _write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_zero_data_linear_run(tmp_path):
    p = _write_cfg(tmp_path, _linear_cfg())
    out = tmp_path / "out"
    assert main(["solve-linear", "--config", p, "--out", str(out)]) == 0
    lines = (out / "solution.csv").read_text().splitlines()
    assert lines[0].startswith("# config:")
    assert len(lines[0]) == len("# config:") + 64
    assert lines[1] == "x,y,value"
    values = [float(row.split(",")[2]) for row in lines[2:]]
    assert max(abs(v) for v in values) == 0.0
    report = json.loads((out / "report.json").read_text())
    assert lines[0] == "# config:" + report["config_hash"]


def test_missing_grid_exits_one(tmp_path, capsys):
    cfg = _linear_cfg()
    del cfg["grid"]
    p = _write_cfg(tmp_path, cfg)
    assert main(["solve-linear", "--config", p]) == 1
    assert "grid" in capsys.readouterr().err


def test_missing_config_file_exits_one(tmp_path, capsys):
    assert main(["solve-linear", "--config", str(tmp_path / "nope.json")]) == 1
    assert "config error" in capsys.readouterr().err


def test_subcommand_kind_mismatch(tmp_path, capsys):
    p = _write_cfg(tmp_path, _linear_cfg())
    assert main(["solve-nonlinear", "--config", p]) == 1
    assert "does not match subcommand" in capsys.readouterr().err


def test_expression_error_surfaces_as_config_error(tmp_path, capsys):
    cfg = _linear_cfg()
    cfg["data"]["f"] = "x*"
    p = _write_cfg(tmp_path, cfg)
    assert main(["solve-linear", "--config", p, "--out", str(tmp_path / "o")]) == 1
    assert "position 2" in capsys.readouterr().err


def test_general_coefficients_run(tmp_path):
    cfg = _linear_cfg()
    cfg["kind"] = "linear-general"
    cfg["data"]["f"] = "sin(pi*x)*y*(1-y^2)"
    cfg["coefficients"] = {"alpha": "1 + 0.1*y^2", "gamma1": "0.05*y", "gamma2": "0"}
    p = _write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["solve-linear", "--config", p, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["solution_l2"] > 0
    assert report["residual_inf"] <= 1e-9


def test_alpha_sign_violation_is_config_error(tmp_path, capsys):
    cfg = _linear_cfg()
    cfg["kind"] = "linear-general"
    cfg["coefficients"] = {"alpha": "-1"}
    p = _write_cfg(tmp_path, cfg)
    assert main(["solve-linear", "--config", p, "--out", str(tmp_path / "o")]) == 1
    assert "coefficients" in capsys.readouterr().err


def test_decompose_corner_source(tmp_path):
    cfg = {
        "kind": "decompose",
        "domain": {"x0": 0.0, "x1": 1.0},
        "grid": {"nx": 129, "ny": 129, "grading": {"kind": "corner", "q": 1.0, "fraction": 0.25}},
    }
    p = _write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["decompose", "--config", p, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["c0"] == pytest.approx(1.0, abs=1e-10)
    assert abs(report["c1"]) <= 1e-10
    assert (out / "u_reg.csv").exists()


def test_profile_run_writes_table(tmp_path):
    cfg = {"kind": "profiles", "k": 1}
    p = _write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["profiles", "--config", p, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["k"] == 1
    assert report["ode_residual"] <= 1e-7
    assert abs(report["G_right_end"]) <= 1e-6
    lines = (out / "profile1.csv").read_text().splitlines()
    assert lines[1] == "t,G,Gprime"
    assert len(lines) > 100


def test_dual_report_both_functionals(tmp_path):
    cfg = {
        "kind": "dual",
        "domain": {"x0": 0.0, "x1": 1.0},
        "grid": {"nx": 65, "ny": 65, "grading": {"kind": "corner", "q": 1.0, "fraction": 0.25}},
        "data": {"f": "sin(pi*x)*y*(1-y^2)^2"},
    }
    p = _write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["dual", "--config", p, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    for key in ("ell0_dual", "ell0_direct", "ell1_dual", "ell1_direct"):
        assert np.isfinite(report[key])


def test_nonlinear_run_and_bitwise_rerun(tmp_path):
    cfg = {
        "kind": "nonlinear",
        "domain": {"x0": 0.0, "x1": 1.0},
        "grid": {"nx": 33, "ny": 33},
        "data": {"f": "0.001*sin(pi*x)*(1-y^2)^2*(0.3+y)"},
        "tolerances": {"eta": 1000.0},
    }
    p = _write_cfg(tmp_path, cfg)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = main(["solve-nonlinear", "--config", p, "--out", str(out), "--reference-mode"])
        assert rc == 0
        outs.append(out)
    report = json.loads((outs[0] / "report.json").read_text())
    assert report["status"] == "converged"
    assert report["iterations"] <= 12
    records = [json.loads(row) for row in (outs[0] / "iteration.jsonl").read_text().splitlines()]
    assert [r["n"] for r in records] == list(range(1, report["iterations"] + 1))
    for name in ("solution.csv", "report.json", "iteration.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_nonlinear_invertibility_failure_exits_two(tmp_path, capsys):
    cfg = {
        "kind": "nonlinear",
        "domain": {"x0": 0.0, "x1": 1.0},
        "grid": {"nx": 33, "ny": 33},
        "data": {"f": "0", "delta0": "-1.2*y*(1-y^2)"},
        "tolerances": {"eta": 1000.0},
    }
    p = _write_cfg(tmp_path, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = main(["solve-nonlinear", "--config", p, "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "numerical failure" in capsys.readouterr().err


def test_verify_subset_runs(tmp_path):
    cfg = {"kind": "verify", "studies": ["symmetry", "linear"], "levels": [33, 49, 65]}
    p = _write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["verify", "--config", p, "--out", str(out)]) == 0
    study = json.loads((out / "study_linear.json").read_text())
    assert study["passed"]
    assert study["orders"]["l2"] >= 1.0
    assert (out / "study_linear.csv").exists()
    assert json.loads((out / "study_symmetry.json").read_text())["passed"]


def test_verify_unknown_study_rejected(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"kind": "verify", "studies": ["spectra"]})
    assert main(["verify", "--config", p]) == 1
    assert "unknown study" in capsys.readouterr().err


def test_thread_cap_validation(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FBFLOW_THREADS", "abc")
    p = _write_cfg(tmp_path, {"kind": "verify", "studies": ["symmetry"]})
    assert main(["verify", "--config", p, "--out", str(tmp_path / "o")]) == 1
    assert "FBFLOW_THREADS" in capsys.readouterr().err


def test_threaded_verify_matches_serial(tmp_path, monkeypatch):
    cfg = {"kind": "verify", "studies": ["symmetry"]}
    p = _write_cfg(tmp_path, cfg)
    assert main(["verify", "--config", p, "--out", str(tmp_path / "s")]) == 0
    monkeypatch.setenv("FBFLOW_THREADS", "2")
    assert main(["verify", "--config", p, "--out", str(tmp_path / "t")]) == 0
    serial = (tmp_path / "s" / "study_symmetry.json").read_bytes()
    threaded = (tmp_path / "t" / "study_symmetry.json").read_bytes()
    assert serial == threaded

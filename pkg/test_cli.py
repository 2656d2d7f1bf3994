#!/usr/bin/env python3
"""
End-to-end tests of the command-line interface and the experiment runners.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import csv
import json

import numpy as np
import pytest
from typer.testing import CliRunner

from bench import ESTIMATE_COLUMNS, TRACE_COLUMNS, SlopeReport, draw_baseline, fit_slope, format_value, trial_setup
from config import parse_config
from errors import InsufficientPoints, InvalidParameter
from main import EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME, __version__, app
from simplex_core import RngStream

runner = CliRunner()


def write_config(tmp_path, data, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def small_estimate_config(estimators):
    at = {"sigma": 0.05, "R": 3, "c": 0.1, "n": 3}
    return {
        "seed": 11,
        "objective": {"kind": "quadratic"},
        "estimate": {
            "estimators": estimators,
            "point": at,
            "sweeps": [{"axis": "sigma", "values": [round(0.01 * i, 2) for i in range(1, 11)], "at": at}],
            "points": 1,
            "trials": 5,
        },
    }


def test_version():
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert f"simplexgrad v{__version__}" in result.stdout


def test_verify_moments_delta_star(tmp_path):
    config = write_config(tmp_path, {"seed": 1, "moments": {"mixture": "delta_star", "n": 4, "repetitions": 50}})
    out = tmp_path / "out"
    result = runner.invoke(app, ["verify-moments", "--config", config, "--out", str(out)])
    assert result.exit_code == 0
    payload = json.loads((out / "moments.json").read_text(encoding="utf-8"))
    assert payload["passed"] is True
    assert payload["mc3_checked"] is True
    assert payload["theta_monotone"] is True
    assert payload["analytic"]["mu"] == pytest.approx(0.0, abs=1e-10)
    assert payload["empirical"]["repetitions"] == 50
    assert len(payload["base"]) == 4
    assert (out / "resolved_config.json").exists()


def test_verify_moments_delta_dstar_with_given_base(tmp_path):
    config = write_config(tmp_path, {"moments": {"mixture": "delta_dstar", "base": [0.2, 0.3, 0.5]}})
    out = tmp_path / "out"
    result = runner.invoke(app, ["verify-moments", "--config", config, "--out", str(out), "--quiet"])
    assert result.exit_code == 0
    payload = json.loads((out / "moments.json").read_text(encoding="utf-8"))
    assert payload["mc3_checked"] is False
    assert payload["theta_monotone"] is None
    assert payload["analytic"]["gamma"] == pytest.approx(50.0 / 3.0)


def test_invalid_config_exits_before_writing(tmp_path):
    config = write_config(tmp_path, {"objective": {"n": -3}})
    out = tmp_path / "out"
    result = runner.invoke(app, ["estimate", "--config", config, "--out", str(out)])
    assert result.exit_code == EXIT_CONFIG
    assert not out.exists()


def test_unknown_bundled_config(tmp_path):
    result = runner.invoke(app, ["estimate", "--config", "no_such_config", "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG


def test_seed_override_is_recorded(tmp_path):
    config = write_config(tmp_path, {"moments": {"n": 3, "repetitions": 10}})
    out = tmp_path / "out"
    result = runner.invoke(app, ["verify-moments", "--config", config, "--out", str(out), "--seed", "42"])
    assert result.exit_code == 0
    resolved = json.loads((out / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["seed"] == 42


def test_estimate_rows_and_reruns(tmp_path):
    config = write_config(tmp_path, small_estimate_config([{"kind": "ffe", "mixture": "delta_dstar"}]))
    first, second = tmp_path / "first", tmp_path / "second"
    assert runner.invoke(app, ["estimate", "--config", config, "--out", str(first)]).exit_code == 0
    assert runner.invoke(app, ["estimate", "--config", config, "--out", str(second), "--threads", "3"]).exit_code == 0

    rows = read_rows(first / "estimates.csv")
    assert len(rows) == 10 * 5
    assert list(rows[0].keys()) == ESTIMATE_COLUMNS
    assert rows[0]["axis"] == "sigma"
    assert rows[0]["budget"] == "6"
    summary = read_rows(first / "estimates_summary.csv")
    assert len(summary) == 10
    assert all(float(r["variance_scalar"]) > 0 for r in summary)
    for name in ("estimates.csv", "estimates_summary.csv", "resolved_config.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_estimate_variance_grows_with_noise(tmp_path):
    config = write_config(tmp_path, small_estimate_config([{"kind": "fd_random"}, {"kind": "fd_standard"}]))
    out = tmp_path / "out"
    assert runner.invoke(app, ["estimate", "--config", config, "--out", str(out)]).exit_code == 0
    summary = read_rows(out / "estimates_summary.csv")
    fd_standard = [float(r["variance_scalar"]) for r in summary if r["estimator"] == "fd_standard"]
    assert fd_standard[-1] > fd_standard[0]
    assert {r["mixture"] for r in summary} == {""}


def test_optimize_with_no_iterations_writes_headers(tmp_path):
    config = write_config(
        tmp_path,
        {"objective": {"kind": "quadratic", "n": 3}, "optimize": {"schedule": {"max_iter": 0}, "trials": 2}},
    )
    out = tmp_path / "out"
    result = runner.invoke(app, ["optimize", "--config", config, "--out", str(out)])
    assert result.exit_code == 0
    header = (out / "trace.csv").read_text(encoding="utf-8")
    assert header == ",".join(TRACE_COLUMNS + ["p_1", "p_2", "p_3"]) + "\n"
    assert (out / "trace_mean.csv").read_text(encoding="utf-8") == "k,trials,objective,criterion,oracle_calls\n"


def test_optimize_writes_traces(tmp_path):
    config = write_config(
        tmp_path,
        {
            "seed": 3,
            "objective": {"kind": "quadratic", "n": 4, "sigma": 0.01},
            "optimize": {
                "algorithm": "mdsa",
                "set": {"kind": "kl_ball", "radius": 0.1},
                "schedule": {"a": 0.3, "alpha_exp": 1.0, "b": 0.1, "theta_exp": 0.25, "beta_exp": 0.0, "R0": 3, "max_iter": 6, "probes": 2},
                "p_init": [0.4, 0.2, 0.2, 0.2],
                "trials": 2,
            },
        },
    )
    out = tmp_path / "out"
    result = runner.invoke(app, ["optimize", "--config", config, "--out", str(out), "--threads", "2"])
    assert result.exit_code == 0
    rows = read_rows(out / "trace.csv")
    assert len(rows) == 2 * 6
    assert {r["algorithm"] for r in rows} == {"mdsa"}
    assert all(r["fw_gap"] == "" for r in rows)
    assert [int(r["k"]) for r in rows[:6]] == [1, 2, 3, 4, 5, 6]
    first = [float(rows[0][f"p_{i}"]) for i in range(1, 5)]
    assert first == pytest.approx([0.4, 0.2, 0.2, 0.2])
    mean = read_rows(out / "trace_mean.csv")
    assert len(mean) == 6
    assert all(r["trials"] == "2" for r in mean)


def test_optimize_draws_a_baseline_per_trial(tmp_path):
    config = write_config(
        tmp_path,
        {
            "seed": 4,
            "objective": {"kind": "rosenbrock", "n": 6, "sigma": 0.01, "accepts_off_simplex": True},
            "optimize": {
                "algorithm": "mdsa",
                "set": {"kind": "kl_ball", "baseline_kind": "shifted_uniform", "radius": 100.0},
                "schedule": {"a": 0.005, "alpha_exp": 1.0, "b": 0.1, "theta_exp": 0.25, "beta_exp": 0.0, "R0": 2, "max_iter": 2, "probes": 1},
                "trials": 3,
            },
        },
    )
    out = tmp_path / "out"
    result = runner.invoke(app, ["optimize", "--config", config, "--out", str(out)])
    assert result.exit_code == 0
    rows = read_rows(out / "trace.csv")
    starts = [np.array([float(rows[2 * t][f"p_{i}"]) for i in range(1, 7)]) for t in range(3)]
    for t, p0 in enumerate(starts):
        assert p0 == pytest.approx(draw_baseline(6, RngStream(4).split(t, 0, 0)))
        assert p0.sum() == pytest.approx(1.0)
        assert p0.max() / p0.min() <= 2.0
    assert not np.allclose(starts[0], starts[1])
    assert not np.allclose(starts[1], starts[2])


def test_shifted_uniform_baseline_needs_a_stream():
    cfg = parse_config({"objective": {"n": 5}, "optimize": {"set": {"kind": "kl_ball", "baseline_kind": "shifted_uniform"}}})
    with pytest.raises(InvalidParameter):
        trial_setup(cfg.optimize, cfg.objective)
    sets, p0 = trial_setup(cfg.optimize, cfg.objective, RngStream(0))
    assert sets[0].baseline == pytest.approx(p0)
    assert p0.min() >= 1 / 9 - 1e-12 and p0.max() <= 1 / 3 + 1e-12


def test_aborted_run_exits_with_partial_trace(tmp_path):
    config = write_config(
        tmp_path,
        {"objective": {"kind": "quadratic", "n": 3}, "optimize": {"schedule": {"a": 1.0, "max_iter": 5, "probes": 1}}},
    )
    out = tmp_path / "out"
    result = runner.invoke(app, ["optimize", "--config", config, "--out", str(out)])
    assert result.exit_code == EXIT_RUNTIME
    assert len(read_rows(out / "trace.csv")) == 1


def test_bench_rejects_short_sweep(tmp_path):
    config = write_config(tmp_path, {"bench": {"sweeps": [{"axis": "sigma", "values": [0.01]}]}})
    result = runner.invoke(app, ["bench", "--config", config, "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_RUNTIME


def bench_config(expected_slope):
    at = {"sigma": 0.5, "R": 3, "c": 0.1, "n": 3}
    return {
        "seed": 2,
        "objective": {"kind": "quadratic"},
        "bench": {
            "sweeps": [{"axis": "sigma", "values": [0.25, 0.5, 1.0, 2.0, 4.0], "at": at}],
            "points": 4,
            "trials": 50,
            "expected": {"sigma": expected_slope},
            "tolerance": {"sigma": 0.3},
            "ordering": {"factor": 10.0},
        },
    }


def test_bench_noise_slope(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["bench", "--config", write_config(tmp_path, bench_config(2.0)), "--out", str(out)])
    assert result.exit_code == 0
    report = json.loads((out / "bench.json").read_text(encoding="utf-8"))
    assert report["passed"] is True
    (slope,) = report["slopes"]
    assert slope["axis"] == "sigma"
    assert slope["fitted_slope"] == pytest.approx(2.0, abs=0.3)
    assert report["ordering"]["estimators"] == ["ffe/delta_dstar", "sfe/delta_star", "ffe/delta_star"]
    assert set(report["ordering"]["ratios"]) == {"sfe/delta_star", "ffe/delta_star"}
    assert report["ordering"]["passed"] is True
    assert all(r >= 10.0 for r in report["ordering"]["ratios"].values())
    assert len(read_rows(out / "bench_sigma.csv")) == 5


def test_bench_failed_check_exit_code(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["bench", "--config", write_config(tmp_path, bench_config(-2.0)), "--out", str(out)])
    assert result.exit_code == EXIT_CHECK
    assert json.loads((out / "bench.json").read_text(encoding="utf-8"))["passed"] is False


def test_fit_slope():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    report = fit_slope("R", xs, 3.0 / xs)
    assert report.fitted_slope == pytest.approx(-1.0)
    assert report.r_squared == pytest.approx(1.0)
    assert report.passed is None
    report.expected, report.tolerance = -1.0, 0.3
    assert report.passed is True
    with pytest.raises(InsufficientPoints):
        fit_slope("c", [0.1, 0.2], [1.0, 2.0])
    with pytest.raises(InvalidParameter):
        fit_slope("c", [0.1, 0.2, 0.3], [1.0, 0.0, 2.0])


def test_slope_report_dict():
    d = SlopeReport("n", 2.1, 0.99, [(10.0, 1.0)], expected=2.0, tolerance=0.4).to_dict()
    assert d["passed"] is True
    assert d["points"] == [(10.0, 1.0)]


def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "true"
    assert format_value(np.int64(3)) == "3"
    assert format_value(0.1) == "0.10000000000000001"

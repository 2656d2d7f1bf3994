#!/usr/bin/env python3
"""
Tests for the Dirichlet-mixture and finite-difference gradient estimators.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import linregress

from errors import DimensionMismatch, InvalidC, InvalidReplications, OffSimplexUnsupported, WrongKind
from estimators import (
    EstimatorKind,
    EstimatorSpec,
    bias_curve,
    build_mixture_for,
    estimate,
    estimate_cfe,
    estimate_fd_random,
    estimate_fd_standard,
    estimate_ffe,
    estimate_sfe,
    quadratic_expectation,
    run_stats,
    zero_sum,
)
from mixtures import MixtureKind, build_delta_dstar, build_delta_star
from objectives import (
    MG1Config,
    ObjectiveKind,
    Oracle,
    OracleSpec,
    QuadraticOracle,
    create_oracle,
    eval_quadratic,
    quadratic_gradient,
    smooth_objective,
    with_gaussian_noise,
)
from simplex_core import ProbVector, RngStream

P3 = ProbVector([0.2, 0.3, 0.5])
C_GRID = [0.05, 0.025, 0.0125, 0.00625]


class ConstantOracle(Oracle):
    def __init__(self, n, value=3.0):
        super().__init__(OracleSpec(ObjectiveKind.CUSTOM, (n,), True, True))
        self.value = value

    def evaluate(self, x, rng):
        self._check(x)
        return self.value


class LinearOracle(Oracle):
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)
        super().__init__(OracleSpec(ObjectiveKind.CUSTOM, (self.v.size,), True, True))

    def evaluate(self, x, rng):
        return float(self.v @ self._check(x))


class RecordingOracle(Oracle):
    def __init__(self, n):
        super().__init__(OracleSpec(ObjectiveKind.CUSTOM, (n,), True, False))
        self.points = []

    def evaluate(self, x, rng):
        self.points.append(self._check(x).copy())
        return eval_quadratic(x)


def test_zero_sum_projection():
    assert zero_sum([1.0, 2.0, 3.0]) == pytest.approx([-1.0, 0.0, 1.0])
    assert zero_sum([1.0, 3.0, 5.0, 5.0, 5.0], (2, 3)) == pytest.approx([-1.0, 1.0, 0.0, 0.0, 0.0])


def test_sfe_constant_objective_within_noise():
    mix = build_delta_dstar(P3)
    c, R, k = 0.1, 4000, 3.0
    rng = RngStream(1)
    est = estimate_sfe(ConstantOracle(3, k), P3.as_array(), mix, c, R, rng)
    terms = (k / c) * mix.score(mix.sample(rng.split(0), R))
    assert est.value == pytest.approx(terms.mean(axis=0), abs=1e-9)
    se = terms.std(axis=0, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(est.value) <= 5 * se)
    assert est.budget_used == R


@pytest.mark.parametrize("kind", [EstimatorKind.FFE, EstimatorKind.CFE, EstimatorKind.FD_STANDARD, EstimatorKind.FD_RANDOM])
def test_differences_vanish_on_constant_objective(kind):
    est = estimate(EstimatorSpec(kind=kind), ConstantOracle(3), P3.as_array(), 0.1, 50, RngStream(2))
    assert np.all(est.value == 0.0)


def test_ffe_linear_objective_matches_projected_gradient():
    v = np.array([1.0, -2.0, 0.5, 4.0])
    p = ProbVector([0.1, 0.2, 0.3, 0.4])
    mix = build_delta_dstar(p)
    c, R = 0.2, 20_000
    rng = RngStream(3)
    est = estimate_ffe(LinearOracle(v), p.as_array(), mix, c, R, rng)
    x = mix.sample(rng.split(0), R) - p.as_array()
    terms = (x @ v)[:, None] * mix.gamma * x
    assert est.value == pytest.approx(terms.mean(axis=0), abs=1e-8)
    se = terms.std(axis=0, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(est.value - zero_sum(v)) <= 5 * se)
    assert est.budget_used == 2 * R
    assert est.translation == "mean"


@pytest.mark.parametrize("kind", [EstimatorKind.SFE, EstimatorKind.FFE, EstimatorKind.CFE])
def test_delta_star_is_unbiased_on_quadratic(kind):
    for raw in ([0.2, 0.3, 0.5], [0.1, 0.2, 0.3, 0.4]):
        p = ProbVector(raw)
        expected = zero_sum(quadratic_gradient(p.as_array()))
        got = zero_sum(quadratic_expectation(kind, build_delta_star(p), 0.1))
        assert got == pytest.approx(expected, abs=1e-10)


def test_central_difference_is_unbiased_on_quadratic_for_both_mixtures():
    got = zero_sum(quadratic_expectation(EstimatorKind.CFE, build_delta_dstar(P3), 0.3))
    assert got == pytest.approx(zero_sum(quadratic_gradient(P3.as_array())), abs=1e-10)


def test_forward_difference_bias_is_linear_in_c_for_delta_dstar():
    p = ProbVector([0.25, 0.75])
    mix = build_delta_dstar(p)
    target = zero_sum(quadratic_gradient(p.as_array()))
    bias = {c: zero_sum(quadratic_expectation(EstimatorKind.FFE, mix, c)) - target for c in (0.1, 0.05)}
    assert np.linalg.norm(bias[0.1]) > 1e-6
    assert bias[0.1] == pytest.approx(2 * bias[0.05], abs=1e-12)


def test_quadratic_expectation_matches_sampled_ffe():
    mix = build_delta_dstar(P3)
    c, R = 0.2, 20_000
    rng = RngStream(4)
    est = estimate_ffe(QuadraticOracle((3,)), P3.as_array(), mix, c, R, rng)
    x = mix.sample(rng.split(0), R) - P3.as_array()
    g = quadratic_gradient(P3.as_array())
    terms = ((x @ g) + c * np.sum(x * x, axis=1))[:, None] * mix.gamma * x
    se = terms.std(axis=0, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(est.value - quadratic_expectation(EstimatorKind.FFE, mix, c)) <= 5 * se)


def test_quadratic_expectation_needs_dirichlet_kind():
    with pytest.raises(WrongKind):
        quadratic_expectation(EstimatorKind.FD_RANDOM, build_delta_dstar(P3), 0.1)


def _slope(curve):
    return linregress(np.log(C_GRID), np.log(curve)).slope


@pytest.mark.slow
@pytest.mark.parametrize(
    "kind, builder, expected",
    [
        (EstimatorKind.FFE, build_delta_star, 2.0),
        (EstimatorKind.FFE, build_delta_dstar, 1.0),
        (EstimatorKind.CFE, build_delta_dstar, 2.0),
    ],
)
def test_bias_order_on_rosenbrock(kind, builder, expected):
    objective = smooth_objective(ObjectiveKind.ROSENBROCK, 3)
    curve = bias_curve(kind, objective, P3.as_array(), builder(P3), C_GRID, 20_000, RngStream(5))
    assert np.all(curve > 0)
    assert _slope(curve) == pytest.approx(expected, abs=0.3)


def test_bias_curve_rejects_finite_differences():
    objective = smooth_objective(ObjectiveKind.QUADRATIC, 3)
    with pytest.raises(WrongKind):
        bias_curve(EstimatorKind.FD_STANDARD, objective, P3.as_array(), build_delta_dstar(P3), C_GRID, 10, RngStream(0))


def test_cfe_needs_off_simplex_oracle():
    oracle = create_oracle(ObjectiveKind.MG1, mg1=MG1Config(n_support=3, horizon=10))
    with pytest.raises(OffSimplexUnsupported):
        estimate_cfe(oracle, P3.as_array(), build_delta_dstar(P3), 0.1, 5, RngStream(0))


def test_cfe_mirror_points_leave_simplex_beyond_c_cap():
    mix = build_delta_dstar(P3)
    assert mix.c_cap == pytest.approx(0.25)
    inside = RecordingOracle(3)
    estimate_cfe(inside, P3.as_array(), mix, 0.2, 200, RngStream(6))
    assert np.all(np.array(inside.points) >= -1e-12)
    outside = RecordingOracle(3)
    estimate_cfe(outside, P3.as_array(), mix, 0.9, 200, RngStream(6))
    points = np.array(outside.points)
    assert np.any(points < 0)
    assert np.allclose(points.sum(axis=1), 1.0)


def test_fd_standard_on_quadratic_is_exact_plus_curvature():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    c, R_p = 0.05, 3
    est = estimate_fd_standard(QuadraticOracle((4,)), p, c, R_p, RngStream(7))
    curvature = np.array([np.sum((np.eye(4)[i] - p) ** 2) for i in range(4)])
    assert est.value == pytest.approx(quadratic_gradient(p) + c * curvature, abs=1e-9)
    assert est.R == 4 * R_p
    assert est.budget_used == 2 * 4 * R_p
    assert est.translation == "weighted"


def test_fd_standard_symmetric_at_center():
    n = 5
    est = estimate_fd_standard(QuadraticOracle((n,)), np.full(n, 1.0 / n), 0.1, 1, RngStream(8))
    assert np.allclose(est.value, est.value[0])
    assert zero_sum(est.value) == pytest.approx(np.zeros(n), abs=1e-12)


def test_fd_random_expectation_matches_fd_standard():
    n, c, R = 4, 0.05, 20_000
    p = np.array([0.1, 0.2, 0.3, 0.4])
    oracle = QuadraticOracle((n,))
    exact = estimate_fd_standard(oracle, p, c, 1, RngStream(30)).value
    sampled = estimate_fd_random(oracle, p, c, R, RngStream(31)).value
    # each coordinate is picked with probability 1/n and scaled by n
    se = n * np.abs(exact) * np.sqrt((1.0 / n) * (1.0 - 1.0 / n) / R)
    assert np.all(np.abs(sampled - exact) <= 5 * se + 1e-12)


def test_fd_standard_noise_variance_law():
    n, sigma, c, R_p = 5, 0.1, 0.05, 4
    oracle = with_gaussian_noise(QuadraticOracle((n,)), sigma)
    points = [np.full(n, 1.0 / n), np.array([0.1, 0.15, 0.2, 0.25, 0.3])]
    stats = run_stats(EstimatorSpec(kind=EstimatorKind.FD_STANDARD), oracle, points, c, R_p, 400, RngStream(32))
    R = n * R_p
    assert stats.variance_scalar == pytest.approx(2 * n**2 * sigma**2 / (c**2 * R), rel=0.1)


def test_fd_random_single_replication_touches_one_coordinate():
    est = estimate_fd_random(QuadraticOracle((4,)), np.array([0.1, 0.2, 0.3, 0.4]), 0.1, 1, RngStream(9))
    assert np.count_nonzero(est.value) == 1
    assert est.budget_used == 2


@pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5])
def test_invalid_perturbation_size(c):
    with pytest.raises(InvalidC):
        estimate(EstimatorSpec(), QuadraticOracle((3,)), P3.as_array(), c, 5, RngStream(0))


@pytest.mark.parametrize("R", [0, -3, 1.5])
def test_invalid_replications(R):
    with pytest.raises(InvalidReplications):
        estimate(EstimatorSpec(kind=EstimatorKind.FD_RANDOM), QuadraticOracle((3,)), P3.as_array(), 0.1, R, RngStream(0))


def test_mixture_built_for_another_point_is_rejected():
    with pytest.raises(DimensionMismatch):
        estimate_ffe(QuadraticOracle((3,)), [0.3, 0.3, 0.4], build_delta_dstar(P3), 0.1, 5, RngStream(0))


def test_estimator_spec_labels_and_validation():
    assert EstimatorSpec().label == "ffe/delta_dstar"
    assert EstimatorSpec(kind="sfe", mixture="delta_star").label == "sfe/delta_star"
    assert EstimatorSpec(kind="fd_random").label == "fd_random"
    assert build_mixture_for(EstimatorSpec(kind="fd_standard"), P3.as_array()) is None
    with pytest.raises(ValidationError):
        EstimatorSpec(kind="ffe", step=0.1)
    with pytest.raises(ValidationError):
        EstimatorSpec(c_margin=1.0)


def test_block_mixture_for_two_blocks():
    p = np.array([0.2, 0.3, 0.5, 0.1, 0.2, 0.3, 0.4])
    mix = build_mixture_for(EstimatorSpec(), p, (3, 4))
    assert mix.block_dims == (3, 4)
    est = estimate(EstimatorSpec(), QuadraticOracle((3, 4)), p, 0.1, 20, RngStream(10), mix=mix)
    assert est.value.shape == (7,)


@pytest.mark.parametrize("kind", list(EstimatorKind))
def test_results_do_not_depend_on_workers(kind):
    oracle = with_gaussian_noise(QuadraticOracle((3,)), 0.1)
    spec = EstimatorSpec(kind=kind)
    serial = estimate(spec, oracle, P3.as_array(), 0.1, 20, RngStream(11))
    threaded = estimate(spec, oracle, P3.as_array(), 0.1, 20, RngStream(11), workers=4)
    assert np.array_equal(serial.value, threaded.value)


def test_run_stats_deterministic_estimator_has_zero_variance():
    stats = run_stats(
        EstimatorSpec(kind=EstimatorKind.FD_STANDARD),
        QuadraticOracle((3,)),
        [P3.as_array(), [0.4, 0.4, 0.2]],
        0.1,
        2,
        4,
        RngStream(12),
    )
    assert stats.variance_scalar == pytest.approx(0.0, abs=1e-20)
    assert stats.trials == 4
    assert len(stats.per_point_variances) == 2
    assert stats.budget_per_trial == 2 * 3 * 2


def test_run_stats_noise_variance_shrinks_with_replications():
    oracle = with_gaussian_noise(QuadraticOracle((3,)), 0.05)
    spec = EstimatorSpec(kind=EstimatorKind.FD_RANDOM)
    few = run_stats(spec, oracle, [P3.as_array()], 0.05, 5, 200, RngStream(13))
    many = run_stats(spec, oracle, [P3.as_array()], 0.05, 50, 200, RngStream(13))
    assert many.variance_scalar < few.variance_scalar / 4


def test_run_stats_needs_two_trials():
    with pytest.raises(InvalidReplications):
        run_stats(EstimatorSpec(), QuadraticOracle((3,)), [P3.as_array()], 0.1, 5, 1, RngStream(0))


def test_run_stats_is_reproducible():
    oracle = with_gaussian_noise(QuadraticOracle((3,)), 0.05)
    spec = EstimatorSpec(kind=EstimatorKind.SFE, mixture=MixtureKind.DELTA_STAR)
    a = run_stats(spec, oracle, [P3.as_array()], 0.05, 10, 5, RngStream(14))
    b = run_stats(spec, oracle, [P3.as_array()], 0.05, 10, 5, RngStream(14))
    assert a.variance_scalar == b.variance_scalar
    assert np.array_equal(a.mean_estimate, b.mean_estimate)

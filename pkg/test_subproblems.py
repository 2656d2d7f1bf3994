#!/usr/bin/env python3
"""
Tests for the uncertainty sets, the Frank-Wolfe and prox subproblems, and the LP solver.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import math

import numpy as np
import pytest
from scipy.special import rel_entr, softmax

from errors import (
    DimensionMismatch,
    DimensionTooSmall,
    Infeasible,
    InvalidParameter,
    LPNumericalFailure,
    NonPositiveIterate,
    SupportViolation,
)
from lp_solver import solve_lp
from simplex_core import DirichletParam, RngStream, sample_dirichlet_many
from subproblems import (
    ProxConfig,
    SetKind,
    box_moment_set,
    fw_gap,
    fw_linear_min,
    kl_ball,
    kl_div,
    md_prox,
    moment_set_around,
    prox_kkt,
    simplex_set,
    solve_prox,
)

SUPPORT = np.array([1.0, 2.0, 3.0])


def simplex_grid(step):
    """All points of the 3-simplex on a regular grid."""
    N = int(round(1.0 / step))
    i, j = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")
    keep = i + j <= N
    i, j = i[keep], j[keep]
    return np.stack([i, j, N - i - j], axis=1) / N


# linear programs


def test_lp_two_constraints():
    res = solve_lp([-1.0, -1.0], A_ub=[[1.0, 2.0], [3.0, 1.0]], b_ub=[4.0, 6.0])
    assert res.x == pytest.approx([1.6, 1.2])
    assert res.objective == pytest.approx(-2.8)


def test_lp_equality_picks_cheapest_vertex():
    res = solve_lp([1.0, 2.0, 3.0], A_eq=[[1.0, 1.0, 1.0]], b_eq=[1.0])
    assert res.x == pytest.approx([1.0, 0.0, 0.0])
    assert res.objective == pytest.approx(1.0)


def test_lp_drops_redundant_rows():
    res = solve_lp([1.0, 2.0], A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 2.0])
    assert res.x == pytest.approx([1.0, 0.0])


def test_lp_infeasible():
    with pytest.raises(Infeasible):
        solve_lp([1.0], A_ub=[[1.0]], b_ub=[-1.0])


def test_lp_unbounded():
    with pytest.raises(LPNumericalFailure):
        solve_lp([-1.0, 0.0], A_ub=[[0.0, 1.0]], b_ub=[1.0])


def test_lp_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_lp([1.0, 1.0], A_ub=[[1.0, 1.0, 1.0]], b_ub=[1.0])


# sets


def test_set_constructors_validate():
    with pytest.raises(DimensionTooSmall):
        simplex_set(1)
    with pytest.raises(InvalidParameter):
        box_moment_set([SUPPORT], 2.5, 1.5)
    with pytest.raises(Infeasible):
        box_moment_set([SUPPORT], 5.0, 6.0)
    with pytest.raises(InvalidParameter):
        kl_ball([0.0, 1.0], 0.1)
    with pytest.raises(InvalidParameter):
        kl_ball([0.5, 0.5], -0.1)


def test_moment_set_around_contains_its_baseline():
    base = np.array([0.2, 0.5, 0.3])
    s = moment_set_around(SUPPORT, base)
    assert s.kind == SetKind.BOX_MOMENT
    assert s.values.shape == (2, 3)
    assert np.array_equal(s.baseline, base)
    assert s.contains(base)
    assert not s.contains([1.0, 0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        s.violation([0.5, 0.5])


def test_kl_ball_membership():
    s = kl_ball([0.5, 0.5], math.log(2.0))
    assert s.contains([1.0, 0.0])
    assert not kl_ball([0.5, 0.5], 0.1).contains([1.0, 0.0])


# divergence and gap


@pytest.mark.parametrize(
    "q, p, expected",
    [
        ([0.3, 0.7], [0.3, 0.7], 0.0),
        ([1.0, 0.0], [0.5, 0.5], math.log(2.0)),
        ([0.75, 0.25], [0.5, 0.5], 0.75 * math.log(1.5) + 0.25 * math.log(0.5)),
    ],
)
def test_kl_div_examples(q, p, expected):
    assert kl_div(q, p) == pytest.approx(expected, abs=1e-15)


def test_kl_div_support_violation():
    assert kl_div([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.1308, abs=1e-4)
    with pytest.raises(SupportViolation):
        kl_div([0.5, 0.5], [1.0, 0.0])


def test_fw_gap_examples():
    p = np.array([0.5, 0.5])
    q = fw_linear_min([1.0, 0.0], p, simplex_set(2))
    assert q.as_array() == pytest.approx([0.0, 1.0])
    assert fw_gap([1.0, 0.0], p, q.as_array()) == pytest.approx(0.5)
    assert fw_gap(np.zeros(2), p, q.as_array()) == 0.0


def test_fw_gap_is_translation_invariant():
    gen = RngStream(1).generator
    s = moment_set_around(SUPPORT, [0.3, 0.4, 0.3])
    p = np.array([0.3, 0.4, 0.3])
    for _ in range(20):
        g = gen.standard_normal(3)
        q = fw_linear_min(g, p, s).as_array()
        q_shift = fw_linear_min(g + 7.5, p, s).as_array()
        assert q_shift == pytest.approx(q, abs=1e-9)
        assert fw_gap(g + 7.5, p, q_shift) == pytest.approx(fw_gap(g, p, q), abs=1e-9)
        assert fw_gap(g, p, q) >= -1e-9


# Frank-Wolfe linear minimization


def test_fw_simplex_vertex_and_tie_break():
    p = np.full(3, 1.0 / 3.0)
    assert fw_linear_min([3.0, 1.0, 2.0], p, simplex_set(3)).as_array() == pytest.approx([0.0, 1.0, 0.0])
    assert fw_linear_min([1.0, 1.0, 2.0], p, simplex_set(3)).as_array() == pytest.approx([1.0, 0.0, 0.0])


def test_fw_box_moment_example():
    s = box_moment_set([SUPPORT], 1.9, 2.1, support=SUPPORT)
    q = fw_linear_min([0.0, 0.0, -1.0], np.full(3, 1.0 / 3.0), s).as_array()
    assert q == pytest.approx([0.45, 0.0, 0.55], abs=1e-9)
    assert s.contains(q)


def test_fw_kl_ball_constant_gradient():
    pb = np.array([0.2, 0.3, 0.5])
    s = kl_ball(pb, 0.05)
    g = np.full(3, 2.5)
    q = fw_linear_min(g, pb, s).as_array()
    assert g @ q == pytest.approx(g @ pb)
    assert s.contains(q)


def test_fw_kl_ball_large_radius_reaches_vertex_face():
    pb = np.array([0.2, 0.3, 0.5])
    q = fw_linear_min([1.0, 0.0, 1.0], pb, kl_ball(pb, 5.0)).as_array()
    assert q == pytest.approx([0.0, 1.0, 0.0])


def test_fw_box_moment_matches_grid_search():
    grid = simplex_grid(0.005)
    gen = RngStream(2).generator
    for _ in range(20):
        lo = gen.uniform(1.2, 2.0)
        hi = lo + gen.uniform(0.1, 0.8)
        s = box_moment_set([SUPPORT], lo, hi)
        g = gen.standard_normal(3)
        q = fw_linear_min(g, np.full(3, 1.0 / 3.0), s).as_array()
        assert s.contains(q)
        means = grid @ SUPPORT
        feasible = grid[(means >= lo) & (means <= hi)]
        best = float(np.min(feasible @ g))
        assert g @ q <= best + 1e-9
        assert best - g @ q <= 0.05


def test_fw_two_moment_rows_beat_random_feasible_points():
    s = moment_set_around(SUPPORT, [0.3, 0.4, 0.3])
    points = sample_dirichlet_many(DirichletParam(np.ones(3)), RngStream(3), 5000)
    feasible = points[[s.contains(x) for x in points]][:200]
    assert len(feasible) > 0
    gen = RngStream(4).generator
    for _ in range(10):
        g = gen.standard_normal(3)
        q = fw_linear_min(g, s.baseline, s).as_array()
        assert s.violation(q) <= 1e-9
        assert g @ q <= np.min(feasible @ g) + 1e-9


def test_fw_kl_ball_matches_grid_search():
    grid = simplex_grid(0.001)
    gen = RngStream(5).generator
    for pb in sample_dirichlet_many(DirichletParam(np.full(3, 10.0)), RngStream(6), 5):
        s = kl_ball(pb, 0.05)
        g = gen.standard_normal(3)
        q = fw_linear_min(g, pb, s).as_array()
        assert s.contains(q, 1e-9)
        feasible = grid[rel_entr(grid, pb).sum(axis=1) <= 0.05]
        best = float(np.min(feasible @ g))
        assert g @ q <= best + 1e-9
        assert best - g @ q <= 5e-3


def test_fw_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        fw_linear_min([1.0, 2.0], [0.5, 0.5], simplex_set(3))


# entropic prox


def test_prox_zero_gradient_is_identity():
    p = np.array([0.2, 0.3, 0.5])
    for s in (simplex_set(3), kl_ball(p, 0.1), moment_set_around(SUPPORT, p)):
        assert np.array_equal(md_prox(np.zeros(3), p, 1.0, s).as_array(), p)


def test_prox_simplex_closed_form():
    q = md_prox([math.log(2.0), 0.0], [0.5, 0.5], 1.0, simplex_set(2))
    assert q.as_array() == pytest.approx([1.0 / 3.0, 2.0 / 3.0])


def test_prox_rejects_bad_inputs():
    with pytest.raises(NonPositiveIterate):
        md_prox([1.0, 0.0], [0.0, 1.0], 1.0, simplex_set(2))
    with pytest.raises(InvalidParameter):
        md_prox([1.0, 0.0], [0.5, 0.5], 0.0, simplex_set(2))
    with pytest.raises(DimensionMismatch):
        md_prox([1.0, 0.0, 0.0], [0.5, 0.5], 1.0, simplex_set(2))


def test_prox_kl_ball_inactive_constraint_is_unconstrained():
    p = np.array([0.2, 0.3, 0.5])
    g = np.array([0.1, -0.1, 0.0])
    sol = solve_prox(g, p, 0.5, kl_ball(p, 1.0))
    assert sol.lam == 0.0
    assert sol.q.as_array() == pytest.approx(softmax(np.log(p) - 0.5 * g))


def test_prox_kl_ball_active_constraint_kkt():
    pb = np.array([0.2, 0.3, 0.5])
    s = kl_ball(pb, 0.05)
    g = np.array([5.0, 0.0, -5.0])
    sol = solve_prox(g, pb, 1.0, s)
    assert sol.lam > 0
    assert kl_div(sol.q.as_array(), pb) == pytest.approx(0.05, abs=1e-9)
    assert prox_kkt(g, pb, 1.0, s, sol).holds(1e-9)


def test_prox_kl_ball_matches_grid_search():
    grid = simplex_grid(0.001)
    gen = RngStream(7).generator
    bases = sample_dirichlet_many(DirichletParam(np.full(3, 10.0)), RngStream(8), 5)
    starts = sample_dirichlet_many(DirichletParam(np.full(3, 5.0)), RngStream(9), 5)
    rho = 2.0
    for pb, pk in zip(bases, starts):
        s = kl_ball(pb, 0.05)
        g = gen.standard_normal(3)
        sol = solve_prox(g, pk, rho, s)
        assert prox_kkt(g, pk, rho, s, sol).holds(1e-9)
        q = sol.q.as_array()

        def objective(x):
            return rho * (x - pk) @ g + rel_entr(x, pk).sum(axis=-1)

        feasible = grid[rel_entr(grid, pb).sum(axis=1) <= 0.05]
        best = float(np.min(objective(feasible)))
        assert objective(q) <= best + 1e-9
        assert best - objective(q) <= 5e-3


def test_prox_box_inactive_constraint_is_unconstrained():
    p = np.array([0.3, 0.4, 0.3])
    s = box_moment_set([SUPPORT], 1.0, 3.0)
    g = np.array([0.2, 0.0, -0.2])
    q = md_prox(g, p, 1.0, s).as_array()
    assert q == pytest.approx(softmax(np.log(p) - g), abs=1e-9)


def test_prox_box_active_constraint_kkt():
    p = np.array([0.3, 0.4, 0.3])
    s = moment_set_around(SUPPORT, p)
    g = np.array([3.0, 0.0, -3.0])
    sol = solve_prox(g, p, 1.0, s)
    assert s.contains(sol.q.as_array(), ProxConfig().feasibility_tol)
    assert np.any(sol.upper > 0)
    assert prox_kkt(g, p, 1.0, s, sol).holds(10 * ProxConfig().kkt_tol)
    # the unconstrained step violates the upper moment bounds
    assert not s.contains(softmax(np.log(p) - g))


def test_prox_box_kkt_on_random_steps():
    gen = RngStream(17).generator
    tol = 10 * ProxConfig().kkt_tol
    support = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    bases = sample_dirichlet_many(DirichletParam(np.full(5, 10.0)), RngStream(18), 10)
    active = 0
    for pb in bases:
        s = moment_set_around(support, pb, [1, 2], 0.9, 1.1)
        g = 3.0 * gen.standard_normal(5)
        sol = solve_prox(g, pb, 1.0, s)
        report = prox_kkt(g, pb, 1.0, s, sol)
        assert report.holds(tol), report
        active += int(np.any(sol.upper > 0) or np.any(sol.lower > 0))
    assert active > 0


def test_prox_output_stays_interior():
    p = np.array([0.2, 0.3, 0.5])
    q = md_prox([50.0, 0.0, -50.0], p, 1.0, simplex_set(3)).as_array()
    assert np.all(q > 0)

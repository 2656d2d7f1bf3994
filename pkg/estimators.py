"""
Zeroth-order gradient estimators on the probability simplex.

Dirichlet-mixture estimators (SFE, FFE, CFE) perturb p towards a random point
delta and weight the function values by the score gamma * (delta - p).
Finite-difference baselines (FD standard, FD random) move towards vertices.
Gradients on the simplex are defined up to adding a constant to every
coordinate, so comparisons are made after projecting onto the zero-sum subspace.

Stream layout for one estimate: perturbations and random indices come from
rng.split(0); the oracle evaluation for replication j, slot s uses
rng.split(1, j, s). Results do not depend on how many workers run the calls.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import (
    DimensionMismatch,
    InvalidC,
    InvalidReplications,
    OffSimplexUnsupported,
    OracleFailure,
    WrongKind,
)
from mixtures import BlockSpec, Mixture, MixtureKind, build_mixture, build_multi, verify_moments
from objectives import Oracle, SmoothObjective
from simplex_core import ProbVector, RngStream

logger = logging.getLogger(__name__)


class EstimatorKind(str, Enum):
    SFE = "sfe"
    FFE = "ffe"
    CFE = "cfe"
    FD_STANDARD = "fd_standard"
    FD_RANDOM = "fd_random"


DIRICHLET_KINDS = frozenset({EstimatorKind.SFE, EstimatorKind.FFE, EstimatorKind.CFE})


class EstimatorSpec(BaseModel):
    """Which estimator to run and, for Dirichlet estimators, which mixture."""

    model_config = ConfigDict(extra="forbid")

    kind: EstimatorKind = EstimatorKind.FFE
    mixture: MixtureKind = MixtureKind.DELTA_DOUBLE_STAR
    eta: float = -1.0
    c_margin: float = Field(2.0, gt=1.0)
    eps_supp: Optional[float] = Field(None, gt=0)

    @property
    def uses_mixture(self) -> bool:
        return self.kind in DIRICHLET_KINDS

    @property
    def label(self) -> str:
        if self.uses_mixture:
            return f"{self.kind.value}/{self.mixture.value}"
        return self.kind.value


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    """
    Averaged gradient estimate.

    translation is "mean" when the estimate targets grad Z - (1'grad Z / n) 1
    (Dirichlet estimators) and "weighted" when it targets grad Z - (p'grad Z) 1
    (finite differences).
    """

    value: np.ndarray
    kind: EstimatorKind
    c: float
    R: int
    gamma: Optional[float]
    budget_used: int
    translation: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.value)):
            raise OracleFailure(f"{self.kind.value} estimate has non-finite coordinates")


@dataclass
class EstimatorStats:
    """Across-trial mean and variance of an estimator, per base point and averaged."""

    mean_estimate: np.ndarray
    variance_scalar: float
    per_point_variances: List[float]
    trials: int
    per_point_means: List[np.ndarray] = field(default_factory=list, repr=False)
    runs: List[np.ndarray] = field(default_factory=list, repr=False)
    budget_per_trial: int = 0


def zero_sum(v, block_dims: Optional[Sequence[int]] = None) -> np.ndarray:
    """Project onto the zero-sum subspace (blockwise when block_dims is given)."""
    v = np.array(v, dtype=float)
    dims = block_dims or (v.shape[-1],)
    lo = 0
    for d in dims:
        v[..., lo : lo + d] -= v[..., lo : lo + d].mean(axis=-1, keepdims=True)
        lo += d
    return v


def _check_c(c: float) -> None:
    if not 0 < c < 1:
        raise InvalidC(f"perturbation size must lie in (0, 1), got {c}")


def _check_R(R: int) -> None:
    if int(R) != R or R < 1:
        raise InvalidReplications(f"replication count must be a positive integer, got {R}")


def _base_of(p, mix: Optional[Mixture]) -> np.ndarray:
    base = np.asarray(p, dtype=float)
    if mix is not None:
        if base.shape != mix.base_array.shape or np.max(np.abs(base - mix.base_array)) > 1e-12:
            raise DimensionMismatch("the mixture was built for a different base point")
    return base


def _evaluate(oracle: Oracle, points: np.ndarray, streams: List[RngStream], workers: int) -> np.ndarray:
    if workers > 1 and oracle.concurrent_safe and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(oracle.evaluate, points, streams))
    else:
        values = [oracle.evaluate(x, s) for x, s in zip(points, streams)]
    return np.array(values, dtype=float)


def _average(terms: np.ndarray) -> np.ndarray:
    """Column means with compensated summation in row order."""
    return np.array([math.fsum(col) for col in terms.T]) / terms.shape[0]


def _pair_streams(rng: RngStream, R: int, slots: int) -> List[RngStream]:
    return [rng.split(1, j, s) for j in range(R) for s in range(slots)]


def estimate_sfe(oracle: Oracle, p, mix: Mixture, c: float, R: int, rng: RngStream, workers: int = 1, eps_supp: Optional[float] = None) -> GradientEstimate:
    """Single evaluation per replication: mean of Z((1-c)p + c delta)/c * gamma (delta - p)."""
    _check_c(c)
    _check_R(R)
    base = _base_of(p, mix)
    deltas = mix.sample(rng.split(0), R, eps_supp)
    values = _evaluate(oracle, (1 - c) * base + c * deltas, _pair_streams(rng, R, 1), workers)
    terms = (values / c)[:, None] * mix.score(deltas)
    return GradientEstimate(_average(terms), EstimatorKind.SFE, c, R, mix.gamma, R, "mean")


def estimate_ffe(oracle: Oracle, p, mix: Mixture, c: float, R: int, rng: RngStream, workers: int = 1, eps_supp: Optional[float] = None) -> GradientEstimate:
    """Forward difference with two independent evaluations per replication."""
    _check_c(c)
    _check_R(R)
    base = _base_of(p, mix)
    deltas = mix.sample(rng.split(0), R, eps_supp)
    points = np.empty((2 * R, base.size))
    points[0::2] = (1 - c) * base + c * deltas
    points[1::2] = base
    values = _evaluate(oracle, points, _pair_streams(rng, R, 2), workers)
    diffs = (values[0::2] - values[1::2]) / c
    terms = diffs[:, None] * mix.score(deltas)
    return GradientEstimate(_average(terms), EstimatorKind.FFE, c, R, mix.gamma, 2 * R, "mean")


def estimate_cfe(oracle: Oracle, p, mix: Mixture, c: float, R: int, rng: RngStream, workers: int = 1, eps_supp: Optional[float] = None) -> GradientEstimate:
    """
    Central difference between (1-c)p + c delta and the mirror point (1+c)p - c delta.

    The mirror point can leave the simplex, so the oracle must accept such inputs.
    """
    if not oracle.accepts_off_simplex:
        raise OffSimplexUnsupported("central differences evaluate off the simplex; this oracle does not allow it")
    _check_c(c)
    _check_R(R)
    base = _base_of(p, mix)
    deltas = mix.sample(rng.split(0), R, eps_supp)
    points = np.empty((2 * R, base.size))
    points[0::2] = (1 - c) * base + c * deltas
    points[1::2] = (1 + c) * base - c * deltas
    values = _evaluate(oracle, points, _pair_streams(rng, R, 2), workers)
    diffs = (values[0::2] - values[1::2]) / (2 * c)
    terms = diffs[:, None] * mix.score(deltas)
    return GradientEstimate(_average(terms), EstimatorKind.CFE, c, R, mix.gamma, 2 * R, "mean")


def _vertex_moves(base: np.ndarray, block_dims: Sequence[int]) -> np.ndarray:
    """Row i is e_i - p restricted to the block that contains coordinate i."""
    moves = np.zeros((base.size, base.size))
    lo = 0
    for d in block_dims:
        sl = slice(lo, lo + d)
        moves[sl, sl] = np.eye(d) - base[sl]
        lo += d
    return moves


def estimate_fd_standard(oracle: Oracle, p, c: float, R_p: int, rng: RngStream, workers: int = 1) -> GradientEstimate:
    """
    Coordinate finite differences towards each vertex, R_p replications per coordinate.

    Reported R is n * R_p; budget_used counts raw oracle calls, 2 * n * R_p.
    """
    _check_c(c)
    _check_R(R_p)
    base = _base_of(p, None)
    n = base.size
    moves = _vertex_moves(base, oracle.spec.block_dims)
    points = np.empty((2 * n * R_p, n))
    streams = []
    for i in range(n):
        for j in range(R_p):
            row = 2 * (i * R_p + j)
            points[row] = base + c * moves[i]
            points[row + 1] = base
            streams += [rng.split(1, i, j, 0), rng.split(1, i, j, 1)]
    values = _evaluate(oracle, points, streams, workers)
    diffs = ((values[0::2] - values[1::2]) / c).reshape(n, R_p)
    value = np.array([math.fsum(row) for row in diffs]) / R_p
    return GradientEstimate(value, EstimatorKind.FD_STANDARD, c, n * R_p, None, 2 * n * R_p, "weighted")


def estimate_fd_random(oracle: Oracle, p, c: float, R: int, rng: RngStream, workers: int = 1) -> GradientEstimate:
    """Finite difference along one uniformly chosen vertex direction per replication, scaled by n."""
    _check_c(c)
    _check_R(R)
    base = _base_of(p, None)
    n = base.size
    idx = rng.split(0).generator.integers(n, size=R)
    moves = _vertex_moves(base, oracle.spec.block_dims)
    points = np.empty((2 * R, n))
    points[0::2] = base + c * moves[idx]
    points[1::2] = base
    values = _evaluate(oracle, points, _pair_streams(rng, R, 2), workers)
    diffs = (values[0::2] - values[1::2]) / c
    terms = np.zeros((R, n))
    terms[np.arange(R), idx] = n * diffs
    return GradientEstimate(_average(terms), EstimatorKind.FD_RANDOM, c, R, None, 2 * R, "weighted")


def build_mixture_for(spec: EstimatorSpec, p, block_dims: Optional[Sequence[int]] = None, gamma: Optional[float] = None) -> Optional[Mixture]:
    """Mixture the estimator needs at p, or None for finite differences."""
    if not spec.uses_mixture:
        return None
    p = np.asarray(p, dtype=float)
    dims = tuple(block_dims) if block_dims else (p.size,)
    if len(dims) == 1 and gamma is None:
        return build_mixture(ProbVector(p), spec.mixture, eta=spec.eta, c_margin=spec.c_margin)
    blocks, lo = [], 0
    for d in dims:
        blocks.append(BlockSpec(ProbVector(p[lo : lo + d]), spec.mixture, spec.eta, spec.c_margin))
        lo += d
    return build_multi(blocks, gamma=gamma)


def estimate(spec: EstimatorSpec, oracle: Oracle, p, c: float, R: int, rng: RngStream, mix: Optional[Mixture] = None, workers: int = 1) -> GradientEstimate:
    """
    Run the estimator named by `spec`; R is the per-coordinate count for FD standard.
    """
    if spec.uses_mixture and mix is None:
        mix = build_mixture_for(spec, p, oracle.spec.block_dims)
    if spec.kind == EstimatorKind.SFE:
        return estimate_sfe(oracle, p, mix, c, R, rng, workers, spec.eps_supp)
    if spec.kind == EstimatorKind.FFE:
        return estimate_ffe(oracle, p, mix, c, R, rng, workers, spec.eps_supp)
    if spec.kind == EstimatorKind.CFE:
        return estimate_cfe(oracle, p, mix, c, R, rng, workers, spec.eps_supp)
    if spec.kind == EstimatorKind.FD_STANDARD:
        return estimate_fd_standard(oracle, p, c, R, rng, workers)
    return estimate_fd_random(oracle, p, c, R, rng, workers)


def run_stats(
    spec: EstimatorSpec,
    oracle: Oracle,
    p_list: Sequence,
    c: float,
    R: int,
    trials: int,
    rng: RngStream,
    workers: int = 1,
) -> EstimatorStats:
    """
    Repeat the estimator `trials` times at every base point.

    The per-point variance is sum_j ||psi_j - psi_bar||^2 / (trials - 1); the
    variance scalar is its average over points. Trial j at point i uses rng.split(i, j).
    """
    if trials < 2:
        raise InvalidReplications(f"variance needs at least 2 trials, got {trials}")
    variances, means, all_runs = [], [], []
    budget = 0
    for i, p in enumerate(p_list):
        p = np.asarray(p, dtype=float)
        mix = build_mixture_for(spec, p, oracle.spec.block_dims)
        results = [estimate(spec, oracle, p, c, R, rng.split(i, j), mix=mix, workers=workers) for j in range(trials)]
        budget = results[0].budget_used
        runs = np.array([r.value for r in results])
        all_runs.append(runs)
        mean = _average(runs)
        sq = np.sum((runs - mean) ** 2, axis=1)
        variances.append(math.fsum(sq) / (trials - 1))
        means.append(mean)
    logger.debug("%s: v_s=%.6g over %d points", spec.label, np.mean(variances), len(variances))
    return EstimatorStats(
        mean_estimate=_average(np.array(means)),
        variance_scalar=math.fsum(variances) / len(variances),
        per_point_variances=variances,
        trials=trials,
        per_point_means=means,
        runs=all_runs,
        budget_per_trial=budget,
    )


def quadratic_expectation(kind: EstimatorKind, mix: Mixture, c: float) -> np.ndarray:
    """
    Exact expectation of SFE, FFE or CFE on the noise-free quadratic objective.

    With x = delta - p and g = 2(p - 1/n), one replication equals
    [Z(p)/c + g'x + c||x||^2] * gamma x (SFE), [g'x + c||x||^2] * gamma x (FFE) or
    g'x * gamma x (CFE); the expectations follow from the exact mixture moments.
    """
    kind = EstimatorKind(kind)
    if kind not in DIRICHLET_KINDS:
        raise WrongKind("exact expectations are available for Dirichlet estimators only")
    report = verify_moments(mix)
    p = mix.base_array
    centers = np.concatenate([np.full(d, 1.0 / d) for d in mix.block_dims])
    g = 2.0 * (p - centers)
    out = mix.gamma * report.second_moment @ g
    if kind != EstimatorKind.CFE:
        out = out + c * mix.gamma * np.einsum("ijj->i", report.third_moment)
    if kind == EstimatorKind.SFE:
        value = float(np.sum((p - centers) ** 2))
        out = out + (value / c) * mix.gamma * report.mean_offset
    return out


def bias_curve(
    kind: EstimatorKind,
    objective: SmoothObjective,
    p,
    mix: Mixture,
    c_grid: Sequence[float],
    samples: int,
    rng: RngStream,
) -> np.ndarray:
    """
    Translation-removed bias norm of a Dirichlet estimator at every c in c_grid.

    One set of `samples` perturbations is shared by all c. Expansion terms with
    an exactly known expectation (the first-order term and, for SFE/FFE, the
    second-order term through the third moments) are taken analytically; only
    the Taylor remainder is averaged over the draws.

    Returns:
        np.ndarray: ||zero_sum(E[estimate]) - zero_sum(grad Z)|| per grid point
    """
    kind = EstimatorKind(kind)
    if kind not in DIRICHLET_KINDS:
        raise WrongKind("bias curves are defined for Dirichlet estimators only")
    for c in c_grid:
        _check_c(c)
    _check_R(samples)
    p = _base_of(p, mix)
    gamma = mix.gamma
    report = verify_moments(mix)
    g = objective.gradient(p)
    hess = objective.hessian(p)
    f0 = float(objective.value(p))
    x = mix.sample(rng.split(0), samples) - p
    linear = x @ g
    exact = gamma * report.second_moment @ g
    curvature = 0.5 * gamma * np.einsum("jk,ijk->i", hess, report.third_moment)
    quad = 0.5 * np.einsum("sj,jk,sk->s", x, hess, x)
    target = zero_sum(g, mix.block_dims)

    out = np.empty(len(c_grid))
    for m, c in enumerate(c_grid):
        if kind == EstimatorKind.CFE:
            rem = 0.5 * (objective.value(p + c * x) - objective.value(p - c * x)) - c * linear
            mean = exact + _average((rem / c)[:, None] * gamma * x)
        else:
            rem = objective.value(p + c * x) - f0 - c * linear - c * c * quad
            mean = exact + c * curvature + _average((rem / c)[:, None] * gamma * x)
            if kind == EstimatorKind.SFE:
                mean = mean + (f0 / c) * gamma * report.mean_offset
        out[m] = float(np.linalg.norm(zero_sum(mean, mix.block_dims) - target))
    return out

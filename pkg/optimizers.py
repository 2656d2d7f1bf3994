"""
Frank-Wolfe (FWSA) and mirror-descent (MDSA) stochastic approximation on
products of probability simplices.

Both loops rebuild the perturbation mixture at the current iterate, estimate the
gradient with a zeroth-order estimator (FFE with delta-double-star by default)
and solve one subproblem per block. Schedules follow power laws in the
iteration counter k = 1, 2, ...:

    eps_k = a / k        (FWSA step)
    rho_k = a / k**alpha (MDSA prox stepsize)
    c_k   = b / k**theta
    R_k   = floor(R0 * k**beta) + 1
    gamma_k = gamma0 * (min entry of p_k)**-2
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import (
    BoundaryCollapse,
    DimensionMismatch,
    FeasibilityViolation,
    InvalidParameter,
    NonPositiveIterate,
    RunAborted,
    SimplexGradError,
)
from estimators import EstimatorSpec, build_mixture_for, estimate
from mixtures import MixtureKind, min_gamma
from objectives import Oracle
from simplex_core import RngStream
from subproblems import ProxConfig, UncertaintySet, fw_gap, fw_linear_min, kl_div, md_prox

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-12

FWSA = "fwsa"
MDSA = "mdsa"


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    a: float = Field(0.25, gt=0, description="Stepsize scale")
    alpha_exp: float = Field(1.0, gt=0, description="MDSA stepsize exponent")
    b: float = Field(0.3, gt=0, description="Perturbation scale")
    theta_exp: float = Field(0.125, ge=0)
    beta_exp: float = Field(1.0, ge=0)
    R0: float = Field(2.0, ge=1)
    max_iter: int = Field(50, ge=0)
    gamma0: Optional[float] = Field(None, gt=0, description="None uses each mixture's own multiplier")
    decay_exponent: float = Field(0.0, ge=0, description="Boundary decay exponent d in the MDSA conditions")
    probes: int = Field(10, ge=1, description="Oracle calls averaged for the reported objective")

    def epsilon(self, k: int) -> float:
        return self.a / k

    def rho(self, k: int) -> float:
        return self.a / k**self.alpha_exp

    def c(self, k: int) -> float:
        return self.b / k**self.theta_exp

    def R(self, k: int) -> int:
        return int(math.floor(self.R0 * k**self.beta_exp)) + 1


def check_schedule(schedule: ScheduleConfig, algorithm: str) -> List[str]:
    """
    Convergence conditions the schedule violates; each is also logged as a warning.

    FWSA: a <= 1/2 and beta > 2(a + theta).
    MDSA: 1/2 < alpha <= 1, alpha + theta > 1 and 2 alpha + beta - 2d - 2 theta > 1.
    """
    s = schedule
    problems = []
    if algorithm == FWSA:
        if s.a > 0.5:
            problems.append(f"a={s.a} exceeds 1/2")
        if not s.beta_exp > 2 * (s.a + s.theta_exp):
            problems.append(f"beta={s.beta_exp} is not above 2(a + theta)={2 * (s.a + s.theta_exp):.4g}")
    elif algorithm == MDSA:
        if not 0.5 < s.alpha_exp <= 1:
            problems.append(f"alpha={s.alpha_exp} is outside (1/2, 1]")
        if not s.alpha_exp + s.theta_exp > 1:
            problems.append(f"alpha + theta={s.alpha_exp + s.theta_exp:.4g} is not above 1")
        lhs = 2 * s.alpha_exp + s.beta_exp - 2 * s.decay_exponent - 2 * s.theta_exp
        if not lhs > 1:
            problems.append(f"2 alpha + beta - 2d - 2 theta={lhs:.4g} is not above 1")
    else:
        raise InvalidParameter(f"unknown algorithm '{algorithm}'")
    for msg in problems:
        logger.warning("%s schedule outside the convergence conditions: %s", algorithm.upper(), msg)
    return problems


@dataclass
class TraceRecord:
    k: int
    p: np.ndarray
    objective: float
    fw_gap: Optional[float]
    prox_divergence: Optional[float]
    c: float
    R: int
    gamma: Optional[float]
    step: float
    oracle_calls: int
    probe_calls: int
    min_entry: float


@dataclass
class RunTrace:
    algorithm: str
    block_dims: tuple
    records: List[TraceRecord] = field(default_factory=list)
    monitors: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def iterates(self) -> np.ndarray:
        return np.array([r.p for r in self.records])


def probe_objective(oracle: Oracle, p, probes: int, rng: RngStream) -> float:
    """Mean of `probes` independent evaluations; used for reporting only."""
    if probes < 1:
        raise InvalidParameter("probes must be at least 1")
    return math.fsum(oracle.evaluate(p, rng.split(j)) for j in range(probes)) / probes


def _block_slices(dims: Sequence[int]):
    lo = 0
    for d in dims:
        yield slice(lo, lo + d)
        lo += d


def default_gamma0(spec: EstimatorSpec, n: int) -> float:
    """gamma0 such that gamma0 / p_min**2 is the single-block mixture's own multiplier."""
    if spec.mixture == MixtureKind.DELTA_STAR:
        return spec.c_margin * (n - 1) ** 2 / n
    return (float(n) ** (spec.eta + 1.0) + 1.0) / n


def _min_entry_monitors(trace: RunTrace, schedule: ScheduleConfig) -> Dict[str, Any]:
    mins = trace.column("min_entry")
    if mins.size == 0:
        return {"min_entry_product_bound": True, "min_entry_power_constant": None}
    k = np.arange(1, mins.size + 1)
    shrink = np.concatenate(([1.0], np.cumprod(1.0 - schedule.a / k[:-1])))
    bound = mins[0] * shrink
    holds = bool(np.all(mins >= bound * (1 - 1e-12)))
    # largest A with min_entry_k >= A * min_entry_1 / k**a along the run
    power = float(np.min(mins * k**schedule.a / mins[0]))
    return {"min_entry_product_bound": holds, "min_entry_power_constant": power}


def _gamma_monitor(trace: RunTrace, gamma0: Optional[float]) -> Optional[bool]:
    gammas = [r.gamma for r in trace.records]
    if gamma0 is None or not gammas or any(g is None for g in gammas):
        return None
    mins = trace.column("min_entry")
    expected = gamma0 / mins**2
    floor = min_gamma(max(trace.block_dims))
    return bool(np.allclose(np.array(gammas), expected, rtol=1e-12, atol=0) and min(gammas) >= floor)


def _run(
    algorithm: str,
    oracle: Oracle,
    sets: Union[UncertaintySet, Sequence[UncertaintySet]],
    schedule: ScheduleConfig,
    p_init,
    rng: RngStream,
    estimator: Optional[EstimatorSpec],
    prox: Optional[ProxConfig],
    workers: int,
) -> RunTrace:
    estimator = estimator or EstimatorSpec()
    prox = prox or ProxConfig()
    sets = [sets] if isinstance(sets, UncertaintySet) else list(sets)
    dims = tuple(s.n for s in sets)
    if dims != oracle.spec.block_dims:
        raise DimensionMismatch(f"sets have block dimensions {dims}, oracle expects {oracle.spec.block_dims}")
    p = np.array(p_init, dtype=float)
    if p.shape != (sum(dims),):
        raise DimensionMismatch(f"initial point has shape {p.shape}, expected ({sum(dims)},)")
    if p.min() <= 0:
        raise NonPositiveIterate("initial point must be strictly positive")
    if estimator.uses_mixture and estimator.mixture not in (MixtureKind.DELTA_STAR, MixtureKind.DELTA_DOUBLE_STAR):
        raise InvalidParameter("optimizers need a delta-star or delta-double-star mixture")
    check_schedule(schedule, algorithm)

    gamma0 = schedule.gamma0
    if gamma0 is None and len(dims) == 1 and estimator.uses_mixture:
        gamma0 = default_gamma0(estimator, dims[0])
    feas_tol = prox.lp_tol if algorithm == FWSA else prox.feasibility_tol
    trace = RunTrace(algorithm=algorithm, block_dims=dims)
    calls = probes_used = 0

    try:
        for k in range(1, schedule.max_iter + 1):
            min_entry = float(p.min())
            if min_entry < BOUNDARY_TOL:
                raise BoundaryCollapse(f"iterate reached the boundary at k={k} (min entry {min_entry:.3g})")
            for s, sl in zip(sets, _block_slices(dims)):
                if not s.contains(p[sl], feas_tol):
                    raise FeasibilityViolation(f"iterate left the feasible set at k={k} (violation {s.violation(p[sl]):.3g})")

            c_k, R_k = schedule.c(k), schedule.R(k)
            explicit = schedule.gamma0 / min_entry**2 if schedule.gamma0 is not None else None
            mix = build_mixture_for(estimator, p, dims, gamma=explicit)
            est = estimate(estimator, oracle, p, c_k, R_k, rng.split(k, 0), mix=mix, workers=workers)
            calls += est.budget_used
            objective = probe_objective(oracle, p, schedule.probes, rng.split(k, 1))
            probes_used += schedule.probes

            p_next = np.empty_like(p)
            gap = divergence = None
            if algorithm == FWSA:
                step = schedule.epsilon(k)
                gap = 0.0
                for s, sl in zip(sets, _block_slices(dims)):
                    q = fw_linear_min(est.value[sl], p[sl], s, prox).as_array()
                    gap += fw_gap(est.value[sl], p[sl], q)
                    p_next[sl] = (1.0 - step) * p[sl] + step * q
            else:
                step = schedule.rho(k)
                divergence = 0.0
                for s, sl in zip(sets, _block_slices(dims)):
                    p_next[sl] = md_prox(est.value[sl], p[sl], step, s, prox).as_array()
                    divergence += kl_div(p_next[sl], p[sl])

            trace.records.append(
                TraceRecord(
                    k=k,
                    p=p.copy(),
                    objective=objective,
                    fw_gap=gap,
                    prox_divergence=divergence,
                    c=c_k,
                    R=R_k,
                    gamma=mix.gamma if mix is not None else None,
                    step=step,
                    oracle_calls=calls,
                    probe_calls=probes_used,
                    min_entry=min_entry,
                )
            )
            logger.debug(
                "%s k=%d objective=%.6g criterion=%.6g gamma=%s calls=%d",
                algorithm,
                k,
                objective,
                gap if gap is not None else divergence,
                trace.records[-1].gamma,
                calls,
            )
            p = p_next
    except SimplexGradError as e:
        _finish(trace, schedule, gamma0)
        raise RunAborted(e, trace) from e

    _finish(trace, schedule, gamma0)
    return trace


def _finish(trace: RunTrace, schedule: ScheduleConfig, gamma0: Optional[float]) -> None:
    if trace.algorithm == FWSA:
        trace.monitors.update(_min_entry_monitors(trace, schedule))
    trace.monitors["gamma_consistent"] = _gamma_monitor(trace, gamma0)
    calls = trace.column("oracle_calls")
    trace.monitors["budget_nondecreasing"] = bool(np.all(np.diff(calls) >= 0))


def run_fwsa(
    oracle: Oracle,
    sets: Union[UncertaintySet, Sequence[UncertaintySet]],
    schedule: ScheduleConfig,
    p_init,
    rng: RngStream,
    estimator: Optional[EstimatorSpec] = None,
    prox: Optional[ProxConfig] = None,
    workers: int = 1,
) -> RunTrace:
    """
    Frank-Wolfe stochastic approximation.

    Each iteration solves the linear minimization per block at the estimated
    gradient and moves to (1 - eps_k) p_k + eps_k q_k. The recorded criterion
    is the approximate Frank-Wolfe gap.

    Raises:
        RunAborted: wraps the error raised mid-run together with the partial trace
    """
    return _run(FWSA, oracle, sets, schedule, p_init, rng, estimator, prox, workers)


def run_mdsa(
    oracle: Oracle,
    sets: Union[UncertaintySet, Sequence[UncertaintySet]],
    schedule: ScheduleConfig,
    p_init,
    rng: RngStream,
    estimator: Optional[EstimatorSpec] = None,
    prox: Optional[ProxConfig] = None,
    workers: int = 1,
) -> RunTrace:
    """Mirror-descent stochastic approximation with the entropic prox-mapping; records V(p_k, p_{k+1})."""
    return _run(MDSA, oracle, sets, schedule, p_init, rng, estimator, prox, workers)

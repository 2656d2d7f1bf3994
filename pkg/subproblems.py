"""
Uncertainty sets and the per-iteration subproblems of the constrained optimizers.

fw_linear_min solves the Frank-Wolfe linear minimization over a set; md_prox
solves the entropic prox-mapping argmin_q rho * g'(q - p) + V(p, q), where
V(p, q) = sum_i q_i log(q_i / p_i). Both act on a single block; multi-block
problems call them once per block.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize
from scipy.special import logsumexp, rel_entr, softmax

from errors import (
    BisectionFailure,
    DimensionMismatch,
    DimensionTooSmall,
    InvalidParameter,
    NonPositiveIterate,
    SupportViolation,
)
from lp_solver import DEFAULT_TOL, solve_lp
from simplex_core import ProbVector, make_prob_vector

logger = logging.getLogger(__name__)


class SetKind(str, Enum):
    SIMPLEX = "simplex"
    BOX_MOMENT = "box_moment"
    KL_BALL = "kl_ball"


class ProxConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kkt_tol: float = Field(1e-10, gt=0)
    max_bisect: int = Field(200, gt=0)
    lp_tol: float = Field(DEFAULT_TOL, gt=0)
    max_dual_iter: int = Field(500, gt=0)

    @property
    def feasibility_tol(self) -> float:
        """Tolerance for prox outputs, which are feasible only up to the dual solver accuracy."""
        return max(self.lp_tol, 1e3 * self.kkt_tol)


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    """
    Feasible region for one block.

    BOX_MOMENT: lo <= values @ q <= hi, one row per constraint function evaluated
    at the support points (infinite bounds are allowed). KL_BALL: KL(q || baseline) <= radius.
    """

    kind: SetKind
    n: int
    values: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    support: Optional[np.ndarray] = None
    baseline: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def violation(self, q) -> float:
        """Largest constraint violation of q, including the simplex constraints."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise DimensionMismatch(f"set has dimension {self.n}, point has shape {q.shape}")
        worst = max(0.0, -float(q.min()), abs(math.fsum(q) - 1.0))
        if self.kind == SetKind.BOX_MOMENT:
            m = self.values @ q
            worst = max(worst, float(np.max(m - self.hi, initial=0.0)), float(np.max(self.lo - m, initial=0.0)))
        elif self.kind == SetKind.KL_BALL:
            worst = max(worst, kl_div(np.clip(q, 0.0, None), self.baseline) - self.radius)
        return worst

    def contains(self, q, tol: float = DEFAULT_TOL) -> bool:
        return self.violation(q) <= tol


def simplex_set(n: int) -> UncertaintySet:
    if n < 2:
        raise DimensionTooSmall(f"simplex needs n >= 2, got {n}")
    return UncertaintySet(SetKind.SIMPLEX, n)


def box_moment_set(values, lo, hi, support=None, tol: float = DEFAULT_TOL) -> UncertaintySet:
    """
    Moment constraints lo_l <= sum_i q_i f_l(x_i) <= hi_l.

    Args:
        values: (L, n) matrix of f_l(x_i)
        lo, hi: Bounds per row; -inf/inf drop that side

    Raises:
        InvalidParameter: lo > hi for some row
        Infeasible: no probability vector satisfies the constraints
    """
    F = np.atleast_2d(np.asarray(values, dtype=float))
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (F.shape[0],)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (F.shape[0],)).copy()
    if F.shape[1] < 2:
        raise DimensionTooSmall("moment set needs n >= 2")
    if np.any(lo > hi):
        raise InvalidParameter("every lower moment bound must be <= its upper bound")
    s = UncertaintySet(
        SetKind.BOX_MOMENT,
        F.shape[1],
        values=F,
        lo=lo,
        hi=hi,
        support=None if support is None else np.asarray(support, dtype=float),
    )
    # nonempty check
    _box_lp(s, np.zeros(s.n), tol)
    return s


def moment_set_around(
    support,
    baseline,
    powers: Sequence[int] = (1, 2),
    lower: float = 0.8,
    upper: float = 1.2,
) -> UncertaintySet:
    """Bounds lower * E_b[X^k] <= E_q[X^k] <= upper * E_b[X^k] for each k in powers."""
    x = np.asarray(support, dtype=float)
    pb = np.asarray(baseline, dtype=float)
    F = np.vstack([x**k for k in powers])
    ref = F @ pb
    s = box_moment_set(F, np.minimum(lower * ref, upper * ref), np.maximum(lower * ref, upper * ref), support=x)
    return replace(s, baseline=pb)


def kl_ball(baseline, radius: float) -> UncertaintySet:
    pb = ProbVector(baseline).as_array()
    if pb.min() <= 0:
        raise InvalidParameter("KL ball baseline must be strictly positive")
    if not radius >= 0:
        raise InvalidParameter(f"KL radius must be nonnegative, got {radius}")
    return UncertaintySet(SetKind.KL_BALL, pb.size, baseline=pb, radius=float(radius))


def kl_div(q, p) -> float:
    """
    V(p, q) = sum_i q_i log(q_i / p_i) with 0 log(0 / .) = 0.

    Raises:
        SupportViolation: q_i > 0 where p_i = 0
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape:
        raise DimensionMismatch("kl_div arguments must have the same shape")
    if np.any((q > 0) & (p <= 0)):
        raise SupportViolation("q puts mass where p has none")
    return max(0.0, math.fsum(rel_entr(q, p)))


def fw_gap(grad_est, p_k, q_k) -> float:
    """Approximate Frank-Wolfe gap -g'(q_k - p_k)."""
    d = np.asarray(q_k, dtype=float) - np.asarray(p_k, dtype=float)
    return -float(np.asarray(grad_est, dtype=float) @ d)


def _box_rows(s: UncertaintySet):
    up = np.isfinite(s.hi)
    down = np.isfinite(s.lo)
    A_ub = np.vstack([s.values[up], -s.values[down]])
    b_ub = np.concatenate([s.hi[up], -s.lo[down]])
    return A_ub, b_ub


def _box_lp(s: UncertaintySet, grad: np.ndarray, tol: float) -> np.ndarray:
    A_ub, b_ub = _box_rows(s)
    res = solve_lp(grad, A_ub, b_ub, np.ones((1, s.n)), np.ones(1), tol=tol)
    return res.x


def _tilted(log_base: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    return softmax(log_base - g / lam)


def _kl_linear_min(g: np.ndarray, s: UncertaintySet, cfg: ProxConfig) -> np.ndarray:
    """Minimize g'q over the KL ball through q(lam) proportional to p_b exp(-g / lam)."""
    pb = s.baseline
    g = g - g.min()
    scale = max(1.0, float(g.max()))
    if g.max() <= cfg.lp_tol * scale:
        return pb.copy()
    argmin = g <= cfg.lp_tol * scale
    mass = math.fsum(pb[argmin])
    if -math.log(mass) <= s.radius:
        q = np.where(argmin, pb, 0.0)
        return q / q.sum()

    log_pb = np.log(pb)
    lo, hi = 0.0, 1.0
    steps = 0
    while kl_div(_tilted(log_pb, g, hi), pb) > s.radius:
        lo, hi = hi, 2.0 * hi
        steps += 1
        if steps > cfg.max_bisect:
            raise BisectionFailure("could not bracket the KL-ball multiplier")
    for _ in range(cfg.max_bisect):
        if hi - lo <= 1e-15 * hi:
            break
        mid = 0.5 * (lo + hi)
        gap = kl_div(_tilted(log_pb, g, mid), pb) - s.radius
        if gap > 0:
            lo = mid
        else:
            hi = mid
            if -gap <= cfg.kkt_tol:
                break
    logger.debug("KL linear minimization: lambda in [%.6g, %.6g]", lo, hi)
    return _tilted(log_pb, g, hi)


def fw_linear_min(grad, p_k, s: UncertaintySet, cfg: Optional[ProxConfig] = None) -> ProbVector:
    """
    A minimizer of grad'q over the set.

    SIMPLEX returns the vertex at the first minimal coordinate; BOX_MOMENT runs
    the two-phase simplex method; KL_BALL bisects on the dual multiplier.
    """
    cfg = cfg or ProxConfig()
    g = np.asarray(grad, dtype=float)
    if g.shape != (s.n,):
        raise DimensionMismatch(f"gradient has shape {g.shape}, set has dimension {s.n}")
    if s.kind == SetKind.SIMPLEX:
        q = np.zeros(s.n)
        q[int(np.argmin(g))] = 1.0
        return ProbVector(q)
    if s.kind == SetKind.BOX_MOMENT:
        return make_prob_vector(_box_lp(s, g, cfg.lp_tol))
    return make_prob_vector(_kl_linear_min(g, s, cfg))


@dataclass
class ProxSolution:
    """Prox output with its multipliers (lam for the KL ball, upper/lower rows for moment sets)."""

    q: ProbVector
    lam: float = 0.0
    upper: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None


def _kl_prox_point(log_pk: np.ndarray, log_pb: np.ndarray, step: np.ndarray, lam: float) -> np.ndarray:
    return softmax((log_pk + lam * log_pb - step) / (1.0 + lam))


def _kl_prox(log_pk, step, s: UncertaintySet, cfg: ProxConfig) -> ProxSolution:
    pb = s.baseline
    log_pb = np.log(pb)
    q0 = softmax(log_pk - step)
    if kl_div(q0, pb) <= s.radius:
        return ProxSolution(make_prob_vector(q0))

    def gap(lam):
        q = _kl_prox_point(log_pk, log_pb, step, lam)
        return q, kl_div(q, pb) - s.radius

    lo, hi = 0.0, 1.0
    q, g = gap(hi)
    steps = 0
    while g > 0:
        lo, hi = hi, 2.0 * hi
        q, g = gap(hi)
        steps += 1
        if steps > cfg.max_bisect:
            raise BisectionFailure("could not bracket the prox multiplier")

    for _ in range(cfg.max_bisect):
        if abs(g) * max(1.0, hi) <= cfg.kkt_tol or hi - lo <= 1e-15 * hi:
            logger.debug("KL prox: lambda=%.10g, KL gap %.3g", hi, g)
            return ProxSolution(make_prob_vector(q), lam=hi)
        mid = 0.5 * (lo + hi)
        q_mid, g_mid = gap(mid)
        if g_mid > 0:
            lo = mid
        else:
            hi, q, g = mid, q_mid, g_mid
    raise BisectionFailure(f"prox bisection did not reach tolerance {cfg.kkt_tol} in {cfg.max_bisect} steps")


def _polish_box(base, F, hi, lo, z, tol: float, max_iter: int = 20) -> np.ndarray:
    """
    Newton iterations on the positive multipliers of z = [u, w].

    Active rows are held at equality: with G the signed rows (+F_j for an upper
    bound, -F_j for a lower one) and t the matching targets, solve
    G softmax(base - G'nu) = t. A multiplier that turns negative releases its row.
    """
    L = F.shape[0]
    z = z.copy()
    for _ in range(max_iter):
        active = np.flatnonzero(z > 0)
        if active.size == 0:
            break
        up, down = active[active < L], active[active >= L] - L
        G = np.vstack([F[up], -F[down]])
        t = np.concatenate([hi[up], -lo[down]])
        nu = z[active]
        q = softmax(base - G.T @ nu)
        resid = G @ q - t
        if np.max(np.abs(resid)) <= tol:
            break
        cov = np.diag(q) - np.outer(q, q)
        try:
            nu = nu + np.linalg.solve(G @ cov @ G.T, resid)
        except np.linalg.LinAlgError:
            break
        z[active] = np.maximum(nu, 0.0)
    return z


def _box_prox(log_pk, step, s: UncertaintySet, cfg: ProxConfig) -> ProxSolution:
    """
    Maximize the concave dual over u, w >= 0:

        D(u, w) = -log sum_i p_i exp(-step_i - (F'(u - w))_i) - u'hi + w'lo

    q is recovered from the maximizer. Rows with an infinite bound keep that
    multiplier fixed at zero.
    """
    F = s.values
    L = F.shape[0]
    hi = np.where(np.isfinite(s.hi), s.hi, 0.0)
    lo = np.where(np.isfinite(s.lo), s.lo, 0.0)
    bounds = [(0.0, None) if np.isfinite(v) else (0.0, 0.0) for v in s.hi]
    bounds += [(0.0, None) if np.isfinite(v) else (0.0, 0.0) for v in s.lo]

    def primal(z):
        return softmax(log_pk - step - F.T @ (z[:L] - z[L:]))

    def neg_dual(z):
        logits = log_pk - step - F.T @ (z[:L] - z[L:])
        q = softmax(logits)
        m = F @ q
        value = logsumexp(logits) + z[:L] @ hi - z[L:] @ lo
        return value, np.concatenate([hi - m, m - lo])

    res = minimize(
        neg_dual,
        np.zeros(2 * L),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": cfg.max_dual_iter, "ftol": 1e-15, "gtol": cfg.kkt_tol},
    )
    z = res.x
    q = primal(z)
    violation = s.violation(q)
    # L-BFGS-B stops near gtol; Newton on the active rows brings the residual to rounding level
    polished = _polish_box(log_pk - step, F, hi, lo, z, cfg.kkt_tol / 100)
    q_polished = primal(polished)
    if s.violation(q_polished) <= max(violation, cfg.kkt_tol):
        z, q, violation = polished, q_polished, s.violation(q_polished)
    logger.debug("moment prox: %d dual iterations, violation %.3g", res.nit, violation)
    if violation > cfg.feasibility_tol:
        raise BisectionFailure(f"moment-set prox dual search stopped with violation {violation:.3g}: {res.message}")
    return ProxSolution(make_prob_vector(q), upper=z[:L].copy(), lower=z[L:].copy())


def solve_prox(grad, p_k, rho: float, s: UncertaintySet, cfg: Optional[ProxConfig] = None) -> ProxSolution:
    """md_prox together with the multipliers of the active constraints."""
    cfg = cfg or ProxConfig()
    p = np.asarray(p_k, dtype=float)
    g = np.asarray(grad, dtype=float)
    if p.shape != (s.n,) or g.shape != (s.n,):
        raise DimensionMismatch(f"prox inputs must have dimension {s.n}")
    if p.min() <= 0:
        raise NonPositiveIterate("prox-mapping needs a strictly positive iterate")
    if not rho > 0:
        raise InvalidParameter(f"prox stepsize must be positive, got {rho}")
    if not np.any(g) and s.contains(p, cfg.lp_tol):
        return ProxSolution(ProbVector(p))

    log_pk = np.log(p)
    step = rho * g
    if s.kind == SetKind.SIMPLEX:
        return ProxSolution(make_prob_vector(softmax(log_pk - step)))
    if s.kind == SetKind.KL_BALL:
        return _kl_prox(log_pk, step, s, cfg)
    return _box_prox(log_pk, step, s, cfg)


def md_prox(grad, p_k, rho: float, s: UncertaintySet, cfg: Optional[ProxConfig] = None) -> ProbVector:
    """
    Entropic prox-mapping argmin_q rho * grad'(q - p_k) + V(p_k, q) over the set.

    Raises:
        NonPositiveIterate: p_k has a zero entry
        BisectionFailure: the multiplier search did not converge
    """
    return solve_prox(grad, p_k, rho, s, cfg).q


@dataclass
class KKTReport:
    stationarity: float
    feasibility: float
    slackness: float

    def holds(self, tol: float) -> bool:
        return max(self.stationarity, self.feasibility, self.slackness) <= tol


def prox_kkt(grad, p_k, rho: float, s: UncertaintySet, sol: ProxSolution) -> KKTReport:
    """
    KKT residuals of a prox solution.

    Stationarity is measured modulo the multiplier of sum(q) = 1: the spread of
    rho*g_i + log(q_i/p_i) + (constraint terms)_i around its mean.
    """
    q = sol.q.as_array()
    p = np.asarray(p_k, dtype=float)
    r = rho * np.asarray(grad, dtype=float) + np.log(q) - np.log(p)
    slack = 0.0
    if s.kind == SetKind.KL_BALL:
        r = r + sol.lam * (np.log(q) - np.log(s.baseline))
        slack = abs(sol.lam * (kl_div(q, s.baseline) - s.radius))
    elif s.kind == SetKind.BOX_MOMENT and sol.upper is not None:
        r = r + s.values.T @ (sol.upper - sol.lower)
        m = s.values @ q
        hi = np.where(np.isfinite(s.hi), s.hi - m, 0.0)
        lo = np.where(np.isfinite(s.lo), m - s.lo, 0.0)
        slack = float(max(np.max(np.abs(sol.upper * hi), initial=0.0), np.max(np.abs(sol.lower * lo), initial=0.0)))
    return KKTReport(
        stationarity=float(np.max(np.abs(r - r.mean()))),
        feasibility=s.violation(q),
        slackness=slack,
    )

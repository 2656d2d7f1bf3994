"""
Dirichlet mixture perturbations for simplex gradient estimation.

A mixture here is the convex combination delta = sum_k w_k * delta^k of
independent Dirichlet vectors delta^k ~ Dir(alpha_k). Two constructions are
provided: delta-star, which matches the first three score moment conditions
with a zero third moment, and delta-double-star, which matches the first two
with a much smaller score multiplier gamma. Both sort the base point ascending
internally and keep the permutation to map back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    BadMargin,
    DimensionMismatch,
    InfeasibleEta,
    InvalidParameter,
    WrongKind,
    ZeroEntry,
)
from simplex_core import (
    DirichletParam,
    ProbVector,
    RngStream,
    log_gamma_variates,
    weighted_third_central,
)

WEIGHT_TOL = 1e-10
MEAN_TOL = 1e-10
MU_SPREAD_TOL = 1e-8
MC1_TOL = 1e-12
MC2_TOL = 1e-10
MC3_TOL = 1e-10
# Largest number of component-coordinate entries sampled per chunk
_CHUNK_ENTRIES = 2_000_000


class MixtureKind(str, Enum):
    DELTA_STAR = "delta_star"
    DELTA_DOUBLE_STAR = "delta_dstar"
    CUSTOM = "custom"


def min_gamma(n: int) -> float:
    """Lower bound (n - 1)/4 on the score multiplier of any admissible mixture."""
    return (n - 1) / 4.0


@dataclass(frozen=True, eq=False)
class DirichletMixture:
    """
    Mixture weights, component concentrations (one row per component, original
    coordinate order) and the score multiplier gamma.
    """

    weights: np.ndarray
    alpha: np.ndarray
    gamma: float
    base: ProbVector
    kind: MixtureKind = MixtureKind.CUSTOM
    eta: Optional[float] = None
    c_const: Optional[float] = None
    order: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        a = np.atleast_2d(np.array(self.alpha, dtype=float))
        n = self.base.n
        if a.shape != (w.size, n):
            raise DimensionMismatch(f"alpha has shape {a.shape}, expected {(w.size, n)}")
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise InvalidParameter("mixture weights must be nonnegative and sum to 1")
        if np.any(a < 0) or np.any(a.sum(axis=1) <= 0) or not np.all(np.isfinite(a)):
            raise InvalidParameter("every component needs finite, nonnegative, nonzero alpha")
        if not self.gamma >= min_gamma(n) * (1 - 1e-12):
            raise InvalidParameter(f"gamma={self.gamma} is below the floor (n-1)/4 = {min_gamma(n)}")
        mean = w @ (a / a.sum(axis=1, keepdims=True))
        if np.max(np.abs(mean - self.base.entries)) > MEAN_TOL:
            raise InvalidParameter("mixture mean does not reproduce the base point")
        for arr in (w, a):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def block_dims(self) -> Tuple[int, ...]:
        return (self.n,)

    @property
    def base_array(self) -> np.ndarray:
        return self.base.entries

    @property
    def components(self) -> List[DirichletParam]:
        return [DirichletParam(row) for row in self.alpha]

    @property
    def c_cap(self) -> float:
        """Largest c for which (1 + c)p - c*delta stays on the simplex for every delta."""
        p_min = self.base.min_entry
        return p_min / (1.0 - p_min)

    def score(self, delta: np.ndarray) -> np.ndarray:
        return self.gamma * (np.asarray(delta) - self.base.entries)

    def sample(self, rng: RngStream, size: int, eps_supp: Optional[float] = None) -> np.ndarray:
        """
        Draw `size` perturbations, one per row.

        Args:
            rng: Stream consumed by this call
            size: Number of draws
            eps_supp: If given, added to every concentration before sampling

        Returns:
            np.ndarray: (size, n) array of points on the simplex
        """
        keep = self.weights > 0
        alpha = self.alpha[keep]
        weights = self.weights[keep]
        if eps_supp is not None:
            if not eps_supp > 0:
                raise InvalidParameter("eps_supp must be positive")
            alpha = alpha + eps_supp
        rows, cols = np.nonzero(alpha > 0)
        shapes = alpha[rows, cols]
        # every component has at least one positive entry, so groups are exactly the rows
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        scatter = np.zeros((rows.size, self.n))
        scatter[np.arange(rows.size), cols] = weights[rows]

        gen = rng.generator
        chunk = max(1, _CHUNK_ENTRIES // rows.size)
        out = np.empty((size, self.n))
        for lo in range(0, size, chunk):
            hi = min(size, lo + chunk)
            logs = log_gamma_variates(shapes, gen, hi - lo)
            unnorm = np.exp(logs - np.maximum.reduceat(logs, starts, axis=1)[:, rows])
            totals = np.add.reduceat(unnorm, starts, axis=1)[:, rows]
            out[lo:hi] = (unnorm / totals) @ scatter
        return out


@dataclass(frozen=True, eq=False)
class BlockMixture:
    """Independent per-block mixtures sharing one score multiplier."""

    blocks: Tuple[DirichletMixture, ...]
    gamma: float

    @property
    def block_dims(self) -> Tuple[int, ...]:
        return tuple(b.n for b in self.blocks)

    @property
    def n(self) -> int:
        return sum(self.block_dims)

    @property
    def base_array(self) -> np.ndarray:
        return np.concatenate([b.base.entries for b in self.blocks])

    @property
    def kind(self) -> MixtureKind:
        kinds = {b.kind for b in self.blocks}
        return kinds.pop() if len(kinds) == 1 else MixtureKind.CUSTOM

    @property
    def c_cap(self) -> float:
        return min(b.c_cap for b in self.blocks)

    def score(self, delta: np.ndarray) -> np.ndarray:
        return self.gamma * (np.asarray(delta) - self.base_array)

    def sample(self, rng: RngStream, size: int, eps_supp: Optional[float] = None) -> np.ndarray:
        return np.hstack([b.sample(rng.split(i), size, eps_supp) for i, b in enumerate(self.blocks)])


Mixture = Union[DirichletMixture, BlockMixture]


def _sorted_interior(p: ProbVector) -> Tuple[np.ndarray, np.ndarray]:
    if p.min_entry <= 0:
        raise ZeroEntry("base point has a zero entry; the score multiplier is undefined")
    order = np.argsort(p.entries, kind="stable")
    return order, p.entries[order]


def delta_star_thetas(sorted_p: np.ndarray) -> np.ndarray:
    """
    Weight sequence theta^1..theta^n for an ascending base point.

    theta^l (l < n) is the weight of each pair component (l, i), i > l;
    theta^n is the weight of the vertex component at the largest coordinate.
    """
    n = sorted_p.size
    theta = np.zeros(n)
    running = 0.0
    for l in range(n - 1):
        theta[l] = (2.0 * sorted_p[l] - running) / (n - 1 - l)
        running += theta[l]
    last = sorted_p[-1] - 0.5 * running
    # rounding can leave the vertex weight a hair below zero on near-uniform points
    theta[-1] = 0.0 if abs(last) < 1e-12 else last
    return theta


def _delta_star_from_constant(p: ProbVector, c_const: float) -> DirichletMixture:
    order, s = _sorted_interior(p)
    n = p.n
    theta = delta_star_thetas(s)
    weights, rows = [], []
    for l in range(n - 1):
        a0 = c_const * theta[l] ** 2 - 1.0
        if a0 <= 0:
            raise BadMargin(f"component concentration {a0:.3g} is not positive; C={c_const:.6g} is too small")
        for i in range(l + 1, n):
            row = np.zeros(n)
            row[order[l]] = row[order[i]] = a0 / 2.0
            weights.append(theta[l])
            rows.append(row)
    vertex = np.zeros(n)
    vertex[order[-1]] = 1.0
    weights.append(theta[-1])
    rows.append(vertex)
    return DirichletMixture(
        weights=np.array(weights),
        alpha=np.vstack(rows),
        gamma=4.0 * c_const / n,
        base=p,
        kind=MixtureKind.DELTA_STAR,
        c_const=c_const,
        order=order,
        theta=theta,
    )


def delta_star_constant_floor(p: ProbVector) -> float:
    """The bound (n-1)^2 / (4 p_min^2) that the constant C must exceed."""
    return (p.n - 1) ** 2 / (4.0 * p.min_entry**2)


def build_delta_star(p: ProbVector, c_margin: float = 2.0) -> DirichletMixture:
    """
    Build the delta-star mixture with n(n-1)/2 + 1 components.

    Args:
        p: Interior base point
        c_margin: Multiple of the lower bound used for the constant C (> 1)

    Returns:
        DirichletMixture: mixture with gamma = 4C/n

    Raises:
        ZeroEntry: p has a zero coordinate
        BadMargin: c_margin <= 1
    """
    if p.min_entry <= 0:
        raise ZeroEntry("base point has a zero entry; the score multiplier is undefined")
    if not c_margin > 1:
        raise BadMargin(f"c_margin must exceed 1, got {c_margin}")
    return _delta_star_from_constant(p, c_margin * delta_star_constant_floor(p))


def build_delta_dstar(p: ProbVector, eta: float = -1.0) -> DirichletMixture:
    """
    Build the delta-double-star mixture with n components.

    The first component is Dir(n**eta * 1) with weight n * p_min; the others are
    vertices e_(l) with weight p_(l) - p_min.
    """
    order, s = _sorted_interior(p)
    n = p.n
    if not math.isfinite(eta):
        raise InvalidParameter("eta must be finite")
    theta = np.empty(n)
    theta[0] = n * s[0]
    theta[1:] = s[1:] - s[0]
    rows = [np.full(n, float(n) ** eta)]
    for l in range(1, n):
        row = np.zeros(n)
        row[order[l]] = 1.0
        rows.append(row)
    gamma = (float(n) ** (eta + 1.0) + 1.0) / (n * s[0] ** 2)
    return DirichletMixture(
        weights=theta,
        alpha=np.vstack(rows),
        gamma=gamma,
        base=p,
        kind=MixtureKind.DELTA_DOUBLE_STAR,
        eta=float(eta),
        order=order,
        theta=theta.copy(),
    )


def build_mixture(p: ProbVector, kind: MixtureKind, eta: float = -1.0, c_margin: float = 2.0) -> DirichletMixture:
    kind = MixtureKind(kind)
    if kind == MixtureKind.DELTA_STAR:
        return build_delta_star(p, c_margin)
    if kind == MixtureKind.DELTA_DOUBLE_STAR:
        return build_delta_dstar(p, eta)
    raise WrongKind(f"no builder for mixture kind '{kind.value}'")


@dataclass(frozen=True)
class BlockSpec:
    """One block of a multi-distribution perturbation."""

    p: ProbVector
    kind: MixtureKind = MixtureKind.DELTA_DOUBLE_STAR
    eta: float = -1.0
    c_margin: float = 2.0


def _realize_gamma(spec: BlockSpec, gamma: float) -> DirichletMixture:
    n = spec.p.n
    if spec.kind == MixtureKind.DELTA_STAR:
        return _delta_star_from_constant(spec.p, n * gamma / 4.0)
    if spec.kind == MixtureKind.DELTA_DOUBLE_STAR:
        rhs = (gamma * n * spec.p.min_entry**2 - 1.0) / n
        if rhs <= 0:
            raise InfeasibleEta(f"block of dimension {n} cannot reach gamma={gamma:.6g}")
        return build_delta_dstar(spec.p, math.log(rhs) / math.log(n))
    raise WrongKind(f"no builder for mixture kind '{spec.kind}'")


def build_multi(specs: Sequence[BlockSpec], gamma: Optional[float] = None) -> BlockMixture:
    """
    Build per-block mixtures that share one score multiplier.

    Each block is first built with its own defaults; the shared gamma is the
    largest of those (or the explicit `gamma`, which may not be smaller), and
    every block is rebuilt to realize it: C_l = n_l * gamma / 4 for delta-star,
    n_l**eta_l = (gamma * n_l * p_min**2 - 1) / n_l for delta-double-star.

    Raises:
        InfeasibleEta: a delta-double-star block cannot realize gamma
        InvalidParameter: explicit gamma below a block's own multiplier
    """
    if not specs:
        raise InvalidParameter("build_multi needs at least one block")
    own = [build_mixture(s.p, s.kind, eta=s.eta, c_margin=s.c_margin) for s in specs]
    floor = max(m.gamma for m in own)
    if gamma is None:
        shared = floor
    else:
        if gamma < floor * (1 - 1e-12):
            raise InvalidParameter(f"gamma={gamma:.6g} is below the largest block multiplier {floor:.6g}")
        shared = float(gamma)
    blocks = tuple(
        mix if mix.gamma == shared else _realize_gamma(spec, shared) for spec, mix in zip(specs, own)
    )
    return BlockMixture(blocks=blocks, gamma=shared)


@dataclass
class MomentReport:
    """Exact score moment residuals of a mixture."""

    mc1_residual: float
    mc2_residual: float
    lambda_: Optional[float]
    mc3_spread: float
    mu: Optional[float]
    gamma: float
    mean_offset: np.ndarray = field(repr=False)
    second_moment: np.ndarray = field(repr=False)
    third_moment: np.ndarray = field(repr=False)

    @property
    def mc3_holds(self) -> bool:
        return self.mu is not None

    def passes(self, require_mc3: bool) -> bool:
        """
        Residual gate. The MC1 bound is applied relative to max(1, gamma): the
        score mean is gamma times a rounding-level offset, and gamma reaches 1e5
        for delta-star at n = 20.
        """
        ok = self.mc1_residual <= MC1_TOL * max(1.0, self.gamma) and self.mc2_residual <= MC2_TOL
        if require_mc3:
            ok = ok and self.mc3_spread <= MC3_TOL
        return ok

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {
            "mc1_residual": self.mc1_residual,
            "mc2_residual": self.mc2_residual,
            "lambda": self.lambda_,
            "mc3_spread": self.mc3_spread,
            "mu": self.mu,
            "gamma": self.gamma,
        }


def _exact_moments(mix: DirichletMixture) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean offset, E[(d-p)(d-p)'] and E[(d-p)^(x3)] summed over independent components."""
    w = mix.weights
    a0 = mix.alpha.sum(axis=1)
    means = mix.alpha / a0[:, None]
    offset = w @ means - mix.base.entries

    c2 = w**2 / (a0 + 1.0)
    cov = np.diag(c2 @ means) - np.einsum("q,qi,qj->ij", c2, means, means)
    c3 = w**3 / ((a0 + 1.0) * (a0 + 2.0))
    third = weighted_third_central(means, c3)

    second = cov + np.outer(offset, offset)
    third = (
        third
        + np.einsum("ij,k->ijk", cov, offset)
        + np.einsum("ik,j->ijk", cov, offset)
        + np.einsum("jk,i->ijk", cov, offset)
        + np.einsum("i,j,k->ijk", offset, offset, offset)
    )
    return offset, second, third


def verify_moments(mix: Mixture) -> MomentReport:
    """
    Exact check of the score moment conditions.

    MC1: E[S] = 0. MC2: gamma * E[(d-p)(d-p)'] = I - (1/n) 11' (blockwise for
    block mixtures). MC3: gamma * E[(d-p)_i (d-p)_j (d-p)_k] constant over (i, j, k).
    """
    blocks = mix.blocks if isinstance(mix, BlockMixture) else (mix,)
    n = sum(b.n for b in blocks)
    offset = np.zeros(n)
    second = np.zeros((n, n))
    third = np.zeros((n, n, n))
    target = np.zeros((n, n))
    lo = 0
    for b in blocks:
        sl = slice(lo, lo + b.n)
        off, sec, thr = _exact_moments(b)
        offset[sl] = off
        second[sl, sl] = sec
        third[sl, sl, sl] = thr
        target[sl, sl] = np.eye(b.n) - 1.0 / b.n
        lo += b.n

    gamma = mix.gamma
    mc1 = gamma * float(np.max(np.abs(offset)))
    mc2 = float(np.max(np.abs(gamma * second - target)))
    scaled = gamma * third
    spread = float(scaled.max() - scaled.min())
    mu = float(scaled.mean()) if spread <= MU_SPREAD_TOL else None
    # blockwise targets have no single lambda
    lam = 1.0 / blocks[0].n if len(blocks) == 1 else None
    return MomentReport(
        mc1_residual=mc1,
        mc2_residual=mc2,
        lambda_=lam,
        mc3_spread=spread,
        mu=mu,
        gamma=gamma,
        mean_offset=offset,
        second_moment=second,
        third_moment=third,
    )


def check_theta_monotone(mix: DirichletMixture) -> bool:
    """True iff theta^1 <= ... <= theta^{n-1} in the sorted frame (delta-star only)."""
    if mix.kind != MixtureKind.DELTA_STAR or mix.theta is None:
        raise WrongKind("theta monotonicity is defined for delta-star mixtures only")
    head = mix.theta[:-1]
    slack = 1e-12 * max(1.0, float(np.abs(head).max()))
    return bool(np.all(np.diff(head) >= -slack))

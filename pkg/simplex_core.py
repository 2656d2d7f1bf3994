"""
Probability-vector arithmetic, Dirichlet sampling and exact Dirichlet moments.

Sampling draws independent Gamma variates in log space and normalizes them, so
coordinates with a zero concentration stay exactly zero and small shapes
(well below 1) do not underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from errors import DimensionTooSmall, InvalidParameter, NegativeMass, ZeroTotal

SUM_TOL = 1e-12
NEG_TOL = 1e-12
DEFAULT_EPS_SUPP = 1e-6


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float).ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProbVector:
    """A point on the probability simplex of dimension n >= 2."""

    entries: np.ndarray

    def __post_init__(self):
        arr = _readonly(self.entries)
        if arr.size < 2:
            raise DimensionTooSmall(f"probability vector needs n >= 2, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParameter("probability vector has non-finite entries")
        if np.any(arr < 0):
            raise NegativeMass(f"negative entry {arr.min():.3g} in probability vector")
        total = math.fsum(arr)
        if abs(total - 1.0) > SUM_TOL:
            raise InvalidParameter(f"entries sum to {total!r}, expected 1")
        object.__setattr__(self, "entries", arr)

    @property
    def n(self) -> int:
        return int(self.entries.size)

    @property
    def min_entry(self) -> float:
        return float(self.entries.min())

    def as_array(self) -> np.ndarray:
        return self.entries

    def __len__(self) -> int:
        return self.n

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.entries
        return self.entries.astype(dtype)

    def __repr__(self) -> str:
        return f"ProbVector({np.array2string(self.entries, precision=6)})"


def make_prob_vector(raw: Sequence[float]) -> ProbVector:
    """
    Normalize a raw nonnegative vector onto the simplex.

    Entries down to -1e-12 are treated as rounding noise and clamped to 0.

    Args:
        raw: Vector of length >= 2

    Returns:
        ProbVector: raw / sum(raw)

    Raises:
        DimensionTooSmall, NegativeMass, ZeroTotal
    """
    arr = np.array(raw, dtype=float).ravel()
    if arr.size < 2:
        raise DimensionTooSmall(f"probability vector needs n >= 2, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter("raw vector has non-finite entries")
    if np.any(arr < -NEG_TOL):
        raise NegativeMass(f"entry {arr.min():.3g} is below -{NEG_TOL}")
    arr = np.clip(arr, 0.0, None)
    total = math.fsum(arr)
    if total <= 0:
        raise ZeroTotal("raw vector has zero total mass")
    return ProbVector(arr / total)


@dataclass(frozen=True, eq=False)
class DirichletParam:
    """Concentration vector of a Dirichlet law; zero entries are deterministic zeros."""

    alpha: np.ndarray

    def __post_init__(self):
        arr = _readonly(self.alpha)
        if arr.size < 2:
            raise DimensionTooSmall(f"Dirichlet parameter needs n >= 2, got {arr.size}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise InvalidParameter("Dirichlet concentrations must be finite and >= 0")
        if arr.sum() <= 0:
            raise InvalidParameter("Dirichlet concentrations must have a positive total")
        object.__setattr__(self, "alpha", arr)

    @property
    def alpha0(self) -> float:
        return float(self.alpha.sum())

    @property
    def n(self) -> int:
        return int(self.alpha.size)


class RngStream:
    """
    Splittable, reproducible random stream.

    A stream is identified by (seed, path). split() derives child streams whose
    sequences are independent of the parent and of each other. The generator is
    created lazily and then advanced by every draw, so one instance must not be
    shared by concurrent callers; give each task its own split instead.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidParameter(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        keys = tuple(int(k) for k in path)
        if any(k < 0 for k in keys):
            raise InvalidParameter("stream path keys must be nonnegative")
        self.seed = seed
        self.path: Tuple[int, ...] = keys
        self._generator: Optional[np.random.Generator] = None

    def split(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._generator = np.random.Generator(np.random.Philox(seq))
        return self._generator

    def child_seed(self) -> int:
        """A 63-bit integer derived from this stream, for handing to external programs."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={list(self.path)})"


def log_gamma_variates(shapes: np.ndarray, gen: np.random.Generator, size: int) -> np.ndarray:
    """
    Draw log Gamma(shape, 1) variates, shape (size, len(shapes)).

    Shapes below 1 use Gamma(a) = Gamma(a + 1) * U**(1/a), evaluated in logs.
    """
    shapes = np.asarray(shapes, dtype=float)
    boost = shapes < 1.0
    draws = gen.standard_gamma(np.where(boost, shapes + 1.0, shapes), size=(size, shapes.size))
    logs = np.log(draws)
    if boost.any():
        # 1 - random() lies in (0, 1], so the log is finite
        u = 1.0 - gen.random((size, int(boost.sum())))
        logs[:, boost] += np.log(u) / shapes[boost]
    return logs


def sample_dirichlet_many(param: DirichletParam, rng: RngStream, size: int) -> np.ndarray:
    """Draw `size` Dirichlet samples as rows of an array."""
    if size < 0:
        raise InvalidParameter("size must be nonnegative")
    active = param.alpha > 0
    out = np.zeros((size, param.n))
    logs = log_gamma_variates(param.alpha[active], rng.generator, size)
    out[:, active] = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
    return out


def sample_dirichlet(param: DirichletParam, rng: RngStream) -> ProbVector:
    return ProbVector(sample_dirichlet_many(param, rng, 1)[0])


def dirichlet_mean(param: DirichletParam) -> np.ndarray:
    return param.alpha / param.alpha0


def dirichlet_cov(param: DirichletParam) -> np.ndarray:
    m = dirichlet_mean(param)
    return (np.diag(m) - np.outer(m, m)) / (param.alpha0 + 1.0)


def dirichlet_third_central(param: DirichletParam, i: int, j: int, k: int) -> float:
    """
    Third central moment E[(x_i - m_i)(x_j - m_j)(x_k - m_k)].

    Three cases: all indices equal, exactly two equal, all distinct.
    """
    m = dirichlet_mean(param)
    denom = (param.alpha0 + 1.0) * (param.alpha0 + 2.0)
    if i == j == k:
        mi = m[i]
        return float((4 * mi**3 - 6 * mi**2 + 2 * mi) / denom)
    if i == j or i == k or j == k:
        # the repeated index and the odd one out
        rep = i if (i == j or i == k) else j
        odd = k if i == j else (j if i == k else i)
        return float((4 * m[rep] ** 2 * m[odd] - 2 * m[rep] * m[odd]) / denom)
    return float(4 * m[i] * m[j] * m[k] / denom)


def weighted_third_central(means: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    """
    Sum over components of coef_k * T(m_k), where T(m) is the Dirichlet
    third-central tensor without its 1/((a0+1)(a0+2)) factor:

        4 m_i m_j m_k - 2 (d_ij m_i m_k + d_ik m_i m_j + d_jk m_i m_j) + 2 d_ijk m_i

    Args:
        means: (K, n) component means
        coefs: (K,) weights, already divided by (a0+1)(a0+2)

    Returns:
        np.ndarray: (n, n, n) tensor
    """
    means = np.atleast_2d(means)
    n = means.shape[1]
    cubic = np.einsum("q,qi,qj,qk->ijk", coefs, means, means, means)
    quad = np.einsum("q,qi,qj->ij", coefs, means, means)
    lin = coefs @ means
    eye = np.eye(n)
    tensor = 4.0 * cubic
    tensor -= 2.0 * (eye[:, :, None] * quad[:, None, :])
    tensor -= 2.0 * (eye[:, None, :] * quad[:, :, None])
    tensor -= 2.0 * (eye[None, :, :] * quad[:, :, None])
    idx = np.arange(n)
    tensor[idx, idx, idx] += 2.0 * lin
    return tensor


def dirichlet_third_central_tensor(param: DirichletParam) -> np.ndarray:
    a0 = param.alpha0
    coef = np.array([1.0 / ((a0 + 1.0) * (a0 + 2.0))])
    return weighted_third_central(dirichlet_mean(param)[None, :], coef)


def dirichlet_raw_moment(param: DirichletParam, beta: Sequence[float]) -> float:
    """
    Product moment E[prod_i x_i**beta_i] from the Gamma-function formula.

    Zero-concentration coordinates contribute 1 when beta_i = 0 and make the
    moment 0 otherwise.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != param.alpha.shape or np.any(beta < 0):
        raise InvalidParameter("beta must be a nonnegative vector matching alpha")
    zero = param.alpha == 0
    if np.any(beta[zero] > 0):
        return 0.0
    a = param.alpha[~zero]
    b = beta[~zero]
    log_m = gammaln(param.alpha0) - gammaln(param.alpha0 + beta.sum())
    log_m += float(np.sum(gammaln(a + b) - gammaln(a)))
    return float(np.exp(log_m))


def support_adjust(param: DirichletParam, eps_supp: float = DEFAULT_EPS_SUPP) -> DirichletParam:
    """Add eps_supp to every concentration so the support is the full simplex."""
    if not eps_supp > 0:
        raise InvalidParameter(f"eps_supp must be positive, got {eps_supp}")
    return DirichletParam(param.alpha + eps_supp)


def support_adjust_shift(param: DirichletParam, eps_supp: float = DEFAULT_EPS_SUPP) -> float:
    """Sup-norm shift of the mean caused by support_adjust; at most n*eps_supp/alpha0."""
    adjusted = support_adjust(param, eps_supp)
    return float(np.max(np.abs(dirichlet_mean(adjusted) - dirichlet_mean(param))))

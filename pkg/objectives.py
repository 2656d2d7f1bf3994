"""
Objective oracles for simplex optimization.

An oracle returns one noisy evaluation Z(x) per call. Built-in oracles cover the
quadratic and Rosenbrock test functions, an M/G/1 queue simulated with Lindley's
recursion, and external evaluators reached through a subprocess or an HTTP
endpoint. Every evaluation takes its own RngStream, so oracles stay pure and can
be called from several threads when they declare it.
"""

import logging
import math
import os
import shlex
import subprocess
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import rosen, rosen_der, rosen_hess

from errors import ConfigError, DimensionMismatch, DimensionTooSmall, InvalidParameter, OracleFailure
from simplex_core import RngStream

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "SIMPLEXGRAD_SEED"
_NOISE_KEY = 0


class ObjectiveKind(str, Enum):
    QUADRATIC = "quadratic"
    ROSENBROCK = "rosenbrock"
    MG1 = "mg1"
    CUSTOM = "custom"


class MG1Config(BaseModel):
    """Single-server queue with exponential arrivals and a discrete service law."""

    model_config = ConfigDict(extra="forbid")

    n_support: int = Field(20, ge=2, description="Number of service-time support points")
    horizon: int = Field(500, ge=1, description="Customers averaged per sample path")
    arrival_rate: float = Field(1.0, gt=0)
    support_lo: float = Field(0.1, ge=0)
    support_step_span: float = Field(1.1, gt=0)


@dataclass(frozen=True)
class OracleSpec:
    kind: ObjectiveKind
    block_dims: Tuple[int, ...]
    accepts_off_simplex: bool
    concurrent_safe: bool
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.block_dims:
            raise DimensionTooSmall("an oracle needs at least one block")
        if any(d < 2 for d in self.block_dims):
            raise DimensionTooSmall(f"every block needs dimension >= 2, got {self.block_dims}")
        if self.noise_sigma < 0:
            raise InvalidParameter("noise_sigma must be nonnegative")

    @property
    def n(self) -> int:
        return sum(self.block_dims)


def _blocks(x: np.ndarray, dims: Sequence[int]):
    lo = 0
    for d in dims:
        yield x[..., lo : lo + d]
        lo += d


def eval_quadratic(p, center: Optional[np.ndarray] = None) -> float:
    """Squared distance to the simplex center (or to `center`)."""
    x = np.asarray(p, dtype=float)
    if center is None:
        center = np.full(x.shape[-1], 1.0 / x.shape[-1])
    return float(np.sum((x - center) ** 2))


def eval_rosenbrock_simplex(p) -> float:
    """Rosenbrock function evaluated at p + (1 - 1/n) * 1, minimal at the simplex center."""
    x = np.asarray(p, dtype=float)
    n = x.shape[-1]
    return float(rosen(x + (1.0 - 1.0 / n)))


def quadratic_gradient(p) -> np.ndarray:
    """Directional gradient 2p - 2||p||^2 1 of the quadratic objective."""
    p = np.asarray(p, dtype=float)
    return 2.0 * p - 2.0 * float(p @ p)


def rosenbrock_gradient(p) -> np.ndarray:
    """Directional gradient g - (g'p) 1, with g the gradient of the shifted Rosenbrock function."""
    p = np.asarray(p, dtype=float)
    g = rosen_der(p + (1.0 - 1.0 / p.size))
    return g - float(g @ p)


def directional_gradient(func: Callable[[np.ndarray], float], p, eps: Tuple[float, float] = (1e-3, 1e-4)) -> np.ndarray:
    """
    Numerical directional gradient d/dt Z((1 - t)p + t e_i) at t = 0+.

    Two one-sided quotients are combined by Richardson extrapolation, which
    removes the first-order error term.

    Args:
        func: Objective on the simplex
        p: Base point
        eps: The two step sizes (coarse, fine)

    Returns:
        np.ndarray: Estimated gradient, one entry per coordinate
    """
    p = np.asarray(p, dtype=float)
    coarse, fine = eps
    ratio = coarse / fine
    base = func(p)
    out = np.empty(p.size)
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = 1.0
        d_coarse = (func((1 - coarse) * p + coarse * e) - base) / coarse
        d_fine = (func((1 - fine) * p + fine * e) - base) / fine
        out[i] = (ratio * d_fine - d_coarse) / (ratio - 1.0)
    return out


@dataclass(frozen=True)
class SmoothObjective:
    """Noise-free objective with the gradient and Hessian of its off-simplex extension."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]


def smooth_objective(kind: ObjectiveKind, n: int) -> SmoothObjective:
    """Row-wise value plus full-space derivatives for the synthetic objectives."""
    kind = ObjectiveKind(kind)
    shift = 1.0 - 1.0 / n
    if kind == ObjectiveKind.QUADRATIC:
        return SmoothObjective(
            value=lambda x: np.sum((np.asarray(x) - 1.0 / n) ** 2, axis=-1),
            gradient=lambda p: 2.0 * (np.asarray(p) - 1.0 / n),
            hessian=lambda p: 2.0 * np.eye(n),
        )
    if kind == ObjectiveKind.ROSENBROCK:
        return SmoothObjective(
            value=lambda x: rosen(np.asarray(x).T + shift),
            gradient=lambda p: rosen_der(np.asarray(p) + shift),
            hessian=lambda p: rosen_hess(np.asarray(p) + shift),
        )
    raise ConfigError(f"no closed-form derivatives for objective '{kind.value}'")


def mg1_support(cfg: MG1Config) -> np.ndarray:
    i = np.arange(cfg.n_support)
    return cfg.support_lo + cfg.support_step_span * i / (cfg.n_support - 1)


def lindley_waits(service: np.ndarray, interarrival: np.ndarray) -> np.ndarray:
    """
    Waiting times W_1 = 0, W_{k+1} = max(0, W_k + S_k - A_{k+1}).

    The recursion is evaluated in closed form: with U the partial sums of
    S_k - A_{k+1} (U_1 = 0), W_k = U_k - min_{j <= k} U_j.
    """
    service = np.asarray(service, dtype=float)
    interarrival = np.asarray(interarrival, dtype=float)
    if service.shape != interarrival.shape:
        raise DimensionMismatch("service and interarrival sequences must have equal length")
    steps = service[:-1] - interarrival[1:]
    u = np.concatenate(([0.0], np.cumsum(steps)))
    return u - np.minimum.accumulate(u)


def eval_mg1(p, cfg: MG1Config, rng: RngStream) -> float:
    """
    Average waiting time of the first `horizon` customers on one sample path.

    Interarrival times are exponential with rate cfg.arrival_rate; service times
    are drawn by inverse CDF from the support points with probabilities p.
    """
    p = np.asarray(p, dtype=float)
    if p.size != cfg.n_support:
        raise DimensionMismatch(f"service pmf has {p.size} entries, queue expects {cfg.n_support}")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise OracleFailure("the queue oracle only evaluates probability vectors")
    gen = rng.generator
    interarrival = gen.exponential(1.0 / cfg.arrival_rate, size=cfg.horizon)
    u = gen.random(cfg.horizon)
    cdf = np.cumsum(np.clip(p, 0.0, None))
    idx = np.minimum(np.searchsorted(cdf / cdf[-1], u, side="right"), cfg.n_support - 1)
    service = mg1_support(cfg)[idx]
    return float(lindley_waits(service, interarrival).mean())


class Oracle:
    """Base class for objective oracles."""

    def __init__(self, spec: OracleSpec):
        self.spec = spec

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def accepts_off_simplex(self) -> bool:
        return self.spec.accepts_off_simplex

    @property
    def concurrent_safe(self) -> bool:
        return self.spec.concurrent_safe

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatch(f"oracle expects {self.n} coordinates, got shape {x.shape}")
        return x

    def evaluate(self, x, rng: RngStream) -> float:
        """Return one evaluation of the objective at x."""
        raise NotImplementedError("Subclasses must implement evaluate method")

    def __call__(self, x, rng: RngStream) -> float:
        return self.evaluate(x, rng)


class QuadraticOracle(Oracle):
    def __init__(self, block_dims: Sequence[int]):
        super().__init__(OracleSpec(ObjectiveKind.QUADRATIC, tuple(block_dims), True, True))

    def evaluate(self, x, rng: RngStream) -> float:
        x = self._check(x)
        return math.fsum(eval_quadratic(b) for b in _blocks(x, self.spec.block_dims))


class RosenbrockOracle(Oracle):
    def __init__(self, block_dims: Sequence[int]):
        super().__init__(OracleSpec(ObjectiveKind.ROSENBROCK, tuple(block_dims), True, True))

    def evaluate(self, x, rng: RngStream) -> float:
        x = self._check(x)
        return math.fsum(eval_rosenbrock_simplex(b) for b in _blocks(x, self.spec.block_dims))


class MG1Oracle(Oracle):
    """Queue oracle; inherently noisy, never evaluated off the simplex."""

    def __init__(self, cfg: MG1Config):
        super().__init__(OracleSpec(ObjectiveKind.MG1, (cfg.n_support,), False, True))
        self.cfg = cfg

    def evaluate(self, x, rng: RngStream) -> float:
        return eval_mg1(self._check(x), self.cfg, rng)


class GaussianNoiseOracle(Oracle):
    """Adds an independent N(0, sigma^2) draw to every evaluation of `base`."""

    def __init__(self, base: Oracle, sigma: float):
        if sigma < 0:
            raise InvalidParameter("sigma must be nonnegative")
        spec = base.spec
        super().__init__(
            OracleSpec(spec.kind, spec.block_dims, spec.accepts_off_simplex, spec.concurrent_safe, float(sigma))
        )
        self.base = base
        self.sigma = float(sigma)

    def evaluate(self, x, rng: RngStream) -> float:
        value = self.base.evaluate(x, rng)
        if self.sigma == 0:
            return value
        return value + self.sigma * float(rng.split(_NOISE_KEY).generator.standard_normal())


def with_gaussian_noise(base: Oracle, sigma: float) -> Oracle:
    return GaussianNoiseOracle(base, sigma)


def _parse_value(text: str, source: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise OracleFailure(f"{source} returned a non-numeric value: {text.strip()[:80]!r}")
    if not math.isfinite(value):
        raise OracleFailure(f"{source} returned a non-finite value")
    return value


class SubprocessOracle(Oracle):
    """
    External evaluator run once per evaluation.

    The point is written to standard input as one line of whitespace-separated
    numbers; the program prints one number on standard output. The evaluation
    seed is passed in the SIMPLEXGRAD_SEED environment variable.
    """

    def __init__(
        self,
        command: str,
        block_dims: Sequence[int],
        accepts_off_simplex: bool = False,
        concurrent_safe: bool = False,
        timeout: float = 60.0,
    ):
        super().__init__(
            OracleSpec(ObjectiveKind.CUSTOM, tuple(block_dims), accepts_off_simplex, concurrent_safe)
        )
        self.argv = shlex.split(command)
        if not self.argv:
            raise ConfigError("custom objective command is empty")
        self.timeout = timeout

    def evaluate(self, x, rng: RngStream) -> float:
        x = self._check(x)
        line = " ".join(repr(float(v)) for v in x) + "\n"
        env = dict(os.environ, **{SEED_ENV_VAR: str(rng.child_seed())})
        try:
            result = subprocess.run(
                self.argv, input=line, capture_output=True, text=True, env=env, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise OracleFailure(f"could not run {self.argv[0]}: {e}")
        if result.returncode != 0:
            raise OracleFailure(f"{self.argv[0]} exited with code {result.returncode}: {result.stderr.strip()[:200]}")
        return _parse_value(result.stdout, self.argv[0])


class HttpOracle(Oracle):
    """
    External evaluation service.

    POSTs {"p": [...], "seed": int} and expects {"value": float}. A 503 reply is
    retried after `retry_wait` seconds; transport errors back off exponentially.
    """

    def __init__(
        self,
        url: str,
        block_dims: Sequence[int],
        accepts_off_simplex: bool = False,
        concurrent_safe: bool = False,
        max_retries: int = 3,
        retry_wait: float = 10.0,
        timeout: float = 30.0,
    ):
        super().__init__(
            OracleSpec(ObjectiveKind.CUSTOM, tuple(block_dims), accepts_off_simplex, concurrent_safe)
        )
        self.url = url
        self.max_retries = max_retries
        self.retry_wait = retry_wait
        self.timeout = timeout
        self.headers = {"Content-Type": "application/json", "Accept": "application/json"}

    def evaluate(self, x, rng: RngStream) -> float:
        x = self._check(x)
        payload = {"p": [float(v) for v in x], "seed": rng.child_seed()}

        for attempt in range(self.max_retries):
            try:
                response = requests.post(self.url, headers=self.headers, json=payload, timeout=self.timeout)

                if response.status_code == 200:
                    try:
                        return _parse_value(str(response.json()["value"]), self.url)
                    except (KeyError, TypeError, ValueError) as e:
                        raise OracleFailure(f"malformed reply from {self.url}: {e}")
                elif response.status_code == 503 and attempt < self.max_retries - 1:
                    logger.info("evaluation service busy, retrying in %.0fs", self.retry_wait)
                    time.sleep(self.retry_wait)
                else:
                    # client and server errors are final; only 503 and transport errors are retried
                    raise OracleFailure(f"unexpected status {response.status_code} from {self.url}")
            except requests.exceptions.RequestException as e:
                if attempt < self.max_retries - 1:
                    time.sleep(2**attempt)
                else:
                    raise OracleFailure(f"evaluation request failed: {e}")
        raise OracleFailure(f"evaluation service at {self.url} did not answer after {self.max_retries} attempts")


def create_oracle(
    kind: ObjectiveKind,
    block_dims: Sequence[int] = (),
    sigma: float = 0.0,
    mg1: Optional[MG1Config] = None,
    command: Optional[str] = None,
    url: Optional[str] = None,
    accepts_off_simplex: bool = False,
    concurrent_safe: bool = False,
) -> Oracle:
    """
    Build an oracle by kind, wrapped with Gaussian noise when sigma > 0.

    Raises:
        ConfigError: unknown kind or missing settings for a custom oracle
    """
    try:
        kind = ObjectiveKind(kind)
    except ValueError:
        raise ConfigError(f"unknown objective kind '{kind}'")

    if kind == ObjectiveKind.QUADRATIC:
        oracle: Oracle = QuadraticOracle(block_dims)
    elif kind == ObjectiveKind.ROSENBROCK:
        oracle = RosenbrockOracle(block_dims)
    elif kind == ObjectiveKind.MG1:
        cfg = mg1 or MG1Config()
        if block_dims and tuple(block_dims) != (cfg.n_support,):
            raise ConfigError(f"queue objective has one block of size {cfg.n_support}, got {tuple(block_dims)}")
        oracle = MG1Oracle(cfg)
    elif command:
        oracle = SubprocessOracle(command, block_dims, accepts_off_simplex, concurrent_safe)
    elif url:
        oracle = HttpOracle(url, block_dims, accepts_off_simplex, concurrent_safe)
    else:
        raise ConfigError("custom objective needs a command or a url")

    return with_gaussian_noise(oracle, sigma) if sigma > 0 else oracle

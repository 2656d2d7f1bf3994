"""
Experiment runners behind the CLI subcommands.

Each runner takes a validated ExperimentConfig, writes its files into an output
directory and returns what the CLI needs to report. Work items are fanned out
over a thread pool, but rows are always written in (grid index, trial index)
order with 17 significant digits, so reruns produce byte-identical files.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from config import (
    BenchSpec,
    ExperimentConfig,
    ObjectiveSpec,
    OptimizeSpec,
    PointSpec,
    SweepSpec,
    dump_config,
)
from errors import InsufficientPoints, InvalidParameter, RunAborted
from estimators import EstimatorSpec, EstimatorStats, run_stats, zero_sum
from mixtures import MixtureKind, build_mixture, check_theta_monotone, verify_moments
from objectives import ObjectiveKind, mg1_support
from optimizers import FWSA, RunTrace, run_fwsa, run_mdsa
from simplex_core import DirichletParam, ProbVector, RngStream, make_prob_vector, sample_dirichlet_many
from subproblems import SetKind, UncertaintySet, kl_ball, moment_set_around, simplex_set

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"

ESTIMATE_COLUMNS = ["seed", "estimator", "mixture", "axis", "sigma", "R", "c", "n", "point", "trial", "estimate_norm", "budget"]
SUMMARY_COLUMNS = ["estimator", "mixture", "axis", "sigma", "R", "c", "n", "points", "trials", "variance_scalar", "mean_norm"]
TRACE_COLUMNS = [
    "seed",
    "algorithm",
    "trial",
    "k",
    "objective",
    "fw_gap",
    "prox_divergence",
    "c",
    "R",
    "gamma",
    "step",
    "oracle_calls",
    "probe_calls",
    "min_entry",
]
MEAN_COLUMNS = ["k", "trials", "objective", "criterion", "oracle_calls"]


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    """Header plus rows in the given order, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format_value(row.get(k)) for k in columns})


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def prepare_output(cfg: ExperimentConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG).write_text(dump_config(cfg), encoding="utf-8")
    return out_dir


def _pool_map(func, items: List, workers: int) -> List:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def random_base_points(n: int, count: int, concentration: float, rng: RngStream) -> np.ndarray:
    """`count` interior points drawn from Dir(concentration * 1)."""
    return sample_dirichlet_many(DirichletParam(np.full(n, concentration)), rng, count)


# verify-moments


def run_verify_moments(cfg: ExperimentConfig, out_dir: Path) -> Tuple[Dict[str, Any], bool]:
    """
    Exact moment report for the configured mixture plus Monte-Carlo estimates
    from `repetitions` draws. Passes when the exact residuals are within the
    module thresholds (MC3 only for delta-star).
    """
    spec = cfg.moments
    rng = RngStream(cfg.seed)
    if spec.base is not None:
        p = make_prob_vector(spec.base)
    else:
        p = ProbVector(random_base_points(spec.n, 1, spec.base_concentration, rng.split(0))[0])
    mix = build_mixture(p, spec.mixture, eta=spec.eta, c_margin=spec.c_margin)
    report = verify_moments(mix)
    star = spec.mixture == MixtureKind.DELTA_STAR

    x = mix.sample(rng.split(1), spec.repetitions) - p.as_array()
    gamma = mix.gamma
    target = np.eye(p.n) - 1.0 / p.n
    emp_second = gamma * (x.T @ x) / spec.repetitions
    emp_third = gamma * np.einsum("si,sj,sk->ijk", x, x, x) / spec.repetitions
    empirical = {
        "repetitions": spec.repetitions,
        "mc1_residual": float(np.max(np.abs(gamma * x.mean(axis=0)))),
        "mc2_residual": float(np.max(np.abs(emp_second - target))),
        "third_min": float(emp_third.min()),
        "third_max": float(emp_third.max()),
    }
    passed = report.passes(require_mc3=star)
    payload = {
        "mixture": spec.mixture.value,
        "n": p.n,
        "base": p.as_array(),
        "analytic": report.to_dict(),
        "empirical": empirical,
        "mc3_checked": star,
        "theta_monotone": check_theta_monotone(mix) if star else None,
        "passed": passed,
    }
    write_json(Path(out_dir) / "moments.json", payload)
    return payload, passed


# estimate


@dataclass
class GridPoint:
    axis: str
    point: PointSpec


def grid_points(point: PointSpec, sweeps: Sequence[SweepSpec]) -> List[GridPoint]:
    if not sweeps:
        return [GridPoint("", point)]
    return [GridPoint(s.axis, pt) for s in sweeps for pt in s.points()]


def variance_at(
    estimator: EstimatorSpec,
    objective: ObjectiveSpec,
    point: PointSpec,
    points: int,
    concentration: float,
    trials: int,
    base_rng: RngStream,
    trial_rng: RngStream,
) -> EstimatorStats:
    """
    Run the estimator at one parameter point.

    Base points are drawn from base_rng, so estimators given the same base_rng
    are compared on the same points.
    """
    oracle = objective.build(point.n, point.sigma)
    p_list = random_base_points(oracle.n, points, concentration, base_rng)
    return run_stats(estimator, oracle, p_list, point.c, point.R, trials, trial_rng)


def run_estimate(cfg: ExperimentConfig, out_dir: Path, workers: int = 1) -> List[Dict[str, Any]]:
    """
    Variance study over the configured grid: writes one row per (estimator,
    parameter point, base point, trial) and a summary row per parameter point.
    """
    spec = cfg.estimate
    rng = RngStream(cfg.seed)
    grid = grid_points(spec.point, spec.sweeps)
    tasks = [(ei, gi) for ei in range(len(spec.estimators)) for gi in range(len(grid))]

    def work(task):
        ei, gi = task
        gp = grid[gi]
        logger.info("estimate %s at %s", spec.estimators[ei].label, gp.point)
        return variance_at(
            spec.estimators[ei],
            cfg.objective,
            gp.point,
            spec.points,
            spec.base_concentration,
            spec.trials,
            rng.split(1, gi),
            rng.split(2, ei, gi),
        )

    results = _pool_map(work, tasks, workers)

    rows, summary = [], []
    for (ei, gi), stats in zip(tasks, results):
        est, gp = spec.estimators[ei], grid[gi]
        common = _point_columns(est, gp)
        for i, runs in enumerate(stats.runs):
            for j, value in enumerate(runs):
                rows.append(
                    dict(common, seed=cfg.seed, point=i, trial=j, estimate_norm=float(np.linalg.norm(value)), budget=stats.budget_per_trial)
                )
        summary.append(
            dict(
                common,
                points=spec.points,
                trials=spec.trials,
                variance_scalar=stats.variance_scalar,
                mean_norm=float(np.linalg.norm(zero_sum(stats.mean_estimate, cfg.objective.block_dims(gp.point.n)))),
            )
        )
    write_csv(Path(out_dir) / "estimates.csv", ESTIMATE_COLUMNS, rows)
    write_csv(Path(out_dir) / "estimates_summary.csv", SUMMARY_COLUMNS, summary)
    return summary


def _point_columns(est: EstimatorSpec, gp: GridPoint) -> Dict[str, Any]:
    return {
        "estimator": est.kind.value,
        "mixture": est.mixture.value if est.uses_mixture else "",
        "axis": gp.axis,
        "sigma": gp.point.sigma,
        "R": gp.point.R,
        "c": gp.point.c,
        "n": gp.point.n,
    }


# optimize


def draw_baseline(d: int, rng: RngStream) -> np.ndarray:
    """Shifted-uniform baseline: q_i = 1 + U(0,1), normalized."""
    q = 1.0 + rng.generator.uniform(0.0, 1.0, size=d)
    return q / q.sum()


def block_baselines(spec: OptimizeSpec, objective: ObjectiveSpec, rng: Optional[RngStream] = None) -> List[np.ndarray]:
    """
    Baseline of every block: the configured vector, the uniform vector, or for
    shifted_uniform a fresh draw from rng.split(block index).
    """
    s = spec.set
    if s.baseline_kind == "shifted_uniform" and rng is None:
        raise InvalidParameter("a shifted-uniform baseline needs a random stream")
    out = []
    for bi, d in enumerate(objective.block_dims()):
        if s.baseline_kind == "shifted_uniform":
            baseline = draw_baseline(d, rng.split(bi))
        elif s.baseline is not None:
            baseline = np.array(s.baseline, dtype=float)
        else:
            baseline = np.full(d, 1.0 / d)
        if baseline.size != d:
            raise InvalidParameter(f"set baseline has {baseline.size} entries, block has {d}")
        out.append(baseline)
    return out


def build_sets(
    spec: OptimizeSpec, objective: ObjectiveSpec, baselines: Sequence[np.ndarray]
) -> List[UncertaintySet]:
    s = spec.set
    sets = []
    for d, baseline in zip(objective.block_dims(), baselines):
        if s.kind == SetKind.SIMPLEX:
            sets.append(simplex_set(d))
        elif s.kind == SetKind.KL_BALL:
            sets.append(kl_ball(baseline, s.radius))
        else:
            if s.support is not None:
                support = np.array(s.support, dtype=float)
            elif objective.kind == ObjectiveKind.MG1:
                support = mg1_support(objective.mg1)
            else:
                support = np.arange(1.0, d + 1.0)
            sets.append(moment_set_around(support, baseline, s.powers, s.lower, s.upper))
    return sets


def trial_setup(
    spec: OptimizeSpec, objective: ObjectiveSpec, rng: Optional[RngStream] = None
) -> Tuple[List[UncertaintySet], np.ndarray]:
    """Uncertainty sets and starting point; p_init defaults to the baselines."""
    baselines = block_baselines(spec, objective, rng)
    sets = build_sets(spec, objective, baselines)
    p0 = np.array(spec.p_init, dtype=float) if spec.p_init is not None else np.concatenate(baselines)
    return sets, p0


def _trace_rows(seed: int, trial: int, trace: RunTrace) -> List[Dict[str, Any]]:
    rows = []
    for r in trace.records:
        row = {col: getattr(r, col, None) for col in TRACE_COLUMNS}
        row.update(seed=seed, algorithm=trace.algorithm, trial=trial)
        row.update({f"p_{i + 1}": v for i, v in enumerate(r.p)})
        rows.append(row)
    return rows


def _mean_rows(traces: List[RunTrace]) -> List[Dict[str, Any]]:
    rows = []
    longest = max((len(t) for t in traces), default=0)
    for k in range(longest):
        recs = [t.records[k] for t in traces if len(t) > k]
        crit = [r.fw_gap if r.fw_gap is not None else r.prox_divergence for r in recs]
        rows.append(
            {
                "k": k + 1,
                "trials": len(recs),
                "objective": math.fsum(r.objective for r in recs) / len(recs),
                "criterion": math.fsum(crit) / len(recs),
                "oracle_calls": math.fsum(r.oracle_calls for r in recs) / len(recs),
            }
        )
    return rows


def run_optimize(cfg: ExperimentConfig, out_dir: Path, workers: int = 1) -> List[RunTrace]:
    """
    Run `trials` independent optimizer runs (trial t uses stream split t).

    With a shifted-uniform baseline every trial draws its own ball centre and
    starting point from rng.split(t, 0); the optimizer's own draws start at
    iteration 1, so the two never share a stream.

    If a run aborts, the traces gathered so far, including the partial one, are
    written before the error is raised again.
    """
    spec = cfg.optimize
    oracle = cfg.objective.build()
    rng = RngStream(cfg.seed)
    per_trial = spec.set.baseline_kind == "shifted_uniform"
    shared = None if per_trial else trial_setup(spec, cfg.objective)
    runner = run_fwsa if spec.algorithm == FWSA else run_mdsa
    n = oracle.n
    columns = TRACE_COLUMNS + [f"p_{i + 1}" for i in range(n)]

    def work(t):
        stream = rng.split(t)
        sets, p0 = trial_setup(spec, cfg.objective, stream.split(0)) if per_trial else shared
        try:
            return runner(oracle, sets, spec.schedule, p0, stream, spec.estimator, spec.prox), None
        except RunAborted as e:
            return e.trace, e

    outcomes = _pool_map(work, list(range(spec.trials)), workers)
    traces, error = [], None
    for t, (trace, err) in enumerate(outcomes):
        if trace is not None:
            traces.append(trace)
        if err is not None and error is None:
            error = err
    rows = [row for t, trace in enumerate(traces) for row in _trace_rows(cfg.seed, t, trace)]
    write_csv(Path(out_dir) / "trace.csv", columns, rows)
    write_csv(Path(out_dir) / "trace_mean.csv", MEAN_COLUMNS, _mean_rows(traces))
    for t, trace in enumerate(traces):
        logger.info("trial %d monitors: %s", t, trace.monitors)
    if error is not None:
        raise error
    return traces


# bench


@dataclass
class SlopeReport:
    axis: str
    fitted_slope: float
    r_squared: float
    points: List[Tuple[float, float]]
    expected: Optional[float] = None
    tolerance: Optional[float] = None

    @property
    def passed(self) -> Optional[bool]:
        if self.expected is None or self.tolerance is None:
            return None
        return abs(self.fitted_slope - self.expected) <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def fit_slope(axis: str, xs: Sequence[float], ys: Sequence[float]) -> SlopeReport:
    """
    Least-squares slope of log(y) against log(x).

    Raises:
        InsufficientPoints: fewer than three points
        InvalidParameter: a nonpositive value on either axis
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 3:
        raise InsufficientPoints(f"slope fit along '{axis}' needs at least 3 points, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise InvalidParameter(f"log-log fit along '{axis}' needs positive values")
    fit = linregress(np.log(xs), np.log(ys))
    return SlopeReport(axis, float(fit.slope), float(fit.rvalue**2), list(zip(xs.tolist(), ys.tolist())))


@dataclass
class BenchResult:
    slopes: List[SlopeReport]
    ordering: Optional[Dict[str, Any]] = None
    passed: bool = True
    extra: Dict[str, Any] = field(default_factory=dict)


def _variances(
    bench: BenchSpec,
    objective: ObjectiveSpec,
    estimator: EstimatorSpec,
    points: List[PointSpec],
    base_rng: RngStream,
    trial_rng: RngStream,
    workers: int,
) -> List[float]:
    # every grid value replays the same base points and trial streams; split() with
    # no keys gives a fresh generator on the same path
    def work(i):
        stats = variance_at(
            estimator,
            objective,
            points[i],
            bench.points,
            bench.base_concentration,
            bench.trials,
            base_rng.split(),
            trial_rng.split(),
        )
        return stats.variance_scalar

    return _pool_map(work, list(range(len(points))), workers)


def run_bench(cfg: ExperimentConfig, out_dir: Path, workers: int = 1) -> BenchResult:
    """
    Variance-scaling study: one sweep per axis, a log-log slope per sweep compared
    with the expected exponent, plus the optional variance-ordering check.
    """
    bench = cfg.bench
    rng = RngStream(cfg.seed)
    for sweep in bench.sweeps:
        if len(sweep.values) < 3:
            raise InsufficientPoints(f"sweep along '{sweep.axis}' has {len(sweep.values)} values; a fit needs 3")

    slopes = []
    for si, sweep in enumerate(bench.sweeps):
        variances = _variances(
            bench, cfg.objective, bench.estimator, sweep.points(), rng.split(0, si, 0), rng.split(0, si, 1), workers
        )
        report = fit_slope(sweep.axis, sweep.values, variances)
        report.expected = bench.expected.get(sweep.axis)
        report.tolerance = bench.tolerance.get(sweep.axis)
        logger.info("slope along %s: %.4f (r^2 %.3f)", sweep.axis, report.fitted_slope, report.r_squared)
        slopes.append(report)
        write_csv(
            Path(out_dir) / f"bench_{sweep.axis}.csv",
            [sweep.axis, "variance_scalar"],
            [{sweep.axis: x, "variance_scalar": v} for x, v in report.points],
        )

    ordering = None
    if bench.ordering is not None:
        o = bench.ordering
        specs = [o.reference] + list(o.others)
        # every estimator sees the same base points
        base_rng = rng.split(1, 0)
        values = _pool_map(
            lambda i: _variances(bench, cfg.objective, specs[i], [o.point], base_rng, rng.split(1, i + 1), 1)[0],
            list(range(len(specs))),
            workers,
        )
        ref = values[0]
        ratios = {}
        for other, v in zip(o.others, values[1:]):
            ratios[other.label] = v / ref if ref > 0 else math.inf
        ordering = {
            "reference": o.reference.label,
            "reference_variance": ref,
            "ratios": ratios,
            "factor": o.factor,
            "passed": all(r >= o.factor for r in ratios.values()),
            "estimators": [s.label for s in specs],
        }
        logger.info("variance ratios against %s: %s", o.reference.label, ratios)

    passed = all(s.passed is not False for s in slopes) and (ordering is None or ordering["passed"])
    result = BenchResult(slopes=slopes, ordering=ordering, passed=passed)
    write_json(
        Path(out_dir) / "bench.json",
        {"slopes": [s.to_dict() for s in slopes], "ordering": ordering, "passed": passed},
    )
    return result

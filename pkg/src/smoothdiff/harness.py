"""Ensemble benchmark runner, threshold metrics, and trace export.

A run config names a task and a method; an ensemble executes it from
``ensemble`` starting points with seeds seed+0 .. seed+k-1 and reports,
per error-reduction threshold, the median first-crossing time and
evaluation count.  Traces export to CSV or JSON and reload losslessly.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .estimators import (
    EstimatorConfig,
    GradientEstimate,
    HvpEstimate,
    Objective,
    SamplingMode,
    estimate_gradient,
    estimate_gradient_fd,
    estimate_gradient_fr22,
    estimate_hessian,
    estimate_hvp,
)
from .kernels import KernelSpec
from .optimizers import (
    SigmaSchedule,
    TrustRegion,
    gd_adam_run,
    newton_cg_run,
    psd_modify,
)
from .samplers import RngStream
from .tasks import Task, make_task
from .trace import Budget, ConvergenceTrace, NonFiniteStateError, TraceRecord

FIRST_ORDER_METHODS = ("FD", "FR22", "OurG")
SECOND_ORDER_METHODS = ("OurH", "OurHVP", "OurHVPA")
METHODS = FIRST_ORDER_METHODS + SECOND_ORDER_METHODS
THRESHOLD_FRACTIONS = (0.9, 0.99, 0.999)

CSV_HEADER = "run,wall_time_s,iter,evals,loss,param_error"


@dataclass(frozen=True)
class RunConfig:
    """One benchmark cell: task, method, and every knob either needs.

    First-order methods take a learning rate; second-order ones take a
    trust region plus the inner-loop controls.  Mixing them up is a
    config error, caught here rather than deep in a run.
    """

    task: str
    method: str
    samples: int = 1
    sigma_start: float = 1.0
    sigma_end: float = 0.01
    lr: float | None = None
    trust_region: float | None = None
    ls_iters: int | None = None
    ls_tol: float | None = None
    recompute: int | None = None
    seed: int = 0
    budget_seconds: float | None = None
    budget_evals: int | None = None
    ensemble: int = 20
    init: str = "default"
    fd_step: float = 1e-6
    anneal_iters: int | None = None
    threads: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.ensemble < 1:
            raise ValueError("ensemble must be >= 1")
        if self.budget_seconds is None and self.budget_evals is None:
            raise ValueError("config needs budget_seconds or budget_evals")
        if self.init not in ("default", "plateau"):
            raise ValueError(f"init must be 'default' or 'plateau', got {self.init!r}")
        if self.method in FIRST_ORDER_METHODS:
            if self.lr is None:
                raise ValueError(f"method {self.method} requires lr")
            for key in ("trust_region", "ls_iters", "ls_tol", "recompute"):
                if getattr(self, key) is not None:
                    raise ValueError(f"{key} is not valid for first-order method {self.method}")
        else:
            if self.lr is not None:
                raise ValueError(f"lr is not valid for second-order method {self.method}")
            if self.trust_region is None:
                raise ValueError(f"method {self.method} requires trust_region")


@dataclass(frozen=True)
class ThresholdStat:
    fraction: float
    reached_runs: int
    median_time: float | None
    median_evals: float | None


@dataclass
class EnsembleResult:
    config: RunConfig
    traces: list[ConvergenceTrace]
    thresholds: dict[str, dict[float, ThresholdStat]]


# ---------------------------------------------------------------------------
# method dispatch
# ---------------------------------------------------------------------------

def _estimator_cfg(cfg: RunConfig, dim: int, sigma: float, mode: SamplingMode) -> EstimatorConfig:
    return EstimatorConfig(spec=KernelSpec(sigma=sigma, dim=dim), samples=cfg.samples, mode=mode)


def _grad_evals_per_iter(cfg: RunConfig, dim: int) -> int:
    if cfg.method == "FD":
        return 2 * dim
    if cfg.method in ("FR22", "OurG"):
        return 2 * dim * cfg.samples
    raise AssertionError(cfg.method)


def _cg_evals_per_outer(cfg: RunConfig, dim: int) -> int:
    pair = 2 * cfg.samples
    inner = cfg.ls_iters or 1
    if cfg.method == "OurH":
        grad = dim * pair
        hess = dim * (dim + 1) // 2 * pair
        return grad + hess + inner
    if cfg.method == "OurHVP":
        grad = dim * pair
        return grad + inner * (dim * pair + 1)
    grad = pair
    return grad + inner * (pair + 1)


def _anneal_total_iters(cfg: RunConfig, dim: int) -> int:
    if cfg.anneal_iters is not None:
        return max(1, cfg.anneal_iters)
    if cfg.budget_evals is None:
        return 200
    if cfg.method in FIRST_ORDER_METHODS:
        per = _grad_evals_per_iter(cfg, dim) + 1
    else:
        per = _cg_evals_per_outer(cfg, dim) + 1
    return max(1, cfg.budget_evals // per)


class SampledProvider:
    """Derivative provider backed by the Monte Carlo estimators.

    ``use_hessian`` switches the Hessian-vector products from direct HVP
    estimation to products with an explicitly estimated (and PSD-clamped)
    Hessian, refreshed on the optimizer's recompute schedule.
    """

    def __init__(
        self,
        obj: Objective,
        samples: int,
        rng: RngStream,
        grad_mode: SamplingMode,
        hvp_mode: SamplingMode | None = None,
        use_hessian: bool = False,
        hessian_mode: SamplingMode = SamplingMode.PER_ELEMENT,
        psd: bool = True,
    ):
        self._obj = obj
        self._samples = samples
        self._rng = rng
        self._grad_mode = grad_mode
        self._hvp_mode = hvp_mode
        self._use_hessian = use_hessian
        self._hessian_mode = hessian_mode
        self._psd = psd
        self._h: np.ndarray | None = None

    def _cfg(self, sigma: float, mode: SamplingMode) -> EstimatorConfig:
        return EstimatorConfig(spec=KernelSpec(sigma=sigma, dim=self._obj.dim),
                               samples=self._samples, mode=mode)

    def refresh(self, theta: np.ndarray, sigma: float) -> None:
        if self._use_hessian:
            est = estimate_hessian(self._obj, theta, self._cfg(sigma, self._hessian_mode), self._rng)
            self._h = psd_modify(est.h) if self._psd else est.h

    def gradient(self, theta: np.ndarray, sigma: float) -> GradientEstimate:
        return estimate_gradient(self._obj, theta, self._cfg(sigma, self._grad_mode), self._rng)

    def hvp(self, theta: np.ndarray, v: np.ndarray, sigma: float) -> HvpEstimate:
        if self._use_hessian:
            if self._h is None:
                self.refresh(theta, sigma)
            return HvpEstimate(hv=self._h @ v, direction=np.asarray(v, dtype=float), evals_used=0)
        return estimate_hvp(self._obj, theta, v, self._cfg(sigma, self._hvp_mode), self._rng)


def _single_run(cfg: RunConfig, task: Task, run_index: int) -> ConvergenceTrace:
    seed_k = cfg.seed + run_index
    init_rng = RngStream(seed_k, stream_id=0)
    est_rng = RngStream(seed_k, stream_id=1)
    if cfg.init == "plateau":
        if not task.plateau_points:
            raise ValueError(f"task {task.name} has no plateau starting points")
        theta0 = task.plateau_points[run_index % len(task.plateau_points)].copy()
    else:
        theta0 = task.init_sampler(init_rng.generator)
    obj = task.objective()
    budget = Budget(seconds=cfg.budget_seconds, evals=cfg.budget_evals)
    schedule = SigmaSchedule(cfg.sigma_start, cfg.sigma_end, _anneal_total_iters(cfg, task.dim))

    try:
        if cfg.method in FIRST_ORDER_METHODS:
            if cfg.method == "FD":
                grad_fn = lambda th, s: estimate_gradient_fd(obj, th, cfg.fd_step)
            elif cfg.method == "FR22":
                grad_fn = lambda th, s: estimate_gradient_fr22(
                    obj, th, _estimator_cfg(cfg, task.dim, s, SamplingMode.PER_ELEMENT), est_rng)
            else:
                grad_fn = lambda th, s: estimate_gradient(
                    obj, th, _estimator_cfg(cfg, task.dim, s, SamplingMode.PER_ELEMENT), est_rng)
            return gd_adam_run(obj, grad_fn, theta0, schedule, cfg.lr, budget,
                               param_error_fn=task.param_error,
                               deterministic_clock=cfg.deterministic)
        if cfg.method == "OurH":
            provider = SampledProvider(obj, cfg.samples, est_rng,
                                       grad_mode=SamplingMode.PER_ELEMENT,
                                       use_hessian=True)
        elif cfg.method == "OurHVP":
            provider = SampledProvider(obj, cfg.samples, est_rng,
                                       grad_mode=SamplingMode.PER_ELEMENT,
                                       hvp_mode=SamplingMode.PER_ELEMENT)
        else:
            provider = SampledProvider(obj, cfg.samples, est_rng,
                                       grad_mode=SamplingMode.AGGREGATE,
                                       hvp_mode=SamplingMode.AGGREGATE)
        return newton_cg_run(obj, provider, theta0, schedule,
                             TrustRegion(cfg.trust_region),
                             cfg.ls_iters or 1, cfg.ls_tol or 1e-3, cfg.recompute or 1,
                             budget, param_error_fn=task.param_error,
                             deterministic_clock=cfg.deterministic)
    except NonFiniteStateError as err:
        return err.trace


def run_ensemble(cfg: RunConfig) -> EnsembleResult:
    """Execute an ensemble and collect threshold statistics.

    Runs are independent; under ``threads > 1`` they execute in a thread
    pool and are merged by index, so the result does not depend on
    scheduling.  A run that aborts on non-finite state keeps its partial
    trace and simply never reaches the remaining thresholds.
    """
    task = make_task(cfg.task)
    indices = range(cfg.ensemble)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            traces = list(pool.map(lambda k: _single_run(cfg, task, k), indices))
    else:
        traces = [_single_run(cfg, task, k) for k in indices]
    thresholds = {
        metric: compute_thresholds(traces, metric) for metric in ("loss", "param_error")
    }
    return EnsembleResult(config=cfg, traces=traces, thresholds=thresholds)


# ---------------------------------------------------------------------------
# threshold metrics
# ---------------------------------------------------------------------------

def first_crossings(trace: ConvergenceTrace, metric: str) -> dict[float, tuple[float, int] | None]:
    """First (time, evals) at which each error-reduction fraction is met.

    Reduction is measured against the metric's value at the first record
    of the run.
    """
    values = [getattr(rec, "loss" if metric == "loss" else "param_error") for rec in trace.records]
    if not values:
        return {frac: None for frac in THRESHOLD_FRACTIONS}
    initial = values[0]
    out: dict[float, tuple[float, int] | None] = {}
    for frac in THRESHOLD_FRACTIONS:
        target = (1.0 - frac) * initial
        hit = None
        for rec, val in zip(trace.records, values):
            if math.isfinite(val) and val <= target:
                hit = (rec.wall_time, rec.evals)
                break
        out[frac] = hit
    return out


def compute_thresholds(traces: list[ConvergenceTrace], metric: str) -> dict[float, ThresholdStat]:
    """Ensemble medians of per-run first crossings.

    A threshold counts as reached only when at least half the ensemble
    crossed it; otherwise the stat carries null medians, mirroring an
    empty cell in a results table.
    """
    per_run = [first_crossings(t, metric) for t in traces]
    out: dict[float, ThresholdStat] = {}
    for frac in THRESHOLD_FRACTIONS:
        hits = [pr[frac] for pr in per_run if pr[frac] is not None]
        if len(hits) * 2 >= len(traces) and hits:
            out[frac] = ThresholdStat(
                fraction=frac,
                reached_runs=len(hits),
                median_time=float(statistics.median(h[0] for h in hits)),
                median_evals=float(statistics.median(h[1] for h in hits)),
            )
        else:
            out[frac] = ThresholdStat(fraction=frac, reached_runs=len(hits),
                                      median_time=None, median_evals=None)
    return out


# ---------------------------------------------------------------------------
# variance analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceRow:
    mode: str
    order: str
    budget_evals: int
    estimates: int
    variance: float


@dataclass
class VarianceReport:
    rows: list[VarianceRow]
    slopes: dict[tuple[str, str], float]

    def format_table(self) -> str:
        lines = ["mode,order,budget_evals,variance"]
        for row in self.rows:
            lines.append(f"{row.mode},{row.order},{row.budget_evals},{row.variance!r}")
        lines.append("")
        for (mode, order), slope in sorted(self.slopes.items()):
            lines.append(f"slope {mode} {order}: {slope:.3f}")
        return "\n".join(lines)


def _pairs_for_budget(mode: SamplingMode, order: str, budget: int, dim: int) -> int:
    if mode is SamplingMode.PER_ELEMENT:
        per_pair = dim * (dim + 1) if order == "H" else 2 * dim
    else:
        per_pair = 2
    return max(1, budget // per_pair)


def variance_report(
    task: Task,
    theta: np.ndarray,
    modes: Iterable[SamplingMode],
    budgets: Iterable[int],
    *,
    orders: Iterable[str] = ("G", "H", "HVP"),
    reps: int = 100,
    sigma: float = 1.0,
    seed: int = 0,
    direction: np.ndarray | None = None,
) -> VarianceReport:
    """Estimator variance per derivative order at equal evaluation budgets.

    For each (mode, order, budget) cell the estimator runs ``reps`` times
    with as many antithetic pairs as the budget buys; the reported
    variance sums the elementwise variances over repetitions.  Slopes of
    log-variance against log-budget come from a least-squares fit.
    """
    theta = np.asarray(theta, dtype=float)
    budgets = list(budgets)
    modes = list(modes)
    v = direction if direction is not None else np.ones(task.dim) / math.sqrt(task.dim)
    rows: list[VarianceRow] = []
    slopes: dict[tuple[str, str], float] = {}
    stream = 0
    for mode in modes:
        for order in orders:
            cell_vars = []
            for budget in budgets:
                pairs = _pairs_for_budget(mode, order, budget, task.dim)
                ests = []
                for rep in range(reps):
                    stream += 1
                    rng = RngStream(seed, stream_id=stream)
                    obj = task.objective()
                    cfg = EstimatorConfig(spec=KernelSpec(sigma=sigma, dim=task.dim),
                                          samples=pairs, mode=mode)
                    if order == "G":
                        ests.append(estimate_gradient(obj, theta, cfg, rng).g)
                    elif order == "H":
                        ests.append(estimate_hessian(obj, theta, cfg, rng).h.ravel())
                    else:
                        ests.append(estimate_hvp(obj, theta, v, cfg, rng).hv)
                arr = np.array(ests)
                var = float(arr.var(axis=0, ddof=1).sum())
                cell_vars.append(var)
                rows.append(VarianceRow(mode=mode.value, order=order,
                                        budget_evals=budget, estimates=reps, variance=var))
            if len(budgets) >= 2:
                slope = float(np.polyfit(np.log(budgets), np.log(cell_vars), 1)[0])
                slopes[(mode.value, order)] = slope
    return VarianceReport(rows=rows, slopes=slopes)


# ---------------------------------------------------------------------------
# trace export / import
# ---------------------------------------------------------------------------

def _require_nonempty(result: EnsembleResult) -> None:
    for k, trace in enumerate(result.traces):
        if not trace.records:
            raise ValueError(f"run {k} has an empty trace; refusing to export")


def _thresholds_dict(result: EnsembleResult) -> dict:
    return {
        metric: {
            str(frac): {
                "reached_runs": stat.reached_runs,
                "median_time": stat.median_time,
                "median_evals": stat.median_evals,
            }
            for frac, stat in stats.items()
        }
        for metric, stats in result.thresholds.items()
    }


def export_traces(result: EnsembleResult, path, fmt: str = "csv") -> None:
    """Write ensemble traces to ``path`` as CSV or JSON.

    CSV columns are exactly ``run,wall_time_s,iter,evals,loss,param_error``;
    JSON mirrors the same records and echoes the config.  Floats are
    written with shortest round-trip formatting, so a reload reproduces
    the records bit-for-bit.
    """
    _require_nonempty(result)
    fmt = fmt.lower()
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            for run, trace in enumerate(result.traces):
                for rec in trace.records:
                    writer.writerow([run, repr(rec.wall_time), rec.iteration, rec.evals,
                                     repr(rec.loss), repr(rec.param_error)])
    elif fmt == "json":
        payload = {
            "config": asdict(result.config),
            "thresholds": _thresholds_dict(result),
            "runs": [
                {
                    "run": run,
                    "aborted": trace.aborted,
                    "note": trace.note,
                    "records": [
                        {
                            "wall_time_s": rec.wall_time,
                            "iter": rec.iteration,
                            "evals": rec.evals,
                            "loss": rec.loss,
                            "param_error": rec.param_error,
                        }
                        for rec in trace.records
                    ],
                }
                for run, trace in enumerate(result.traces)
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}")


def load_traces(path) -> tuple[list[ConvergenceTrace], dict | None]:
    """Reload traces written by ``export_traces``; returns (traces, config)."""
    text_head = open(path, "rb").read(1).decode("ascii", errors="replace")
    if text_head == "{":
        with open(path) as fh:
            payload = json.load(fh)
        traces = []
        for run in payload["runs"]:
            trace = ConvergenceTrace(aborted=run.get("aborted", False), note=run.get("note", ""))
            for rec in run["records"]:
                trace.append(TraceRecord(rec["wall_time_s"], rec["iter"], rec["evals"],
                                         rec["loss"], rec["param_error"]))
            traces.append(trace)
        return traces, payload.get("config")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if ",".join(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        by_run: dict[int, ConvergenceTrace] = {}
        for row in reader:
            run = int(row[0])
            trace = by_run.setdefault(run, ConvergenceTrace())
            trace.append(TraceRecord(float(row[1]), int(row[2]), int(row[3]),
                                     float(row[4]), float(row[5])))
    return [by_run[k] for k in sorted(by_run)], None


def summarize_traces(traces: list[ConvergenceTrace]) -> str:
    """Threshold table for a list of traces (both metrics)."""
    lines = []
    for metric in ("loss", "param_error"):
        stats = compute_thresholds(traces, metric)
        lines.append(f"[{metric}]")
        for frac in THRESHOLD_FRACTIONS:
            stat = stats[frac]
            if stat.median_time is None:
                lines.append(f"  {frac:>6}: unreached ({stat.reached_runs}/{len(traces)} runs)")
            else:
                lines.append(
                    f"  {frac:>6}: median_time={stat.median_time:.6g}s "
                    f"median_evals={stat.median_evals:.0f} ({stat.reached_runs}/{len(traces)} runs)"
                )
    return "\n".join(lines)

"""Command-line benchmark driver.

Subcommands: ``run`` (one ensemble from a config file), ``sweep``
(method x task matrix), ``variance`` (estimator variance tables),
``summarize`` (threshold tables from exported traces), and ``selftest``
(fast kernel/sampler/estimator invariant checks).  Config files use INI
syntax; see README for the grammar.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import harness
from .estimators import SamplingMode
from .harness import RunConfig, VarianceReport, run_ensemble
from .tasks import TASK_NAMES, make_task

_INT_KEYS = {"samples", "ls_iters", "recompute", "seed", "budget_evals",
             "ensemble", "anneal_iters", "threads"}
_FLOAT_KEYS = {"sigma_start", "sigma_end", "lr", "trust_region", "ls_tol",
               "budget_seconds", "fd_step"}
_BOOL_KEYS = {"deterministic"}
_STR_KEYS = {"task", "method", "init"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw.strip()


def _section_to_kwargs(section) -> dict:
    kwargs = {}
    for key, raw in section.items():
        if key not in _ALL_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, raw)
    return kwargs


def _apply_overrides(kwargs: dict, args) -> dict:
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.budget_seconds is not None:
        kwargs["budget_seconds"] = args.budget_seconds
        kwargs.pop("budget_evals", None)
    if args.budget_evals is not None:
        kwargs["budget_evals"] = args.budget_evals
        kwargs.pop("budget_seconds", None)
    if args.threads is not None:
        kwargs["threads"] = args.threads
    if args.deterministic:
        kwargs["deterministic"] = True
    return kwargs


def _read_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    return parser


_METHOD_ONLY_KEYS = {
    "first": {"lr"},
    "second": {"trust_region", "ls_iters", "ls_tol", "recompute"},
}


def _kwargs_for_method(base: dict, method: str) -> dict:
    # a sweep config may carry both first- and second-order keys; keep
    # only the ones the method accepts
    out = dict(base)
    drop = _METHOD_ONLY_KEYS["second"] if method in harness.FIRST_ORDER_METHODS else _METHOD_ONLY_KEYS["first"]
    for key in drop:
        out.pop(key, None)
    out["method"] = method
    return out


def cmd_run(args) -> int:
    parser = _read_config(args.config)
    if "run" not in parser:
        raise ValueError(f"{args.config}: missing [run] section")
    kwargs = _apply_overrides(_section_to_kwargs(parser["run"]), args)
    cfg = RunConfig(**kwargs)
    result = run_ensemble(cfg)
    print(f"task={cfg.task} method={cfg.method} ensemble={cfg.ensemble} seed={cfg.seed}")
    print(harness.summarize_traces(result.traces))
    if args.out:
        harness.export_traces(result, args.out, args.format)
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    parser = _read_config(args.config)
    if "sweep" not in parser:
        raise ValueError(f"{args.config}: missing [sweep] section")
    section = dict(parser["sweep"])
    methods = [m.strip() for m in section.pop("methods").split(",")]
    tasks = [t.strip() for t in section.pop("tasks").split(",")]
    base = {}
    for key, raw in section.items():
        if key not in _ALL_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        base[key] = _coerce(key, raw)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        for method in methods:
            kwargs = _kwargs_for_method(base, method)
            kwargs["task"] = task
            kwargs = _apply_overrides(kwargs, args)
            cfg = RunConfig(**kwargs)
            result = run_ensemble(cfg)
            print(f"--- task={task} method={method}")
            print(harness.summarize_traces(result.traces))
            if out_dir:
                path = out_dir / f"{task}_{method}.{args.format}"
                harness.export_traces(result, path, args.format)
                print(f"wrote {path}")
    return 0


def cmd_variance(args) -> int:
    task = make_task(args.task)
    theta = (np.array([float(x) for x in args.theta.split(",")])
             if args.theta else np.full(task.dim, 0.5))
    modes = [SamplingMode.parse(m) for m in args.modes.split(",")]
    budgets = [int(b) for b in args.budgets.split(",")]
    report = harness.variance_report(
        task, theta, modes, budgets,
        orders=tuple(args.orders.split(",")), reps=args.reps,
        sigma=args.sigma, seed=args.seed if args.seed is not None else 0,
    )
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(report.format_table() + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_summarize(args) -> int:
    for path in args.paths:
        traces, _cfg = harness.load_traces(path)
        print(f"=== {path} ({len(traces)} runs)")
        print(harness.summarize_traces(traces))
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    return selftest.run_selftest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothdiff",
        description="Smoothed-derivative estimation benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--budget-seconds", type=float, default=None, dest="budget_seconds")
        p.add_argument("--budget-evals", type=int, default=None, dest="budget_evals")
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")

    p_run = sub.add_parser("run", help="run one ensemble from a config file")
    p_run.add_argument("--config", required=True)
    add_common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a method x task matrix")
    p_sweep.add_argument("--config", required=True)
    add_common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_var = sub.add_parser("variance", help="estimator variance tables")
    p_var.add_argument("--task", default="neg_gauss", choices=TASK_NAMES)
    p_var.add_argument("--theta", default=None, help="comma-separated point, default 0.5 vector")
    p_var.add_argument("--sigma", type=float, default=1.0)
    p_var.add_argument("--modes", default="per_element,aggregate,uniform")
    p_var.add_argument("--orders", default="G,H,HVP")
    p_var.add_argument("--budgets", default="24,96,384,1536")
    p_var.add_argument("--reps", type=int, default=100)
    add_common(p_var)
    p_var.set_defaults(fn=cmd_variance)

    p_sum = sub.add_parser("summarize", help="threshold tables from trace files")
    p_sum.add_argument("paths", nargs="+")
    p_sum.set_defaults(fn=cmd_summarize)

    p_self = sub.add_parser("selftest", help="kernel/sampler/estimator invariant suite")
    p_self.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

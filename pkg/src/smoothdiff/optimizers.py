"""Optimization loops driven by sampled derivatives.

Three flavors: Adam gradient descent, a full Newton step with eigenvalue
clamping and a trust region, and Newton conjugate gradient with
Fletcher-Reeves directions.  Second-order methods take raw steps; Adam
preconditioning applies to gradient descent only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .estimators import GradientEstimate, HessianEstimate, HvpEstimate, Objective
from .trace import Budget, ConvergenceTrace, NonFiniteStateError, RunClock, TraceRecord

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class SigmaSchedule:
    """Linear bandwidth annealing from start to end over total_iters."""

    sigma_start: float
    sigma_end: float
    total_iters: int

    def __post_init__(self):
        if self.sigma_start <= 0 or self.sigma_end <= 0:
            raise ValueError("schedule endpoints must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")


def anneal_sigma(schedule: SigmaSchedule, iteration: int) -> float:
    """Linearly interpolated bandwidth, clamped to the endpoints."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    t = min(iteration, schedule.total_iters) / schedule.total_iters
    return (1.0 - t) * schedule.sigma_start + t * schedule.sigma_end


@dataclass(frozen=True)
class TrustRegion:
    """Step-length cap: alpha <- min(alpha, delta / ||v||)."""

    delta: float

    def __post_init__(self):
        if not (self.delta > 0):
            raise ValueError(f"trust region radius must be > 0, got {self.delta}")


@dataclass
class OptimizerState:
    theta: np.ndarray
    iteration: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    cg_direction: np.ndarray | None = None
    cg_residual: np.ndarray | None = None
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)


def gd_adam_step(state: OptimizerState, grad: GradientEstimate, lr: float) -> OptimizerState:
    """One Adam update on a (possibly stochastic) gradient."""
    if not (lr > 0):
        raise ValueError(f"lr must be > 0, got {lr}")
    g = np.asarray(grad.g, dtype=float)
    if g.shape != state.theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match theta {state.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteStateError("non-finite gradient in Adam step", state.trace)
    m = state.adam_m if state.adam_m is not None else np.zeros_like(g)
    v = state.adam_v if state.adam_v is not None else np.zeros_like(g)
    t = state.iteration + 1
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return replace(state, theta=theta, iteration=t, adam_m=m, adam_v=v)


def psd_modify(h: np.ndarray) -> np.ndarray:
    """Clamp eigenvalues from below so the matrix is safely positive definite.

    The floor is 1e-6 * max(|lambda|_max, 1); the clamped matrix keeps the
    original eigenvectors, so Newton directions through it always have a
    nonnegative component along the negative gradient.
    """
    h = np.asarray(h, dtype=float)
    lam, vecs = np.linalg.eigh(h)
    floor = 1e-6 * max(float(np.max(np.abs(lam))), 1.0)
    lam_clamped = np.maximum(lam, floor)
    return (vecs * lam_clamped) @ vecs.T


def newton_step(
    state: OptimizerState, grad: GradientEstimate, hess: HessianEstimate, tr: TrustRegion
) -> OptimizerState:
    """Full Newton update with PSD modification and trust-region truncation."""
    g = np.asarray(grad.g, dtype=float)
    h = np.asarray(hess.h, dtype=float)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise NonFiniteStateError("non-finite derivative in Newton step", state.trace)
    lam, vecs = np.linalg.eigh(h)
    floor = 1e-6 * max(float(np.max(np.abs(lam))), 1.0)
    lam_clamped = np.maximum(lam, floor)
    v = -(vecs @ ((vecs.T @ g) / lam_clamped))
    norm = float(np.linalg.norm(v))
    scale = min(1.0, tr.delta / norm) if norm > 0 else 1.0
    return replace(state, theta=state.theta + scale * v, iteration=state.iteration + 1)


class DerivativeProvider(Protocol):
    """Derivative source for the Newton-CG loop.

    ``hvp`` may be backed by a sampled estimator or by an explicit
    (modified) Hessian; ``refresh`` re-estimates whatever the provider
    caches for the current point and bandwidth.
    """

    def gradient(self, theta: np.ndarray, sigma: float) -> GradientEstimate: ...

    def hvp(self, theta: np.ndarray, v: np.ndarray, sigma: float) -> HvpEstimate: ...

    def refresh(self, theta: np.ndarray, sigma: float) -> None: ...


def newton_cg_run(
    obj: Objective,
    provider: DerivativeProvider,
    init: np.ndarray,
    schedule: SigmaSchedule,
    tr: TrustRegion,
    ls_iters: int,
    ls_tol: float,
    recompute: int,
    budget: Budget,
    *,
    param_error_fn: Callable[[np.ndarray], float] | None = None,
    deterministic_clock: bool = False,
    on_inner_step: Callable[[dict], None] | None = None,
) -> ConvergenceTrace:
    """Newton conjugate gradient with Fletcher-Reeves directions.

    Per outer iteration: estimate the gradient at the annealed bandwidth,
    then take up to ``ls_iters`` conjugate steps.  Each step moves theta
    by alpha = -g^T v / (v^T H v), truncated to the trust region; the
    residual updates as r <- r - alpha H v and the next direction is
    r + beta v with the Fletcher-Reeves beta.  Negative curvature falls
    back to the residual (steepest-descent) direction for that step.
    Every ``recompute`` inner iterations the derivative estimates are
    refreshed and the conjugate recursion restarts.

    ``tr.delta`` is the initial search bound; the working radius shrinks
    proportionally with the annealed bandwidth, since the smoothed
    quadratic model is only trustworthy within about one smoothing
    radius.  With sampled derivatives this is what stops noisy curvature
    from throwing the iterate out of a basin it has reached.

    The trace records loss, parameter error, evaluation count and wall
    time at every outer iteration; the budget is checked between outer
    iterations and termination by budget is the normal exit.
    """
    if ls_iters < 1:
        raise ValueError("ls_iters must be >= 1")
    if not (ls_tol > 0):
        raise ValueError("ls_tol must be > 0")
    if recompute < 1:
        raise ValueError("recompute must be >= 1")
    theta = np.asarray(init, dtype=float).copy()
    trace = ConvergenceTrace()
    clock = RunClock(obj, deterministic=deterministic_clock)
    err_fn = param_error_fn if param_error_fn is not None else lambda th: float("nan")

    def record(iteration: int) -> float:
        # the recording evaluation also guarantees budget progress when a
        # converged inner loop stops consuming evaluations
        loss = obj.evaluate(theta)
        trace.append(TraceRecord(clock.now(), iteration, obj.eval_count, loss, err_fn(theta)))
        return loss

    record(0)
    outer = 0
    while not budget.exhausted(clock.now(), obj.eval_count):
        sigma = anneal_sigma(schedule, outer)
        delta = tr.delta * sigma / schedule.sigma_start
        provider.refresh(theta, sigma)
        g = provider.gradient(theta, sigma).g
        if not np.all(np.isfinite(g)):
            raise NonFiniteStateError("non-finite gradient estimate", trace)
        r = -g
        v = r.copy()
        r0_norm = float(np.linalg.norm(r))
        for k in range(ls_iters):
            if float(np.linalg.norm(r)) <= ls_tol * r0_norm or r0_norm == 0.0:
                break
            if k > 0 and k % recompute == 0:
                provider.refresh(theta, sigma)
                g = provider.gradient(theta, sigma).g
                r = -g
                v = r.copy()
            hv = provider.hvp(theta, v, sigma).hv
            curv = float(v @ hv)
            fallback = curv <= 0.0
            if fallback:
                v = r.copy()
                hv = provider.hvp(theta, v, sigma).hv
                curv = float(v @ hv)
            v_norm = float(np.linalg.norm(v))
            if v_norm == 0.0:
                break
            if curv > 0.0:
                alpha = float(r @ v) / curv
                alpha = min(alpha, delta / v_norm)
            else:
                alpha = delta / v_norm
            if on_inner_step is not None:
                on_inner_step({"outer": outer, "inner": k, "alpha": alpha, "v": v.copy(),
                               "hv": hv.copy(), "curv": curv, "fallback": fallback})
            theta = theta + alpha * v
            if not np.all(np.isfinite(theta)):
                raise NonFiniteStateError("non-finite parameters in CG step", trace)
            r_new = r - alpha * hv
            beta = float(r_new @ r_new) / float(r @ r) if float(r @ r) > 0 else 0.0
            v = r_new + beta * v
            r = r_new
        outer += 1
        record(outer)
    return trace


def gd_adam_run(
    obj: Objective,
    gradient_fn: Callable[[np.ndarray, float], GradientEstimate],
    init: np.ndarray,
    schedule: SigmaSchedule,
    lr: float,
    budget: Budget,
    *,
    param_error_fn: Callable[[np.ndarray], float] | None = None,
    deterministic_clock: bool = False,
) -> ConvergenceTrace:
    """Adam gradient descent over an annealed-bandwidth gradient source."""
    theta = np.asarray(init, dtype=float).copy()
    trace = ConvergenceTrace()
    state = OptimizerState(theta=theta, trace=trace)
    clock = RunClock(obj, deterministic=deterministic_clock)
    err_fn = param_error_fn if param_error_fn is not None else lambda th: float("nan")

    def record(iteration: int) -> None:
        loss = obj.evaluate(state.theta)
        trace.append(TraceRecord(clock.now(), iteration, obj.eval_count, loss, err_fn(state.theta)))

    record(0)
    while not budget.exhausted(clock.now(), obj.eval_count):
        sigma = anneal_sigma(schedule, state.iteration)
        grad = gradient_fn(state.theta, sigma)
        state = gd_adam_step(state, grad, lr)
        if not np.all(np.isfinite(state.theta)):
            raise NonFiniteStateError("non-finite parameters in Adam step", trace)
        record(state.iteration)
    return trace

"""Monte Carlo estimators of smoothed derivatives of black-box objectives.

The smoothed gradient, Hessian, and Hessian-vector product of an
objective f are integrals of f against derivative kernels of the
smoothing Gaussian.  Estimators importance-sample offsets from the
positivized kernel densities and weight each evaluation f(theta - tau)
by kernel(tau) / pdf(tau).  Samples always come in antithetic pairs
(tau, -tau).

Three sampling modes trade evaluations against variance:

* ``PER_ELEMENT``: every derivative element gets its own optimally
  importance-sampled offsets (n evaluations per pair-half for a
  gradient, n(n+1)/2 for a Hessian).
* ``AGGREGATE``: one offset drawn from the uniform mixture of all
  element densities serves every element, so a pair-half costs a single
  evaluation regardless of dimension or derivative order.
* ``UNIFORM``: offsets drawn uniformly on [-10 sigma, 10 sigma]^n; a
  control for variance analysis, not for production use.

The HVP estimator evaluates f once per sample and weights it by the
directional central difference of shifted gradient kernels; the same
draws and the same evaluations serve both shifted gradient estimates,
which is what keeps its cost at one evaluation per pair-half.

All weight computations use density ratios free of Gaussian
normalization factors, so they stay finite in high dimension.  Per call,
accumulation runs in a fixed order, so results are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .kernels import (
    SQRT_TWO_PI,
    ElementKind,
    KernelElement,
    KernelSpec,
    gradient_elements,
    gradient_inverse_cdf,
    gradient_partition,
    hessian_diag_scale,
    hessian_elements,
)
from .samplers import (
    RngStream,
    element_density_ratios,
    default_hessian_diag_table,
    sample_aggregate_offsets,
    sample_gradient_offsets,
    sample_hessian_offsets,
)


class EstimationError(RuntimeError):
    """Raised when the objective returns a non-finite value.

    Skipping bad samples would bias the estimator, so the whole estimate
    is aborted; ``point`` carries the offending evaluation location.
    """

    def __init__(self, message: str, point: np.ndarray | None = None):
        super().__init__(message)
        self.point = point


class SamplingMode(Enum):
    PER_ELEMENT = "per_element"
    AGGREGATE = "aggregate"
    UNIFORM = "uniform"

    @staticmethod
    def parse(name: str) -> "SamplingMode":
        norm = name.strip().lower().replace("-", "_")
        aliases = {
            "per_element": SamplingMode.PER_ELEMENT,
            "perelementis": SamplingMode.PER_ELEMENT,
            "per_element_is": SamplingMode.PER_ELEMENT,
            "aggregate": SamplingMode.AGGREGATE,
            "aggregateis": SamplingMode.AGGREGATE,
            "aggregate_is": SamplingMode.AGGREGATE,
            "uniform": SamplingMode.UNIFORM,
        }
        if norm not in aliases:
            raise ValueError(f"unknown sampling mode {name!r}")
        return aliases[norm]


class Objective:
    """Black-box scalar objective with an exact evaluation counter.

    ``evaluate`` may be stochastic; the counter increments exactly once
    per call.  A single instance is meant to be owned by one run; share
    across threads only if the wrapped function tolerates it.
    """

    def __init__(self, fn: Callable[[np.ndarray], float], dim: int, name: str = ""):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self._fn = fn
        self.dim = dim
        self.name = name
        self._evals = 0

    def evaluate(self, theta: np.ndarray) -> float:
        self._evals += 1
        return float(self._fn(theta))

    @property
    def eval_count(self) -> int:
        return self._evals


@dataclass(frozen=True)
class EstimatorConfig:
    """Sampling configuration shared by the derivative estimators.

    ``samples`` counts antithetic pairs; every estimate touches 2*samples
    offsets.  ``hvp_epsilon`` defaults to 0.01 * sigma when unset: large
    enough that the kernel difference dominates MC noise, small against
    the kernel bandwidth.
    """

    spec: KernelSpec
    samples: int = 1
    hvp_epsilon: float | None = None
    mode: SamplingMode = SamplingMode.AGGREGATE

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.hvp_epsilon is not None and not (self.hvp_epsilon > 0):
            raise ValueError(f"hvp_epsilon must be > 0, got {self.hvp_epsilon}")

    def epsilon(self) -> float:
        return self.hvp_epsilon if self.hvp_epsilon is not None else 0.01 * self.spec.sigma


@dataclass(frozen=True)
class GradientEstimate:
    g: np.ndarray
    evals_used: int


@dataclass(frozen=True)
class HessianEstimate:
    h: np.ndarray
    evals_used: int


@dataclass(frozen=True)
class HvpEstimate:
    hv: np.ndarray
    direction: np.ndarray
    evals_used: int


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _check_theta(theta, dim: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({dim},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


def _evaluate_shifted(obj: Objective, theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
    vals = np.empty(len(rows))
    for k in range(len(rows)):
        point = theta - rows[k]
        v = obj.evaluate(point)
        if not math.isfinite(v):
            raise EstimationError(f"objective returned non-finite value {v} at {point}", point=point)
        vals[k] = v
    return vals


def _antithetic_rows(taus: np.ndarray) -> np.ndarray:
    return np.vstack([taus, -taus])


def _pair_mean(per_row: np.ndarray) -> np.ndarray:
    """Collapse mirrored rows pairwise, then average over pairs.

    Fixes the reduction order: each antithetic pair combines before any
    cross-pair summation, so odd-weight cancellations are exact.
    """
    m = per_row.shape[0] // 2
    return (0.5 * (per_row[:m] + per_row[m:])).mean(axis=0)


def _even_weight_estimate(vals: np.ndarray, weights: np.ndarray, pairs: int):
    """Baseline-corrected mean for estimators with even (pair-symmetric) weights.

    Hessian and HVP weights are even in tau, so a pair contributes
    (pair value) * (pair weight) and the objective's absolute level does
    not cancel between mirrored samples the way it does for gradients.
    Each pair's value is therefore centered against the mean of the other
    pairs; the weights integrate to zero and pairs are independent, so
    the correction is exactly unbiased while removing the dominant
    value-level variance term.  A constant objective yields exactly zero
    once there are at least two pairs.
    """
    pv = 0.5 * (vals[:pairs] + vals[pairs:])
    w = 0.5 * (weights[:pairs] + weights[pairs:])
    if pairs == 1:
        return pv[0] * w[0]
    centered = pv - pv.mean()
    if w.ndim == 1:
        return float(centered @ w) / (pairs - 1)
    return (centered @ w) / (pairs - 1)


def _uniform_taus(cfg: EstimatorConfig, rng: RngStream) -> np.ndarray:
    half = 10.0 * cfg.spec.sigma
    return (rng.uniform((cfg.samples, cfg.spec.dim)) * 2.0 - 1.0) * half


def _uniform_gauss_over_pdf(rows: np.ndarray, sigma: float, dim: int) -> np.ndarray:
    # N(tau) / uniform density, with the normalizations folded into one exponent
    expo = -np.sum(rows * rows, axis=1) / (2.0 * sigma * sigma) + dim * math.log(20.0 / SQRT_TWO_PI)
    return np.exp(expo)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def estimate_gradient(
    obj: Objective, theta: np.ndarray, cfg: EstimatorConfig, rng: RngStream
) -> GradientEstimate:
    """Unbiased estimate of the sigma-smoothed gradient at ``theta``."""
    spec = cfg.spec
    n = spec.dim
    theta = _check_theta(theta, n)
    start = obj.eval_count
    g = np.empty(n)

    if cfg.mode is SamplingMode.PER_ELEMENT:
        part = gradient_partition(spec.sigma)
        for i in range(n):
            taus, _ = sample_gradient_offsets(i, spec, rng, cfg.samples)
            rows = _antithetic_rows(taus)
            weights = -np.sign(rows[:, i]) * part
            vals = _evaluate_shifted(obj, theta, rows)
            g[i] = _pair_mean(vals * weights)
    elif cfg.mode is SamplingMode.AGGREGATE:
        elements = gradient_elements(n)
        taus, _ = sample_aggregate_offsets(elements, spec, default_hessian_diag_table(), rng, cfg.samples)
        rows = _antithetic_rows(taus)
        mixr = element_density_ratios(rows, elements, spec.sigma).mean(axis=1)
        vals = _evaluate_shifted(obj, theta, rows)
        weights = (-rows / spec.sigma ** 2) / mixr[:, None]
        g = _pair_mean(vals[:, None] * weights)
    elif cfg.mode is SamplingMode.UNIFORM:
        rows = _antithetic_rows(_uniform_taus(cfg, rng))
        gauss = _uniform_gauss_over_pdf(rows, spec.sigma, n)
        vals = _evaluate_shifted(obj, theta, rows)
        weights = (-rows / spec.sigma ** 2) * gauss[:, None]
        g = _pair_mean(vals[:, None] * weights)
    else:  # pragma: no cover
        raise ValueError(f"unsupported mode {cfg.mode}")
    return GradientEstimate(g=g, evals_used=obj.eval_count - start)


def estimate_gradient_fr22(
    obj: Objective, theta: np.ndarray, cfg: EstimatorConfig, rng: RngStream
) -> GradientEstimate:
    """Single-axis-blur gradient baseline.

    Each dimension's offset perturbs only that coordinate, so one
    evaluation serves one dimension; distributionally identical to
    ``estimate_gradient`` at dim == 1.
    """
    spec = cfg.spec
    n = spec.dim
    theta = _check_theta(theta, n)
    start = obj.eval_count
    part = gradient_partition(spec.sigma)
    tiny = np.finfo(float).tiny
    g = np.empty(n)
    for i in range(n):
        xi = np.clip(rng.uniform(cfg.samples), tiny, 1.0 - 1e-16)
        u = np.asarray(gradient_inverse_cdf(xi, spec.sigma)).reshape(cfg.samples)
        us = np.concatenate([u, -u])
        weights = -np.sign(us) * part
        vals = np.empty(len(us))
        for k, uk in enumerate(us):
            point = theta.copy()
            point[i] -= uk
            v = obj.evaluate(point)
            if not math.isfinite(v):
                raise EstimationError(f"objective returned non-finite value {v} at {point}", point=point)
            vals[k] = v
        g[i] = _pair_mean(vals * weights)
    return GradientEstimate(g=g, evals_used=obj.eval_count - start)


def estimate_gradient_fd(obj: Objective, theta: np.ndarray, step: float) -> GradientEstimate:
    """Classic central-difference gradient; 2n evaluations."""
    if not (step > 0):
        raise ValueError(f"step must be > 0, got {step}")
    theta = _check_theta(theta, obj.dim)
    start = obj.eval_count
    g = np.empty(obj.dim)
    for i in range(obj.dim):
        hi = theta.copy()
        lo = theta.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = obj.evaluate(hi)
        f_lo = obj.evaluate(lo)
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise EstimationError(f"non-finite objective near {theta}", point=theta)
        g[i] = (f_hi - f_lo) / (2.0 * step)
    return GradientEstimate(g=g, evals_used=obj.eval_count - start)


# ---------------------------------------------------------------------------
# Hessians
# ---------------------------------------------------------------------------

def _hessian_weight_factors(rows: np.ndarray, elements: list[KernelElement], sigma: float) -> np.ndarray:
    """kernel / gaussian factors per element, shape (S, K)."""
    out = np.empty((rows.shape[0], len(elements)))
    s2 = sigma * sigma
    for k, elem in enumerate(elements):
        if elem.kind is ElementKind.HESSIAN_DIAG:
            u = rows[:, elem.i]
            out[:, k] = (u - sigma) * (u + sigma) / (s2 * s2)
        else:
            out[:, k] = rows[:, elem.i] * rows[:, elem.j] / (s2 * s2)
    return out


def _scatter_hessian(values: np.ndarray, elements: list[KernelElement], n: int) -> np.ndarray:
    h = np.zeros((n, n))
    for val, elem in zip(values, elements):
        if elem.kind is ElementKind.HESSIAN_DIAG:
            h[elem.i, elem.i] = val
        else:
            h[elem.i, elem.j] = val
            h[elem.j, elem.i] = val
    return h


def estimate_hessian(
    obj: Objective, theta: np.ndarray, cfg: EstimatorConfig, rng: RngStream
) -> HessianEstimate:
    """Unbiased estimate of the sigma-smoothed Hessian at ``theta``.

    Only the diagonal and upper triangle are sampled; the lower triangle
    is mirrored, so the result is symmetric exactly.
    """
    spec = cfg.spec
    n = spec.dim
    theta = _check_theta(theta, n)
    start = obj.eval_count
    elements = hessian_elements(n)
    sigma = spec.sigma

    if cfg.mode is SamplingMode.PER_ELEMENT:
        beta = hessian_diag_scale(sigma)
        part = gradient_partition(sigma)
        table = default_hessian_diag_table()
        values = np.empty(len(elements))
        for k, elem in enumerate(elements):
            taus, _ = sample_hessian_offsets(elem, spec, table, rng, cfg.samples)
            rows = _antithetic_rows(taus)
            if elem.kind is ElementKind.HESSIAN_DIAG:
                u = rows[:, elem.i]
                weights = np.sign((u - sigma) * (u + sigma)) / beta
            else:
                weights = np.sign(rows[:, elem.i] * rows[:, elem.j]) * part * part
            vals = _evaluate_shifted(obj, theta, rows)
            values[k] = _even_weight_estimate(vals, weights, cfg.samples)
    elif cfg.mode is SamplingMode.AGGREGATE:
        taus, _ = sample_aggregate_offsets(elements, spec, default_hessian_diag_table(), rng, cfg.samples)
        rows = _antithetic_rows(taus)
        mixr = element_density_ratios(rows, elements, sigma).mean(axis=1)
        vals = _evaluate_shifted(obj, theta, rows)
        weights = _hessian_weight_factors(rows, elements, sigma) / mixr[:, None]
        values = _even_weight_estimate(vals, weights, cfg.samples)
    elif cfg.mode is SamplingMode.UNIFORM:
        rows = _antithetic_rows(_uniform_taus(cfg, rng))
        gauss = _uniform_gauss_over_pdf(rows, sigma, n)
        vals = _evaluate_shifted(obj, theta, rows)
        weights = _hessian_weight_factors(rows, elements, sigma) * gauss[:, None]
        values = _even_weight_estimate(vals, weights, cfg.samples)
    else:  # pragma: no cover
        raise ValueError(f"unsupported mode {cfg.mode}")
    return HessianEstimate(h=_scatter_hessian(values, elements, n), evals_used=obj.eval_count - start)


# ---------------------------------------------------------------------------
# Hessian-vector products
# ---------------------------------------------------------------------------

def _hvp_weights(rows: np.ndarray, v: np.ndarray, eps: float, sigma: float,
                 gauss_over_pdf: np.ndarray, axes: list[int] | None = None) -> np.ndarray:
    """Directional difference of shifted gradient kernels over the density.

    Implements (grad-kernel(tau + eps v) - grad-kernel(tau - eps v)) /
    (2 eps pdf(tau)) for the requested output axes; equals the central
    difference of the two shifted smoothed-gradient estimators computed
    from one shared set of draws and evaluations.
    """
    s2 = sigma * sigma
    tv = rows @ v
    vv = float(v @ v)
    r_plus = np.exp(-(2.0 * eps * tv + eps * eps * vv) / (2.0 * s2))
    r_minus = np.exp(-(-2.0 * eps * tv + eps * eps * vv) / (2.0 * s2))
    if axes is None:
        axes = list(range(rows.shape[1]))
    out = np.empty((rows.shape[0], len(axes)))
    for col, i in enumerate(axes):
        diff = -(rows[:, i] + eps * v[i]) * r_plus + (rows[:, i] - eps * v[i]) * r_minus
        out[:, col] = gauss_over_pdf * diff / (2.0 * eps * s2)
    return out


def estimate_hvp(
    obj: Objective, theta: np.ndarray, v: np.ndarray, cfg: EstimatorConfig, rng: RngStream
) -> HvpEstimate:
    """Unbiased estimate of the smoothed Hessian applied to direction ``v``.

    Computed as the difference of gradient estimates at theta + eps*v and
    theta - eps*v under common random numbers: both shifted estimates
    share the same offset draws and the same function evaluations, so the
    cost matches a single gradient estimate.

    The product is linear in v, so the kernels are shifted along the unit
    direction and the result rescaled by ||v||; this keeps eps*||v||
    small against the bandwidth no matter how large a direction the
    caller passes.
    """
    spec = cfg.spec
    n = spec.dim
    theta = _check_theta(theta, n)
    v_raw = np.asarray(v, dtype=float)
    if v_raw.shape != (n,):
        raise ValueError(f"direction has shape {v_raw.shape}, expected ({n},)")
    if not np.any(v_raw != 0.0):
        raise ValueError("direction must be nonzero")
    v_scale = float(np.linalg.norm(v_raw))
    v = v_raw / v_scale
    eps = cfg.epsilon()
    sigma = spec.sigma
    start = obj.eval_count
    hv = np.empty(n)

    if cfg.mode is SamplingMode.PER_ELEMENT:
        for i in range(n):
            taus, _ = sample_gradient_offsets(i, spec, rng, cfg.samples)
            rows = _antithetic_rows(taus)
            gauss_over_pdf = 2.0 * sigma / (SQRT_TWO_PI * np.abs(rows[:, i]))
            weights = _hvp_weights(rows, v, eps, sigma, gauss_over_pdf, axes=[i])
            vals = _evaluate_shifted(obj, theta, rows)
            hv[i] = _even_weight_estimate(vals, weights[:, 0], cfg.samples)
    elif cfg.mode is SamplingMode.AGGREGATE:
        elements = gradient_elements(n)
        taus, _ = sample_aggregate_offsets(elements, spec, default_hessian_diag_table(), rng, cfg.samples)
        rows = _antithetic_rows(taus)
        mixr = element_density_ratios(rows, elements, sigma).mean(axis=1)
        weights = _hvp_weights(rows, v, eps, sigma, 1.0 / mixr)
        vals = _evaluate_shifted(obj, theta, rows)
        hv = _even_weight_estimate(vals, weights, cfg.samples)
    elif cfg.mode is SamplingMode.UNIFORM:
        rows = _antithetic_rows(_uniform_taus(cfg, rng))
        gauss = _uniform_gauss_over_pdf(rows, sigma, n)
        weights = _hvp_weights(rows, v, eps, sigma, gauss)
        vals = _evaluate_shifted(obj, theta, rows)
        hv = _even_weight_estimate(vals, weights, cfg.samples)
    else:  # pragma: no cover
        raise ValueError(f"unsupported mode {cfg.mode}")
    return HvpEstimate(hv=v_scale * hv, direction=v_raw, evals_used=obj.eval_count - start)


# ---------------------------------------------------------------------------
# grey-box composition
# ---------------------------------------------------------------------------

def greybox_gradient(inner_jacobian: np.ndarray, outer_grad: GradientEstimate) -> GradientEstimate:
    """Chain rule through a known inner map: J^T g.

    The sampled gradient handles only the black-box outer function; the
    white-box inner Jacobian composes analytically.
    """
    jac = np.asarray(inner_jacobian, dtype=float)
    if jac.ndim != 2 or jac.shape[0] != outer_grad.g.shape[0]:
        raise ValueError(f"jacobian shape {jac.shape} does not match gradient length {outer_grad.g.shape}")
    return GradientEstimate(g=jac.T @ outer_grad.g, evals_used=outer_grad.evals_used)


def greybox_hessian(inner_jacobian: np.ndarray, outer_hess: HessianEstimate) -> HessianEstimate:
    """Gauss-Newton-style composition J^T H J; symmetric by construction."""
    jac = np.asarray(inner_jacobian, dtype=float)
    if jac.ndim != 2 or jac.shape[0] != outer_hess.h.shape[0]:
        raise ValueError(f"jacobian shape {jac.shape} does not match hessian shape {outer_hess.h.shape}")
    h = jac.T @ outer_hess.h @ jac
    h = 0.5 * (h + h.T)
    return HessianEstimate(h=h, evals_used=outer_hess.evals_used)

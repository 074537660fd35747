"""Optimizer identities: Newton exactness, conjugacy, trust region, Adam."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from smoothdiff.estimators import GradientEstimate, HessianEstimate, HvpEstimate, Objective
from smoothdiff.optimizers import (
    OptimizerState,
    SigmaSchedule,
    TrustRegion,
    anneal_sigma,
    gd_adam_run,
    gd_adam_step,
    newton_cg_run,
    newton_step,
    psd_modify,
)
from smoothdiff.tasks import negated_gaussian_task, quad_task
from smoothdiff.trace import Budget, NonFiniteStateError

QUAD_H = np.array([[10.0, 7.5], [7.5, 10.0]])


class AnalyticProvider:
    """Exact derivatives for optimizer identity tests."""

    def __init__(self, task):
        self.task = task

    def refresh(self, theta, sigma):
        pass

    def gradient(self, theta, sigma):
        return GradientEstimate(g=self.task.analytic_grad(theta), evals_used=0)

    def hvp(self, theta, v, sigma):
        return HvpEstimate(hv=self.task.analytic_hess(theta) @ v, direction=v, evals_used=0)


class TestAnnealSigma:
    def test_endpoints(self):
        sched = SigmaSchedule(2.0, 0.2, 10)
        assert anneal_sigma(sched, 0) == 2.0
        assert anneal_sigma(sched, 10) == 0.2

    def test_midpoint_is_mean(self):
        sched = SigmaSchedule(2.0, 1.0, 10)
        assert anneal_sigma(sched, 5) == pytest.approx(1.5)

    def test_clamps_beyond_total(self):
        sched = SigmaSchedule(2.0, 0.2, 10)
        assert anneal_sigma(sched, 50) == 0.2

    def test_validation(self):
        with pytest.raises(ValueError):
            SigmaSchedule(0.0, 1.0, 10)
        with pytest.raises(ValueError):
            anneal_sigma(SigmaSchedule(1.0, 0.1, 10), -1)


class TestAdam:
    def test_zero_gradient_leaves_theta(self):
        state = OptimizerState(theta=np.array([1.0, -2.0]))
        new = gd_adam_step(state, GradientEstimate(g=np.zeros(2), evals_used=0), lr=0.3)
        assert np.array_equal(new.theta, state.theta)
        assert new.iteration == 1

    def test_quad_converges_with_exact_gradients(self):
        # Adam at lr=0.5 overshoots near the bottom, so the loss is not
        # monotone; it still contracts by >99% over 50 iterations
        task = quad_task()
        state = OptimizerState(theta=np.array([3.0, 3.0]))
        losses = [task.fn(state.theta)]
        for _ in range(50):
            g = GradientEstimate(g=task.analytic_grad(state.theta), evals_used=0)
            state = gd_adam_step(state, g, lr=0.5)
            losses.append(task.fn(state.theta))
        assert all(b < a for a, b in zip(losses[:6], losses[1:7]))
        assert losses[-1] < 0.01 * losses[0]

    def test_determinism_of_full_runs(self):
        task = quad_task()

        def run():
            obj = task.objective()
            sched = SigmaSchedule(1.0, 0.1, 20)
            grad_fn = lambda th, s: GradientEstimate(g=task.analytic_grad(th), evals_used=0)
            return gd_adam_run(obj, grad_fn, np.array([2.0, 1.0]), sched, 0.3,
                               Budget(evals=25), param_error_fn=task.param_error,
                               deterministic_clock=True)

        t1, t2 = run(), run()
        assert t1.records == t2.records

    def test_non_finite_gradient_raises(self):
        state = OptimizerState(theta=np.zeros(2))
        with pytest.raises(NonFiniteStateError):
            gd_adam_step(state, GradientEstimate(g=np.array([np.nan, 0.0]), evals_used=0), lr=0.1)

    def test_lr_validation(self):
        state = OptimizerState(theta=np.zeros(2))
        with pytest.raises(ValueError):
            gd_adam_step(state, GradientEstimate(g=np.zeros(2), evals_used=0), lr=0.0)


class TestNewtonStep:
    def test_one_step_solves_quad_from_anywhere(self):
        task = quad_task()
        rng = np.random.default_rng(3)
        for _ in range(10):
            theta = rng.uniform(-5, 5, size=2)
            state = OptimizerState(theta=theta)
            new = newton_step(state,
                              GradientEstimate(g=task.analytic_grad(theta), evals_used=0),
                              HessianEstimate(h=task.analytic_hess(theta), evals_used=0),
                              TrustRegion(delta=1e12))
            assert np.linalg.norm(new.theta) < 1e-10

    def test_negative_definite_hessian_still_descends(self):
        g = np.array([3.0, -1.0])
        state = OptimizerState(theta=np.zeros(2))
        new = newton_step(state, GradientEstimate(g=g, evals_used=0),
                          HessianEstimate(h=-np.eye(2), evals_used=0), TrustRegion(delta=1e12))
        step = new.theta - state.theta
        assert float(step @ (-g)) > 0.0

    def test_trust_region_cap_exact(self):
        task = quad_task()
        theta = np.array([4.0, 4.0])
        delta = 0.5
        state = OptimizerState(theta=theta)
        new = newton_step(state,
                          GradientEstimate(g=task.analytic_grad(theta), evals_used=0),
                          HessianEstimate(h=task.analytic_hess(theta), evals_used=0),
                          TrustRegion(delta=delta))
        assert np.linalg.norm(new.theta - theta) <= delta + 1e-12
        assert np.linalg.norm(new.theta - theta) == pytest.approx(delta, rel=1e-12)


class TestPsdModify:
    def test_floor_on_smallest_eigenvalue(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.standard_normal((4, 4))
            h = 0.5 * (a + a.T)
            modified = psd_modify(h)
            lam = np.linalg.eigvalsh(modified)
            floor = 1e-6 * max(np.abs(np.linalg.eigvalsh(h)).max(), 1.0)
            assert lam.min() >= floor - 1e-12

    def test_newton_direction_is_descent(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a = rng.standard_normal((3, 3))
            h = 0.5 * (a + a.T)
            g = rng.standard_normal(3)
            v = -np.linalg.solve(psd_modify(h), g)
            assert float(v @ (-g)) >= 0.0


class TestNewtonCg:
    def test_quad_converges_in_two_outer_iterations(self):
        task = quad_task()
        obj = task.objective()
        trace = newton_cg_run(obj, AnalyticProvider(task), np.array([2.0, -3.0]),
                              SigmaSchedule(1.0, 0.1, 10), TrustRegion(1e12),
                              ls_iters=5, ls_tol=1e-10, recompute=10,
                              budget=Budget(evals=3), param_error_fn=task.param_error)
        assert trace.records[-1].iteration <= 2
        assert trace.records[-1].param_error < 1e-6

    def test_alpha_hand_check(self):
        # from theta=(1,1): r = v = -g = (-17.5,-17.5); v^T H v = 17.5^2*35
        task = quad_task()
        seen = []
        newton_cg_run(task.objective(), AnalyticProvider(task), np.array([1.0, 1.0]),
                      SigmaSchedule(1.0, 0.1, 10), TrustRegion(1e12),
                      ls_iters=2, ls_tol=1e-12, recompute=10,
                      budget=Budget(evals=2), on_inner_step=seen.append)
        assert abs(seen[0]["alpha"] - 2.0 / 35.0) <= 1e-12

    def test_fletcher_reeves_conjugacy(self):
        task = quad_task()
        seen = []
        newton_cg_run(task.objective(), AnalyticProvider(task), np.array([2.0, -3.0]),
                      SigmaSchedule(1.0, 0.1, 10), TrustRegion(1e12),
                      ls_iters=5, ls_tol=1e-12, recompute=10,
                      budget=Budget(evals=2), on_inner_step=seen.append)
        dirs = [s["v"] for s in seen if s["outer"] == 0]
        assert len(dirs) >= 2
        for a in range(len(dirs)):
            for b in range(a + 1, len(dirs)):
                cross = float(dirs[a] @ QUAD_H @ dirs[b])
                scale = math.sqrt(float(dirs[a] @ QUAD_H @ dirs[a]) * float(dirs[b] @ QUAD_H @ dirs[b]))
                assert abs(cross) <= 1e-8 * scale

    def test_trust_region_bounds_every_step(self):
        task = quad_task()
        delta = 0.25
        seen = []
        newton_cg_run(task.objective(), AnalyticProvider(task), np.array([4.0, 4.0]),
                      SigmaSchedule(1.0, 0.1, 10), TrustRegion(delta),
                      ls_iters=4, ls_tol=1e-10, recompute=10,
                      budget=Budget(evals=6), on_inner_step=seen.append)
        assert seen
        for s in seen:
            assert s["alpha"] * np.linalg.norm(s["v"]) <= delta + 1e-12

    def test_negative_curvature_falls_back_and_descends(self):
        # outside the inflection ring the negated Gaussian has negative
        # curvature along the radius; the run must still descend
        task = negated_gaussian_task(1.0)
        obj = task.objective()
        seen = []
        trace = newton_cg_run(obj, AnalyticProvider(task), np.array([1.8, 1.8]),
                              SigmaSchedule(1.0, 1.0, 10), TrustRegion(0.5),
                              ls_iters=3, ls_tol=1e-10, recompute=10,
                              budget=Budget(evals=40), param_error_fn=task.param_error,
                              on_inner_step=seen.append)
        assert any(s["fallback"] for s in seen)
        assert trace.records[-1].loss < trace.records[0].loss
        assert trace.records[-1].param_error < 0.1

    def test_budget_is_normal_termination(self):
        task = quad_task()
        obj = task.objective()
        trace = newton_cg_run(obj, AnalyticProvider(task), np.array([1.0, 1.0]),
                              SigmaSchedule(1.0, 0.1, 10), TrustRegion(1e12),
                              ls_iters=2, ls_tol=1e-10, recompute=10,
                              budget=Budget(evals=5))
        assert not trace.aborted
        assert trace.records[-1].evals >= 5

    def test_parameter_validation(self):
        task = quad_task()
        with pytest.raises(ValueError):
            newton_cg_run(task.objective(), AnalyticProvider(task), np.zeros(2),
                          SigmaSchedule(1.0, 0.1, 10), TrustRegion(1.0),
                          ls_iters=0, ls_tol=1e-3, recompute=1, budget=Budget(evals=5))
        with pytest.raises(ValueError):
            TrustRegion(delta=0.0)


def test_trace_monotonicity_invariants():
    task = quad_task()
    obj = task.objective()
    sched = SigmaSchedule(1.0, 0.1, 30)
    grad_fn = lambda th, s: GradientEstimate(g=task.analytic_grad(th), evals_used=0)
    trace = gd_adam_run(obj, grad_fn, np.array([2.0, 1.0]), sched, 0.3, Budget(evals=40),
                        param_error_fn=task.param_error)
    evals = [r.evals for r in trace.records]
    times = [r.wall_time for r in trace.records]
    assert evals == sorted(evals)
    assert times == sorted(times)
    assert trace.records[-1].evals == obj.eval_count

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persfit.errors import SingularSystem
from persfit.lm import (
    LMConfig,
    OutOfDomain,
    Status,
    _damped_solve,
    covariance,
    lm_step,
    normal_matrix,
    optimize,
)


class ExpFit:
    """Fit ``y = a exp(b t)`` on flat parameter vectors."""

    def __init__(self, t, y, w=None, domain=None):
        self.t, self.y = t, y
        self.w = np.ones_like(t) if w is None else w
        self.domain = domain

    def evaluate(self, x):
        if self.domain is not None and not self.domain(x):
            raise OutOfDomain("outside")
        return x[0] * np.exp(x[1] * self.t) - self.y, self.w

    def linearize(self, x):
        r, w = self.evaluate(x)
        e = np.exp(x[1] * self.t)
        return r, w, np.stack([e, x[0] * self.t * e], axis=1)

    def retract(self, x, delta):
        return x + delta


def make_fit(noise=0.0, seed=0, **kw):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 40)
    y = 2.0 * np.exp(-1.3 * t) + noise * rng.normal(size=t.size)
    return ExpFit(t, y, **kw)


class TestConfig:
    def test_defaults(self):
        cfg = LMConfig()
        assert (cfg.lambda0, cfg.max_iters, cfg.step_tol) == (0.1, 30, 1e-8)
        assert (cfg.lambda_up, cfg.lambda_down, cfg.lambda_min, cfg.lambda_max) == (10.0, 0.1, 1e-7, 1e7)

    @pytest.mark.parametrize(
        "kw", [{"lambda0": 0}, {"max_iters": 0}, {"lambda_up": 0.5}, {"lambda_down": 2.0}, {"lambda_min": 1e8}]
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            LMConfig(**kw)


class TestStep:
    def test_zero_residual(self):
        J = np.random.default_rng(0).normal(size=(10, 3))
        assert np.all(lm_step(np.zeros(10), np.ones(10), J, 0.1) == 0)

    def test_gradient_descent_limit(self):
        rng = np.random.default_rng(1)
        J, r, w = rng.normal(size=(20, 4)), rng.normal(size=20), rng.uniform(0.1, 1, size=20)
        lam = 1e8
        H = normal_matrix(J, w)
        expected = -(J.T @ (w * r)) / (lam * np.diag(H))
        np.testing.assert_allclose(lm_step(r, w, J, lam), expected, rtol=1e-4)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(5, 5))
        H = A @ A.T + 5 * np.eye(5)
        grad = rng.normal(size=5)
        lam = 0.3
        expected = -np.linalg.inv(H + lam * np.diag(np.diag(H))) @ grad
        np.testing.assert_allclose(_damped_solve(H, grad, lam), expected, rtol=0, atol=1e-10)

    def test_solution_residual(self):
        rng = np.random.default_rng(3)
        J, r = rng.normal(size=(30, 5)), rng.normal(size=30)
        w = np.ones(30)
        delta = lm_step(r, w, J, 0.1)
        H = normal_matrix(J, w)
        g = J.T @ r
        assert np.linalg.norm((H + 0.1 * np.diag(np.diag(H))) @ delta + g) < 1e-10 * np.linalg.norm(g)

    def test_unobserved_direction_is_damped(self):
        J = np.array([[1.0, 0.0], [2.0, 0.0]])
        delta = lm_step(np.array([1.0, 1.0]), np.ones(2), J, 0.1)
        assert delta[1] == 0.0 and np.isfinite(delta[0])

    def test_not_positive_definite(self):
        with pytest.raises(SingularSystem):
            _damped_solve(-np.eye(2), np.ones(2), 0.1)


class TestOptimize:
    def test_converges_and_costs_decrease(self):
        res = optimize(make_fit(), np.array([1.0, 0.0]))
        np.testing.assert_allclose(res.x, (2.0, -1.3), atol=1e-9)
        assert res.status is Status.STEP_TOL
        costs = res.trace.accepted_costs
        assert all(b < a for a, b in zip(costs, costs[1:]))

    def test_fixed_point(self):
        res = optimize(make_fit(), np.array([2.0, -1.3]))
        assert res.trace.iterations <= 2
        assert res.status is Status.STEP_TOL
        assert res.trace.records[-1].step_norm < 1e-12

    def test_max_iters(self):
        res = optimize(make_fit(), np.array([0.1, 3.0]), LMConfig(max_iters=3))
        assert res.status is Status.MAX_ITERS
        assert res.trace.iterations == 3

    def test_no_constraints_stall(self):
        fit = make_fit()
        fit.w = np.zeros_like(fit.t)
        res = optimize(fit, np.array([1.0, 0.0]))
        assert res.status is Status.STALLED
        assert res.trace.iterations == 0

    def test_out_of_domain_trials_are_rejected(self):
        fit = make_fit(domain=lambda x: x[1] > -1.0)
        res = optimize(fit, np.array([1.0, 0.0]), LMConfig(max_iters=60))
        assert res.x[1] > -1.0
        assert any(math.isinf(rec.cost) and not rec.accepted for rec in res.trace.records)

    def test_damping_schedule(self):
        res = optimize(make_fit(), np.array([1.0, 0.0]))
        lam = 0.1
        for rec in res.trace.records:
            assert rec.lam == pytest.approx(lam)
            if rec.step_norm < 1e-8:
                break
            lam = max(lam * 0.1, 1e-7) if rec.accepted else lam * 10

    def test_deterministic(self):
        a = optimize(make_fit(0.05), np.array([1.0, 0.0]))
        b = optimize(make_fit(0.05), np.array([1.0, 0.0]))
        assert a.trace.records == b.trace.records
        assert np.array_equal(a.x, b.x)

    @given(st.floats(0.2, 5.0), st.floats(-3.0, 1.0), st.integers(0, 1000))
    def test_accepted_costs_never_increase(self, a0, b0, seed):
        res = optimize(make_fit(0.1, seed), np.array([a0, b0]))
        costs = res.trace.accepted_costs
        assert all(b <= a for a, b in zip(costs, costs[1:]))


class TestCovariance:
    def test_inverse_without_scaling(self):
        rng = np.random.default_rng(4)
        J, w = rng.normal(size=(30, 3)), rng.uniform(0.5, 1, 30)
        S = covariance(J, w, scale_by_residual=False)
        np.testing.assert_allclose(S, np.linalg.inv(normal_matrix(J, w)), rtol=1e-10)
        assert np.array_equal(S, S.T)

    def test_residual_scaling(self):
        rng = np.random.default_rng(5)
        J, r, w = rng.normal(size=(30, 3)), rng.normal(size=30), np.ones(30)
        var = np.sum(r * r) / 27
        np.testing.assert_allclose(covariance(J, w, r), var * np.linalg.inv(J.T @ J), rtol=1e-10)

    def test_prior_rows_are_not_scaled(self):
        rng = np.random.default_rng(6)
        Jd, r = rng.normal(size=(30, 2)), rng.normal(size=30)
        Jp = np.diag([10.0, 10.0])
        J = np.vstack([Jd, Jp])
        w = np.ones(32)
        rr = np.concatenate([r, np.zeros(2)])
        var = np.sum(r * r) / 28
        expected = np.linalg.inv(Jd.T @ Jd / var + Jp.T @ Jp)
        np.testing.assert_allclose(covariance(J, w, rr, n_prior=2), expected, rtol=1e-10)

    def test_rank_deficient_pseudo_inverse(self):
        J = np.array([[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]])
        S = covariance(J, np.ones(3), scale_by_residual=False)
        assert S[1, 1] == 0.0 and S[0, 0] == pytest.approx(1 / 5.25)
        assert np.all(np.diag(S) >= 0)

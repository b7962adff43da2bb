import math

import numpy as np
import pytest

from conftest import make_dataset, random_params
from cslme.estimate import (
    FitConfig,
    NotPositiveDefiniteError,
    approx_loglik,
    fit,
    logdet_psd,
    pls_objective,
    prls_objective,
)
from cslme.model import (
    Dataset,
    GroupData,
    ModelSpec,
    Parameters,
    assemble,
    marginal_cov,
)
from cslme.optim import central_diff_grad, gradient_step
from cslme.ranef import joint_objective
from cslme.sim import Scenario, gen_design, gen_response


def dense_pls(params, dataset, spec):
    X, Z, y, _ = assemble(dataset, spec)
    V = marginal_cov(params, spec, Z)
    Vinv = np.linalg.inv(V)
    r = y - X @ params.beta
    return float(r @ Vinv @ r + np.linalg.slogdet(V)[1])


def dense_logdet_f(params, dataset, spec):
    X, Z, y, _ = assemble(dataset, spec)
    Vinv = np.linalg.inv(marginal_cov(params, spec, Z))
    return float(np.linalg.slogdet(X.T @ Vinv @ X)[1])


class TestObjectives:
    def test_pls_matches_dense(self, rng):
        for _ in range(6):
            data = make_dataset(rng, g=3, p=3)
            spec = ModelSpec(alpha=(0, 1))
            params = random_params(rng, 3, spec.alpha)
            assert pls_objective(params, data, spec) == pytest.approx(
                dense_pls(params, data, spec), rel=1e-9)

    def test_prls_minus_pls_identity(self, rng):
        for _ in range(10):
            data = make_dataset(rng, g=3, p=3)
            spec = ModelSpec(alpha=(1,))
            params = random_params(rng, 3, spec.alpha)
            gap = prls_objective(params, data, spec) - pls_objective(params, data, spec)
            assert gap == pytest.approx(dense_logdet_f(params, data, spec), abs=1e-10)

    def test_prls_zero_term_for_orthonormal_design(self, rng):
        # V = I and orthonormal columns make ln|X' V^-1 X| vanish
        raw = rng.normal(size=(12, 2))
        Q, _ = np.linalg.qr(raw)
        data = Dataset((GroupData("a", rng.normal(size=6), Q[:6]),
                        GroupData("b", rng.normal(size=6), Q[6:])))
        spec = ModelSpec(alpha=(0,))
        params = Parameters(beta=np.array([0.0, 1.0]), varsigma=np.array([0.3]),
                            sigma=1.0)
        # beta[0] = 0 degenerates the deviation, so V = sigma^2 I = I
        gap = prls_objective(params, data, spec) - pls_objective(params, data, spec)
        assert gap == pytest.approx(0.0, abs=1e-10)

    def test_approx_loglik_identity(self, rng):
        data = make_dataset(rng, g=2, p=3)
        spec = ModelSpec(alpha=(0,))
        for _ in range(5):
            params = random_params(rng, 3, spec.alpha)
            lhs = pls_objective(params, data, spec)
            rhs = -2.0 * approx_loglik(params, data, spec) - data.n * math.log(2 * math.pi)
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_approx_loglik_reduces_to_iid_normal(self, rng):
        data = make_dataset(rng, g=2, p=2)
        X = np.vstack([gd.X for gd in data.groups])
        y = np.concatenate([gd.y for gd in data.groups])
        ols, *_ = np.linalg.lstsq(X, y, rcond=None)
        rss = float(np.sum((y - X @ ols) ** 2))
        sigma2 = rss / data.n
        params = Parameters(beta=ols, varsigma=np.array([0.0]), sigma=math.sqrt(sigma2))
        expected = -0.5 * data.n * (math.log(2 * math.pi * sigma2) + 1.0)
        spec = ModelSpec(alpha=(0,), constrained=False)
        assert approx_loglik(params, data, spec) == pytest.approx(expected, rel=1e-12)


class TestLogdetPsd:
    def test_identity_blocks(self):
        assert logdet_psd([np.eye(3), np.eye(5)]) == 0.0

    def test_diagonal_blocks(self):
        d = np.array([0.5, 2.0, 4.0])
        assert logdet_psd([np.diag(d)]) == pytest.approx(float(np.sum(np.log(d))),
                                                         rel=1e-14)

    def test_random_pd_matches_eigenvalues(self, rng):
        for _ in range(5):
            A = rng.normal(size=(6, 6))
            B = A @ A.T + 0.5 * np.eye(6)
            assert logdet_psd([B]) == pytest.approx(
                float(np.sum(np.log(np.linalg.eigvalsh(B)))), abs=1e-8)

    def test_indefinite_block_raises(self):
        with pytest.raises(NotPositiveDefiniteError):
            logdet_psd([np.diag([1.0, -1.0])])


def boundary_scenario(n=300, seed=11):
    truth = Parameters(beta=np.array([0.072, 1.0, 1.0]),
                       varsigma=np.array([0.058]), sigma=1.0)
    return Scenario(n=n, p=3, g=2, alpha=(0,), truth=truth, seed=seed)


def simulate(scenario, rep=0):
    ss = np.random.SeedSequence([scenario.seed, rep])
    d_seed, r_seed = ss.spawn(2)
    spec = scenario.model_spec()
    design = gen_design(scenario, seed=d_seed)
    data, gamma_truth = gen_response(design, scenario.truth, spec, r_seed)
    return data, spec, gamma_truth


class TestFit:
    def test_feasibility_exact_near_boundary(self):
        data, spec, _ = simulate(boundary_scenario())
        res = fit(data, spec, FitConfig(method="PLS", seed=1))
        assert np.all(res.params.beta >= 0.0)
        assert np.all(res.params.varsigma >= 0.0)
        assert res.params.sigma > 0.0
        # overall coefficients never negative either
        overall = res.params.beta[0] + res.gamma.gamma[:, 0]
        assert np.all(overall >= 0.0)

    def test_objective_recomputable(self):
        data, spec, _ = simulate(boundary_scenario(n=200, seed=3))
        res = fit(data, spec, FitConfig(method="PRLS", seed=2))
        assert res.objective == pytest.approx(
            prls_objective(res.params, data, spec), rel=1e-12)

    def test_monotone_trace(self):
        data, spec, _ = simulate(boundary_scenario(n=200, seed=5))
        res = fit(data, spec, FitConfig(method="PLS", seed=0))
        assert np.all(np.diff(res.objective_trace) <= 1e-9)

    def test_deterministic(self):
        data, spec, _ = simulate(boundary_scenario(n=150, seed=7))
        cfg = FitConfig(method="PLS", seed=9)
        a = fit(data, spec, cfg)
        b = fit(data, spec, cfg)
        np.testing.assert_array_equal(a.params.beta, b.params.beta)
        np.testing.assert_array_equal(a.gamma.gamma, b.gamma.gamma)
        assert a.objective == b.objective
        assert a.start_index == b.start_index

    def test_zero_variance_truth_recovers_gls(self, rng):
        truth = Parameters(beta=np.array([1.0, 0.8, 1.2]),
                           varsigma=np.array([0.0]), sigma=0.7)
        sc = Scenario(n=400, p=3, g=2, alpha=(0,), truth=truth, seed=21)
        data, spec, _ = simulate(sc)
        res = fit(data, spec, FitConfig(method="PLS", seed=4))
        assert res.params.varsigma[0] < 0.05
        X = np.vstack([gd.X for gd in data.groups])
        y = np.concatenate([gd.y for gd in data.groups])
        ols, *_ = np.linalg.lstsq(X, y, rcond=None)
        np.testing.assert_allclose(res.params.beta, np.maximum(ols, 0.0), atol=0.02)

    def test_optimality_probe(self):
        data, spec, _ = simulate(boundary_scenario(n=250, seed=13))
        cfg = FitConfig(method="PLS", seed=1, tol_obj=1e-11, tol_grad=1e-8)
        res = fit(data, spec, cfg)
        x = np.concatenate([res.params.beta, res.params.varsigma,
                            [math.log(res.params.sigma)]])
        rng = np.random.default_rng(99)
        tol = cfg.tol_obj * (1.0 + abs(res.objective))
        p, k = data.p, spec.k
        for _ in range(200):
            delta = 1e-3 * rng.uniform(-1, 1, size=x.size) * np.maximum(np.abs(x), 0.1)
            probe = x + delta
            probe[:p + k] = np.maximum(probe[:p + k], 0.0)
            params = Parameters(beta=probe[:p], varsigma=probe[p:p + k],
                                sigma=math.exp(probe[-1]))
            assert pls_objective(params, data, spec) >= res.objective - tol

    def test_gamma_solves_joint_problem(self):
        data, spec, _ = simulate(boundary_scenario(n=200, seed=17))
        res = fit(data, spec, FitConfig(method="PLS", seed=3))
        best = joint_objective(data, res.params, spec, res.gamma.gamma)
        rng = np.random.default_rng(5)
        bound = abs(res.params.beta[0])
        for _ in range(100):
            probe = res.gamma.gamma + rng.uniform(-0.1, 0.1, size=res.gamma.gamma.shape)
            probe = np.clip(probe, -bound, bound)
            assert joint_objective(data, res.params, spec, probe) >= best - 1e-10

    def test_constrained_matches_free_optimum_when_interior(self, rng):
        # solidly positive truth: the sign constraints never bind, so the
        # constrained optimum must coincide with the free optimum
        truth = Parameters(beta=np.array([2.0, 1.5, 1.0]),
                           varsigma=np.array([0.4]), sigma=0.8)
        sc = Scenario(n=500, p=3, g=2, alpha=(0,), truth=truth, seed=31)
        data, spec, _ = simulate(sc)
        cfg = FitConfig(method="PLS", seed=2, tol_obj=1e-11, tol_grad=1e-8)
        constrained = fit(data, spec, cfg)
        free_spec = ModelSpec(alpha=spec.alpha, intercept=spec.intercept,
                              constrained=False)
        free = fit(data, free_spec, cfg)
        assert np.all(free.params.beta > 0)
        assert constrained.objective == pytest.approx(
            free.objective, abs=1e-6 * (1 + abs(free.objective)))


class TestGradient:
    def test_central_diff_matches_richardson(self, rng):
        data = make_dataset(rng, g=3, p=3)
        spec = ModelSpec(alpha=(0, 2))

        def fun(x):
            params = Parameters(beta=x[:3], varsigma=np.abs(x[3:5]),
                                sigma=math.exp(x[5]))
            return pls_objective(params, data, spec)

        for _ in range(20):
            params = random_params(rng, 3, spec.alpha)
            x = np.concatenate([params.beta, params.varsigma,
                                [math.log(params.sigma)]])
            internal = central_diff_grad(fun, x)
            h0 = 1e-3 * np.maximum(np.abs(x), 1.0)
            d1 = central_diff_grad(fun, x, h=h0)
            d2 = central_diff_grad(fun, x, h=h0 / 2)
            d4 = central_diff_grad(fun, x, h=h0 / 4)
            r1 = (4 * d2 - d1) / 3
            r2 = (4 * d4 - d2) / 3
            richardson = (16 * r2 - r1) / 15
            rel = np.linalg.norm(internal - richardson) / np.linalg.norm(richardson)
            assert rel < 1e-4

    def test_step_rule(self):
        x = np.array([0.0, 1e-3, 100.0])
        np.testing.assert_allclose(gradient_step(x), [1e-6, 1e-6, 1e-5])


class TestConstraintOverrides:
    def test_unconstrained_columns_may_go_negative(self, rng):
        # data with a genuinely negative slope on column 1
        from cslme.model import Dataset, GroupData
        from cslme.sim import Scenario, gen_design

        sc = Scenario(n=200, p=3, g=2, alpha=(0,),
                      truth=Parameters(beta=np.array([1.0, 0.0, 1.0]),
                                       varsigma=np.array([0.1]), sigma=0.5),
                      seed=3)
        design = gen_design(sc, seed=1)
        groups = []
        gen = np.random.default_rng(9)
        for gd in design.groups:
            y = gd.X @ np.array([1.0, -0.8, 1.0]) + gen.normal(0, 0.5, gd.n)
            groups.append(GroupData(gd.group_id, y, gd.X))
        data = Dataset(tuple(groups))

        spec_all = ModelSpec(alpha=(0,), constrained=True)
        res_all = fit(data, spec_all, FitConfig(method="PLS", seed=1))
        assert res_all.params.beta[1] == 0.0  # clamped at the sign boundary

        spec_free1 = ModelSpec(alpha=(0,), constrained=True,
                               unconstrained_columns=(1,))
        res_free = fit(data, spec_free1, FitConfig(method="PLS", seed=1))
        assert res_free.params.beta[1] < -0.5
        assert res_free.params.beta[0] >= 0.0
        assert res_free.objective < res_all.objective

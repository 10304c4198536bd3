"""Variational objective, gradients, fitting, quadrature oracle, prediction."""

import math

import numpy as np
import pytest

from coverlvm.errors import FitFailureError, UnsupportedFamilyError
from coverlvm.estimator import (FitOptions, VariationalObjective, elbo, fit,
                                marginal_loglik_quadrature, predict_expected,
                                predict_presence)
from coverlvm.families import logistic, logit
from coverlvm.model import (CovariateMatrix, ModelSpec, ParameterSet, ResponseMatrix,
                            VariationalState)
from helpers import build_objective, grad_fd, random_cover_data


class TestElboStructure:
    def test_d0_equals_exact_loglik(self):
        rng = np.random.default_rng(1)
        data = random_cover_data(rng, 8, 4)
        spec = ModelSpec(family="hurdle-beta", latent_dim=0)
        obj = VariationalObjective(data, CovariateMatrix.empty(8), spec)
        theta = rng.normal(0, 0.3, size=obj.n_free)
        params, _ = obj.unpack(theta)
        total, _, _ = obj.loglik_fields(params, np.zeros((8, 0)))
        assert obj.value(theta) == pytest.approx(float(total.sum()), abs=1e-10)

    def test_kl_zero_at_standard_normal(self):
        rng = np.random.default_rng(2)
        data = random_cover_data(rng, 6, 3)
        spec = ModelSpec(family="beta-shifted", latent_dim=1)
        obj = VariationalObjective(data, CovariateMatrix.empty(6), spec)
        params, _ = obj.unpack(rng.normal(0, 0.3, size=obj.n_free))
        vstate = VariationalState(means=np.zeros((6, 1)), covariances=np.ones((6, 1)))
        # with q = prior, elbo = sum of corrected branch terms only
        val = elbo(params, vstate, data, None, spec)
        total, _, D2 = obj.loglik_fields(params, np.zeros((6, 1)))
        G = np.asarray(params.loadings["mean"])
        correction = 0.5 * float(np.sum(D2["mean"] * (np.ones((6, 1)) @ (G ** 2).T)))
        assert val == pytest.approx(float(total.sum()) + correction, abs=1e-10)

    def test_bernoulli_cell_value(self):
        # one observed cell, eta~ = 0, Var_q(eta) = 1
        data = ResponseMatrix(values=[[1.0]])
        spec = ModelSpec(family="bernoulli", latent_dim=1)
        params = ParameterSet(intercepts={"mean": np.zeros(1)},
                              slopes={"mean": np.zeros((1, 0))},
                              loadings={"mean": np.ones((1, 1))})
        vstate = VariationalState(means=np.zeros((1, 1)), covariances=np.ones((1, 1)))
        val = elbo(params, vstate, data, None, spec)
        assert val == pytest.approx(math.log(0.5) - 0.125, abs=1e-12)  # KL term is zero

    def test_masked_cell_has_no_influence(self):
        rng = np.random.default_rng(3)
        vals = rng.uniform(0.1, 0.9, size=(5, 3))
        mask = np.ones((5, 3), dtype=bool)
        mask[2, 1] = False
        spec = ModelSpec(family="beta-shifted", latent_dim=1)
        cov = CovariateMatrix.empty(5)
        data_a = ResponseMatrix(values=vals, mask=mask)
        vals_b = vals.copy()
        vals_b[2, 1] = 0.123456
        data_b = ResponseMatrix(values=vals_b, mask=mask)
        obj_a = VariationalObjective(data_a, cov, spec)
        obj_b = VariationalObjective(data_b, cov, spec)
        theta = rng.normal(0, 0.3, size=obj_a.n_free)
        _, ga = obj_a._evaluate(theta)
        _, gb = obj_b._evaluate(theta)
        assert np.array_equal(ga, gb)

    def test_kl_only_gradient_is_minus_means(self):
        mask = np.zeros((4, 2), dtype=bool)
        data = ResponseMatrix(values=np.zeros((4, 2)), mask=mask)
        spec = ModelSpec(family="bernoulli", latent_dim=2)
        obj = VariationalObjective(data, CovariateMatrix.empty(4), spec)
        rng = np.random.default_rng(4)
        theta = rng.normal(0, 0.5, size=obj.n_free)
        _, vstate = obj.unpack(theta)
        _, grad = obj._evaluate(theta)
        k = obj.layout.n_free
        g_means = grad[k:k + 8].reshape(4, 2)
        assert np.allclose(g_means, -vstate.means, atol=1e-12)

    def test_sign_flip_invariance(self):
        import dataclasses

        rng = np.random.default_rng(5)
        obj, data, cov, spec = build_objective(rng, "hurdle-beta", n=8, m=4, d=2, q=1)
        theta = rng.normal(0, 0.4, size=obj.n_free)
        params, vstate = obj.unpack(theta)
        val = obj.value(theta)
        # flip the second latent column jointly in the means and in every
        # part's loadings; this leaves eta and Var_q(eta) pointwise unchanged.
        # The flipped representative has a negative constrained diagonal, so
        # it lives outside the validated chart; bypass the constructor.
        flipped = {p: np.asarray(g).copy() for p, g in params.loadings.items()}
        for p in flipped:
            flipped[p][:, 1] *= -1.0
        params2 = dataclasses.replace(params)
        object.__setattr__(params2, "loadings", flipped)
        means = vstate.means.copy()
        means[:, 1] *= -1.0
        vstate2 = VariationalState(means=means, covariances=vstate.covariances)
        val2, _ = obj._evaluate_state(params2, vstate2)
        assert val2 == pytest.approx(val, abs=1e-10)

    def test_small_variance_limit_is_plugin_loglik(self):
        rng = np.random.default_rng(6)
        obj, data, cov, spec = build_objective(rng, "ordered-beta", n=8, m=4, d=2, q=0)
        theta = rng.normal(0, 0.4, size=obj.n_free)
        params, vstate = obj.unpack(theta)
        eps = 1e-8
        tiny = VariationalState(means=vstate.means, covariances=np.full((8, 2), eps))
        val = elbo(params, tiny, data, cov, spec)
        total, _, _ = obj.loglik_fields(params, vstate.means)
        kl = 0.5 * (2 * 8 * eps + float(np.sum(vstate.means ** 2)) - 16
                    - 2 * 8 * math.log(eps))
        assert val + kl == pytest.approx(float(total.sum()), abs=1e-5)


class TestGradientAgainstFiniteDifferences:
    @pytest.mark.parametrize("family,kw", [
        ("bernoulli", {}),
        ("beta-shifted", {"pooled_precision": True}),
        ("hurdle-beta", {"row_effects": True}),
        ("ordered-beta", {"cutoff_mode": "common"}),
        ("cumulative-logit", {}),
    ])
    def test_full_gradient(self, family, kw):
        rng = np.random.default_rng(11)
        obj, *_ = build_objective(rng, family, n=6, m=3, d=2, q=1, **kw)
        theta = rng.normal(0, 0.4, size=obj.n_free)
        _, grad = obj._evaluate(theta)
        fd = grad_fd(obj.value, theta)
        rel = np.abs(grad - fd) / np.maximum(1e-6, np.abs(fd))
        assert rel.max() < 1e-4


class TestFit:
    def test_intercept_only_bernoulli_matches_frequencies(self):
        rng = np.random.default_rng(7)
        y = (rng.uniform(size=(40, 5)) < [0.15, 0.4, 0.5, 0.7, 0.9]).astype(float)
        data = ResponseMatrix(values=y)
        model = fit(data, None, ModelSpec(family="bernoulli", latent_dim=0),
                    FitOptions(n_restarts=1))
        fitted = logistic(np.asarray(model.params.intercepts["mean"]))
        assert np.max(np.abs(fitted - y.mean(axis=0))) < 1e-6

    def test_refit_same_seed_identical(self):
        rng = np.random.default_rng(8)
        data = random_cover_data(rng, 12, 5)
        spec = ModelSpec(family="ordered-beta", latent_dim=1)
        opts = FitOptions(n_restarts=2, max_iterations=150, seed=42)
        a = fit(data, None, spec, opts)
        b = fit(data, None, spec, opts)
        assert a.diagnostics == b.diagnostics
        assert np.array_equal(a.vstate.means, b.vstate.means)

    def test_fit_result_satisfies_invariants(self):
        rng = np.random.default_rng(9)
        data = random_cover_data(rng, 15, 6)
        model = fit(data, None, ModelSpec(family="hurdle-beta", latent_dim=2),
                    FitOptions(n_restarts=1, max_iterations=120))
        G = np.asarray(model.params.loadings["mean"])
        assert np.all(np.triu(G, 1) == 0.0)
        assert np.all(np.diag(G)[:2] > 0.0)
        assert np.all(model.vstate.covariances > 0.0)

    def test_final_elbo_matches_reevaluation(self):
        rng = np.random.default_rng(10)
        data = random_cover_data(rng, 10, 4)
        spec = ModelSpec(family="beta-shifted", latent_dim=1)
        model = fit(data, None, spec, FitOptions(n_restarts=1, max_iterations=100))
        again = elbo(model.params, model.vstate, data, None, spec)
        assert model.diagnostics.final_elbo == pytest.approx(again, abs=1e-10)

    def test_quick_recovery_correlation(self):
        from coverlvm import simulation as sim

        design = sim.SimDesign(generator="ordered-beta", n=30, m=12, d=1,
                               zero_prop=0.3, one_prop=0.05, seed=12)
        rng = np.random.default_rng(12)
        params, scores = sim.draw_calibrated_model(design, rng)
        data = sim.simulate_dataset(params, scores, design, rng)
        model = fit(data, None, ModelSpec(family="ordered-beta", latent_dim=1),
                    FitOptions(n_restarts=2, max_iterations=250, seed=1))
        eta_true = sim.true_linear_predictor(params, scores)
        eta_fit = (np.asarray(model.params.intercepts["mean"])[None, :]
                   + model.vstate.means @ np.asarray(model.params.loadings["mean"]).T)
        corr = np.corrcoef(eta_true.ravel(), eta_fit.ravel())[0, 1]
        assert corr > 0.85

    def test_objective_monotone_over_accepted_steps(self):
        from scipy.optimize import minimize

        rng = np.random.default_rng(30)
        data = random_cover_data(rng, 12, 5)
        spec = ModelSpec(family="ordered-beta", latent_dim=1)
        obj = VariationalObjective(data, CovariateMatrix.empty(12), spec)
        from coverlvm.estimator import _initial_params
        params0, vstate0 = _initial_params(obj, np.random.default_rng(0))
        theta0 = obj.pack(params0, vstate0)
        seen = []
        minimize(obj.value_and_grad, theta0, jac=True, method="L-BFGS-B",
                 callback=lambda xk: seen.append(obj.value_and_grad(xk)[0]),
                 options={"maxiter": 120})
        assert np.all(np.diff(seen) <= 1e-9)

    def test_adam_backend_runs(self):
        rng = np.random.default_rng(13)
        data = random_cover_data(rng, 10, 4)
        model = fit(data, None, ModelSpec(family="beta-shifted", latent_dim=1),
                    FitOptions(n_restarts=1, max_iterations=300,
                               optimizer="first-order-adaptive"))
        assert np.isfinite(model.diagnostics.final_elbo)

    def test_all_restarts_diverging_raises(self):
        # a data panel the bernoulli family must reject
        data = random_cover_data(np.random.default_rng(14), 6, 3)
        with pytest.raises(Exception):
            fit(data, None, ModelSpec(family="bernoulli", latent_dim=1), FitOptions())


class TestQuadrature:
    def test_d0_equals_plain_loglik(self):
        rng = np.random.default_rng(15)
        data = random_cover_data(rng, 8, 3)
        spec = ModelSpec(family="beta-shifted", latent_dim=0)
        obj = VariationalObjective(data, CovariateMatrix.empty(8), spec)
        theta = rng.normal(0, 0.3, size=obj.n_free)
        params, _ = obj.unpack(theta)
        assert marginal_loglik_quadrature(params, data, None, spec) == pytest.approx(
            obj.value(theta), abs=1e-10)

    def test_node_doubling_self_consistency(self):
        rng = np.random.default_rng(16)
        n, m = 12, 3
        u = rng.normal(size=(n, 1))
        eta = 0.3 + u @ np.array([[1.1, 0.7, -0.9]])
        y = (rng.uniform(size=(n, m)) < logistic(eta)).astype(float)
        data = ResponseMatrix(values=y)
        spec = ModelSpec(family="bernoulli", latent_dim=1)
        params = ParameterSet(intercepts={"mean": np.full(m, 0.3)},
                              slopes={"mean": np.zeros((m, 0))},
                              loadings={"mean": np.array([[1.1], [0.7], [-0.9]])})
        a = marginal_loglik_quadrature(params, data, None, spec, 50)
        b = marginal_loglik_quadrature(params, data, None, spec, 100)
        assert abs(a - b) < 1e-8

    def test_two_dimensional_grid(self):
        rng = np.random.default_rng(17)
        data = random_cover_data(rng, 6, 3, zero_frac=0.2, one_frac=0.0)
        spec = ModelSpec(family="ordered-beta", latent_dim=2)
        obj = VariationalObjective(data, CovariateMatrix.empty(6), spec)
        params, _ = obj.unpack(rng.normal(0, 0.3, size=obj.n_free))
        a = marginal_loglik_quadrature(params, data, None, spec, 30)
        b = marginal_loglik_quadrature(params, data, None, spec, 60)
        assert abs(a - b) < 1e-6

    def test_rejects_high_dimension(self):
        data = random_cover_data(np.random.default_rng(18), 5, 2)
        spec = ModelSpec(family="beta-shifted", latent_dim=3)
        with pytest.raises(Exception):
            marginal_loglik_quadrature(None, data, None, spec)


def _fit_small_hurdle(seed=20):
    rng = np.random.default_rng(seed)
    data = random_cover_data(rng, 10, 4)
    cov = CovariateMatrix(values=rng.normal(size=(10, 1)), names=("x1",))
    model = fit(data, cov, ModelSpec(family="hurdle-beta", latent_dim=1),
                FitOptions(n_restarts=1, max_iterations=120))
    return model, data, cov


class TestPrediction:
    def test_training_rows_reproduce_fitted_values(self):
        model, data, cov = _fit_small_hurdle()
        pred = predict_expected(model, cov, np.arange(10))
        pred_again = predict_expected(model, cov, np.arange(10))
        assert np.array_equal(pred, pred_again)
        sub = predict_expected(model,
                               CovariateMatrix(values=cov.values[3:4], names=cov.names),
                               [3])
        assert np.allclose(sub[0], pred[3], atol=1e-12)

    def test_certain_zero_species(self):
        model, data, cov = _fit_small_hurdle()
        params = model.params
        z = np.asarray(params.intercepts["zero"]).copy()
        z[0] = 200.0  # mu0 -> 1 for the first species
        forced = ParameterSet(intercepts={"mean": params.intercepts["mean"],
                                          "zero": z, "one": params.intercepts["one"]},
                              slopes=params.slopes, loadings=params.loadings,
                              log_precisions=params.log_precisions)
        model2 = type(model)(spec=model.spec, params=forced, vstate=model.vstate,
                             diagnostics=model.diagnostics,
                             species_names=model.species_names,
                             site_names=model.site_names,
                             covariate_names=model.covariate_names)
        pred = predict_expected(model2, cov, np.arange(10))
        assert np.all(pred[:, 0] < 1e-10)

    def test_manual_two_by_two(self):
        spec = ModelSpec(family="bernoulli", latent_dim=1)
        params = ParameterSet(intercepts={"mean": np.array([0.2, -0.4])},
                              slopes={"mean": np.array([[1.0], [0.5]])},
                              loadings={"mean": np.array([[0.8], [-0.3]])})
        vstate = VariationalState(means=np.array([[0.5], [-1.0]]),
                                  covariances=np.ones((2, 1)))
        from coverlvm.estimator import FitDiagnostics, FittedModel
        model = FittedModel(spec=spec, params=params, vstate=vstate,
                            diagnostics=FitDiagnostics(0.0, 0, 0.0, 0, True),
                            species_names=("a", "b"), site_names=("s1", "s2"),
                            covariate_names=("x",))
        X = np.array([[2.0], [0.0]])
        pred = predict_expected(model, CovariateMatrix(values=X, names=("x",)), [0, 1])
        for i in range(2):
            for j in range(2):
                eta = (params.intercepts["mean"][j] + X[i, 0] * params.slopes["mean"][j, 0]
                       + vstate.means[i, 0] * params.loadings["mean"][j, 0])
                assert pred[i, j] == pytest.approx(logistic(eta), abs=1e-14)

    def test_unmapped_site_rejected(self):
        model, data, cov = _fit_small_hurdle()
        with pytest.raises(Exception):
            predict_expected(model, cov, np.arange(10) + 5)

    def test_presence_unsupported_for_shifted_beta(self):
        rng = np.random.default_rng(21)
        data = random_cover_data(rng, 8, 3)
        model = fit(data, None, ModelSpec(family="beta-shifted", latent_dim=1),
                    FitOptions(n_restarts=1, max_iterations=80))
        with pytest.raises(UnsupportedFamilyError):
            predict_presence(model, CovariateMatrix.empty(8), np.arange(8))

import math

import numpy as np
import pytest

from carforest.car import CarPriors, CarProblem, fit_car, fit_car_arrays, predict_car
from carforest.data import SimulationScenario, simulate, train_test_split
from carforest.graph import knn_adjacency
from carforest.linear import fit_lm
from oracles import car_covariance_oracle

HYPER = {"rho": 0.8, "tau": 2.0, "sigma2": 0.3}


def small_problem(seed, n=30, n_obs=22, d=3, p=2):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    x = rng.standard_normal((n, p))
    w = knn_adjacency(coords, d)
    y = 1.0 + x @ np.arange(1, p + 1) + rng.standard_normal(n)
    offset = rng.normal(0, 0.5, n)
    obs = np.sort(rng.choice(n, n_obs, replace=False))
    return w, x, y[obs], obs, offset


def fixed_fit(seed, **kw):
    w, x, y, obs, offset = small_problem(seed, **kw)
    fit = fit_car_arrays(y, obs, w, offset=offset, x_joint=x, fixed=HYPER)
    f_joint = np.column_stack([np.ones(w.n), x])
    ref = car_covariance_oracle(
        w.w.toarray(), HYPER["rho"], HYPER["tau"], HYPER["sigma2"], 1e5, f_joint, obs, y, offset
    )
    return fit, ref, obs


class TestExactPosterior:
    @pytest.mark.parametrize("seed", range(3))
    def test_latent_means(self, seed):
        fit, ref, _ = fixed_fit(seed)
        np.testing.assert_allclose(fit.mean_beta, ref["beta"], rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(fit.mean_phi, ref["phi"], rtol=1e-8, atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_latent_variances(self, seed):
        fit, ref, _ = fixed_fit(seed)
        var_beta, var_phi = fit.latent_marginal_variances()
        np.testing.assert_allclose(var_beta, ref["var_beta"], rtol=1e-8)
        np.testing.assert_allclose(var_phi, ref["var_phi"], rtol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_predictive_moments(self, seed):
        fit, ref, obs = fixed_fit(seed)
        test = np.setdiff1d(np.arange(len(ref["phi"])), obs)
        pred = predict_car(fit, mode="plugin")
        expected = fit.offset[test] + ref["eta_mean"][test]
        np.testing.assert_allclose(pred.point, expected, rtol=1e-8, atol=1e-8 * np.abs(expected).max())
        np.testing.assert_allclose(pred.variance, ref["pred_var"][test], rtol=1e-8)
        half = 1.959963984540054 * np.sqrt(ref["pred_var"][test])
        np.testing.assert_allclose(pred.upper - pred.point, half, rtol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_log_marginal(self, seed):
        fit, ref, _ = fixed_fit(seed)
        assert fit.posterior.log_marginal == pytest.approx(ref["log_marginal"], rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        w, x, y, obs, offset = small_problem(11)
        prob = CarProblem(y, obs, w, offset, x)
        rng = np.random.default_rng(0)
        for _ in range(5):
            h = np.array([rng.normal(0, 1.5), rng.normal(0, 1), rng.normal(0, 1)])
            g = prob.gradient(h)
            fd = np.zeros(3)
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-5
                fd[j] = (prob.log_posterior(h + e) - prob.log_posterior(h - e)) / 2e-5
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-5)

    def test_optimisers_agree(self):
        w, x, y, obs, offset = small_problem(12, n=40, n_obs=35)
        nm = fit_car_arrays(y, obs, w, offset=offset, x_joint=x)
        bf = fit_car_arrays(y, obs, w, offset=offset, x_joint=x, method="bfgs")
        assert nm.log_posterior == pytest.approx(bf.log_posterior, abs=1e-4)
        assert nm.log_posterior >= max(lp for _, lp in nm.trace[:-1]) - 1e-9

    def test_prior_density(self):
        pri = CarPriors()
        h = np.array([0.3, -0.2, 1.1])
        fd = np.array([(pri.log_density(h + e) - pri.log_density(h - e)) / 2e-6 for e in np.eye(3) * 1e-6])
        np.testing.assert_allclose(pri.gradient(h), fd, rtol=1e-6)


class TestLimits:
    def test_huge_precision_reduces_to_linear_model(self):
        ds = simulate(SimulationScenario(n_units=300, mean_function="linear", include_spatial=False, seed=5))
        fit = fit_car(ds, d=5, fixed={"rho": 0.5, "tau": 1e8})
        lm = fit_lm(ds)
        np.testing.assert_allclose(fit.mean_beta, np.concatenate([[lm.beta0], lm.beta]), rtol=1e-4, atol=1e-4)

    def test_recovers_simulated_hyperparameters(self):
        sc = SimulationScenario(n_units=1500, mean_function="linear", rho_true=0.9, tau_true=1.0,
                                sigma2_true=0.25, seed=2)
        fit = fit_car(simulate(sc), d=5)
        assert fit.hyper.rho > 0.6
        assert fit.hyper.sigma2 == pytest.approx(0.25, rel=0.35)
        np.testing.assert_allclose(fit.beta, sc.coefficients, atol=0.1)

    def test_rho_tracks_spatial_dependence(self):
        fitted = []
        for rho in (0.0, 0.95):
            sc = SimulationScenario(n_units=1500, mean_function="linear", rho_true=rho, seed=3)
            fitted.append(fit_car(simulate(sc), d=5).hyper.rho)
        assert fitted[0] + 0.3 < fitted[1]

    def test_raising_an_observation_never_lowers_a_prediction(self):
        # with the intercept pinned at zero the posterior precision is an
        # M-matrix, so every kriging weight is non-negative
        w, _, y, obs, offset = small_problem(4)
        pinned = CarPriors(beta_variance=1e-12)

        def predict(values):
            fit = fit_car_arrays(values, obs, w, offset=offset, features_in_mean=False, fixed=HYPER, priors=pinned)
            return predict_car(fit).point

        base = predict(y)
        test = np.setdiff1d(np.arange(w.n), obs)
        dense = w.w.toarray()
        for k, unit in enumerate(obs):
            bumped = y.copy()
            bumped[k] += 1.0
            change = predict(bumped) - base
            assert np.all(change >= -1e-12)
            assert np.all(change[dense[unit, test] > 0] > 0)

    def test_exact_offset_leaves_nothing_to_explain(self):
        rng = np.random.default_rng(0)
        n = 80
        coords = rng.random((n, 2))
        w = knn_adjacency(coords, 4)
        offset = rng.normal(5, 1, n)
        obs = np.arange(60)
        y = offset[obs] + rng.normal(0, 1e-3, 60)
        fit = fit_car_arrays(y, obs, w, offset=offset, features_in_mean=False)
        pred = predict_car(fit)
        np.testing.assert_allclose(pred.point, offset[60:], atol=0.01)
        assert fit.hyper.sigma2 < 1e-3


class TestPrediction:
    @pytest.fixture(scope="class")
    @classmethod
    def fitted(cls):
        ds = simulate(SimulationScenario(n_units=2000, mean_function="linear", seed=9))
        train, test = train_test_split(ds, 0.5, seed=1)
        return fit_car(train, test, d=5, grid=True), test

    def test_coverage(self, fitted):
        fit, test = fitted
        pred = predict_car(fit)
        inside = (test.target >= pred.lower) & (test.target <= pred.upper)
        assert abs(inside.mean() - 0.95) <= 0.03

    def test_grid_close_to_plugin(self, fitted):
        fit, test = fitted
        plug = predict_car(fit, mode="plugin")
        grid = predict_car(fit, mode="grid", seed=3)
        scale = np.std(test.target)
        assert np.max(np.abs(grid.point - plug.point)) <= 0.02 * scale
        assert np.median(np.abs((grid.upper - grid.lower) / (plug.upper - plug.lower) - 1)) < 0.05
        assert sum(w for _, w, _ in fit.grid) == pytest.approx(1.0)

    def test_grid_draws_are_seeded(self, fitted):
        fit, _ = fitted
        a = predict_car(fit, mode="grid", seed=5)
        b = predict_car(fit, mode="grid", seed=5)
        np.testing.assert_array_equal(a.lower, b.lower)

    def test_unknown_index(self, fitted):
        fit, _ = fitted
        with pytest.raises(KeyError):
            predict_car(fit, [fit.problem.n_joint])

    def test_unknown_mode(self, fitted):
        with pytest.raises(ValueError):
            predict_car(fitted[0], mode="sampling")

    def test_summary(self, fitted):
        fit, _ = fitted
        d = fit.to_dict()
        assert set(d["hyper"]) == {"rho", "tau", "sigma2"}
        assert list(d["fixed_effects"])[0] == "(intercept)"
        assert d["n_train"] == 1000
        assert d["diagnostics"]["grid_points"] == len(fit.grid)
        assert math.isfinite(d["diagnostics"]["log_marginal_posterior"])

    def test_training_needs_targets(self):
        ds = simulate(SimulationScenario(n_units=50))
        t = ds.target.copy()
        t[3] = np.nan
        with pytest.raises(ValueError):
            fit_car(ds.with_target(t), d=3)

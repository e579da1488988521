import dataclasses
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carforest.forest import (
    Forest,
    ForestConfig,
    ForestError,
    fit_forest,
    interval_oob,
    oob_predict,
    oob_variance,
)
from oracles import best_split_oracle


def toy(seed, n=60, p=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    y = np.sin(2 * x[:, 0]) + x[:, 1] ** 2 + 0.1 * rng.standard_normal(n)
    return x, y


def root_split_sse(tree, x, y):
    boot = tree.bootstrap
    xb, yb = x[boot], y[boot]
    left = xb[:, tree.feature[0]] <= tree.threshold[0]
    return float(((yb[left] - yb[left].mean()) ** 2).sum() + ((yb[~left] - yb[~left].mean()) ** 2).sum())


def walk(tree, row):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


class TestTreeGrowth:
    @pytest.mark.parametrize("seed", range(10))
    def test_root_split_is_optimal(self, seed):
        x, y = toy(seed, n=40)
        tree = fit_forest(x, y, ForestConfig(n_trees=1, min_node=3, seed=seed)).trees[0]
        ref = best_split_oracle(x[tree.bootstrap], y[tree.bootstrap], 3)
        assert root_split_sse(tree, x, y) == pytest.approx(ref[0], rel=1e-10)
        assert tree.feature[0] == ref[1]
        assert tree.threshold[0] == pytest.approx(ref[2])

    def test_constant_target_is_single_leaf(self):
        x, _ = toy(0)
        forest = fit_forest(x, np.full(60, 3.5), ForestConfig(n_trees=5, min_node=1))
        assert all(t.n_nodes == 1 for t in forest.trees)
        np.testing.assert_array_equal(forest.predict(x), 3.5)

    def test_step_function(self):
        x = np.linspace(0, 1, 100)[:, None]
        y = np.where(x[:, 0] < 0.5, 0.0, 10.0)
        forest = fit_forest(x, y, ForestConfig(n_trees=20, min_node=5))
        np.testing.assert_allclose(forest.predict(np.array([[0.1], [0.9]])), [0.0, 10.0])

    def test_step_split_lands_in_gap(self):
        rng = np.random.default_rng(5)
        x = np.concatenate([rng.uniform(-1, -0.05, 100), rng.uniform(0.05, 1, 100)])[:, None]
        z = np.where(x[:, 0] < 0, 0.0, 10.0)
        forest = fit_forest(x, z, ForestConfig(n_trees=10, min_node=1))
        for tree in forest.trees:
            boot = x[tree.bootstrap, 0]
            assert boot[boot < 0].max() < tree.threshold[0] < boot[boot >= 0].min()
        assert np.sqrt(np.mean((forest.predict(x) - z) ** 2)) < 0.5

    def test_min_node_at_least_n_gives_root_only(self):
        x, y = toy(1, n=30)
        forest = fit_forest(x, y, ForestConfig(n_trees=10, min_node=30))
        for tree in forest.trees:
            assert tree.n_nodes == 1
            assert tree.value[0] == pytest.approx(y[tree.bootstrap].mean())

    def test_leaves_respect_min_node(self):
        x, y = toy(2, n=200)
        forest = fit_forest(x, y, ForestConfig(n_trees=10, min_node=7))
        for tree in forest.trees:
            leaves = tree.feature < 0
            assert tree.n_samples[leaves].min() >= 7

    def test_traversal_matches_reference_walk(self):
        x, y = toy(3)
        forest = fit_forest(x, y, ForestConfig(n_trees=15, m_try=2, min_node=2))
        x_new = np.random.default_rng(9).standard_normal((25, 3))
        walked = np.array([[walk(t, r) for r in x_new] for t in forest.trees])
        np.testing.assert_array_equal(forest.predict_trees(x_new), walked)
        np.testing.assert_allclose(forest.predict(x_new), walked.mean(axis=0))

    def test_single_tree(self):
        x, y = toy(4)
        forest = fit_forest(x, y, ForestConfig(n_trees=1))
        np.testing.assert_array_equal(forest.predict(x), forest.trees[0].predict(x))


class TestOutOfBag:
    def test_oob_count(self):
        x, y = toy(5, n=50)
        forest = fit_forest(x, y, ForestConfig(n_trees=1000))
        counts = np.array([len(m) for m in forest.oob_membership])
        assert abs(counts.mean() / 1000 - (1 - 1 / 50) ** 50) < 0.01

    def test_oob_prediction_uses_only_oob_trees(self):
        x, y = toy(6)
        forest = fit_forest(x, y, ForestConfig(n_trees=50))
        preds = forest.predict_trees(x)
        for k, trees in enumerate(forest.oob_membership):
            assert forest.oob_pred[k] == pytest.approx(preds[trees, k].mean())
        np.testing.assert_array_equal(oob_predict(forest), forest.oob_pred)

    def test_oob_error_exceeds_in_sample(self):
        x, y = toy(7, n=200)
        forest = fit_forest(x, y, ForestConfig(n_trees=200))
        oob = np.sqrt(np.mean((y - forest.oob_pred) ** 2))
        ins = np.sqrt(np.mean((y - forest.predict(x)) ** 2))
        assert oob >= ins

    def test_fallback_when_no_oob_tree(self):
        x, y = toy(8, n=10)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            forest = fit_forest(x, y, ForestConfig(n_trees=1))
        if forest.oob_fallback.size:
            assert caught
        assert np.isfinite(forest.oob_pred).all()
        assert len(forest.oob_errors) == 10 - forest.oob_fallback.size


def with_errors(errors):
    x, y = toy(0)
    return dataclasses.replace(fit_forest(x, y, ForestConfig(n_trees=2)), oob_errors=np.asarray(errors, float))


class TestOobIntervals:
    def test_quantile_example(self):
        forest = with_errors(np.repeat([-1.0, 0.0, 1.0], 100))
        lo, hi = interval_oob(forest, np.array([5.0]))
        assert (lo[0], hi[0]) == (4.0, 6.0)

    def test_zero_errors_collapse(self):
        lo, hi = interval_oob(with_errors(np.zeros(50)), np.array([2.0, 3.0]))
        np.testing.assert_array_equal(lo, [2.0, 3.0])
        np.testing.assert_array_equal(hi, [2.0, 3.0])

    def test_type7_quantiles(self):
        errs = np.random.default_rng(1).standard_normal(77)
        lo, hi = interval_oob(with_errors(errs), np.zeros(1))
        s = np.sort(errs)
        h = (77 - 1) * 0.025
        assert lo[0] == pytest.approx(s[int(h)] + (h - int(h)) * (s[int(h) + 1] - s[int(h)]))
        assert hi[0] == pytest.approx(np.quantile(errs, 0.975))

    def test_too_few_errors(self):
        with pytest.raises(ForestError):
            interval_oob(with_errors(np.zeros(39)), np.zeros(1))

    def test_variance(self):
        assert oob_variance(with_errors([-1.0, 1.0])) == 2.0
        with pytest.raises(ForestError):
            oob_variance(with_errors([1.0]))


class TestDeterminism:
    def test_thread_count_invariance(self):
        x, y = toy(10, n=120)
        cfg = ForestConfig(n_trees=40, m_try=2, seed=3)
        a = fit_forest(x, y, cfg, n_jobs=1)
        b = fit_forest(x, y, cfg, n_jobs=4)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_seed_changes_forest(self):
        x, y = toy(10, n=120)
        a = fit_forest(x, y, ForestConfig(n_trees=5, seed=1))
        b = fit_forest(x, y, ForestConfig(n_trees=5, seed=2))
        assert not np.array_equal(a.inbag, b.inbag)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_row_order_invariance_with_keys(self, seed):
        x, y = toy(11, n=40)
        keys = np.array([f"k{i:03d}" for i in range(40)])
        perm = np.random.default_rng(seed).permutation(40)
        cfg = ForestConfig(n_trees=10, m_try=2, seed=4)
        a = fit_forest(x, y, cfg, row_keys=keys)
        b = fit_forest(x[perm], y[perm], cfg, row_keys=keys[perm])
        x_new = np.random.default_rng(0).standard_normal((10, 3))
        np.testing.assert_array_equal(a.predict(x_new), b.predict(x_new))
        np.testing.assert_array_equal(a.oob_pred[perm], b.oob_pred)
        np.testing.assert_array_equal(a.inbag[:, perm], b.inbag)

    def test_serialisation_round_trip(self):
        x, y = toy(12)
        forest = fit_forest(x, y, ForestConfig(n_trees=8, m_try=1))
        again = Forest.from_dict(json.loads(json.dumps(forest.to_dict())))
        np.testing.assert_array_equal(again.predict(x), forest.predict(x))
        np.testing.assert_array_equal(again.oob_errors, forest.oob_errors)

    def test_bad_format(self):
        with pytest.raises(ForestError):
            Forest.from_dict({"format": "other"})


class TestValidation:
    @pytest.mark.parametrize("cfg", [ForestConfig(m_try=4), ForestConfig(m_try=0), ForestConfig(n_trees=0),
                                     ForestConfig(min_node=0)])
    def test_invalid_config(self, cfg):
        x, y = toy(0)
        with pytest.raises(ForestError):
            fit_forest(x, y, cfg)

    def test_shape_checks(self):
        x, y = toy(0)
        with pytest.raises(ForestError):
            fit_forest(x, y[:-1])
        forest = fit_forest(x, y, ForestConfig(n_trees=2))
        with pytest.raises(ForestError):
            forest.predict(x[:, :2])

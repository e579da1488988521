import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carforest.data import (
    ArealDataset,
    ColumnSchema,
    CsvParseError,
    DataError,
    SimulationScenario,
    apply_standardize,
    knn_impute,
    log_target,
    pca_reduce,
    read_csv_text,
    simulate,
    simulate_with_truth,
    standardize,
    train_test_split,
    write_csv_text,
)
from carforest.graph import knn_adjacency, morans_i


def make_ds(x, target=None, names=None, coords=None):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    n, p = x.shape
    return ArealDataset(
        ids=tuple(f"u{k}" for k in range(n)),
        coords=coords if coords is not None else np.column_stack([np.arange(n), np.zeros(n)]),
        features=x,
        target=np.ones(n) if target is None else target,
        feature_names=tuple(names or (f"f{j}" for j in range(p))),
    )


class TestCsv:
    def test_missing_target_counts(self):
        text = "id,easting,northing,a,target\nA,0,0,1.5,10\nB,1,0,2.5,\nC,2,0,3.5,12\n"
        ds = read_csv_text(text)
        assert ds.n_total == 3
        assert ds.n_observed == 2
        assert ds.feature_names == ("a",)

    def test_na_token(self):
        ds = read_csv_text("id,easting,northing,a,target\nA,0,0,NA,NA\nB,1,1,2,3\n")
        assert math.isnan(ds.features[0, 0]) and math.isnan(ds.target[0])

    def test_duplicate_id_named(self):
        text = "id,easting,northing,target\nDZ001,0,0,1\nDZ001,1,1,2\n"
        with pytest.raises(DataError, match="DZ001"):
            read_csv_text(text)

    def test_non_numeric_feature_reports_line(self):
        text = "id,easting,northing,a,target\nA,0,0,1,1\nB,1,1,abc,2\n"
        with pytest.raises(CsvParseError) as err:
            read_csv_text(text)
        assert err.value.line == 3
        assert "line 3" in str(err.value)

    def test_short_row_reports_line(self):
        with pytest.raises(CsvParseError) as err:
            read_csv_text("id,easting,northing,target\nA,0,0\n")
        assert err.value.line == 2

    def test_missing_columns(self):
        with pytest.raises(DataError, match="northing"):
            read_csv_text("id,easting,target\nA,0,1\n")

    def test_schema_roles(self):
        text = "code,x,y,price,la,f1,f2\nA,0,0,5,G1,1,2\nB,1,1,,G2,3,4\n"
        schema = ColumnSchema(id="code", easting="x", northing="y", target="price", group="la")
        ds = read_csv_text(text, schema)
        assert ds.feature_names == ("f1", "f2")
        assert ds.groups == ("G1", "G2")
        again = read_csv_text(write_csv_text(ds, schema), schema)
        assert again.equals(ds)

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(1, 12),
        p=st.integers(0, 4),
        data=st.data(),
    )
    def test_round_trip(self, n, p, data):
        finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
        maybe = st.one_of(finite, st.just(math.nan))
        coords = np.array(data.draw(st.lists(st.tuples(finite, finite), min_size=n, max_size=n)))
        feats = np.array(data.draw(st.lists(st.lists(maybe, min_size=p, max_size=p), min_size=n, max_size=n)))
        target = np.array(data.draw(st.lists(maybe, min_size=n, max_size=n)))
        ds = ArealDataset(
            ids=tuple(f"id{k}" for k in range(n)),
            coords=coords.reshape(n, 2),
            features=feats.reshape(n, p),
            target=target,
            feature_names=tuple(f"v{j}" for j in range(p)),
        )
        assert read_csv_text(write_csv_text(ds)).equals(ds)


class TestDatasetValidation:
    def test_non_finite_coords(self):
        with pytest.raises(DataError):
            make_ds([[1.0]], coords=np.array([[np.inf, 0.0]]))

    def test_arrays_are_read_only(self):
        ds = make_ds([[1.0], [2.0]])
        with pytest.raises(ValueError):
            ds.features[0, 0] = 5.0

    def test_units_view(self):
        ds = make_ds([[1.0], [2.0]], target=[3.0, np.nan])
        units = ds.units
        assert units[0].target == 3.0 and units[1].target is None


class TestImpute:
    def test_no_missing_is_identity(self):
        ds = make_ds(np.arange(12.0).reshape(6, 2))
        assert knn_impute(ds, 2) is ds

    def test_hand_example(self):
        # the complete column places unit 2 nearest to units 1 and 3
        x = np.array([[1.0, 0.0], [2.0, 10.0], [np.nan, 11.0], [4.0, 12.0]])
        out = knn_impute(make_ds(x), k=2)
        assert out.features[2, 0] == pytest.approx(3.0)

    def test_observed_cells_untouched(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((30, 4))
        mask = rng.random((30, 4)) < 0.15
        mask[:, 0] = False
        x_miss = np.where(mask, np.nan, x)
        out = knn_impute(make_ds(x_miss), 5).features
        assert not np.isnan(out).any()
        np.testing.assert_array_equal(out[~mask], x[~mask])

    def test_entire_column_missing(self):
        x = np.column_stack([np.arange(6.0), np.full(6, np.nan)])
        with pytest.raises(DataError, match="f1"):
            knn_impute(make_ds(x), 2)

    def test_k_too_large(self):
        x = np.array([[1.0, 0.0], [np.nan, 1.0], [3.0, 2.0]])
        with pytest.raises(DataError):
            knn_impute(make_ds(x), 3)


class TestStandardize:
    def test_hand_example(self):
        out, model = standardize(make_ds([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(out.features[:, 0], [-1.0, 0.0, 1.0], atol=1e-15)
        assert model.standardize_params["f0"] == (2.0, 1.0)

    def test_idempotent(self):
        x = np.random.default_rng(1).standard_normal((50, 3)) * 7 + 2
        once, _ = standardize(make_ds(x))
        twice, _ = standardize(once)
        np.testing.assert_allclose(twice.features, once.features, atol=1e-12)
        np.testing.assert_allclose(once.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(once.features.std(axis=0, ddof=1), 1.0, atol=1e-12)

    def test_constant_column(self):
        with pytest.raises(DataError, match="f1"):
            standardize(make_ds([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))

    def test_apply_to_new_data(self):
        _, model = standardize(make_ds([[1.0], [2.0], [3.0]]))
        new = apply_standardize(make_ds([[5.0]]), model)
        assert new.features[0, 0] == pytest.approx(3.0)


class TestPca:
    def test_perfectly_correlated(self):
        a = np.random.default_rng(0).standard_normal(40)
        ds = make_ds(np.column_stack([a, 2 * a, np.ones(40)]))
        out, model = pca_reduce(ds, ["f0", "f1"], 0.95)
        assert model.pca_blocks[0].n_components == 1
        assert out.feature_names == ("f0_pc1", "f2")

    def test_identity_covariance_keeps_all(self):
        # rows of a scaled Hadamard-like design give an exactly identity covariance
        h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
        x = np.vstack([h, -h]) * math.sqrt(7 / 8)
        np.testing.assert_allclose(np.cov(x, rowvar=False), np.eye(4), atol=1e-12)
        out, model = pca_reduce(make_ds(x), ["f0", "f1", "f2", "f3"], 0.95)
        assert model.pca_blocks[0].n_components == 4
        np.testing.assert_allclose(model.pca_blocks[0].explained, 0.25, atol=1e-12)

    def test_components_uncorrelated_and_signed(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((200, 2))
        x = np.column_stack([z[:, 0], z[:, 0] + 0.3 * z[:, 1], z[:, 1], rng.standard_normal(200)])
        out, model = pca_reduce(make_ds(x), ["f0", "f1", "f2", "f3"], 0.99)
        pcs = out.features[:, : model.pca_blocks[0].n_components]
        corr = np.corrcoef(pcs, rowvar=False)
        np.testing.assert_allclose(corr - np.diag(np.diag(corr)), 0.0, atol=1e-8)
        load = model.pca_blocks[0].loadings
        for c in range(load.shape[1]):
            assert load[np.argmax(np.abs(load[:, c])), c] > 0
        assert sum(model.pca_blocks[0].explained) >= 0.99

    def test_block_too_small(self):
        with pytest.raises(DataError):
            pca_reduce(make_ds(np.ones((5, 2))), ["f0"])


class TestLogTarget:
    def test_values(self):
        ds = log_target(make_ds([[0.0], [0.0]], target=[1.0, 139282.0]))
        assert ds.target[0] == 0.0
        assert ds.target[1] == pytest.approx(11.8445, abs=1e-3)
        assert ds.target_scale == "log"

    def test_zero_target_names_unit(self):
        with pytest.raises(DataError, match="u1"):
            log_target(make_ds([[0.0], [0.0]], target=[1.0, 0.0]))

    def test_missing_kept(self):
        ds = log_target(make_ds([[0.0], [0.0]], target=[np.e, np.nan]))
        assert ds.target[0] == pytest.approx(1.0) and math.isnan(ds.target[1])


class TestSplit:
    def test_published_sizes(self):
        ds = make_ds(np.zeros((6264, 1)))
        train, test = train_test_split(ds, 0.8, seed=0)
        assert (train.n_total, test.n_total) == (5011, 1253)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 60), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
    def test_partition(self, n, frac, seed):
        target = np.ones(n)
        target[::7] = np.nan
        ds = make_ds(np.zeros((n, 1)), target=target)
        if ds.n_observed < 2:
            return
        a, b = train_test_split(ds, frac, seed)
        a2, _ = train_test_split(ds, frac, seed)
        assert a.ids == a2.ids
        observed = {ds.ids[k] for k in np.flatnonzero(ds.observed)}
        assert set(a.ids) | set(b.ids) == observed
        assert not set(a.ids) & set(b.ids)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.2])
    def test_bad_fraction(self, frac):
        with pytest.raises(DataError):
            train_test_split(make_ds(np.zeros((5, 1))), frac)


class TestSimulate:
    def test_bit_reproducible(self):
        sc = SimulationScenario(n_units=200, seed=11)
        assert simulate(sc).equals(simulate(sc))
        assert not simulate(sc).equals(simulate(SimulationScenario(n_units=200, seed=12)))

    @pytest.mark.parametrize("kw", [{"rho_true": 1.0}, {"n_units": 5}, {"tau_true": 0.0}, {"sigma2_true": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            simulate(SimulationScenario(**kw))

    def test_rho_error_names_bound(self):
        with pytest.raises(DataError, match=r"\[0, 1\)"):
            simulate(SimulationScenario(rho_true=1.0))

    def test_near_independent_limit(self):
        sc = SimulationScenario(n_units=5000, rho_true=0.0, tau_true=1e8, sigma2_true=0.25, seed=3)
        ds, truth = simulate_with_truth(sc)
        resid = ds.target - truth.mean
        assert np.var(resid, ddof=1) == pytest.approx(0.25, rel=0.05)

    def test_pure_noise(self):
        sc = SimulationScenario(
            n_units=5000, mean_function="linear", coefficients=(0.0,) * 5, sigma2_true=1.0,
            include_spatial=False, seed=4,
        )
        y = simulate(sc).target
        assert abs(y.mean()) < 0.05
        assert np.var(y, ddof=1) == pytest.approx(1.0, rel=0.05)

    def test_autocorrelation_increases_with_rho(self):
        mean_i = []
        for rho in (0.0, 0.5, 0.95):
            vals = []
            for rep in range(20):
                ds, truth = simulate_with_truth(SimulationScenario(n_units=300, rho_true=rho, seed=rep))
                vals.append(morans_i(truth.phi, knn_adjacency(ds.coords, 5)))
            mean_i.append(np.mean(vals))
        assert mean_i[0] < mean_i[1] < mean_i[2]

    def test_nonlinear_mean_formula(self):
        ds, truth = simulate_with_truth(SimulationScenario(n_units=50, seed=0))
        x = ds.features
        expected = 2 * np.sin(np.pi * x[:, 0]) + x[:, 1] ** 2 - np.abs(x[:, 2]) + x[:, 0] * x[:, 1]
        np.testing.assert_allclose(truth.mean, expected)

    def test_grid_layout(self):
        ds = simulate(SimulationScenario(n_units=100, layout="grid"))
        assert len(np.unique(ds.coords[:, 0])) == 10

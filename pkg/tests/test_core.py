import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.stats import norm

from distdyn.core import (FittedModel, GaussianComponent, GaussianDictionary, InputError,
                          ParseError, SimplexVector, SnapshotDataset, TimeGrid, WeightTable,
                          dataset_from_dict, dataset_to_dict, deserialize_model,
                          mixture_cdf_component, mixture_density, models_equal,
                          sample_mixture, serialize_model)

# Bivariate K=5 dictionary and univariate K=3 values from the calibrated-statistics table.
TABLE_MU2 = [[90.74, -0.0081], [129.24, -0.0152], [173.03, -0.0165], [229.53, 0.0902],
             [305.20, -0.1327]]
TABLE_SIGMA2 = [[[194.95, -0.1161], [-0.1161, 0.9723]],
                [[129.48, 0.0554], [0.0554, 1.0150]],
                [[194.27, -0.4217], [-0.4217, 1.6905]],
                [[367.18, 0.0451], [0.0451, 5.8084]],
                [[889.62, 7.1861], [7.1861, 5.4221]]]
TABLE_MU1 = [109.38, 178.38, 275.16]
TABLE_VAR1 = [421.86, 613.47, 1692.82]


def one_d(means, variances):
    return GaussianDictionary.from_covariances(np.array(means, float)[:, None],
                                               [[[v]] for v in variances])


def simple_model(K=2, m=3, d=1, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(K, d))
    chols = np.array([np.tril(rng.normal(size=(d, d))) * 0.3 + np.eye(d) for _ in range(K)])
    for L in chols:
        L[np.diag_indices(d)] = np.abs(np.diag(L)) + 0.1
    dic = GaussianDictionary.from_arrays(means, chols)
    grid = TimeGrid(np.linspace(0, 1, m), 1.0)
    rows = rng.dirichlet(np.ones(K), size=m)
    return FittedModel(dic, WeightTable(grid, rows), rng.uniform(0.5, 2, m), np.full(K, 1e-2))


class TestTypes:
    def test_grid_invariants(self):
        with pytest.raises(InputError):
            TimeGrid([0.0], 1.0)
        with pytest.raises(InputError):
            TimeGrid([0.0, 0.5, 0.5], 1.0)
        with pytest.raises(InputError):
            TimeGrid([0.0, 1.5], 1.0)
        g = TimeGrid([0, 2, 4], 4.0)
        assert np.allclose(g.normalized, [0, 0.5, 1])

    def test_dataset_checks(self):
        g = TimeGrid([0, 1], 1)
        with pytest.raises(InputError):
            SnapshotDataset(g, (np.zeros((2, 1)),))
        with pytest.raises(InputError):
            SnapshotDataset(g, (np.zeros((2, 1)), np.zeros((2, 2))))
        with pytest.raises(InputError):
            SnapshotDataset(g, (np.zeros((2, 1)), np.array([[np.nan]])))
        ds = SnapshotDataset(g, ([1.0, 2.0], [[3.0]]))
        assert ds.dimension == 1 and ds.sizes == [2, 1]

    def test_component_validation(self):
        with pytest.raises(InputError):
            GaussianComponent([0, 0], [[1, 0.5], [0, 1]])
        with pytest.raises(InputError):
            GaussianComponent([0], [[-1.0]])
        with pytest.raises(InputError):
            GaussianComponent.from_covariance([0, 0], [[1, 2], [2, 1]])

    def test_arrays_are_read_only(self):
        c = GaussianComponent.from_covariance([1.0, 2.0], np.eye(2))
        with pytest.raises(ValueError):
            c.mean[0] = 5.0

    def test_simplex_tolerance_and_clamp(self):
        v = SimplexVector([0.5, 0.5 + 5e-10, -1e-13])
        assert v.weights[2] == 0.0 and abs(v.weights.sum() - 1) < 1e-15
        with pytest.raises(InputError):
            SimplexVector([0.5, 0.6])
        with pytest.raises(InputError):
            SimplexVector([1.1, -0.1])

    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8).filter(lambda v: sum(v) > 1e-3))
    def test_simplex_cleaning_idempotent(self, raw):
        w = np.array(raw) / np.sum(raw)
        once = SimplexVector(w).weights
        twice = SimplexVector(once).weights
        assert np.array_equal(once, twice)
        assert np.all(once >= 0) and abs(once.sum() - 1) <= 1e-9

    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_covariance_from_cholesky_is_pd(self, d, seed):
        rng = np.random.default_rng(seed)
        L = np.tril(rng.normal(size=(d, d)))
        L[np.diag_indices(d)] = np.abs(np.diag(L)) + 1e-3
        S = GaussianComponent(np.zeros(d), L).covariance
        assert np.allclose(S, S.T, rtol=1e-12, atol=0)
        assert np.linalg.eigvalsh(S).min() > 0


class TestDensity:
    def test_standard_normal_mode(self):
        dic = one_d([0.0], [1.0])
        assert mixture_density(dic, [1.0], 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), 1e-14)

    def test_degenerate_weight(self):
        dic = one_d([0.0, 4.0], [1.0, 2.0])
        for x in (-1.3, 0.0, 2.7):
            assert mixture_density(dic, [1.0, 0.0], x) == pytest.approx(norm.pdf(x), rel=1e-13)

    def test_three_component_sum_oracle(self):
        dic = one_d([-2.0, 0.0, 5.0], [1.0, 1.0, 1.0])
        expect = sum(norm.pdf(0.0, loc=m) for m in (-2, 0, 5)) / 3
        assert mixture_density(dic, np.full(3, 1 / 3), 0.0) == pytest.approx(expect, rel=1e-13)

    def test_dimension_mismatch(self):
        dic = GaussianDictionary.from_covariances([[0.0, 0.0]], [np.eye(2)])
        with pytest.raises(InputError):
            mixture_density(dic, [1.0], [0.0, 0.0, 0.0])
        with pytest.raises(InputError):
            mixture_density(dic, [0.5, 0.5], [0.0, 0.0])

    def test_batch_evaluation(self):
        dic = one_d([0.0, 1.0], [1.0, 0.5])
        x = np.linspace(-2, 2, 7)
        out = mixture_density(dic, [0.3, 0.7], x)
        assert out.shape == (7,)
        assert out[3] == pytest.approx(mixture_density(dic, [0.3, 0.7], x[3]))

    def test_integrates_to_one_1d(self):
        dic = one_d([-1.0, 2.0, 3.0], [0.5, 1.0, 2.0])
        val, _ = integrate.quad(lambda x: mixture_density(dic, [0.2, 0.3, 0.5], x), -30, 30)
        assert val == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_integrates_to_one_mc(self, seed):
        # Importance sampling from a wide Gaussian: E_q[f/q] = 1.
        rng = np.random.default_rng(seed)
        K, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        means = rng.normal(size=(K, d))
        covs = [np.diag(rng.uniform(0.3, 1.5, d)) for _ in range(K)]
        dic = GaussianDictionary.from_covariances(means, covs)
        alpha = rng.dirichlet(np.ones(K))
        n, s = 100_000, 3.0
        x = rng.normal(scale=s, size=(n, d))
        q = np.prod(norm.pdf(x, scale=s), axis=1)
        r = mixture_density(dic, alpha, x) / q
        se = r.std() / math.sqrt(n)
        assert abs(r.mean() - 1.0) <= 3 * se + 1e-12

    def test_cdf_examples(self):
        assert mixture_cdf_component(one_d([0.0], [1.0]), [1.0], 0.0) == pytest.approx(0.5)
        assert mixture_cdf_component(one_d([0.0], [1.0]), [1.0], 50.0) == pytest.approx(1.0)
        two = one_d([-1.0, 1.0], [1.0, 1.0])
        assert mixture_cdf_component(two, [0.5, 0.5], 0.0) == pytest.approx(0.5, abs=1e-15)
        num, _ = integrate.quad(lambda x: mixture_density(two, [0.5, 0.5], x), -np.inf, 0.0)
        assert num == pytest.approx(0.5, abs=1e-9)

    def test_cdf_monotone_multivariate(self):
        dic = GaussianDictionary.from_covariances([[0.0, 0.0]], [np.eye(2)])
        lo, se = mixture_cdf_component(dic, [1.0], [0.0, 0.0], n_samples=50_000, return_stderr=True)
        hi = mixture_cdf_component(dic, [1.0], [1.0, 1.0], n_samples=50_000)
        assert abs(lo - 0.25) <= 4 * se
        assert hi >= lo

    def test_sampler_moments(self):
        dic = one_d([-2.0, 4.0], [1.0, 1.0])
        x = sample_mixture(dic, [0.25, 0.75], 40_000, np.random.default_rng(0))
        assert x.mean() == pytest.approx(2.5, abs=0.06)


class TestSerialization:
    def test_table_dictionary_round_trip(self):
        dic = GaussianDictionary.from_covariances(TABLE_MU2, TABLE_SIGMA2)
        assert np.allclose(dic.covariances, TABLE_SIGMA2, rtol=1e-12, atol=1e-12)
        grid = TimeGrid([0.0, 1.0], 1.0)
        model = FittedModel(dic, WeightTable(grid, np.full((2, 5), 0.2)), [1.0, 2.0],
                            np.full(5, 1e-2))
        back = deserialize_model(serialize_model(model))
        assert models_equal(model, back)
        assert np.array_equal(back.dictionary.means, np.array(TABLE_MU2))

    def test_univariate_table_values(self):
        dic = one_d(TABLE_MU1, TABLE_VAR1)
        assert np.allclose(dic.covariances[:, 0, 0], TABLE_VAR1, rtol=1e-14)

    @given(st.integers(1, 5), st.integers(2, 6), st.integers(1, 3), st.integers(0, 10_000))
    def test_random_round_trip(self, K, m, d, seed):
        model = simple_model(K, m, d, seed)
        assert models_equal(model, deserialize_model(serialize_model(model)))

    def test_json_schema_fields(self):
        doc = json.loads(serialize_model(simple_model()))
        for key in ("dimension", "K", "components", "grid", "weights", "bandwidths", "ridge",
                    "time_unit"):
            assert key in doc
        assert set(doc["components"][0]) == {"mean", "cholesky"}

    def test_empty_weight_table_rejected(self):
        dic = one_d([0.0], [1.0])
        with pytest.raises(InputError):
            WeightTable(TimeGrid([0, 1], 1), np.zeros((0, 1)))
        with pytest.raises(InputError):
            FittedModel(dic, WeightTable(TimeGrid([0, 1], 1), [[1.0], [1.0]]), [1.0], [0.0])

    @pytest.mark.parametrize("mutate, path", [
        (lambda d: d.pop("weights"), "weights"),
        (lambda d: d["components"][1].update(cholesky=[[1.0, 2.0], [0.0, 1.0]]), "components[1]"),
        (lambda d: d.update(grid=[0.0, 0.0]), "grid"),
        (lambda d: d["components"][0].update(mean="x"), "components[0].mean"),
        (lambda d: d.update(K=7), "K"),
    ])
    def test_parse_errors_name_field(self, mutate, path):
        doc = json.loads(serialize_model(simple_model(K=2, d=2)))
        mutate(doc)
        with pytest.raises(ParseError) as exc:
            deserialize_model(json.dumps(doc))
        assert exc.value.path.startswith(path)

    def test_invalid_json(self):
        with pytest.raises(ParseError):
            deserialize_model(b"{not json")

    def test_dataset_round_trip(self):
        ds = SnapshotDataset(TimeGrid([0, 0.5, 1], 1), tuple(np.random.default_rng(0).normal(size=(3, 4, 2))))
        back = dataset_from_dict(json.loads(json.dumps(dataset_to_dict(ds))))
        assert all(np.array_equal(a, b) for a, b in zip(ds.snapshots, back.snapshots))

import math

import numpy as np
import pytest
from scipy.stats import kstest, ks_2samp

from distdyn.core import InputError
from distdyn.inference import (ArmTrajectories, UnsupportedError, centered_quantile_curves,
                               permutation_pvalue, pvalue_curves, pvalue_matrix,
                               read_pvalue_csv, rejection_fraction, two_sample_statistic,
                               wasserstein1d_barycenter, wild_bootstrap_pvalue,
                               write_pvalue_csv, write_quantile_csv)

from oracles import synthetic_arm_weights


def arms(seed, n0=30, n1=30, K=3, m=11, shift=0.0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, m)
    return (ArmTrajectories(0, t, synthetic_arm_weights(rng, n0, K, m)),
            ArmTrajectories(1, t, synthetic_arm_weights(rng, n1, K, m, shift=shift)))


class TestStatistic:
    def test_hand_example(self):
        assert two_sample_statistic([0, 0], [1, 1], 1.0) == pytest.approx(2 - 2 * math.exp(-0.5))

    def test_identical_multisets(self):
        assert two_sample_statistic([1.0, 3.0, 2.0], [2.0, 1.0, 3.0]) == pytest.approx(0, abs=1e-15)

    def test_symmetric(self, rng):
        x, y = rng.normal(size=7), rng.normal(size=12)
        assert two_sample_statistic(x, y) == pytest.approx(two_sample_statistic(y, x), rel=1e-13)

    def test_errors(self):
        with pytest.raises(InputError):
            two_sample_statistic([1.0], [1.0, 2.0])
        with pytest.raises(InputError):
            two_sample_statistic([1.0, 1.0], [1.0, 1.0])

    def test_identical_samples_pvalue_one(self):
        x = [0.1, 0.4, 0.2, 0.9]
        assert wild_bootstrap_pvalue(x, list(reversed(x)), B=200).p_value == 1.0
        assert permutation_pvalue(x, x, B=200).p_value == 1.0

    def test_B_lower_bound(self):
        with pytest.raises(InputError):
            wild_bootstrap_pvalue([0, 1, 2], [1, 2, 3], B=50)

    def test_strong_shift_power(self):
        hits = 0
        for r in range(100):
            rng = np.random.default_rng(r)
            x, y = rng.normal(0, 0.1, 50), rng.normal(0.5, 0.1, 50)
            hits += permutation_pvalue(x, y, B=300, seed=r).p_value < 0.01
        assert hits >= 95

    def test_deterministic(self, rng):
        x, y = rng.normal(size=20), rng.normal(size=20)
        a, b = wild_bootstrap_pvalue(x, y, B=300, seed=4), wild_bootstrap_pvalue(x, y, B=300, seed=4)
        assert a == b

    def test_pvalue_monotone_in_statistic(self, rng):
        x, y = rng.normal(size=15), rng.normal(size=15)
        ps = [wild_bootstrap_pvalue(x, y + s, B=300, seed=0).p_value for s in (0.0, 0.5, 1.0, 2.0)]
        assert all(a >= b for a, b in zip(ps, ps[1:]))


class TestCalibration:
    def test_null_levels_and_agreement(self):
        wild, perm = [], []
        for r in range(200):
            rng = np.random.default_rng(1000 + r)
            x, y = rng.normal(size=40), rng.normal(size=40)
            wild.append(wild_bootstrap_pvalue(x, y, B=500, seed=r).p_value)
            perm.append(permutation_pvalue(x, y, B=500, seed=r).p_value)
        wild, perm = np.array(wild), np.array(perm)
        assert 0.02 <= np.mean(wild < 0.05) <= 0.09
        assert ks_2samp(wild, perm).statistic <= 0.15

    def test_permutation_uniform_and_super_uniform(self):
        B = 200
        ps = []
        for r in range(500):
            rng = np.random.default_rng(r)
            ps.append(permutation_pvalue(rng.normal(size=15), rng.normal(size=15), B=B,
                                         seed=r).p_value)
        ps = np.array(ps)
        assert kstest(ps, "uniform").statistic <= 0.1
        for u in (0.01, 0.05, 0.1, 0.2, 0.5):
            # Monte-Carlo slack of 3 binomial standard errors over 500 trials.
            assert np.mean(ps <= u) <= u + 1 / B + 3 * math.sqrt(u * (1 - u) / 500)


class TestCurves:
    def test_null_cells(self):
        a0, a1 = arms(0, m=21)
        res = pvalue_curves(a0, a1, B=500, seed=1)
        assert len(res) == 3 and len(res[0]) == 21
        assert abs(rejection_fraction(res) - 0.05) <= 0.03

    def test_methods_agree_on_null(self):
        a0, a1 = arms(3)
        w = pvalue_matrix(pvalue_curves(a0, a1, B=500, method="wild", seed=2)) < 0.05
        p = pvalue_matrix(pvalue_curves(a0, a1, B=500, method="permutation", seed=2)) < 0.05
        assert np.mean(w == p) >= 0.8

    def test_shift_recovery(self):
        a0, a1 = arms(5, shift=0.6)
        p = pvalue_matrix(pvalue_curves(a0, a1, B=500, seed=0))
        late = a0.times > 0.5
        assert np.mean(p[0, late] < 0.05) > 0.5
        assert np.mean(p[1, late] >= 0.05) > 0.5
        assert np.mean(p[0, ~late] < 0.05) < 0.5

    def test_single_cell_reduces_to_wild(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(12, 1, 1)), rng.normal(size=(9, 1, 1))
        # With K=1 every weight is 1, so use two components and compare component 0.
        w0 = np.concatenate([np.abs(x) / (1 + np.abs(x)), 1 / (1 + np.abs(x))], axis=2)
        w1 = np.concatenate([np.abs(y) / (1 + np.abs(y)), 1 / (1 + np.abs(y))], axis=2)
        a0, a1 = ArmTrajectories(0, [0.0], w0), ArmTrajectories(1, [0.0], w1)
        cell = pvalue_curves(a0, a1, B=300, seed=7)[0][0]
        direct = wild_bootstrap_pvalue(w0[:, 0, 0], w1[:, 0, 0], B=300,
                                       seed=np.random.SeedSequence([7, 0, 0]))
        assert cell.p_value == direct.p_value and cell.statistic == direct.statistic

    def test_k1_degenerate_cells(self):
        a0 = ArmTrajectories(0, [0.0, 1.0], np.ones((4, 2, 1)))
        a1 = ArmTrajectories(1, [0.0, 1.0], np.ones((5, 2, 1)))
        res = pvalue_curves(a0, a1, B=100)
        assert all(r.p_value == 1.0 and r.statistic == 0.0 for r in res[0])

    def test_threads_do_not_change_results(self):
        a0, a1 = arms(9, m=4)
        assert pvalue_curves(a0, a1, B=200, seed=3) == pvalue_curves(a0, a1, B=200, seed=3,
                                                                      threads=2)

    def test_incompatible_arms(self):
        a0 = ArmTrajectories(0, [0.0, 1.0], np.full((3, 2, 2), 0.5))
        a1 = ArmTrajectories(1, [0.0, 0.5], np.full((3, 2, 2), 0.5))
        with pytest.raises(InputError):
            pvalue_curves(a0, a1, B=100)
        with pytest.raises(InputError):
            pvalue_curves(a0, ArmTrajectories(1, [0.0, 1.0], np.full((3, 2, 1), 1.0)), B=100)

    def test_arm_validation(self):
        with pytest.raises(InputError):
            ArmTrajectories(0, [0.0], np.full((2, 1, 2), 0.7))

    def test_csv_round_trip(self, tmp_path):
        a0, a1 = arms(2, m=3)
        res = pvalue_curves(a0, a1, B=100, seed=0)
        rows = read_pvalue_csv(write_pvalue_csv(res, tmp_path / "p.csv"))
        assert len(rows) == 9
        assert float(rows[4]["p_value"]) == res[1][1].p_value
        assert float(rows[4]["p_value_bonferroni"]) == min(1.0, res[1][1].p_value * 9)


class TestQuantiles:
    def test_centered_at_zero(self):
        a0, _ = arms(0)
        q = centered_quantile_curves(a0, [0.25, 0.5, 0.75])
        assert q.shape == (3, 11, 3) and np.all(q[:, 0, :] == 0)

    def test_single_subject(self):
        a0, _ = arms(0, n0=1)
        q = centered_quantile_curves(a0, [0.1, 0.9])
        z = a0.weights[0] - a0.weights[0, :1]
        assert np.allclose(q[:, :, 0], z.T) and np.allclose(q[:, :, 1], z.T)

    def test_median_sort_oracle(self):
        a0, _ = arms(4, n0=21)
        med = centered_quantile_curves(a0, [0.5])[:, :, 0]
        z = a0.weights - a0.weights[:, :1]
        oracle = np.sort(z, axis=0)[10]
        assert np.array_equal(med, oracle.T)

    def test_probs_checked(self):
        a0, _ = arms(0)
        with pytest.raises(InputError):
            centered_quantile_curves(a0, [0.0, 0.5])

    def test_csv(self, tmp_path):
        a0, a1 = arms(0, m=2, K=2)
        probs = [0.5]
        p = write_quantile_csv({0: centered_quantile_curves(a0, probs),
                                1: centered_quantile_curves(a1, probs)}, a0.times, probs,
                               tmp_path / "q.csv")
        lines = p.read_text().splitlines()
        assert lines[0] == "arm,component,time,prob,value" and len(lines) == 1 + 2 * 2 * 2


class TestBarycenter:
    def test_identical_samples(self, rng):
        x = rng.normal(size=300)
        b = wasserstein1d_barycenter([x, x.copy()])
        assert np.array_equal(b.quantiles, np.quantile(x, b.probs, method="inverted_cdf"))

    def test_point_masses(self):
        b = wasserstein1d_barycenter([np.zeros(10), np.full(10, 2.0)])
        assert np.all(b.quantiles == 1.0)
        assert b.grid[np.argmax(b.density)] == pytest.approx(1.0, abs=0.01)

    def test_gaussian_midpoint(self, rng):
        b = wasserstein1d_barycenter([rng.normal(0, 1, 2000), rng.normal(4, 1, 2000)])
        assert abs(b.mean - 2.0) <= 0.1
        width = b.grid[1] - b.grid[0]
        assert b.density.sum() * width == pytest.approx(1.0)

    def test_two_dimensional_unsupported(self, rng):
        with pytest.raises(UnsupportedError):
            wasserstein1d_barycenter([rng.normal(size=(10, 2))])

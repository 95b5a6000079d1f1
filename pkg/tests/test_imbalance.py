import dataclasses
import math

import numpy as np
import pytest

from balancekit.dataset import BasisSpec, ObservationTable, expand_basis
from balancekit.errors import DataError
from balancekit.imbalance import (
    BalanceTarget,
    constraint_residuals,
    effective_sample_size,
    feature_imbalance,
    full_sample_target,
    imbalance_l2ball,
    imbalance_report,
    kernel_imbalance,
    ks_statistics,
    make_weights,
    max_imbalance_l1ball,
)
from balancekit.kernels import KernelSpec, gram
from balancekit.simlab import DGPSpec, generate, oracle_weights

from conftest import linear_features, random_table


def single_feature_table():
    t = ObservationTable(np.array([[1.0], [3.0]]), np.array([1, 0]), None, ("x",))
    fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("x",)))
    return t, fm


class TestFeatureImbalance:
    def test_arithmetic(self):
        t, fm = single_feature_table()
        g = make_weights(np.array([2.0, 0.0]), t.treatment, "treated")
        d = feature_imbalance(fm, t.treatment, g, full_sample_target(fm))
        np.testing.assert_allclose(d, [1.0])

    def test_exact_balance(self):
        t, fm = single_feature_table()
        g = make_weights(np.array([4.0, 0.0]), t.treatment, "treated")
        d = feature_imbalance(fm, t.treatment, g, full_sample_target(fm))
        np.testing.assert_allclose(d, [0.0], atol=1e-15)

    def test_oracle_weights_balance_at_root_n_scale(self):
        # true inverse-probability weights satisfy the balance property in
        # large samples: every feature imbalance is O(1/sqrt(n))
        spec = DGPSpec(
            n=10_000, d=2, covariate_law="normal",
            propensity_coef=(0.0, 0.3, -0.3), seed=314,
        )
        table, oracles = generate(spec)
        fm = linear_features(table)
        g = oracle_weights(table, oracles, "treated")
        d = feature_imbalance(fm, table.treatment, g, full_sample_target(fm))
        assert np.abs(d).max() <= 3.0 / math.sqrt(spec.n)

    def test_affine_in_weights(self, rng):
        t = random_table(rng, n=20, d=2, outcome=False)
        fm = linear_features(t)
        tgt = full_sample_target(fm)
        mask = t.treatment == 1
        va = np.where(mask, rng.random(20) * 3, 0.0)
        vb = np.where(mask, rng.random(20) * 3, 0.0)
        ga = make_weights(va, t.treatment, "treated")
        gb = make_weights(vb, t.treatment, "treated")
        gm = make_weights((va + vb) / 2, t.treatment, "treated")
        da = feature_imbalance(fm, t.treatment, ga, tgt)
        db = feature_imbalance(fm, t.treatment, gb, tgt)
        dm = feature_imbalance(fm, t.treatment, gm, tgt)
        # algebraic identity; matmul association leaves ~1 ulp
        np.testing.assert_allclose(dm, (da + db) / 2, rtol=0, atol=1e-14)

    def test_sum_to_one_zeroes_intercept_imbalance(self, rng):
        t = random_table(rng, n=24, d=2, outcome=False)
        fm = linear_features(t)
        mask = t.treatment == 1
        vals = np.where(mask, rng.random(24) + 0.5, 0.0)
        vals *= t.n / vals.sum()
        g = make_weights(vals, t.treatment, "treated")
        assert g.sum_to_one
        d = feature_imbalance(fm, t.treatment, g, full_sample_target(fm))
        assert abs(d[fm.intercept_index]) <= 1e-9


class TestScaledImbalances:
    def test_max_l1ball(self):
        assert max_imbalance_l1ball(np.array([1.0, -2.0]), np.array([1.0, 1.0])) == 2.0

    def test_zero_scale_excluded(self):
        assert max_imbalance_l1ball(np.array([9.0, -2.0]), np.array([0.0, 1.0])) == 2.0

    def test_scaling(self):
        assert max_imbalance_l1ball(np.array([0.5, 0.5]), np.array([2.0, 1.0])) == 1.0

    def test_infinite_scale_reported_separately(self):
        d = np.array([0.3, -2.0])
        s = np.array([np.inf, 1.0])
        assert max_imbalance_l1ball(d, s) == 2.0
        assert constraint_residuals(d, s) == {0: 0.3}

    def test_l2ball_euclidean(self):
        assert imbalance_l2ball(np.array([3.0, 4.0]), np.array([1.0, 1.0])) == 5.0

    def test_l2ball_exclusion(self):
        assert imbalance_l2ball(np.array([3.0, 4.0]), np.array([1.0, 0.0])) == 3.0

    def test_l2ball_zero(self):
        assert imbalance_l2ball(np.zeros(3), np.ones(3)) == 0.0


class TestKernelImbalance:
    def test_linear_kernel_matches_l2ball(self, rng):
        t = random_table(rng, n=15, d=3, outcome=False)
        fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("x1", "x2", "x3")))
        fm = dataclasses.replace(fm, scales=np.ones(3))
        vals = np.where(t.treatment == 1, rng.random(15) * 2, 0.0)
        g = make_weights(vals, t.treatment, "treated")
        K = gram(KernelSpec("linear"), t.covariates)
        ki = kernel_imbalance(K, t.treatment, g)
        d = feature_imbalance(fm, t.treatment, g, full_sample_target(fm))
        assert abs(ki - imbalance_l2ball(d, fm.scales)) <= 1e-10

    def test_duplicated_rows_uniform_weights(self):
        X = np.array([[1.0, 2.0], [0.0, -1.0], [1.0, 2.0], [0.0, -1.0]])
        w = np.array([1, 1, 0, 0])
        t = ObservationTable(X, w, None, ("a", "b"))
        g = make_weights(np.where(w == 1, 2.0, 0.0), w, "treated")
        K = gram(KernelSpec("gaussian", bandwidth=0.8), X)
        assert kernel_imbalance(K, w, g) <= 1e-12

    def test_gaussian_against_naive_double_sum(self):
        # oracle: explicit two-loop evaluation, frozen from a seeded instance
        rng = np.random.default_rng(77)
        X = rng.standard_normal((6, 2))
        w = np.array([1, 0, 1, 0, 1, 0])
        gvals = np.array([1.4, 0.0, 0.6, 0.0, 2.2, 0.0])
        bw = 1.3
        K = np.empty((6, 6))
        for i in range(6):
            for j in range(6):
                K[i, j] = math.exp(-((X[i] - X[j]) ** 2).sum() / (2 * bw * bw))
        total = 0.0
        for i in range(6):
            for j in range(6):
                total += (
                    K[i, j]
                    - 2 * w[i] * K[i, j] * gvals[i]
                    + w[i] * w[j] * K[i, j] * gvals[i] * gvals[j]
                )
        naive = math.sqrt(max(total, 0.0) / 36.0)
        assert abs(naive - 0.4068055994784063) < 1e-12  # frozen oracle value
        g = make_weights(gvals, w, "treated")
        lib = kernel_imbalance(gram(KernelSpec("gaussian", bandwidth=bw), X), w, g)
        assert abs(lib - naive) <= 1e-12

    def test_asymmetric_matrix_rejected(self):
        K = np.array([[1.0, 0.5], [0.2, 1.0]])
        g = make_weights(np.array([1.0, 0.0]), np.array([1, 0]), "treated")
        with pytest.raises(DataError, match="not symmetric"):
            kernel_imbalance(K, np.array([1, 0]), g)


class TestKsStatistics:
    def test_identical_distributions(self):
        X = np.array([[1.0], [2.0], [1.0], [2.0]])
        w = np.array([1, 1, 0, 0])
        t = ObservationTable(X, w, None, ("a",))
        g = make_weights(np.where(w == 1, 2.0, 0.0), w, "treated")
        np.testing.assert_allclose(ks_statistics(t, g), [0.0], atol=1e-15)

    def test_step_function_arithmetic(self):
        t = ObservationTable(np.array([[1.0], [0.0]]), np.array([1, 0]), None, ("a",))
        g = make_weights(np.array([2.0, 0.0]), t.treatment, "treated")
        np.testing.assert_allclose(ks_statistics(t, g), [0.5])

    def test_against_naive_quadratic_oracle(self):
        rng = np.random.default_rng(99)
        X = rng.standard_normal((20, 2))
        w = (rng.random(20) < 0.5).astype(int)
        w[0] = 1
        w[-1] = 0
        gw = np.where(w == 1, 20 / w.sum(), 0.0)
        naive = []
        for j in range(2):
            best = 0.0
            for thr in X[:, j]:
                full = np.mean(X[:, j] <= thr)
                wcdf = np.sum(gw * (X[:, j] <= thr)) / gw.sum()
                best = max(best, abs(full - wcdf))
            naive.append(best)
        np.testing.assert_allclose(
            naive, [0.2785714285714286, 0.20714285714285707], atol=1e-15
        )  # frozen oracle values
        t = ObservationTable(X, w, None, ("a", "b"))
        g = make_weights(gw, w, "treated")
        np.testing.assert_allclose(ks_statistics(t, g), naive, atol=1e-12)

    def test_negative_weights_rejected(self):
        t = ObservationTable(np.array([[1.0], [0.0]]), np.array([1, 0]), None, ("a",))
        g = make_weights(np.array([-1.0, 0.0]), t.treatment, "treated")
        with pytest.raises(DataError, match="nonnegative"):
            ks_statistics(t, g)


class TestEffectiveSampleSize:
    def test_uniform(self):
        w = np.array([1, 1, 1, 0])
        g = make_weights(np.where(w == 1, 4 / 3, 0.0), w, "treated")
        assert abs(effective_sample_size(g) - 3.0) < 1e-12

    def test_single_nonzero(self):
        w = np.array([1, 1])
        g = make_weights(np.array([5.0, 0.0]), w, "treated")
        assert effective_sample_size(g) == 1.0

    def test_arithmetic(self):
        w = np.array([1, 1])
        g = make_weights(np.array([1.0, 3.0]), w, "treated")
        assert abs(effective_sample_size(g) - 1.6) < 1e-12

    def test_all_zero_rejected(self):
        g = make_weights(np.zeros(2), np.array([1, 0]), "treated")
        with pytest.raises(DataError):
            effective_sample_size(g)

    def test_bounded_by_group_size(self, rng):
        for _ in range(25):
            n = int(rng.integers(4, 40))
            w = np.r_[1, 1, (rng.random(n - 2) < 0.5).astype(int)]
            vals = np.where(w == 1, rng.random(n) + 1e-3, 0.0)
            vals *= n / vals.sum()
            g = make_weights(vals, w, "treated")
            assert effective_sample_size(g) <= w.sum() + 1e-9


class TestReport:
    def test_report_round_trip_and_text(self, rng):
        t = random_table(rng, n=25, d=2, outcome=False)
        fm = linear_features(t)
        gm = t.treatment == 1
        vals = np.where(gm, t.n / gm.sum(), 0.0)
        g = make_weights(vals, t.treatment, "treated")
        rep = imbalance_report(fm, t.treatment, g, full_sample_target(fm), t)
        as_dict = rep.to_dict()
        assert as_dict["effective_sample_size"] == pytest.approx(gm.sum())
        text = rep.to_text()
        assert "max scaled imbalance" in text
        assert "KS[x1]" in text
        import json

        parsed = json.loads(rep.to_json())
        assert parsed["labels"] == list(fm.labels)

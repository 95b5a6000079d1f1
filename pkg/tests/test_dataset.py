import dataclasses
import math

import numpy as np
import pytest

from balancekit.dataset import (
    BasisSpec,
    ObservationTable,
    destandardize,
    evaluate_features,
    expand_basis,
    load_csv,
    standardize,
)
from balancekit.errors import ConfigError, DataError


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadCsv:
    def test_four_row_file(self, tmp_path):
        p = write(tmp_path, "a,b,w,y\n1,2,1,0.5\n3,4,0,1.5\n5,6,1,2.5\n7,8,0,3.5\n")
        t = load_csv(p, {"treatment": "w", "outcome": "y"})
        assert t.n == 4
        assert t.column_names == ("a", "b")
        assert t.outcome is not None

    def test_non_binary_treatment(self, tmp_path):
        p = write(tmp_path, "a,w\n1,0\n2,2\n")
        with pytest.raises(DataError, match="non-binary treatment"):
            load_csv(p, {"treatment": "w"})

    def test_outcome_absent_is_none(self, tmp_path):
        p = write(tmp_path, "a,w\n1,0\n2,1\n")
        t = load_csv(p, {"treatment": "w", "outcome": None})
        assert t.outcome is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot open"):
            load_csv(tmp_path / "nope.csv", {"treatment": "w"})

    def test_non_numeric_cell(self, tmp_path):
        p = write(tmp_path, "a,w\nfoo,0\n2,1\n")
        with pytest.raises(DataError, match="non-numeric cell"):
            load_csv(p, {"treatment": "w"})

    def test_duplicate_columns(self, tmp_path):
        p = write(tmp_path, "a,a,w\n1,2,0\n3,4,1\n")
        with pytest.raises(DataError, match="duplicate column names"):
            load_csv(p, {"treatment": "w"})

    def test_explicit_covariate_list(self, tmp_path):
        p = write(tmp_path, "a,b,w\n1,2,0\n3,4,1\n")
        t = load_csv(p, {"treatment": "w", "covariates": ["b"]})
        assert t.column_names == ("b",)


class TestObservationTable:
    def test_rejects_single_row(self):
        with pytest.raises(DataError):
            ObservationTable(np.array([[1.0]]), np.array([1]), None, ("a",))

    def test_rejects_missing_values(self):
        with pytest.raises(DataError, match="non-finite"):
            ObservationTable(
                np.array([[1.0], [np.nan]]), np.array([1, 0]), None, ("a",)
            )

    def test_arrays_are_immutable(self):
        t = ObservationTable(np.array([[1.0], [2.0]]), np.array([1, 0]), None, ("a",))
        with pytest.raises(ValueError):
            t.covariates[0, 0] = 5.0


def binary_table(d=2, rows=None):
    if rows is None:
        rows = [[1, 0], [0, 1], [1, 1], [0, 0]]
    X = np.array(rows, dtype=float)
    w = np.tile([1, 0], X.shape[0] // 2 + 1)[: X.shape[0]]
    return ObservationTable(X, w, None, tuple(f"x{j + 1}" for j in range(X.shape[1])))


class TestExpandBasis:
    def test_binary_interactions_order_and_scales(self):
        fm = expand_basis(binary_table(), BasisSpec(kind="binary-interactions", max_order=2, decay=0.5))
        assert fm.labels == ("1", "x1", "x2", "x1*x2")
        assert fm.scales[0] == math.inf
        np.testing.assert_allclose(fm.scales[1:], [0.5, 0.5, 0.25])

    def test_all_interactions_column_count(self):
        rows = [[1, 0, 1], [0, 1, 0]]
        t = binary_table(rows=rows)
        fm = expand_basis(t, BasisSpec(kind="binary-interactions", max_order=3))
        assert fm.p == 8

    def test_linear_with_intercept_count(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 5))
        t = ObservationTable(X, np.array([1, 0, 1, 0, 1, 0]), None, tuple("abcde"))
        fm = expand_basis(t, BasisSpec(kind="linear-with-intercept"))
        assert fm.p == 6
        assert fm.intercept_index == 0

    def test_non_binary_covariate_rejected(self):
        t = ObservationTable(np.array([[0.5], [1.0]]), np.array([1, 0]), None, ("a",))
        with pytest.raises(DataError, match="requires covariates in"):
            expand_basis(t, BasisSpec(kind="binary-interactions", max_order=1))

    def test_column_cap(self):
        X = np.zeros((2, 25))
        t = ObservationTable(X, np.array([1, 0]), None, tuple(f"c{i}" for i in range(25)))
        with pytest.raises(ConfigError, match="over the cap"):
            expand_basis(t, BasisSpec(kind="binary-interactions", max_order=25))

    def test_deterministic(self):
        t = binary_table()
        spec = BasisSpec(kind="binary-interactions", max_order=2, decay=0.7)
        a = expand_basis(t, spec)
        b = expand_basis(t, spec)
        assert a.labels == b.labels
        np.testing.assert_array_equal(a.values, b.values)

    def test_binary_columns_stay_binary(self):
        fm = expand_basis(binary_table(), BasisSpec(kind="binary-interactions", max_order=2))
        assert set(np.unique(fm.values)) <= {0.0, 1.0}

    def test_polynomial_degree(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((5, 2))
        t = ObservationTable(X, np.array([1, 0, 1, 0, 1]), None, ("a", "b"))
        fm = expand_basis(t, BasisSpec(kind="polynomial", degree=2, decay=0.5))
        assert fm.p == 6  # 1, a, b, a^2, a*b, b^2
        col = fm.labels.index("a^2")
        np.testing.assert_allclose(fm.values[:, col], X[:, 0] ** 2)
        assert fm.scales[col] == 0.25

    def test_hermite_second_order(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((5, 1))
        t = ObservationTable(X, np.array([1, 0, 1, 0, 1]), None, ("a",))
        fm = expand_basis(t, BasisSpec(kind="hermite", degree=3))
        col = fm.labels.index("He2(a)")
        np.testing.assert_allclose(fm.values[:, col], X[:, 0] ** 2 - 1.0)
        col3 = fm.labels.index("He3(a)")
        np.testing.assert_allclose(fm.values[:, col3], X[:, 0] ** 3 - 3 * X[:, 0])

    def test_scale_override(self):
        fm = expand_basis(
            binary_table(),
            BasisSpec(kind="binary-interactions", max_order=1, decay=0.5, scales={"x1": "inf"}),
        )
        assert fm.scales[fm.labels.index("x1")] == math.inf


class TestStandardize:
    def test_two_point_column(self):
        t = ObservationTable(np.array([[1.0], [3.0]]), np.array([1, 0]), None, ("a",))
        fm = standardize(expand_basis(t, BasisSpec(kind="linear-with-intercept")))
        np.testing.assert_allclose(fm.values[:, 1], [-1.0, 1.0])

    def test_intercept_unchanged(self):
        t = ObservationTable(np.array([[1.0], [3.0]]), np.array([1, 0]), None, ("a",))
        fm = standardize(expand_basis(t, BasisSpec(kind="linear-with-intercept")))
        np.testing.assert_array_equal(fm.values[:, 0], [1.0, 1.0])

    def test_constant_column_dropped_with_note(self):
        X = np.array([[1.0, 2.0], [3.0, 2.0]])
        t = ObservationTable(X, np.array([1, 0]), None, ("a", "const"))
        fm = standardize(expand_basis(t, BasisSpec(kind="linear-with-intercept")))
        assert "const" not in fm.labels
        assert any("const" in note for note in fm.notes)

    def test_round_trip(self, rng):
        for _ in range(20):
            n, d = int(rng.integers(4, 30)), int(rng.integers(1, 5))
            X = rng.standard_normal((n, d)) * rng.uniform(0.1, 50)
            w = np.r_[1, 0, (rng.random(n - 2) < 0.5).astype(int)]
            t = ObservationTable(X, w, None, tuple(f"c{j}" for j in range(d)))
            fm = expand_basis(t, BasisSpec(kind="linear-with-intercept"))
            back = destandardize(standardize(fm))
            scale = np.abs(fm.values).max()
            assert np.abs(back.values - fm.values).max() <= 1e-12 * max(scale, 1.0)


class TestEvaluateFeatures:
    def test_matches_training_rows(self, rng):
        X = rng.standard_normal((8, 2))
        t = ObservationTable(X, np.array([1, 0] * 4), None, ("a", "b"))
        fm = standardize(expand_basis(t, BasisSpec(kind="polynomial", degree=2)))
        again = evaluate_features(fm, X)
        np.testing.assert_allclose(again, fm.values, atol=1e-12)

    def test_single_row(self, rng):
        X = rng.standard_normal((6, 2))
        t = ObservationTable(X, np.array([1, 0] * 3), None, ("a", "b"))
        fm = expand_basis(t, BasisSpec(kind="linear-with-intercept"))
        row = evaluate_features(fm, X[2])
        np.testing.assert_allclose(row[0], fm.values[2])

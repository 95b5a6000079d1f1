import numpy as np
import pytest

from balancekit.dataset import BasisSpec, ObservationTable, expand_basis, standardize


def random_table(rng, n=30, d=3, outcome=True, min_arm=4):
    """Random table with both arms populated."""
    X = rng.standard_normal((n, d))
    w = (rng.random(n) < 0.5).astype(int)
    w[:min_arm] = 1
    w[-min_arm:] = 0
    y = X @ rng.normal(size=d) + rng.standard_normal(n) if outcome else None
    names = tuple(f"x{j + 1}" for j in range(d))
    return ObservationTable(X, w, y, names)


def linear_features(table, unit_scales=False, standardized=False):
    fm = expand_basis(table, BasisSpec(kind="linear-with-intercept"))
    if standardized:
        fm = standardize(fm)
    if unit_scales:
        import dataclasses

        fm = dataclasses.replace(fm, scales=np.ones(fm.p))
    return fm


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)

import dataclasses
import math

import numpy as np
import pytest

from balancekit.dataset import BasisSpec, ObservationTable, expand_basis, standardize
from balancekit.duals import (
    DispersionSpec,
    PenaltySpec,
    SolverOptions,
    bregman,
    link_eval,
    primal_objective,
    solve_dual,
    solve_minimax_l2,
    solve_primal_direct,
    verify_duality,
)
from balancekit.errors import ConfigError, SingularSystemError
from balancekit.imbalance import (
    BalanceTarget,
    feature_imbalance,
    full_sample_target,
    make_weights,
)
from balancekit.simlab import random_duality_instance

from conftest import linear_features, random_table

QUAD = DispersionSpec("quadratic")
ENT = DispersionSpec("entropy")
NONNEG = DispersionSpec("quadratic-nonneg")
L1 = PenaltySpec("l1-scaled")


class TestLinks:
    def test_quadratic_identity(self):
        assert link_eval(QUAD, 0.7) == 0.7

    def test_entropy_exp(self):
        assert link_eval(ENT, 0.0) == 1.0

    def test_positive_part(self):
        assert link_eval(NONNEG, -1.5) == 0.0
        assert link_eval(NONNEG, 1.5) == 1.5


class TestBregman:
    def test_quadratic(self):
        assert bregman(QUAD, 3.0, 1.0) == 2.0

    def test_entropy_self_divergence(self):
        assert bregman(ENT, 2.0, 2.0) == 0.0

    def test_entropy_value(self):
        assert abs(bregman(ENT, 2.0, 1.0) - (2.0 * math.log(2.0) - 1.0)) < 1e-15

    def test_positive_part_undefined(self):
        with pytest.raises(ConfigError, match="not differentiable"):
            bregman(NONNEG, 1.0, 1.0)

    def test_entropy_domain(self):
        with pytest.raises(Exception):
            bregman(ENT, -1.0, 1.0)


def intercept_only_problem():
    t = ObservationTable(
        np.array([[0.0], [0.0], [1.0], [1.0]]), np.array([1, 1, 0, 0]), None, ("x",)
    )
    fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("1",)))
    return t, fm, full_sample_target(fm)


class TestSolveDual:
    def test_entropy_intercept_only_gives_uniform(self):
        t, fm, tgt = intercept_only_problem()
        sol = solve_dual(fm, t.treatment, tgt, ENT, L1)
        assert sol.converged
        np.testing.assert_allclose(sol.weights.values, [2.0, 2.0, 0.0, 0.0], atol=1e-9)

    def test_all_zero_scales_pin_coefficients(self, rng):
        t = random_table(rng, n=12, d=2, outcome=False)
        fm = linear_features(t)
        fm = dataclasses.replace(fm, scales=np.zeros(fm.p))
        tgt = full_sample_target(fm)
        for chi, expected in ((QUAD, 0.0), (ENT, 1.0)):
            sol = solve_dual(fm, t.treatment, tgt, chi, L1)
            assert sol.converged
            np.testing.assert_array_equal(sol.coef, np.zeros(fm.p))
            mask = t.treatment == 1
            np.testing.assert_allclose(sol.weights.values[mask], expected)

    def test_matches_dense_grid_search(self):
        # oracle: dense 1-d grid over the dual coefficient, step 1e-4
        rng = np.random.default_rng(1234)
        x = rng.standard_normal(6)
        w = np.array([1, 1, 1, 0, 0, 0])
        t = ObservationTable(x[:, None], w, None, ("x",))
        fm = expand_basis(
            t, BasisSpec(kind="custom-column-list", columns=("x",), scales={"x": 10.0})
        )
        tgt = full_sample_target(fm)

        def dual_obj(theta):
            idx = theta * x[w == 1]
            return (0.5 * idx**2).sum() / 6 - theta * float(x.mean()) + abs(theta) / 10.0

        grid = np.arange(-10.0, 10.0 + 1e-9, 1e-4)
        theta_grid = float(grid[np.argmin([dual_obj(v) for v in grid])])
        assert abs(theta_grid - 0.8097) < 1e-9  # frozen oracle value
        sol = solve_dual(fm, w, tgt, QUAD, L1)
        assert abs(float(sol.coef[0]) - theta_grid) < 2e-4

    def test_non_convergence_reported_not_raised(self, rng):
        t = random_table(rng, n=30, d=3, outcome=False)
        fm = linear_features(t, standardized=True)
        tgt = full_sample_target(fm)
        sol = solve_dual(fm, t.treatment, tgt, ENT, L1, SolverOptions(max_iter=1))
        assert not sol.converged
        assert sol.status == "max-iter"

    def test_infeasible_exact_constraint_detected(self):
        # an exactly-balanced column whose target is unreachable: the
        # feature is constant 0 on the treated group but the target is 1
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        w = np.array([1, 1, 0, 0])
        t = ObservationTable(X, w, None, ("x",))
        fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("x",), scales={"x": "inf"}))
        tgt = BalanceTarget(np.array([1.0]))
        sol = solve_dual(fm, w, tgt, QUAD, L1, SolverOptions(max_iter=200_000))
        assert not sol.converged
        assert sol.status == "infeasible"

    def test_objective_trace_non_increasing(self, rng):
        for chi in (QUAD, ENT, NONNEG):
            inst = random_duality_instance(rng, max_n=40, max_p=6)
            sol = solve_dual(inst.fm, inst.treatment, inst.target, chi, L1)
            diffs = np.diff(sol.objective_trace)
            assert (diffs <= 1e-12).all()

    def test_kkt_soft_threshold(self, rng):
        # coefficients stay exactly zero wherever the gradient sits strictly
        # inside the threshold at the optimum
        for _ in range(5):
            inst = random_duality_instance(rng, max_n=50, max_p=8)
            sol = solve_dual(inst.fm, inst.treatment, inst.target, QUAD, L1)
            assert sol.converged
            d = feature_imbalance(inst.fm, inst.treatment, sol.weights, inst.target)
            scales = np.asarray(inst.fm.scales)
            finite = np.isfinite(scales) & (scales > 0)
            inside = finite & (np.abs(d) < 1.0 / scales - 1e-8)
            assert np.all(sol.coef[inside] == 0.0)

    def test_nonnegative_links_always_nonnegative(self, rng):
        for chi in (ENT, NONNEG):
            for _ in range(5):
                inst = random_duality_instance(rng, max_n=40, max_p=6)
                sol = solve_dual(inst.fm, inst.treatment, inst.target, chi, L1)
                assert sol.weights.values.min() >= 0.0

    def test_exact_intercept_gives_sum_to_one(self, rng):
        for chi in (QUAD, ENT, NONNEG):
            inst = random_duality_instance(rng, max_n=40, max_p=6)
            sol = solve_dual(inst.fm, inst.treatment, inst.target, chi, L1)
            mask = inst.treatment == 1
            total = sol.weights.values[mask].sum() / inst.fm.n
            assert abs(total - 1.0) <= 1e-8

    def test_scaling_equivariance(self, rng):
        # scaling a column by c and its scale by 1/c leaves weights unchanged
        inst = random_duality_instance(rng, max_n=40, max_p=5)
        opts = SolverOptions(tolerance=1e-11)
        base = solve_dual(inst.fm, inst.treatment, inst.target, QUAD, L1, opts)
        c = 3.7
        j = 1
        vals = inst.fm.values.copy()
        vals[:, j] *= c
        scales = np.asarray(inst.fm.scales, dtype=float).copy()
        scales[j] /= c
        fm2 = dataclasses.replace(inst.fm, values=vals, scales=scales)
        tgt2 = BalanceTarget(inst.target.target_means * np.where(np.arange(fm2.p) == j, c, 1.0))
        scaled = solve_dual(fm2, inst.treatment, tgt2, QUAD, L1, opts)
        assert np.abs(scaled.weights.values - base.weights.values).max() <= 1e-9


class TestSolveMinimaxL2:
    def test_single_constraint_exact(self):
        t = ObservationTable(np.array([[1.0], [3.0]]), np.array([1, 0]), None, ("x",))
        fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("x",), scales={"x": 1.0}))
        sol = solve_minimax_l2(fm, t.treatment, full_sample_target(fm), sigma2=0.0)
        np.testing.assert_allclose(sol.weights.values, [4.0, 0.0], atol=1e-12)

    def test_huge_sigma2_kills_weights(self, rng):
        t = random_table(rng, n=20, d=2, outcome=False)
        fm = linear_features(t, unit_scales=True)
        scale = np.abs(fm.values).max()
        sol = solve_minimax_l2(fm, t.treatment, full_sample_target(fm), sigma2=1e12 * scale)
        assert np.abs(sol.weights.values).max() < 1e-6

    def test_beats_random_perturbations(self, rng):
        # optimality oracle: no random feasible perturbation improves the
        # penalized objective
        t = random_table(rng, n=8, d=2, outcome=False, min_arm=3)
        fm = linear_features(t, unit_scales=True)
        tgt = full_sample_target(fm)
        sigma2 = 1.0
        sol = solve_minimax_l2(fm, t.treatment, tgt, sigma2)
        pen = PenaltySpec("l2-scaled", sigma2)
        base = primal_objective(fm, t.treatment, tgt, sol.weights, QUAD, pen)
        mask = t.treatment == 1
        m = int(mask.sum())
        for _ in range(10_000):
            bump = np.zeros(t.n)
            bump[mask] = rng.standard_normal(m) * rng.choice([1e-3, 1e-2, 0.1, 1.0])
            cand = make_weights(sol.weights.values + bump, t.treatment, "treated")
            assert primal_objective(fm, t.treatment, tgt, cand, QUAD, pen) >= base - 1e-12

    def test_singular_names_offending_columns(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [1.0, 2.0]])
        w = np.array([1, 1, 0, 0])
        t = ObservationTable(X, w, None, ("a", "a2"))
        fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("a", "a2"),
                                       scales={"a": 1.0, "a2": 1.0}))
        with pytest.raises(SingularSystemError, match="a2"):
            solve_minimax_l2(fm, w, full_sample_target(fm), sigma2=0.0)
        sol = solve_minimax_l2(fm, w, full_sample_target(fm), sigma2=0.0, ridge_on_singular=True)
        assert np.all(np.isfinite(sol.weights.values))

    def test_exact_columns_balance_exactly(self, rng):
        t = random_table(rng, n=30, d=2, outcome=False)
        fm = linear_features(t, standardized=True)  # intercept scale inf
        tgt = full_sample_target(fm)
        sol = solve_minimax_l2(fm, t.treatment, tgt, sigma2=2.0)
        d = feature_imbalance(fm, t.treatment, sol.weights, tgt)
        assert abs(d[fm.intercept_index]) <= 1e-8

    def test_agrees_with_direct_primal_on_l2(self, rng):
        t = random_table(rng, n=24, d=2, outcome=False)
        fm = linear_features(t, standardized=True)
        tgt = full_sample_target(fm)
        sigma2 = 1.3
        sol = solve_minimax_l2(fm, t.treatment, tgt, sigma2)
        direct = solve_primal_direct(
            fm, t.treatment, tgt, QUAD, PenaltySpec("l2-scaled", sigma2),
            SolverOptions(tolerance=1e-10),
        )
        assert np.abs(sol.weights.values - direct.weights.values).max() <= 1e-6


class TestPrimalObjective:
    def test_zero_weights_l2(self, rng):
        t = random_table(rng, n=10, d=2, outcome=False)
        fm = linear_features(t, unit_scales=True)
        tgt = full_sample_target(fm)
        g = make_weights(np.zeros(t.n), t.treatment, "treated")
        val = primal_objective(fm, t.treatment, tgt, g, QUAD, PenaltySpec("l2-scaled", 5.0))
        from balancekit.imbalance import imbalance_l2ball

        d = feature_imbalance(fm, t.treatment, g, tgt)
        assert val == pytest.approx(imbalance_l2ball(d, fm.scales) ** 2)

    def test_cap_violation_is_infinite(self):
        t = ObservationTable(np.array([[1.0], [3.0]]), np.array([1, 0]), None, ("x",))
        fm = expand_basis(t, BasisSpec(kind="custom-column-list", columns=("x",), scales={"x": 1.0}))
        tgt = full_sample_target(fm)
        g = make_weights(np.array([0.0, 0.0]), t.treatment, "treated")  # imbalance 2 > cap 1
        assert primal_objective(fm, t.treatment, tgt, g, QUAD, L1) == math.inf

    def test_entropy_dispersion_value(self):
        t, fm, tgt = intercept_only_problem()
        g = make_weights(np.array([1.0, 1.0, 0.0, 0.0]), t.treatment, "treated")
        # dispersion of a unit weight is -1; two weighted units over n^2 = 16
        fm_loose = dataclasses.replace(fm, scales=np.array([0.5]))
        val = primal_objective(fm_loose, t.treatment, tgt, g, ENT, L1)
        assert val == pytest.approx(-2.0 / 16.0)


class TestVerifyDuality:
    def test_self_check_passes(self, rng):
        inst = random_duality_instance(rng, max_n=40, max_p=6)
        sol = solve_dual(inst.fm, inst.treatment, inst.target, QUAD, L1)
        rep = verify_duality(
            inst.fm, inst.treatment, inst.target, QUAD, L1, sol.weights, sol
        )
        assert rep.passed
        assert rep.weight_discrepancy == 0.0

    @pytest.mark.parametrize("chi", [QUAD, ENT, NONNEG], ids=lambda c: c.kind)
    def test_independent_primal_agrees(self, chi, rng):
        for _ in range(5):
            inst = random_duality_instance(rng, max_n=50, max_p=8)
            dual = solve_dual(inst.fm, inst.treatment, inst.target, chi, L1)
            primal = solve_primal_direct(
                inst.fm, inst.treatment, inst.target, chi, L1,
                SolverOptions(tolerance=1e-8),
            )
            rep = verify_duality(
                inst.fm, inst.treatment, inst.target, chi, L1, primal.weights, dual
            )
            assert dual.converged and rep.passed, (chi.kind, rep.max_discrepancy)
            assert rep.max_discrepancy < 1e-6

    def test_truncated_dual_fails(self, rng):
        inst = random_duality_instance(rng, max_n=40, max_p=6)
        full = solve_dual(inst.fm, inst.treatment, inst.target, QUAD, L1)
        truncated = solve_dual(
            inst.fm, inst.treatment, inst.target, QUAD, L1, SolverOptions(max_iter=2)
        )
        primal = solve_primal_direct(
            inst.fm, inst.treatment, inst.target, QUAD, L1, SolverOptions(tolerance=1e-8)
        )
        good = verify_duality(inst.fm, inst.treatment, inst.target, QUAD, L1,
                              primal.weights, full)
        bad = verify_duality(inst.fm, inst.treatment, inst.target, QUAD, L1,
                             primal.weights, truncated)
        assert good.passed and not bad.passed

"""Weight estimation via convex dual problems, plus primal–dual checks.

Two routes to balancing weights live here:

* :func:`solve_dual` fits dual coefficients by proximal gradient for a
  chosen dispersion (quadratic, positive-part quadratic, or entropy) under
  per-column imbalance caps (``l1-scaled``) or a ridge-type penalty
  (``l2-scaled``).  Weights are the link function applied to the fitted
  linear index.
* :func:`solve_minimax_l2` solves the squared-imbalance-plus-squared-weights
  problem in closed form through a symmetric positive-definite system.

:func:`solve_primal_direct` minimizes the same weight problems directly in
weight space with spectral projected gradient and a Dykstra-style
projection; it shares no code path with the dual route and exists so that
:func:`verify_duality` can compare the two independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import FeatureMatrix
from .errors import ConfigError, DataError, SingularSystemError
from .imbalance import (
    BalanceTarget,
    WeightVector,
    feature_imbalance,
    group_mask,
    imbalance_l2ball,
    make_weights,
)

DISPERSION_KINDS = ("quadratic", "quadratic-nonneg", "entropy")
PENALTY_KINDS = ("l1-scaled", "l2-scaled")

# index values above this overflow exp() in double precision
EXP_OVERFLOW = 700.0
# unpenalized coefficients larger than this signal unreachable exact constraints
DIVERGENCE_GUARD = 1e8


@dataclass(frozen=True)
class DispersionSpec:
    """Convex dispersion measure for the weights and its dual pieces.

    kind = "quadratic":        g^2/2 dispersion, identity link
    kind = "quadratic-nonneg": g^2/2 on [0, inf), positive-part link
    kind = "entropy":          g(log g - 1) dispersion, exp link
    """

    kind: str

    def __post_init__(self):
        if self.kind not in DISPERSION_KINDS:
            raise ConfigError(f"unknown dispersion kind {self.kind!r}")

    def link(self, g):
        """Map a dual index value to a weight."""
        g = np.asarray(g, dtype=float)
        if self.kind == "quadratic":
            return g + 0.0
        if self.kind == "quadratic-nonneg":
            return np.maximum(g, 0.0)
        with np.errstate(over="ignore"):
            return np.exp(g)

    def conjugate(self, g):
        """Convex conjugate of the dispersion, evaluated at the index."""
        g = np.asarray(g, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * g * g
        if self.kind == "quadratic-nonneg":
            gp = np.maximum(g, 0.0)
            return 0.5 * gp * gp
        with np.errstate(over="ignore"):
            return np.exp(g)

    def dispersion(self, x):
        """The dispersion itself; +inf outside its domain."""
        x = np.asarray(x, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * x * x
        if self.kind == "quadratic-nonneg":
            out = 0.5 * x * x
            return np.where(x >= 0, out, np.inf)
        out = np.full_like(x, np.inf)
        pos = x > 0
        out[pos] = x[pos] * (np.log(x[pos]) - 1.0)
        out[x == 0] = 0.0
        return out

    def bregman(self, x: float, y: float) -> float:
        """Divergence generated by the dispersion, D(x || y)."""
        if self.kind == "quadratic":
            return 0.5 * (x - y) ** 2
        if self.kind == "entropy":
            if x < 0 or y <= 0:
                raise DataError("entropy divergence needs x >= 0, y > 0")
            xlog = 0.0 if x == 0 else x * math.log(x / y)
            return xlog - x + y
        raise ConfigError(
            "the positive-part quadratic dispersion is not differentiable; "
            "its divergence is undefined"
        )


def link_eval(chi: DispersionSpec, g: float) -> float:
    return float(chi.link(g))


def bregman(chi: DispersionSpec, x: float, y: float) -> float:
    return chi.bregman(x, y)


@dataclass(frozen=True)
class PenaltySpec:
    """Imbalance penalty: hard per-column caps or a ridge-type trade-off.

    l1-scaled : imbalance in column j is capped at 1/scale_j; the dual
                penalty is sum_j |coef_j| / scale_j.
    l2-scaled : squared scale-weighted imbalance plus (sigma2/n^2) times
                the squared weights; the dual penalty is ridge-type.
    """

    kind: str
    sigma2: float = 0.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if not (self.sigma2 >= 0.0):
            raise ConfigError(f"sigma2 must be nonnegative, got {self.sigma2}")


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-9
    max_iter: int = 50_000
    record_trace: bool = True


@dataclass(frozen=True)
class DualSolution:
    """Fitted dual coefficients and the weights they imply."""

    coef: np.ndarray
    weights: WeightVector
    objective_trace: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    status: str = "converged"
    labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "labels": list(self.labels),
            "weights": self.weights.values.tolist(),
            "group": self.weights.group,
            "objective_trace": self.objective_trace.tolist(),
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
        }


def _dual_problem(fm, treatment, target, group):
    mask = group_mask(treatment, group)
    if not mask.any():
        raise DataError(f"no units in the {group} group")
    if target.p != fm.p:
        raise DataError("target length does not match feature count")
    return mask, fm.values[mask], np.asarray(target.target_means, dtype=float)


def _scale_vectors(scales):
    s = np.asarray(scales, dtype=float)
    drop = s == 0.0  # excluded from the model entirely
    inv = np.zeros_like(s)
    finite = np.isfinite(s) & ~drop
    inv[finite] = 1.0 / s[finite]
    inv2 = inv * inv
    return drop, inv, inv2


def solve_dual(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    options: SolverOptions | None = None,
    group: str = "treated",
) -> DualSolution:
    """Fit dual coefficients by proximal gradient with backtracking.

    Minimizes, over coefficient vectors ``c`` and with ``m = group size``,

        (1/n) * sum_{group} conj(c . phi_i)  -  c . target  +  penalty(c)

    where ``penalty`` is ``sum_j |c_j|/scale_j`` (l1-scaled, handled by
    soft-thresholding) or ``(sigma2/2n) * sum_j c_j^2/scale_j^2``
    (l2-scaled, handled in the smooth part).  Columns with infinite scale
    are unpenalized; columns with zero scale are pinned at zero.  The run
    starts from zero coefficients and is fully deterministic.

    Non-convergence and unreachable exact constraints (detected by a
    diverging unpenalized coefficient) are reported on the returned
    solution, never raised.
    """
    opts = options or SolverOptions()
    mask, phi, b = _dual_problem(fm, treatment, target, group)
    n = fm.n
    drop, inv, _ = _scale_vectors(fm.scales)
    sigma2 = pen.sigma2
    l1 = pen.kind == "l1-scaled"
    if not l1:
        _, _, inv2 = _scale_vectors(fm.scales)
        ridge = (sigma2 / n) * inv2
    else:
        ridge = None

    def smooth(c):
        idx = phi @ c
        val = float(np.sum(chi.conjugate(idx))) / n - float(c @ b)
        if ridge is not None:
            val += 0.5 * float(ridge @ (c * c))
        return val

    def smooth_grad(c):
        idx = phi @ c
        g = phi.T @ chi.link(idx) / n - b
        if ridge is not None:
            g = g + ridge * c
        return g

    def rough(c):
        return float(inv @ np.abs(c)) if l1 else 0.0

    def prox(c, step):
        if l1:
            thr = step * inv
            c = np.sign(c) * np.maximum(np.abs(c) - thr, 0.0)
        c = c.copy() if not l1 else c
        c[drop] = 0.0
        return c

    c = np.zeros(fm.p)
    f_c = smooth(c)
    trace = [f_c + rough(c)]
    step = 1.0
    status = "max-iter"
    converged = False
    grad_norm = math.inf
    it = 0
    unpenalized = np.isinf(np.asarray(fm.scales, dtype=float))

    for it in range(1, opts.max_iter + 1):
        g = smooth_grad(c)
        step = min(step * 1.25, 1e12)
        while True:
            cand = prox(c - step * g, step)
            delta = cand - c
            f_cand = smooth(cand)
            bound = f_c + float(g @ delta) + float(delta @ delta) / (2.0 * step)
            if f_cand <= bound + 1e-15 * (1.0 + abs(f_c)):
                break
            step *= 0.5
            if step < 1e-18:
                status = "stalled"
                break
        if status == "stalled":
            break
        grad_norm = float(np.linalg.norm(delta)) / step
        c = cand
        f_c = f_cand
        if opts.record_trace:
            trace.append(f_c + rough(c))
        if np.max(np.abs(c[unpenalized]), initial=0.0) > DIVERGENCE_GUARD:
            status = "infeasible"
            break
        if grad_norm <= opts.tolerance:
            status = "converged"
            converged = True
            break

    index = fm.values @ c
    wvals = np.where(mask, chi.link(index), 0.0)
    if not np.all(np.isfinite(wvals)):
        status = "overflow"
        converged = False
        wvals = np.where(np.isfinite(wvals), wvals, 0.0)
    weights = make_weights(wvals, treatment, group)
    return DualSolution(
        coef=c,
        weights=weights,
        objective_trace=np.asarray(trace),
        grad_norm=grad_norm,
        iterations=it,
        converged=converged,
        status=status,
        labels=fm.labels,
    )


def solve_minimax_l2(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    sigma2: float,
    group: str = "treated",
    ridge_on_singular: bool = False,
) -> DualSolution:
    """Closed-form weights trading squared imbalance against squared weights.

    Solves ``[M + (sigma2/n) S] c = target`` where ``M`` is the group
    second-moment matrix of the features and ``S = diag(1/scale_j^2)``;
    weights are ``c . phi_i`` on the group.  Columns with infinite scale are
    unpenalized (and end up exactly balanced); columns with zero scale are
    excluded.  With ``sigma2 = 0`` and collinear group features the system
    is singular: the offending columns are named in the error, or a 1e-12
    ridge is applied when ``ridge_on_singular`` is set.
    """
    if not (sigma2 >= 0.0):
        raise ConfigError(f"sigma2 must be nonnegative, got {sigma2}")
    mask, phi, b = _dual_problem(fm, treatment, target, group)
    n = fm.n
    drop, _, inv2 = _scale_vectors(fm.scales)
    keep = ~drop
    phi_k = phi[:, keep]
    M = phi_k.T @ phi_k / n
    A = M + (sigma2 / n) * np.diag(inv2[keep])
    rhs = b[keep]
    try:
        np.linalg.cholesky(A)
        coef_k = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        if ridge_on_singular:
            bump = 1e-12 * max(1.0, float(np.trace(A)) / A.shape[0])
            coef_k = np.linalg.solve(A + bump * np.eye(A.shape[0]), rhs)
        else:
            raise SingularSystemError(
                "singular weight system (sigma2=0 with collinear group features); "
                f"offending columns: {_null_space_columns(A, np.asarray(fm.labels)[keep])}"
            ) from None
    coef = np.zeros(fm.p)
    coef[keep] = coef_k
    wvals = np.where(mask, fm.values @ coef, 0.0)
    weights = make_weights(wvals, treatment, group)
    resid = float(np.linalg.norm(A @ coef_k - rhs))
    return DualSolution(
        coef=coef,
        weights=weights,
        objective_trace=np.asarray([]),
        grad_norm=resid,
        iterations=1,
        converged=True,
        status="converged",
        labels=fm.labels,
    )


def _null_space_columns(A: np.ndarray, labels) -> list[str]:
    _, s, vt = np.linalg.svd(A)
    tol = s.max(initial=0.0) * A.shape[0] * np.finfo(float).eps
    out: set[str] = set()
    for k in range(len(s)):
        if s[k] <= max(tol, 1e-14):
            v = np.abs(vt[k])
            out.update(str(l) for l in np.asarray(labels)[v > 0.3 * v.max()])
    return sorted(out)


def primal_objective(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    weights: WeightVector,
    chi: DispersionSpec,
    pen: PenaltySpec,
    feas_tol: float = 1e-7,
) -> float:
    """Value of the weight-space objective at the given weights.

    l1-scaled: ``(1/n^2) * sum_group dispersion(w_i)`` when every scaled
    imbalance cap (and every exact constraint) holds within ``feas_tol``,
    otherwise +inf.  l2-scaled: squared scale-weighted imbalance plus
    ``(sigma2/n^2) * sum_group w_i^2`` (quadratic dispersions only).
    """
    d = feature_imbalance(fm, treatment, weights, target)
    s = np.asarray(fm.scales, dtype=float)
    mask = group_mask(treatment, weights.group)
    gvals = weights.values[mask]
    n = fm.n

    if pen.kind == "l1-scaled":
        # absolute slack on the imbalance itself, so tight caps keep headroom
        slack = feas_tol * (1.0 + np.abs(target.target_means))
        finite = np.isfinite(s) & (s > 0)
        if np.any(np.abs(d[finite]) > 1.0 / s[finite] + slack[finite]):
            return math.inf
        exact = np.isinf(s)
        if np.any(np.abs(d[exact]) > slack[exact]):
            return math.inf
        disp = chi.dispersion(gvals)
        if np.any(np.isinf(disp)):
            return math.inf
        return float(np.sum(disp)) / (n * n)

    if chi.kind not in ("quadratic", "quadratic-nonneg"):
        raise ConfigError("l2-scaled objective is defined for quadratic dispersions")
    if chi.kind == "quadratic-nonneg" and gvals.min(initial=0.0) < -feas_tol:
        return math.inf
    return imbalance_l2ball(d, s) ** 2 + pen.sigma2 / (n * n) * float(gvals @ gvals)


# ---------------------------------------------------------------------------
# direct primal route (independent of the dual parameterization)


class _SlabProjector:
    """Euclidean projection onto {z : lo <= A^T z <= hi, (z >= 0)}.

    Dual coordinate descent over the slab multipliers with a vectorized
    block step for the orthant; multipliers are kept between calls, which
    warm-starts the projection of nearby points.
    """

    def __init__(self, normals: np.ndarray, lo: np.ndarray, hi: np.ndarray, orthant: bool):
        self.A = normals  # (m, q), one column per slab
        self.lo = lo
        self.hi = hi
        self.orthant = orthant
        self.q = normals.shape[1]
        self.colsq = np.einsum("ij,ij->j", normals, normals)
        if np.any(self.colsq == 0.0):
            raise DataError("zero constraint normal in projection")
        self.nu = np.zeros(self.q)
        self.mu = np.zeros(normals.shape[0])

    def violation(self, z: np.ndarray) -> float:
        s = self.A.T @ z
        v = max(
            float(np.max(self.lo - s, initial=0.0)),
            float(np.max(s - self.hi, initial=0.0)),
        )
        if self.orthant:
            v = max(v, float(np.max(-z, initial=0.0)))
        return v

    def __call__(self, y: np.ndarray, tol: float = 1e-12, max_sweeps: int = 20_000) -> np.ndarray:
        A, lo, hi = self.A, self.lo, self.hi
        z = y - A @ self.nu
        if self.orthant:
            z = z + self.mu
        for _ in range(max_sweeps):
            moved = 0.0
            for j in range(self.q):
                aj = A[:, j]
                t = float(aj @ z) + self.nu[j] * self.colsq[j]
                want = min(max(t, lo[j]), hi[j])
                nu_new = (t - want) / self.colsq[j]
                if nu_new != self.nu[j]:
                    z += (self.nu[j] - nu_new) * aj
                    moved = max(moved, abs(nu_new - self.nu[j]) * math.sqrt(self.colsq[j]))
                    self.nu[j] = nu_new
            if self.orthant:
                base = z - self.mu
                znew = np.maximum(base, 0.0)
                mu_new = znew - base
                moved = max(moved, float(np.max(np.abs(mu_new - self.mu), initial=0.0)))
                z = znew
                self.mu = mu_new
            # a stationary sweep means the dual coordinate descent has converged
            if moved <= tol and self.violation(z) <= tol:
                break
        return z


@dataclass(frozen=True)
class PrimalSolution:
    weights: WeightVector
    objective: float
    iterations: int
    converged: bool
    residual: float


def solve_primal_direct(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    options: SolverOptions | None = None,
    group: str = "treated",
) -> PrimalSolution:
    """Minimize the weight problem directly over per-unit weights.

    Spectral projected gradient with a nonmonotone line search; the
    feasible set (imbalance caps, exact constraints, nonnegativity where the
    dispersion requires it) is handled by Euclidean projection.  This route
    never touches the dual coefficients, so it serves as an independent
    check on :func:`solve_dual` and :func:`solve_minimax_l2`.
    """
    opts = options or SolverOptions()
    mask, phi, b = _dual_problem(fm, treatment, target, group)
    n = fm.n
    m = phi.shape[0]
    s = np.asarray(fm.scales, dtype=float)
    orthant = chi.kind in ("quadratic-nonneg", "entropy")
    finite = np.isfinite(s) & (s > 0)
    exact = np.isinf(s)

    if pen.kind == "l1-scaled":
        # caps on every finite-scale column, equalities on exact columns
        cols = np.concatenate([np.nonzero(finite)[0], np.nonzero(exact)[0]])
        caps = np.concatenate([1.0 / s[finite], np.zeros(int(exact.sum()))])
    else:
        if chi.kind == "entropy":
            raise ConfigError("direct primal for l2-scaled supports quadratic dispersions")
        # imbalance is penalized, so only exact columns constrain the set
        cols = np.nonzero(exact)[0]
        caps = np.zeros(int(exact.sum()))
    if cols.size or orthant:
        proj = _SlabProjector(phi[:, cols] / n, b[cols] - caps, b[cols] + caps, orthant)
    else:
        proj = None
    lam_fin = np.where(finite, s, 0.0)

    # internal objective is n^2 times the reported one so gradients are O(1)
    # and the stopping tolerance transfers to weight accuracy directly
    def objective(x):
        if pen.kind == "l1-scaled":
            disp = chi.dispersion(x)
            if np.any(np.isinf(disp)):
                return math.inf
            return float(np.sum(disp))
        d = b - phi.T @ x / n
        return n * n * float(np.sum((lam_fin * d) ** 2)) + pen.sigma2 * float(x @ x)

    def gradient(x):
        if pen.kind == "l1-scaled":
            if chi.kind == "quadratic":
                return x + 0.0
            if chi.kind == "quadratic-nonneg":
                return np.maximum(x, 0.0)
            safe = np.maximum(x, 1e-300)
            return np.log(safe)
        d = b - phi.T @ x / n
        return -2.0 * n * phi @ (lam_fin * lam_fin * d) + 2.0 * pen.sigma2 * x

    proj_tol = 1e-12

    def project(y):
        if proj is None:
            return y
        return proj(y, tol=proj_tol)

    x = project(np.full(m, n / m))
    fx = objective(x)
    gx = gradient(x)
    alpha = 1.0 / max(float(np.linalg.norm(gx)), 1e-8)
    history = [fx]
    converged = False
    resid = math.inf
    tol = max(opts.tolerance, 1e-10)
    no_descent = 0
    it = 0
    for it in range(1, opts.max_iter + 1):
        resid = float(np.max(np.abs(project(x - gx) - x)))
        if resid <= tol:
            converged = True
            break
        # projection inexactness caps how small the residual can resolve;
        # keep the inner tolerance well below the current residual
        proj_tol = min(proj_tol, 1e-4 * resid)
        direction = project(x - alpha * gx) - x
        gd = float(gx @ direction)
        if gd > -1e-18 or float(np.max(np.abs(direction))) < 1e-15:
            # descent exhausted at numerical precision
            no_descent += 1
            alpha = max(alpha * 0.1, 1e-12)
            if no_descent >= 5:
                converged = resid <= 100.0 * tol
                break
            continue
        no_descent = 0
        fmax = max(history[-10:])
        stepsize = 1.0
        while True:
            cand = x + stepsize * direction
            fc = objective(cand)
            if fc <= fmax + 1e-4 * stepsize * gd or stepsize < 1e-14:
                break
            stepsize *= 0.5
        g_new = gradient(cand)
        dx = cand - x
        dg = g_new - gx
        sy = float(dx @ dg)
        alpha = min(max(float(dx @ dx) / sy, 1e-10), 1e10) if sy > 0 else 1.0
        x, fx, gx = cand, fc, g_new
        history.append(fx)

    full = np.zeros(fm.n)
    full[mask] = x
    weights = make_weights(full, treatment, group)
    return PrimalSolution(
        weights=weights,
        objective=objective(x) / (n * n),
        iterations=it,
        converged=converged,
        residual=resid,
    )


@dataclass(frozen=True)
class DualityReport:
    """Outcome of a primal-versus-dual consistency check."""

    weight_discrepancy: float
    objective_excess: float
    max_discrepancy: float
    tolerance: float
    passed: bool
    dual_objective: float
    primal_objective_value: float

    def to_dict(self) -> dict:
        return {
            "weight_discrepancy": self.weight_discrepancy,
            "objective_excess": self.objective_excess,
            "max_discrepancy": self.max_discrepancy,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "dual_objective": _json_float(self.dual_objective),
            "primal_objective_value": _json_float(self.primal_objective_value),
        }


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def verify_duality(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    primal_weights: WeightVector,
    dual: DualSolution,
    tolerance: float = 1e-6,
) -> DualityReport:
    """Check that a direct primal solution matches the dual-implied weights.

    Two checks: the weights agree unit by unit on the weighted group, and
    the weight-space objective at the dual-implied weights is no worse than
    at the primal weights (beyond ``tolerance``).  Failures are reported,
    never raised.
    """
    if primal_weights.group != dual.weights.group:
        raise ConfigError("primal and dual solutions weight different groups")
    mask = group_mask(treatment, dual.weights.group)
    wdisc = float(np.max(np.abs(dual.weights.values - primal_weights.values)[mask], initial=0.0))
    obj_dual = primal_objective(fm, treatment, target, dual.weights, chi, pen)
    obj_primal = primal_objective(fm, treatment, target, primal_weights, chi, pen)
    if math.isinf(obj_dual) and math.isinf(obj_primal):
        excess = math.inf
    else:
        excess = max(0.0, obj_dual - obj_primal)
    max_disc = max(wdisc, excess)
    return DualityReport(
        weight_discrepancy=wdisc,
        objective_excess=excess,
        max_discrepancy=max_disc,
        tolerance=tolerance,
        passed=bool(max_disc <= tolerance),
        dual_objective=obj_dual,
        primal_objective_value=obj_primal,
    )

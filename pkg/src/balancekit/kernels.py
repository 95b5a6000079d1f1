"""Kernel-based minimax weights solved directly in weight space.

For function-space models whose unit ball is described by a kernel, the
worst-case imbalance reduces to a quadratic form in the Gram matrix (see
:func:`balancekit.imbalance.kernel_imbalance`), so the weight problem

    minimize  kernel_imbalance(w)^2 + (sigma2/n^2) * sum_group w_i^2

is a finite-dimensional quadratic program over the weighted group.  The
unconstrained problem is a single symmetric solve; the simplex-constrained
variant (nonnegative weights averaging one) runs accelerated projected
gradient with a monotone safeguard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, SingularSystemError
from .imbalance import WeightVector, group_mask, make_weights

KERNEL_KINDS = ("linear", "polynomial", "gaussian", "binary-product")

PSD_JITTER = 1e-10


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters.

    linear          : x . x'
    polynomial      : (x . x' + offset)^degree
    gaussian        : exp(-|x - x'|^2 / (2 bandwidth^2)); bandwidth None
                      means the median pairwise distance heuristic
    binary-product  : prod_l (1 + decay * x_l x'_l)
    """

    kind: str
    degree: int = 2
    offset: float = 1.0
    bandwidth: float | None = None
    decay: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ConfigError("polynomial kernel needs degree >= 1")
        if self.kind == "gaussian" and self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("gaussian bandwidth must be positive")
        if self.kind == "binary-product" and not (0.0 < self.decay <= 1.0):
            raise ConfigError("binary-product decay must be in (0, 1]")

    @staticmethod
    def from_dict(cfg) -> "KernelSpec":
        known = {"kind", "degree", "offset", "bandwidth", "decay"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown kernel config keys: {sorted(extra)}")
        return KernelSpec(
            kind=cfg.get("kind", "linear"),
            degree=int(cfg.get("degree", 2)),
            offset=float(cfg.get("offset", 1.0)),
            bandwidth=None if cfg.get("bandwidth") is None else float(cfg["bandwidth"]),
            decay=float(cfg.get("decay", 1.0)),
        )


def median_pairwise_distance(X: np.ndarray) -> float:
    """Median Euclidean distance over distinct pairs of rows."""
    X = np.asarray(X, dtype=float)
    sq = _pairwise_sq_dists(X)
    iu = np.triu_indices(X.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(sq[iu], 0.0))))
    if med <= 0:
        raise DataError("median pairwise distance is zero; set a bandwidth explicitly")
    return med


def resolve_bandwidth(spec: KernelSpec, X: np.ndarray) -> KernelSpec:
    """Fill in a gaussian bandwidth from the data when unset."""
    if spec.kind != "gaussian" or spec.bandwidth is not None:
        return spec
    from dataclasses import replace

    return replace(spec, bandwidth=median_pairwise_distance(X))


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    out = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    return np.maximum(out, 0.0)


def gram(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Kernel matrix K[i, j] = K(X_i, X_j)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError("covariates must be 2-d")
    if spec.kind == "linear":
        K = X @ X.T
    elif spec.kind == "polynomial":
        K = (X @ X.T + spec.offset) ** spec.degree
    elif spec.kind == "gaussian":
        spec = resolve_bandwidth(spec, X)
        K = np.exp(-_pairwise_sq_dists(X) / (2.0 * spec.bandwidth**2))
    else:  # binary-product
        K = np.ones((X.shape[0], X.shape[0]))
        for col in range(X.shape[1]):
            K *= 1.0 + spec.decay * np.outer(X[:, col], X[:, col])
    if not np.all(np.isfinite(K)):
        raise DataError("kernel matrix has non-finite entries")
    return 0.5 * (K + K.T)


@dataclass(frozen=True)
class KernelWeightProblem:
    """One kernel weight problem over a treatment arm.

    ``constraints`` is "none" (unconstrained linear solve) or "simplex"
    (nonnegative weights averaging one over the group).
    """

    gram: np.ndarray
    treatment: np.ndarray
    sigma2: float
    constraints: str = "none"
    group: str = "treated"

    def __post_init__(self):
        K = np.asarray(self.gram, dtype=float)
        n = K.shape[0]
        if K.shape != (n, n):
            raise DataError("Gram matrix must be square")
        scale = max(1.0, float(np.abs(K).max()))
        if np.abs(K - K.T).max() > 1e-8 * scale:
            raise DataError("Gram matrix is not symmetric")
        if len(np.asarray(self.treatment)) != n:
            raise DataError("treatment length does not match Gram size")
        if not (self.sigma2 >= 0.0):
            raise ConfigError("sigma2 must be nonnegative")
        if self.constraints not in ("none", "simplex"):
            raise ConfigError(f"unknown constraints {self.constraints!r}")
        if not group_mask(self.treatment, self.group).any():
            raise DataError(f"no units in the {self.group} group")


@dataclass(frozen=True)
class KernelSolution:
    weights: WeightVector
    objective: float
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    status: str


def _project_scaled_simplex(y: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {v >= 0, sum v = total} (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, y.size + 1)
    cond = u - css / ks > 0
    rho = int(ks[cond][-1])
    tau = css[rho - 1] / rho
    return np.maximum(y - tau, 0.0)


def solve_kernel_minimax(
    prob: KernelWeightProblem,
    tolerance: float = 1e-9,
    max_iter: int = 50_000,
) -> KernelSolution:
    """Minimize squared kernel imbalance plus a squared-weight penalty.

    Unconstrained problems reduce to ``(K_gg + sigma2 I) w = K 1 | group``
    after a PSD jitter of ``1e-10 * trace(K)/n`` on the diagonal; singular
    systems raise with a suggestion to increase ``sigma2``.  Simplex
    problems run accelerated projected gradient with restarts; the recorded
    objective trace is non-increasing.
    """
    K = np.asarray(prob.gram, dtype=float)
    n = K.shape[0]
    mask = group_mask(prob.treatment, prob.group)
    idx = np.nonzero(mask)[0]
    m = idx.size
    Kgg = K[np.ix_(idx, idx)].copy()
    s = K.sum(axis=1)[idx]
    jitter = PSD_JITTER * max(float(np.trace(K)) / n, np.finfo(float).tiny)
    Kgg[np.diag_indices(m)] += jitter

    def objective(v):
        # (1/n^2) * [ sum(K) - 2 v.s + v.Kgg.v ] + (sigma2/n^2) * |v|^2
        quad = float(v @ (Kgg @ v))
        return (float(K.sum()) - 2.0 * float(v @ s) + quad + prob.sigma2 * float(v @ v)) / (n * n)

    if prob.constraints == "none":
        A = Kgg + prob.sigma2 * np.eye(m)
        try:
            np.linalg.cholesky(A)
            v = np.linalg.solve(A, s)
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                "kernel weight system is singular; increase sigma2 or use a "
                "larger diagonal jitter"
            ) from None
        full = np.zeros(n)
        full[idx] = v
        return KernelSolution(
            weights=make_weights(full, prob.treatment, prob.group),
            objective=objective(v),
            objective_trace=np.asarray([]),
            iterations=1,
            converged=True,
            status="converged",
        )

    # simplex: accelerated projected gradient with monotone safeguard
    H = Kgg + prob.sigma2 * np.eye(m)
    lip = float(np.linalg.eigvalsh(H)[-1]) * 2.0 / (n * n)
    lip = max(lip, np.finfo(float).tiny)
    step = 1.0 / lip

    def grad(v):
        return 2.0 * (H @ v - s) / (n * n)

    total = float(n)
    x = _project_scaled_simplex(np.full(m, total / m), total)
    y = x.copy()
    t_acc = 1.0
    fx = objective(x)
    trace = [fx]
    converged = False
    resid = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        cand = _project_scaled_simplex(y - step * grad(y), total)
        f_cand = objective(cand)
        if f_cand > fx:
            # monotone safeguard: fall back to a plain step and restart
            cand = _project_scaled_simplex(x - step * grad(x), total)
            f_cand = objective(cand)
            t_acc = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
        y = cand + (t_acc - 1.0) / t_next * (cand - x)
        resid = float(np.max(np.abs(cand - x)))
        x, fx, t_acc = cand, min(f_cand, fx), t_next
        trace.append(fx)
        opt_resid = float(np.max(np.abs(_project_scaled_simplex(x - step * grad(x), total) - x)))
        if max(resid, opt_resid) <= tolerance * max(1.0, total / m):
            converged = True
            break

    full = np.zeros(n)
    full[idx] = x
    return KernelSolution(
        weights=make_weights(full, prob.treatment, prob.group),
        objective=fx,
        objective_trace=np.asarray(trace),
        iterations=it,
        converged=converged,
        status="converged" if converged else "max-iter",
    )


def pilot_noise_variance(
    covariates: np.ndarray,
    outcome: np.ndarray,
    treatment: np.ndarray,
    group: str = "treated",
) -> float:
    """Residual variance of a within-group linear pilot fit.

    Default sigma2 heuristic for outcome-bearing runs: regress the group's
    outcomes on an intercept plus raw covariates and return the mean squared
    residual.
    """
    mask = group_mask(treatment, group)
    X = np.asarray(covariates, dtype=float)[mask]
    y = np.asarray(outcome, dtype=float)[mask]
    if y.size < X.shape[1] + 2:
        raise DataError("too few group units for the pilot variance fit")
    design = np.column_stack([np.ones(y.size), X])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(resid @ resid) / y.size


def sweep_sigma2(
    base: KernelWeightProblem,
    grid,
    tolerance: float = 1e-9,
    max_iter: int = 50_000,
) -> list[dict]:
    """Solve the same problem across a sigma2 grid; returns per-value rows
    with the objective, weight spread, and effective sample size."""
    from dataclasses import replace

    from .imbalance import effective_sample_size

    rows = []
    for sigma2 in grid:
        sol = solve_kernel_minimax(replace(base, sigma2=float(sigma2)), tolerance, max_iter)
        vals = sol.weights.values
        rows.append(
            {
                "sigma2": float(sigma2),
                "objective": sol.objective,
                "max_weight": float(vals.max()),
                "min_weight": float(vals.min()),
                "effective_sample_size": effective_sample_size(sol.weights),
                "converged": sol.converged,
            }
        )
    return rows

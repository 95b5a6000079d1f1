"""Synthetic data with known ground truth, brute-force oracles, and
replication experiments.

Every random quantity flows from named substreams of one seed, so any
experiment re-run with the same configuration is bit-identical.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dataset import BasisSpec, FeatureMatrix, ObservationTable, expand_basis, standardize
from .errors import ConfigError, DataError
from .imbalance import (
    BalanceTarget,
    WeightVector,
    feature_imbalance,
    full_sample_target,
    group_mask,
    make_weights,
)

COVARIATE_LAWS = ("uniform", "normal", "bernoulli")


@dataclass(frozen=True)
class DGPSpec:
    """Logistic-treatment, linear-outcome data generating process.

    The propensity index is clipped at +/- logit(1 - overlap_eps), so the
    treatment probability always lies in [overlap_eps, 1 - overlap_eps].
    Coefficient vectors have an intercept first, then one entry per
    covariate.
    """

    n: int
    d: int
    covariate_law: str = "normal"
    bernoulli_p: float = 0.5
    propensity_coef: tuple[float, ...] = ()
    outcome_coef_treated: tuple[float, ...] = ()
    outcome_coef_control: tuple[float, ...] = ()
    noise_sd: float = 1.0
    overlap_eps: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.d < 1:
            raise ConfigError("need n >= 2 and d >= 1")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ConfigError(f"unknown covariate law {self.covariate_law!r}")
        if not (0.0 < self.overlap_eps < 0.5):
            raise ConfigError("overlap_eps must be in (0, 0.5)")
        if not (0.0 < self.bernoulli_p < 1.0):
            raise ConfigError("bernoulli_p must be in (0, 1)")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        for name in ("propensity_coef", "outcome_coef_treated", "outcome_coef_control"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) == 0:
                v = (0.0,) * (self.d + 1)
            if len(v) != self.d + 1:
                raise ConfigError(f"{name} needs {self.d + 1} entries (intercept first)")
            if not all(math.isfinite(x) for x in v):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    def covariate_mean(self) -> np.ndarray:
        if self.covariate_law == "uniform":
            return np.full(self.d, 0.5)
        if self.covariate_law == "normal":
            return np.zeros(self.d)
        return np.full(self.d, self.bernoulli_p)

    @staticmethod
    def from_dict(cfg) -> "DGPSpec":
        known = {
            "n", "d", "covariate_law", "bernoulli_p", "propensity_coef",
            "outcome_coef_treated", "outcome_coef_control", "noise_sd",
            "overlap_eps", "seed",
        }
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown dgp config keys: {sorted(extra)}")
        return DGPSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items()})


@dataclass(frozen=True)
class Oracles:
    """Ground-truth functions and estimands for a generated table."""

    propensity: Callable[[np.ndarray], np.ndarray]
    mean_treated: Callable[[np.ndarray], np.ndarray]
    mean_control: Callable[[np.ndarray], np.ndarray]
    mu_treated: float
    mu_control: float
    tau: float
    potential_treated: np.ndarray | None = None
    potential_control: np.ndarray | None = None


def _affine(coef):
    intercept, slope = coef[0], np.asarray(coef[1:], dtype=float)

    def f(X):
        return intercept + np.asarray(X, dtype=float) @ slope

    return f


def generate(spec: DGPSpec) -> tuple[ObservationTable, Oracles]:
    """Draw one table; potential outcomes are drawn first, then masked by
    the realized treatment."""
    root = np.random.SeedSequence(spec.seed)
    s_cov, s_trt, s_n1, s_n0 = root.spawn(4)
    rng_cov = np.random.default_rng(s_cov)
    if spec.covariate_law == "uniform":
        X = rng_cov.random((spec.n, spec.d))
    elif spec.covariate_law == "normal":
        X = rng_cov.standard_normal((spec.n, spec.d))
    else:
        X = (rng_cov.random((spec.n, spec.d)) < spec.bernoulli_p).astype(float)

    index_cap = math.log((1.0 - spec.overlap_eps) / spec.overlap_eps)
    prop_index = _affine(spec.propensity_coef)

    def propensity(Xq):
        idx = np.clip(prop_index(Xq), -index_cap, index_cap)
        return 1.0 / (1.0 + np.exp(-idx))

    mean_treated = _affine(spec.outcome_coef_treated)
    mean_control = _affine(spec.outcome_coef_control)

    e = propensity(X)
    w = (np.random.default_rng(s_trt).random(spec.n) < e).astype(np.int8)
    y1 = mean_treated(X) + spec.noise_sd * np.random.default_rng(s_n1).standard_normal(spec.n)
    y0 = mean_control(X) + spec.noise_sd * np.random.default_rng(s_n0).standard_normal(spec.n)
    y = np.where(w == 1, y1, y0)

    xbar = spec.covariate_mean()
    mu1 = spec.outcome_coef_treated[0] + float(np.dot(spec.outcome_coef_treated[1:], xbar))
    mu0 = spec.outcome_coef_control[0] + float(np.dot(spec.outcome_coef_control[1:], xbar))
    table = ObservationTable(X, w, y, tuple(f"x{j + 1}" for j in range(spec.d)))
    oracles = Oracles(
        propensity=propensity,
        mean_treated=mean_treated,
        mean_control=mean_control,
        mu_treated=mu1,
        mu_control=mu0,
        tau=mu1 - mu0,
        potential_treated=y1,
        potential_control=y0,
    )
    return table, oracles


def oracle_weights(table: ObservationTable, oracles: Oracles, group: str = "treated") -> WeightVector:
    """True inverse-probability weights on the chosen arm."""
    e = oracles.propensity(table.covariates)
    mask = group_mask(table.treatment, group)
    vals = np.where(mask, 1.0 / e if group == "treated" else 1.0 / (1.0 - e), 0.0)
    return make_weights(vals, table.treatment, group)


# ---------------------------------------------------------------------------
# brute-force oracle

MAX_FREE_WEIGHTS = 8


@dataclass(frozen=True)
class BruteForceProblem:
    """Small weight-optimization instance for the search oracle.

    ``objective`` maps a free-weight vector (length ``n_free``) to a float;
    ``simplex_total`` switches on the constraint {w >= 0, sum w = total}.
    """

    objective: Callable[[np.ndarray], float]
    n_free: int
    scale: float
    simplex_total: float | None = None

    def __post_init__(self):
        if self.n_free > MAX_FREE_WEIGHTS:
            raise ConfigError(
                f"brute force supports at most {MAX_FREE_WEIGHTS} free weights, got {self.n_free}"
            )


def brute_force_weights(
    prob: BruteForceProblem,
    seed: int = 0,
    n_starts: int = 1_000,
    refine_step: float = 1e-5,
    n_refine: int = 5,
) -> np.ndarray:
    """Multistart random search followed by coordinate pattern refinement.

    The refinement shrinks a coordinate step from the problem scale down to
    ``refine_step``; on the simplex, moves are pairwise transfers so the
    constraint holds exactly throughout.
    """
    rng = np.random.default_rng(seed)
    m = prob.n_free
    simplex = prob.simplex_total is not None

    starts = []
    if simplex:
        total = prob.simplex_total
        starts.append(np.full(m, total / m))
        for _ in range(n_starts - 1):
            starts.append(rng.dirichlet(np.ones(m)) * total)
    else:
        starts.append(np.zeros(m))
        starts.append(np.full(m, prob.scale))
        for _ in range(n_starts - 2):
            starts.append(prob.scale * rng.normal(size=m))

    scored = sorted(starts, key=prob.objective)
    best_x, best_f = None, math.inf
    for x0 in scored[:n_refine]:
        x, f = _pattern_refine(prob, np.array(x0, dtype=float), refine_step)
        if f < best_f:
            best_x, best_f = x, f
    return best_x


def _pattern_refine(prob, x, floor):
    f = prob.objective(x)
    step = max(prob.scale, 10 * floor)
    simplex = prob.simplex_total is not None
    while step >= floor:
        improved = True
        while improved:
            improved = False
            for i in range(prob.n_free):
                if simplex:
                    for j in range(prob.n_free):
                        if i == j:
                            continue
                        delta = min(step, x[j])
                        if delta <= 0:
                            continue
                        cand = x.copy()
                        cand[i] += delta
                        cand[j] -= delta
                        fc = prob.objective(cand)
                        if fc < f:
                            x, f, improved = cand, fc, True
                else:
                    for sign in (1.0, -1.0):
                        cand = x.copy()
                        cand[i] += sign * step
                        fc = prob.objective(cand)
                        if fc < f:
                            x, f, improved = cand, fc, True
        step *= 0.5
    return x, f


def minimax_objective(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    target: BalanceTarget,
    sigma2: float,
    group: str = "treated",
) -> BruteForceProblem:
    """Squared scale-weighted imbalance plus squared-weight penalty, written
    directly from the data (no solver code involved)."""
    mask = group_mask(treatment, group)
    phi = fm.values[mask]
    s = np.asarray(fm.scales, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ConfigError("brute-force objective needs finite scales")
    b = np.asarray(target.target_means, dtype=float)
    n = fm.n
    m = phi.shape[0]

    def objective(v):
        total = 0.0
        for j in range(fm.p):
            wavg = 0.0
            for i in range(m):
                wavg += v[i] * phi[i, j]
            total += (s[j] * (b[j] - wavg / n)) ** 2
        pen = 0.0
        for i in range(m):
            pen += v[i] * v[i]
        return total + sigma2 * pen / (n * n)

    return BruteForceProblem(objective=objective, n_free=m, scale=n / max(m, 1))


def kernel_objective(
    gram: np.ndarray,
    treatment: np.ndarray,
    sigma2: float,
    group: str = "treated",
    simplex: bool = False,
) -> BruteForceProblem:
    """Kernel-form weight objective evaluated by an explicit double sum."""
    K = np.asarray(gram, dtype=float)
    n = K.shape[0]
    mask = group_mask(treatment, group)
    idx = np.nonzero(mask)[0]
    m = idx.size

    def objective(v):
        gw = np.zeros(n)
        gw[idx] = v
        total = 0.0
        for i in range(n):
            for j in range(n):
                total += K[i, j] - 2.0 * gw[i] * K[i, j] + gw[i] * gw[j] * K[i, j]
        pen = float(np.dot(v, v))
        return (total + sigma2 * pen) / (n * n)

    return BruteForceProblem(
        objective=objective,
        n_free=m,
        scale=n / max(m, 1),
        simplex_total=float(n) if simplex else None,
    )


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class SimResult:
    """Replication experiment summary plus per-replication records."""

    kind: str
    replications: int
    config: dict = field(default_factory=dict)
    rmse_weights: list | None = None
    monotone_decreasing: bool | None = None
    coverage: float | None = None
    bias: float | None = None
    variance: float | None = None
    mean_gamma_rms: float | None = None
    mean_variance_estimate: float | None = None
    degenerate_count: int = 0
    excluded_count: int = 0
    estimates: list | None = None
    ci_hits: list | None = None

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "replications": self.replications,
            "config": self.config,
            "degenerate_count": self.degenerate_count,
            "excluded_count": self.excluded_count,
        }
        for key in (
            "rmse_weights", "monotone_decreasing", "coverage", "bias", "variance",
            "mean_gamma_rms", "mean_variance_estimate", "estimates", "ci_hits",
        ):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        kwargs.setdefault("indent", 2)
        return json.dumps(self.to_dict(), **kwargs)

    def to_text(self) -> str:
        lines = [f"{self.kind} experiment, R={self.replications}"]
        if self.rmse_weights is not None:
            for row in self.rmse_weights:
                lines.append(f"  n={row['n']:>6d}  rmse={row['rmse']:.6g}  excluded={row['excluded']}")
            lines.append(f"  strictly decreasing: {self.monotone_decreasing}")
        if self.coverage is not None:
            lines.append(f"  coverage={self.coverage:.4f}  bias={self.bias:.5g}  var={self.variance:.5g}")
            lines.append(
                f"  mean gamma_rms={self.mean_gamma_rms:.5g}  "
                f"mean V_hat={self.mean_variance_estimate:.5g}"
            )
        if self.degenerate_count:
            lines.append(f"  degenerate replications: {self.degenerate_count}")
        return "\n".join(lines) + "\n"


def _map_replications(fn, seeds, threads: int):
    if threads <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seeds))


def convergence_experiment(
    base: DGPSpec,
    ns,
    weight_solver,
    replications: int = 200,
    seed: int = 0,
    basis: BasisSpec | None = None,
    group: str = "treated",
    decrease_margin: float = 0.02,
    threads: int = 1,
) -> SimResult:
    """Root-mean-squared distance between fitted and true inverse-probability
    weights across a sample-size grid.

    ``weight_solver(fm, treatment, target, group) -> WeightVector`` may
    raise to signal non-convergence; such replications are excluded with a
    count.  ``monotone_decreasing`` is true when every step of the grid
    shrinks the rmse by more than ``decrease_margin`` (relative).
    """
    ns = [int(v) for v in ns]
    if sorted(ns) != ns:
        raise ConfigError("sample sizes must be increasing")
    basis = basis or BasisSpec(kind="linear-with-intercept")
    root = np.random.SeedSequence(seed)
    rows = []
    for n in ns:
        rep_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(replications)]

        def one(rep_seed, n=n):
            spec = replace(base, n=n, seed=rep_seed)
            table, oracles = generate(spec)
            fm = expand_basis(table, basis)
            target = full_sample_target(fm)
            try:
                w = weight_solver(fm, table.treatment, target, group)
            except Exception:
                return None
            truth = oracle_weights(table, oracles, group)
            mask = group_mask(table.treatment, group)
            diff = (w.values - truth.values)[mask]
            return float(diff @ diff), int(mask.sum())

        results = _map_replications(one, rep_seeds, threads)
        excluded = sum(r is None for r in results)
        kept = [r for r in results if r is not None]
        if not kept:
            raise DataError(f"all replications failed at n={n}")
        sq = math.fsum(r[0] for r in kept)
        count = sum(r[1] for r in kept)
        rows.append({"n": n, "rmse": math.sqrt(sq / count), "excluded": excluded})

    rmses = [r["rmse"] for r in rows]
    monotone = all(
        rmses[k + 1] < rmses[k] * (1.0 - decrease_margin) for k in range(len(rmses) - 1)
    )
    return SimResult(
        kind="convergence",
        replications=replications,
        config={"ns": ns, "seed": seed, "decrease_margin": decrease_margin},
        rmse_weights=rows,
        monotone_decreasing=monotone,
        excluded_count=sum(r["excluded"] for r in rows),
    )


def coverage_experiment(
    spec: DGPSpec,
    weight_solver,
    replications: int = 1_000,
    level: float = 0.95,
    seed: int = 0,
    basis: BasisSpec | None = None,
    estimand: str = "treated-mean",
    n_folds: int = 5,
    ridge_penalty: float = 1e-3,
    threads: int = 1,
) -> SimResult:
    """Fraction of replications whose Wald interval covers the truth.

    Degenerate-interval replications are counted separately and excluded
    from the coverage rate; replications where the solver raises are
    excluded with a count.
    """
    if replications < 100:
        raise ConfigError("coverage experiments need at least 100 replications")
    if estimand not in ("treated-mean", "ate"):
        raise ConfigError("coverage experiment supports treated-mean or ate")
    from .estimators import EstimandSpec, estimate_effect

    basis = basis or BasisSpec(kind="linear-with-intercept")
    root = np.random.SeedSequence(seed)
    rep_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(replications)]
    espec = EstimandSpec(estimand)

    def one(rep_seed):
        dgp = replace(spec, seed=rep_seed)
        table, oracles = generate(dgp)
        truth = oracles.mu_treated if estimand == "treated-mean" else oracles.tau
        fm = expand_basis(table, basis)
        try:
            eff = estimate_effect(
                table, fm, espec, weight_solver,
                level=level, n_folds=n_folds, ridge_penalty=ridge_penalty,
            )
        except Exception:
            return ("excluded", None, None, None, None)
        if eff.status == "degenerate-interval" or eff.ci is None:
            return ("degenerate", eff.point, None, eff.gamma_rms, eff.variance)
        hit = eff.ci[0] <= truth <= eff.ci[1]
        return ("ok", eff.point, bool(hit), eff.gamma_rms, eff.variance)

    results = _map_replications(one, rep_seeds, threads)
    excluded = sum(r[0] == "excluded" for r in results)
    degenerate = sum(r[0] == "degenerate" for r in results)
    ok = [r for r in results if r[0] == "ok"]
    estimates = [r[1] for r in ok]
    hits = [r[2] for r in ok]
    dgp0 = replace(spec, seed=0)
    _, oracles0 = generate(dgp0)
    truth = oracles0.mu_treated if estimand == "treated-mean" else oracles0.tau
    coverage = (math.fsum(hits) / len(hits)) if hits else None
    bias = (math.fsum(estimates) / len(estimates) - truth) if estimates else None
    var = None
    if len(estimates) > 1:
        mean_est = math.fsum(estimates) / len(estimates)
        var = math.fsum((e - mean_est) ** 2 for e in estimates) / (len(estimates) - 1)
    return SimResult(
        kind="coverage",
        replications=replications,
        config={"level": level, "seed": seed, "estimand": estimand},
        coverage=coverage,
        bias=bias,
        variance=var,
        mean_gamma_rms=math.fsum(r[3] for r in ok) / len(ok) if ok else None,
        mean_variance_estimate=math.fsum(r[4] for r in ok) / len(ok) if ok else None,
        degenerate_count=degenerate,
        excluded_count=excluded,
        estimates=estimates,
        ci_hits=hits,
    )


# ---------------------------------------------------------------------------
# randomized instances for duality checks


@dataclass(frozen=True)
class DualityInstance:
    fm: FeatureMatrix
    treatment: np.ndarray
    target: BalanceTarget


def random_duality_instance(
    rng: np.random.Generator,
    max_n: int = 60,
    max_p: int = 12,
) -> DualityInstance:
    """Random weight problem with caps that are feasible by construction.

    A strictly positive pivot weighting (so every dispersion kind admits a
    feasible point) sets the cap widths; the intercept stays an exact
    constraint.
    """
    d = int(rng.integers(1, max(2, max_p - 1)))
    n = int(rng.integers(max(12, 2 * d + 6), max_n + 1))
    X = rng.standard_normal((n, d))
    w = np.zeros(n, dtype=int)
    n1 = int(rng.integers(d + 4, max(d + 5, n // 2 + 1)))
    w[rng.choice(n, size=n1, replace=False)] = 1
    table = ObservationTable(X, w, None, tuple(f"x{j + 1}" for j in range(d)))
    fm = standardize(expand_basis(table, BasisSpec(kind="linear-with-intercept")))
    target = full_sample_target(fm)
    pivot_vals = np.where(w == 1, np.exp(0.2 * rng.standard_normal(n)), 0.0)
    pivot_vals *= n / pivot_vals.sum()
    pivot = make_weights(pivot_vals, w, "treated")
    d_pivot = feature_imbalance(fm, w, pivot, target)
    slack = 1.0 + rng.uniform(0.1, 1.0, size=fm.p)
    caps = np.abs(d_pivot) * slack + 1e-4
    scales = 1.0 / caps
    scales[fm.intercept_index] = np.inf
    fm = replace(fm, scales=scales)
    return DualityInstance(fm=fm, treatment=w, target=target)

"""Point estimation and inference for weighted treatment comparisons.

The weighting estimator of a treated mean is ``(1/n) sum_i W_i w_i Y_i``;
its augmented version corrects residual imbalance with an out-of-fold
outcome regression.  Wald intervals use the variance estimator

    V = (1/n^2) sum_i W_i w_i^2 (Y_i - mhat_i)^2

with ``mhat_i`` the cross-fit prediction for unit i, together with the
root-mean-squared weight ``sqrt((1/n) sum_i W_i w_i^2)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import FeatureMatrix, ObservationTable, evaluate_features
from .errors import ConfigError, DataError, SingularSystemError
from .imbalance import (
    BalanceTarget,
    ImbalanceReport,
    WeightVector,
    group_mask,
    imbalance_report,
    make_weights,
)

ESTIMAND_KINDS = (
    "treated-mean",
    "control-mean",
    "ate",
    "att",
    "target-population-mean",
    "cate-at-point",
)

CATE_MIN_DRAWS = 1_000

# half-width below this relative scale means the interval carries no
# information beyond floating-point noise
DEGENERATE_SE_TOL = 1e-9


@dataclass(frozen=True)
class EstimandSpec:
    """What to estimate, and how the balance target is formed."""

    kind: str
    target_table: ObservationTable | None = None
    point: np.ndarray | None = None
    bandwidth: float | None = None
    draws: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ESTIMAND_KINDS:
            raise ConfigError(f"unknown estimand kind {self.kind!r}")
        if self.kind == "target-population-mean" and self.target_table is None:
            raise ConfigError("target-population-mean needs a target table")
        if self.kind == "cate-at-point":
            if self.point is None:
                raise ConfigError("cate-at-point needs a covariate point")
            if self.bandwidth is None or not self.bandwidth > 0:
                raise ConfigError("cate-at-point needs bandwidth > 0")
            if self.draws < CATE_MIN_DRAWS:
                raise ConfigError(f"cate-at-point needs at least {CATE_MIN_DRAWS} draws")
            object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def weighted_groups(self) -> tuple[str, ...]:
        if self.kind == "treated-mean":
            return ("treated",)
        if self.kind == "control-mean":
            return ("control",)
        if self.kind == "att":
            return ("control",)
        return ("treated", "control")


def build_balance_target(
    spec: EstimandSpec, fm: FeatureMatrix, table: ObservationTable
) -> BalanceTarget:
    """Feature means the weighted group(s) must match for this estimand."""
    if spec.kind in ("treated-mean", "control-mean", "ate"):
        return BalanceTarget(fm.values.mean(axis=0), "full-sample mean")
    if spec.kind == "att":
        treated = fm.values[group_mask(table.treatment, "treated")]
        if treated.shape[0] == 0:
            raise DataError("no treated units for the att target")
        return BalanceTarget(treated.mean(axis=0), "treated-sample mean")
    if spec.kind == "target-population-mean":
        X = _aligned_covariates(spec.target_table, fm.source_columns)
        vals = evaluate_features(fm, X)
        return BalanceTarget(vals.mean(axis=0), "external target sample mean")
    # cate-at-point: feature means over Gaussian draws around the point
    rng = np.random.default_rng(spec.seed)
    x0 = np.asarray(spec.point, dtype=float)
    if x0.shape != (len(fm.source_columns),):
        raise ConfigError("cate point dimension does not match the covariates")
    draws = x0[None, :] + spec.bandwidth * rng.standard_normal((spec.draws, x0.size))
    vals = evaluate_features(fm, draws)
    return BalanceTarget(
        vals.mean(axis=0),
        f"gaussian-smoothed point (bandwidth {spec.bandwidth}, {spec.draws} draws)",
    )


def _aligned_covariates(table: ObservationTable, columns) -> np.ndarray:
    missing = [c for c in columns if c not in table.column_names]
    if missing:
        raise DataError(f"target table is missing covariates: {missing}")
    order = [table.column_names.index(c) for c in columns]
    return table.covariates[:, order]


def ipw_estimate(table: ObservationTable, weights: WeightVector) -> float:
    """Weighted group outcome average, ``(1/n) sum_group w_i Y_i``."""
    if table.outcome is None:
        raise DataError("outcomes are required for estimation")
    mask = group_mask(table.treatment, weights.group)
    return float(np.sum(weights.values * mask * table.outcome)) / table.n


def hajek_normalize(weights: WeightVector, treatment: np.ndarray) -> WeightVector:
    """Rescale so the group weights average one over the full sample."""
    mask = group_mask(treatment, weights.group)
    mean_w = float(np.sum(weights.values * mask)) / len(mask)
    if mean_w <= 0:
        raise DataError("total weight is not positive; cannot normalize")
    return make_weights(weights.values / mean_w, treatment, weights.group)


@dataclass(frozen=True)
class OutcomeModel:
    """K-fold cross-fit ridge regression of the outcome on the features.

    ``predictions[i]`` is the prediction for unit i from the model fit
    without unit i's fold; coefficients are one row per fold.
    """

    folds: np.ndarray
    coefficients: np.ndarray
    penalty: float
    arm: str
    predictions: np.ndarray

    @property
    def n_folds(self) -> int:
        return self.coefficients.shape[0]


def fit_crossfit_ridge(
    table: ObservationTable,
    fm: FeatureMatrix,
    n_folds: int = 5,
    penalty: float = 1e-3,
    arm: str = "treated",
    seed: int = 0,
) -> OutcomeModel:
    """Fit per-fold ridge coefficients on arm units outside each fold.

    Folds are assigned round-robin after a seeded shuffle, stratified so
    every fold receives arm units.  The intercept column is never
    penalized, so fits are equivariant to outcome shifts.
    """
    if table.outcome is None:
        raise DataError("outcomes are required to fit an outcome model")
    if n_folds < 2:
        raise ConfigError("cross-fitting needs at least 2 folds")
    mask = group_mask(table.treatment, arm)
    if int(mask.sum()) < n_folds:
        raise DataError(f"{arm} arm has fewer units than folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(table.n, dtype=int)
    for part in (np.nonzero(mask)[0], np.nonzero(~mask)[0]):
        part = part.copy()
        rng.shuffle(part)
        folds[part] = np.arange(part.size) % n_folds

    V = fm.values
    y = table.outcome
    pen_diag = np.ones(fm.p) * penalty
    if fm.intercept_index is not None:
        pen_diag[fm.intercept_index] = 0.0
    coefs = np.empty((n_folds, fm.p))
    for k in range(n_folds):
        train = mask & (folds != k)
        Xt = V[train]
        A = Xt.T @ Xt + np.diag(pen_diag)
        try:
            np.linalg.cholesky(A)
            coefs[k] = np.linalg.solve(A, Xt.T @ y[train])
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                f"ridge system singular in fold {k}; collinear features need penalty > 0"
            ) from None
    predictions = np.einsum("ij,ij->i", V, coefs[folds])
    return OutcomeModel(
        folds=folds,
        coefficients=coefs,
        penalty=penalty,
        arm=arm,
        predictions=predictions,
    )


def predict_external(model: OutcomeModel, features: np.ndarray) -> np.ndarray:
    """Predictions for rows outside the study sample: fold-model average."""
    return np.asarray(features, dtype=float) @ model.coefficients.mean(axis=0)


def aipw_estimate(
    table: ObservationTable,
    weights: WeightVector,
    model: OutcomeModel,
    imputation_mean: float | None = None,
) -> float:
    """Weighting estimate plus an imputation bias correction.

    ``imputation_mean`` defaults to the full-sample average of the
    out-of-fold predictions; composed estimands override it with the
    average over their target population.
    """
    if table.outcome is None:
        raise DataError("outcomes are required for estimation")
    mask = group_mask(table.treatment, weights.group)
    mhat = model.predictions
    if imputation_mean is None:
        imputation_mean = float(mhat.mean())
    gw = weights.values * mask
    return float(np.sum(gw * table.outcome)) / table.n + imputation_mean - float(
        np.sum(gw * mhat)
    ) / table.n


def _arm_variance(table, weights, model) -> float:
    mask = group_mask(table.treatment, weights.group)
    resid = table.outcome - model.predictions
    gw = weights.values * mask
    return float(np.sum(gw * gw * resid * resid)) / (table.n**2)


def gamma_rms(weights: WeightVector, treatment: np.ndarray) -> float:
    """Root-mean-squared weight over the full sample."""
    mask = group_mask(treatment, weights.group)
    gw = weights.values * mask
    return math.sqrt(float(gw @ gw) / len(mask))


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate with Wald inference and balance diagnostics."""

    estimand: str
    point: float
    variance: float
    ci: tuple[float, float] | None
    level: float
    gamma_rms: float
    ess: float
    status: str = "ok"
    diagnostics_before: dict[str, ImbalanceReport] = field(default_factory=dict)
    diagnostics_after: dict[str, ImbalanceReport] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "variance": self.variance,
            "ci": None if self.ci is None else [self.ci[0], self.ci[1]],
            "level": self.level,
            "gamma_rms": self.gamma_rms,
            "ess": self.ess,
            "status": self.status,
            "components": dict(sorted(self.components.items())),
            "imbalance_before": {k: v.to_dict() for k, v in sorted(self.diagnostics_before.items())},
            "imbalance_after": {k: v.to_dict() for k, v in sorted(self.diagnostics_after.items())},
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        kwargs.setdefault("indent", 2)
        return json.dumps(self.to_dict(), **kwargs)


def normal_quantile(q: float) -> float:
    """Standard normal quantile by rational approximation plus one
    Halley refinement step (absolute error well below 1e-8)."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile argument must be in (0, 1), got {q}")
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low = 0.02425
    if q < p_low:
        r = math.sqrt(-2.0 * math.log(q))
        x = (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0
        )
    elif q <= 1.0 - p_low:
        r = q - 0.5
        t = r * r
        x = (((((a[0] * t + a[1]) * t + a[2]) * t + a[3]) * t + a[4]) * t + a[5]) * r / (
            ((((b[0] * t + b[1]) * t + b[2]) * t + b[3]) * t + b[4]) * t + 1.0
        )
    else:
        r = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -(((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0
        )
    # one Halley step against the exact CDF
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def wald_ci(
    table: ObservationTable,
    weights: WeightVector,
    model: OutcomeModel,
    level: float = 0.95,
) -> EffectEstimate:
    """Augmented estimate of one arm's mean with a Wald interval.

    A variance estimate at floating-point-noise scale (exact outcome fits)
    yields status ``degenerate-interval`` with no interval rather than a
    zero-width one.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    point = aipw_estimate(table, weights, model)
    variance = _arm_variance(table, weights, model)
    rms = gamma_rms(weights, table.treatment)
    se = math.sqrt(variance)
    if se <= DEGENERATE_SE_TOL * (1.0 + abs(point)):
        status, ci = "degenerate-interval", None
    else:
        z = normal_quantile(1.0 - (1.0 - level) / 2.0)
        status, ci = "ok", (point - z * se, point + z * se)
    from .imbalance import effective_sample_size

    return EffectEstimate(
        estimand=f"{weights.group}-mean",
        point=point,
        variance=variance,
        ci=ci,
        level=level,
        gamma_rms=rms,
        ess=effective_sample_size(weights),
        status=status,
    )


def error_decomposition(
    table: ObservationTable,
    weights: WeightVector,
    model: OutcomeModel,
    oracle_mean,
    true_mean: float,
) -> tuple[float, float, float]:
    """Split the augmented estimator's error into its three exact parts.

    Returns (imbalance in the regression error, weighted noise, sampling
    variation); the parts sum to ``estimate - true_mean`` identically.
    ``oracle_mean`` is the true conditional mean function of the weighted
    arm (simulation use only).
    """
    if table.outcome is None:
        raise DataError("outcomes are required")
    n = table.n
    mask = group_mask(table.treatment, weights.group)
    gw = weights.values * mask
    m_true = np.asarray(oracle_mean(table.covariates), dtype=float)
    dm = model.predictions - m_true
    noise = table.outcome - m_true
    imbalance_term = float(dm.mean()) - float(np.sum(gw * dm)) / n
    noise_term = float(np.sum(gw * noise)) / n
    sampling_term = float(m_true.mean()) - true_mean
    return imbalance_term, noise_term, sampling_term


@dataclass(frozen=True)
class ArmFit:
    """Weights, model, and diagnostics for one arm of a composed estimand."""

    weights: WeightVector
    model: OutcomeModel | None
    before: ImbalanceReport
    after: ImbalanceReport


def estimate_effect(
    table: ObservationTable,
    fm: FeatureMatrix,
    estimand: EstimandSpec,
    weight_solver,
    level: float = 0.95,
    n_folds: int = 5,
    ridge_penalty: float = 1e-3,
    fold_seed: int = 0,
    augment: bool = True,
) -> EffectEstimate:
    """Run the full pipeline for one estimand.

    ``weight_solver(fm, treatment, target, group) -> WeightVector`` supplies
    the weights for each arm.  With ``augment`` false the point estimate is
    the pure weighting estimator (no outcome model, no interval).
    """
    if table.outcome is None:
        raise DataError("outcomes are required for estimation")
    target = build_balance_target(estimand, fm, table)
    arms: dict[str, ArmFit] = {}
    for grp in estimand.weighted_groups():
        w = weight_solver(fm, table.treatment, target, grp)
        uniform = _uniform_weights(table.treatment, grp)
        model = None
        if augment:
            model = fit_crossfit_ridge(table, fm, n_folds, ridge_penalty, grp, fold_seed)
        arms[grp] = ArmFit(
            weights=w,
            model=model,
            before=imbalance_report(fm, table.treatment, uniform, target, table),
            after=imbalance_report(fm, table.treatment, w, target, table),
        )
    if estimand.kind == "att":
        # the treated side of the contrast is the plain treated average
        grp = "treated"
        uniform = _uniform_weights(table.treatment, grp)
        model = (
            fit_crossfit_ridge(table, fm, n_folds, ridge_penalty, grp, fold_seed)
            if augment
            else None
        )
        arms[grp] = ArmFit(
            weights=uniform,
            model=model,
            before=imbalance_report(fm, table.treatment, uniform, target, table),
            after=imbalance_report(fm, table.treatment, uniform, target, table),
        )

    imputation_mean = _imputation_means(estimand, fm, table, arms) if augment else {}
    points: dict[str, float] = {}
    variances: dict[str, float] = {}
    for grp, arm in arms.items():
        if augment:
            points[grp] = aipw_estimate(table, arm.weights, arm.model, imputation_mean[grp])
            variances[grp] = _arm_variance(table, arm.weights, arm.model)
        else:
            points[grp] = ipw_estimate(table, arm.weights)
            variances[grp] = math.nan

    if estimand.kind == "treated-mean":
        point = points["treated"]
    elif estimand.kind == "control-mean":
        point = points["control"]
    else:
        point = points["treated"] - points["control"]

    mask_sq = np.zeros(table.n)
    for grp, arm in arms.items():
        gm = group_mask(table.treatment, grp)
        mask_sq += (arm.weights.values * gm) ** 2
    rms = math.sqrt(float(mask_sq.sum()) / table.n)

    ess_arm = min(
        _safe_ess(arm.weights) for arm in arms.values()
    )
    if not augment:
        return EffectEstimate(
            estimand=estimand.kind,
            point=point,
            variance=math.nan,
            ci=None,
            level=level,
            gamma_rms=rms,
            ess=ess_arm,
            status="no-interval (augmentation disabled)",
            diagnostics_before={g: a.before for g, a in arms.items()},
            diagnostics_after={g: a.after for g, a in arms.items()},
            components={f"{g}-mean": p for g, p in points.items()},
        )

    variance = float(sum(variances.values()))
    se = math.sqrt(variance)
    if se <= DEGENERATE_SE_TOL * (1.0 + abs(point)):
        status, ci = "degenerate-interval", None
    else:
        z = normal_quantile(1.0 - (1.0 - level) / 2.0)
        status, ci = "ok", (point - z * se, point + z * se)
    return EffectEstimate(
        estimand=estimand.kind,
        point=point,
        variance=variance,
        ci=ci,
        level=level,
        gamma_rms=rms,
        ess=ess_arm,
        status=status,
        diagnostics_before={g: a.before for g, a in arms.items()},
        diagnostics_after={g: a.after for g, a in arms.items()},
        components={f"{g}-mean": p for g, p in points.items()},
    )


def _uniform_weights(treatment, grp) -> WeightVector:
    gm = group_mask(treatment, grp)
    vals = np.where(gm, len(gm) / max(int(gm.sum()), 1), 0.0)
    return make_weights(vals, treatment, grp)


def _safe_ess(weights: WeightVector) -> float:
    from .imbalance import effective_sample_size

    try:
        return effective_sample_size(weights)
    except DataError:
        return 0.0


def _imputation_means(estimand, fm, table, arms) -> dict[str, float]:
    """Average prediction over the estimand's target population, per arm."""
    out = {}
    for grp, arm in arms.items():
        if estimand.kind in ("treated-mean", "control-mean", "ate"):
            out[grp] = float(arm.model.predictions.mean())
        elif estimand.kind == "att":
            tmask = group_mask(table.treatment, "treated")
            out[grp] = float(arm.model.predictions[tmask].mean())
        else:
            feats = _target_features(estimand, fm)
            out[grp] = float(predict_external(arm.model, feats).mean())
    return out


def _target_features(estimand, fm) -> np.ndarray:
    if estimand.kind == "target-population-mean":
        X = _aligned_covariates(estimand.target_table, fm.source_columns)
        return evaluate_features(fm, X)
    rng = np.random.default_rng(estimand.seed)
    x0 = np.asarray(estimand.point, dtype=float)
    draws = x0[None, :] + estimand.bandwidth * rng.standard_normal((estimand.draws, x0.size))
    return evaluate_features(fm, draws)

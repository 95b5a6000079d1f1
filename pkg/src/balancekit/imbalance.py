"""Balance diagnostics for weighted comparisons.

All diagnostics share one sign convention: imbalance in a feature is the
target average minus the weighted average, where the weighted average of a
column ``phi_j`` is ``(1/n) * sum_i 1[i in group] * weight_i * phi_j(X_i)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .dataset import FeatureMatrix, ObservationTable, _readonly
from .errors import ConfigError, DataError

FLAG_TOL = 1e-9

GROUPS = ("treated", "control")


@dataclass(frozen=True)
class WeightVector:
    """Per-unit weights for one treatment arm.

    ``values`` has length n and is zero for units outside ``group``.
    ``sum_to_one`` asserts ``(1/n) * sum(values over group) == 1`` and
    ``nonnegative`` asserts ``min(values) >= 0``; both are checked to
    1e-9 at construction time (pass the treatment vector via
    :func:`make_weights` so off-group zeroing can be enforced).
    """

    values: np.ndarray
    group: str
    sum_to_one: bool = False
    nonnegative: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DataError("weights must be a 1-d array")
        if not np.all(np.isfinite(v)):
            raise DataError("weights contain non-finite entries")
        if self.group not in GROUPS:
            raise ConfigError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.nonnegative and v.min(initial=0.0) < -FLAG_TOL:
            raise DataError("nonnegative flag set but weights go negative")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n(self) -> int:
        return self.values.shape[0]


def group_mask(treatment: np.ndarray, group: str) -> np.ndarray:
    """Boolean mask of the units carrying weight."""
    w = np.asarray(treatment)
    if group == "treated":
        return w == 1
    if group == "control":
        return w == 0
    raise ConfigError(f"unknown group {group!r}")


def make_weights(
    values: np.ndarray,
    treatment: np.ndarray,
    group: str = "treated",
) -> WeightVector:
    """Build a validated :class:`WeightVector`.

    Entries outside the group must already be zero (raises otherwise); the
    ``sum_to_one`` and ``nonnegative`` flags are detected numerically.
    """
    v = np.asarray(values, dtype=float)
    mask = group_mask(treatment, group)
    if v.shape != mask.shape:
        raise DataError("weights length does not match treatment length")
    if np.any(v[~mask] != 0.0):
        raise DataError(f"weights must be zero outside the {group} group")
    n = v.shape[0]
    total = float(v[mask].sum())
    sum_to_one = abs(total / n - 1.0) <= FLAG_TOL
    nonnegative = float(v.min(initial=0.0)) >= -FLAG_TOL
    if nonnegative:
        v = np.maximum(v, 0.0)
    return WeightVector(v, group, sum_to_one=sum_to_one, nonnegative=nonnegative)


@dataclass(frozen=True)
class BalanceTarget:
    """Feature averages the weighted group must reproduce."""

    target_means: np.ndarray
    provenance: str = "full-sample mean"

    def __post_init__(self):
        t = np.asarray(self.target_means, dtype=float)
        if t.ndim != 1 or not np.all(np.isfinite(t)):
            raise DataError("target means must be a finite 1-d array")
        object.__setattr__(self, "target_means", _readonly(t))

    @property
    def p(self) -> int:
        return self.target_means.shape[0]


def full_sample_target(fm: FeatureMatrix) -> BalanceTarget:
    return BalanceTarget(fm.values.mean(axis=0), "full-sample mean")


def feature_imbalance(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    weights: WeightVector,
    target: BalanceTarget,
) -> np.ndarray:
    """Per-feature imbalance: target mean minus weighted group average."""
    if target.p != fm.p:
        raise DataError(f"target has {target.p} entries, features have {fm.p}")
    if weights.n != fm.n or len(np.asarray(treatment)) != fm.n:
        raise DataError("weights/treatment length does not match feature rows")
    mask = group_mask(treatment, weights.group)
    wavg = (weights.values * mask) @ fm.values / fm.n
    return target.target_means - wavg


def max_imbalance_l1ball(imbalance: np.ndarray, scales: np.ndarray) -> float:
    """Largest scaled per-feature imbalance, ``max_j scale_j * |d_j|``.

    Columns with infinite scale are exact constraints and are excluded here
    (see :func:`constraint_residuals`); columns with zero scale are ignored.
    """
    d = np.asarray(imbalance, dtype=float)
    s = np.asarray(scales, dtype=float)
    if d.shape != s.shape:
        raise DataError("imbalance and scales lengths differ")
    if not np.all(np.isfinite(d)):
        raise DataError("imbalance entries must be finite")
    use = np.isfinite(s) & (s > 0)
    if not use.any():
        return 0.0
    return float(np.max(s[use] * np.abs(d[use])))


def imbalance_l2ball(imbalance: np.ndarray, scales: np.ndarray) -> float:
    """Scale-weighted Euclidean imbalance, ``sqrt(sum_j scale_j^2 d_j^2)``.

    Same exclusion rules as :func:`max_imbalance_l1ball`.
    """
    d = np.asarray(imbalance, dtype=float)
    s = np.asarray(scales, dtype=float)
    if d.shape != s.shape:
        raise DataError("imbalance and scales lengths differ")
    use = np.isfinite(s) & (s > 0)
    return float(np.sqrt(np.sum((s[use] * d[use]) ** 2)))


def constraint_residuals(imbalance: np.ndarray, scales: np.ndarray) -> dict[int, float]:
    """Imbalance left in exact-balance (infinite-scale) columns, by index."""
    d = np.asarray(imbalance, dtype=float)
    s = np.asarray(scales, dtype=float)
    return {int(j): float(d[j]) for j in np.nonzero(np.isinf(s))[0]}


KERNEL_PSD_TOL = 1e-8


def kernel_imbalance(gram: np.ndarray, treatment: np.ndarray, weights: WeightVector) -> float:
    """Worst-case imbalance over the unit ball of the kernel's function space.

    Computed from the Gram matrix as the square root of

        (1/n^2) * sum_ij [ K_ij - 2 * g_i K_ij w_i + g_i g_j K_ij w_i w_j ]

    with ``g`` the group indicator and ``w`` the weights.  Small negative
    totals (within 1e-8, from rounding in the double sum) are clipped to
    zero; anything more negative indicates a non-PSD Gram matrix.
    """
    K = np.asarray(gram, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n):
        raise DataError("Gram matrix must be square")
    scale = max(1.0, float(np.abs(K).max()))
    if np.abs(K - K.T).max() > KERNEL_PSD_TOL * scale:
        raise DataError("Gram matrix is not symmetric")
    if weights.n != n or len(np.asarray(treatment)) != n:
        raise DataError("weights/treatment length does not match Gram size")
    gw = weights.values * group_mask(treatment, weights.group)
    total = K.sum() - 2.0 * gw @ K.sum(axis=1) + gw @ K @ gw
    total /= n * n
    if total < -KERNEL_PSD_TOL * scale:
        raise DataError(f"kernel imbalance squared is {total}; Gram matrix not PSD")
    return float(math.sqrt(max(total, 0.0)))


def ks_statistics(table: ObservationTable, weights: WeightVector) -> np.ndarray:
    """Per-covariate Kolmogorov–Smirnov distance between the weighted group
    distribution and the unweighted full sample, evaluated at observed points.

    Requires nonnegative weights (a signed measure has no CDF).
    """
    v = weights.values
    if v.min(initial=0.0) < 0:
        raise DataError("KS statistics require nonnegative weights")
    mask = group_mask(table.treatment, weights.group)
    gw = v * mask
    total = gw.sum()
    if total <= 0:
        raise DataError("weighted group has zero total weight")
    n = table.n
    out = np.empty(table.d)
    for j in range(table.d):
        x = table.covariates[:, j]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        full_cdf = np.arange(1, n + 1) / n
        wcdf = np.cumsum(gw[order]) / total
        # evaluate at the largest index of each tied value
        last = np.nonzero(np.append(np.diff(xs) != 0, True))[0]
        out[j] = np.abs(wcdf[last] - full_cdf[last]).max()
    return out


def effective_sample_size(weights: WeightVector) -> float:
    """Kish effective sample size, ``(sum w)^2 / sum w^2``."""
    v = weights.values
    denom = float(v @ v)
    if denom == 0.0:
        raise DataError("all weights are zero")
    return float(v.sum()) ** 2 / denom


@dataclass(frozen=True)
class ImbalanceReport:
    """Bundle of balance diagnostics for one weighting."""

    labels: tuple[str, ...]
    per_feature: np.ndarray
    per_feature_sd_units: np.ndarray
    scales: np.ndarray
    max_l1ball: float
    l2ball: float
    exact_residuals: dict[int, float]
    effective_sample_size: float
    ks_per_covariate: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    kernel: float | None = None

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "per_feature": self.per_feature.tolist(),
            "per_feature_sd_units": self.per_feature_sd_units.tolist(),
            "scales": [_json_scale(s) for s in self.scales.tolist()],
            "max_l1ball": self.max_l1ball,
            "l2ball": self.l2ball,
            "exact_residuals": {str(k): v for k, v in sorted(self.exact_residuals.items())},
            "effective_sample_size": self.effective_sample_size,
            "ks_per_covariate": None
            if self.ks_per_covariate is None
            else self.ks_per_covariate.tolist(),
            "covariate_names": list(self.covariate_names),
            "kernel": self.kernel,
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        kwargs.setdefault("indent", 2)
        return json.dumps(self.to_dict(), **kwargs)

    def to_text(self) -> str:
        rows = [("feature", "imbalance", "imbalance_sd", "scale", "scaled")]
        for j, label in enumerate(self.labels):
            s = self.scales[j]
            scaled = "exact" if math.isinf(s) else f"{s * abs(self.per_feature[j]):.6g}"
            rows.append(
                (
                    label,
                    f"{self.per_feature[j]:.6g}",
                    f"{self.per_feature_sd_units[j]:.6g}",
                    "inf" if math.isinf(s) else f"{s:.6g}",
                    scaled,
                )
            )
        widths = [max(len(r[c]) for r in rows) for c in range(5)]
        lines = ["  ".join(f"{r[c]:<{widths[c]}}" for c in range(5)).rstrip() for r in rows]
        lines.append("")
        lines.append(f"max scaled imbalance : {self.max_l1ball:.6g}")
        lines.append(f"l2-ball imbalance    : {self.l2ball:.6g}")
        if self.kernel is not None:
            lines.append(f"kernel imbalance     : {self.kernel:.6g}")
        if self.exact_residuals:
            worst = max(abs(v) for v in self.exact_residuals.values())
            lines.append(f"exact-constraint residual (worst) : {worst:.3g}")
        lines.append(f"effective sample size: {self.effective_sample_size:.6g}")
        if self.ks_per_covariate is not None:
            for name, ks in zip(self.covariate_names, self.ks_per_covariate):
                lines.append(f"KS[{name}]: {ks:.6g}")
        return "\n".join(lines) + "\n"


def _json_scale(s: float):
    return "inf" if math.isinf(s) else s


def imbalance_report(
    fm: FeatureMatrix,
    treatment: np.ndarray,
    weights: WeightVector,
    target: BalanceTarget,
    table: ObservationTable | None = None,
    gram: np.ndarray | None = None,
) -> ImbalanceReport:
    """Assemble the standard diagnostics for one weighting.

    SD-unit imbalances divide each feature imbalance by the feature's sample
    spread (population-n denominator); constant columns report raw units.
    """
    d = feature_imbalance(fm, treatment, weights, target)
    spread = fm.values.std(axis=0)
    spread[spread == 0.0] = 1.0
    ks = None
    if table is not None and weights.values.min(initial=0.0) >= 0:
        ks = ks_statistics(table, weights)
    return ImbalanceReport(
        labels=fm.labels,
        per_feature=d,
        per_feature_sd_units=d / spread,
        scales=np.asarray(fm.scales, dtype=float),
        max_l1ball=max_imbalance_l1ball(d, fm.scales),
        l2ball=imbalance_l2ball(d, fm.scales),
        exact_residuals=constraint_residuals(d, fm.scales),
        effective_sample_size=effective_sample_size(weights),
        ks_per_covariate=ks,
        covariate_names=table.column_names if table is not None else (),
        kernel=None if gram is None else kernel_imbalance(gram, treatment, weights),
    )

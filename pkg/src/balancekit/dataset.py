"""Tabular ingestion and basis expansion.

An :class:`ObservationTable` holds raw covariates, a binary treatment
indicator, and an optional outcome.  A :class:`BasisSpec` describes how the
covariates are expanded into a feature matrix, and assigns every feature
column a nonnegative scale factor.  Scale semantics used throughout the
toolkit:

* a finite positive scale bounds how much imbalance in that column matters
  (larger scale = imbalance matters more),
* ``inf`` marks a column that must be balanced exactly,
* ``0`` marks a column whose imbalance is ignored entirely.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

MAX_FEATURE_COLUMNS = 2**20

BASIS_KINDS = (
    "linear-with-intercept",
    "binary-interactions",
    "polynomial",
    "hermite",
    "custom-column-list",
)

INTERCEPT_LABEL = "1"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationTable:
    """Raw study data: one row per unit.

    covariates : (n, d) float array
    treatment  : (n,) array with entries in {0, 1}
    outcome    : optional (n,) float array
    column_names : d unique covariate labels
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray | None
    column_names: tuple[str, ...]

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n, d = cov.shape
        if n < 2:
            raise DataError(f"need at least 2 units, got {n}")
        if not np.all(np.isfinite(cov)):
            raise DataError("covariates contain missing or non-finite entries")
        w = np.asarray(self.treatment)
        if w.shape != (n,):
            raise DataError("treatment length does not match covariates")
        if not np.isin(w, (0, 1)).all():
            bad = sorted(set(np.unique(w).tolist()) - {0, 1})
            raise DataError(f"non-binary treatment values: {bad}")
        w = w.astype(np.int8)
        y = self.outcome
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape != (n,):
                raise DataError("outcome length does not match covariates")
            if not np.all(np.isfinite(y)):
                raise DataError("outcome contains missing or non-finite entries")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != d:
            raise DataError(f"expected {d} column names, got {len(names)}")
        if len(set(names)) != d:
            raise DataError("duplicate covariate names")
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "treatment", _readonly(w))
        object.__setattr__(self, "outcome", None if y is None else _readonly(y))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated


@dataclass(frozen=True)
class BasisSpec:
    """How to expand covariates into feature columns with scale factors.

    kind       : one of :data:`BASIS_KINDS`
    max_order  : interaction order cap (binary-interactions)
    decay      : per-order scale decay in (0, 1]; default scale of a column of
                 order r is ``decay ** r``
    degree     : total polynomial degree (polynomial / hermite)
    columns    : raw column labels to keep (custom-column-list); the token
                 ``"1"`` adds an intercept
    scales     : per-label scale overrides; ``inf`` allowed
    """

    kind: str
    max_order: int | None = None
    decay: float = 1.0
    degree: int | None = None
    columns: tuple[str, ...] | None = None
    scales: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.kind == "binary-interactions":
            if self.max_order is None or self.max_order < 0:
                raise ConfigError("binary-interactions needs max_order >= 0")
        if self.kind in ("polynomial", "hermite"):
            if self.degree is None or self.degree < 1:
                raise ConfigError(f"{self.kind} needs degree >= 1")
        if self.kind == "custom-column-list" and not self.columns:
            raise ConfigError("custom-column-list needs a non-empty column list")

    @staticmethod
    def from_dict(cfg: Mapping) -> "BasisSpec":
        """Build from a JSON-style mapping with keys
        {kind, max_order, decay, degree, columns, scales}."""
        known = {"kind", "max_order", "decay", "degree", "columns", "scales"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown basis config keys: {sorted(extra)}")
        scales = {str(k): _parse_scale(v) for k, v in dict(cfg.get("scales") or {}).items()}
        columns = cfg.get("columns")
        return BasisSpec(
            kind=cfg.get("kind", "linear-with-intercept"),
            max_order=cfg.get("max_order"),
            decay=float(cfg.get("decay", 1.0)),
            degree=cfg.get("degree"),
            columns=None if columns is None else tuple(columns),
            scales=scales,
        )


def _parse_scale(v) -> float:
    if isinstance(v, str):
        if v.lower() in ("inf", "infinity", "+inf"):
            return math.inf
        v = float(v)
    v = float(v)
    if math.isnan(v) or v < 0:
        raise ConfigError(f"scale must be in [0, inf], got {v}")
    return v


@dataclass(frozen=True)
class FeatureMatrix:
    """Basis-expanded covariates with per-column scale factors.

    ``standardization`` holds per-column (center, spread) pairs when
    :func:`standardize` has been applied; it is ``None`` for raw features.
    ``notes`` records non-fatal events such as dropped constant columns.
    """

    values: np.ndarray
    scales: np.ndarray
    labels: tuple[str, ...]
    intercept_index: int | None
    spec: BasisSpec | None = None
    source_columns: tuple[str, ...] = ()
    standardization: tuple[np.ndarray, np.ndarray] | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        s = np.asarray(self.scales, dtype=float)
        if v.ndim != 2 or v.shape[1] < 1:
            raise DataError("feature matrix must be 2-d with at least one column")
        p = v.shape[1]
        if s.shape != (p,):
            raise DataError("scales length does not match feature count")
        if np.any(np.isnan(s)) or np.any(s < 0):
            raise DataError("scales must be nonnegative (inf allowed)")
        labels = tuple(str(c) for c in self.labels)
        if len(labels) != p or len(set(labels)) != p:
            raise DataError("labels must be unique and match the feature count")
        ix = self.intercept_index
        if ix is not None and not np.allclose(v[:, ix], 1.0):
            raise DataError("intercept column is not constant 1")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "scales", _readonly(s))
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def load_csv(path, schema: Mapping) -> ObservationTable:
    """Read a UTF-8, header-first CSV into an :class:`ObservationTable`.

    ``schema`` names the column roles: ``{"treatment": name,
    "outcome": name or None, "covariates": [names] or None}``.  When
    ``covariates`` is omitted, all remaining columns are used.
    """
    treatment_col = schema.get("treatment")
    if not treatment_col:
        raise ConfigError("schema must name a treatment column")
    outcome_col = schema.get("outcome")
    covariate_cols = schema.get("covariates")

    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise DataError(f"{path}: duplicate column names {dupes}")
        rows = [r for r in reader if r]

    index = {name: i for i, name in enumerate(header)}
    for role, name in (("treatment", treatment_col), ("outcome", outcome_col)):
        if name is not None and name not in index:
            raise DataError(f"{path}: {role} column {name!r} not found")
    if covariate_cols is None:
        covariate_cols = [c for c in header if c not in (treatment_col, outcome_col)]
    else:
        covariate_cols = list(covariate_cols)
        missing = [c for c in covariate_cols if c not in index]
        if missing:
            raise DataError(f"{path}: covariate columns not found: {missing}")

    def parse(row_no, row, col):
        cell = row[index[col]].strip()
        try:
            return float(cell)
        except ValueError:
            raise DataError(
                f"{path}: non-numeric cell {cell!r} in column {col!r}, row {row_no}"
            ) from None

    n = len(rows)
    if any(len(r) != len(header) for r in rows):
        raise DataError(f"{path}: ragged rows")
    cov = np.empty((n, len(covariate_cols)))
    w = np.empty(n)
    y = np.empty(n) if outcome_col else None
    for i, row in enumerate(rows):
        for j, c in enumerate(covariate_cols):
            cov[i, j] = parse(i + 2, row, c)
        w[i] = parse(i + 2, row, treatment_col)
        if y is not None:
            y[i] = parse(i + 2, row, outcome_col)
    if not np.isin(w, (0.0, 1.0)).all():
        raise DataError(f"{path}: non-binary treatment values in column {treatment_col!r}")
    return ObservationTable(cov, w.astype(np.int8), y, tuple(covariate_cols))


# ---------------------------------------------------------------------------
# basis expansion

def _multi_indices(d: int, max_total: int, binary: bool):
    """Exponent vectors in graded lexicographic order (by total order,
    then lexicographic)."""
    out = []
    for total in range(max_total + 1):
        if binary:
            for pos in itertools.combinations(range(d), total):
                j = [0] * d
                for q in pos:
                    j[q] = 1
                out.append(tuple(j))
        else:
            out.extend(sorted(_compositions(d, total)))
    return out


def _compositions(d: int, total: int):
    if d == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(d - 1, total - first):
            yield (first,) + rest


def _count_columns(spec: BasisSpec, d: int) -> int:
    if spec.kind == "linear-with-intercept":
        return d + 1
    if spec.kind == "binary-interactions":
        return sum(math.comb(d, r) for r in range(spec.max_order + 1))
    if spec.kind in ("polynomial", "hermite"):
        return math.comb(d + spec.degree, spec.degree)
    return len(spec.columns)


def _hermite(x: np.ndarray, k: int) -> np.ndarray:
    # probabilists' convention: He0=1, He1=x, He_{k+1} = x He_k - k He_{k-1}
    if k == 0:
        return np.ones_like(x)
    prev, cur = np.ones_like(x), x
    for kk in range(1, k):
        prev, cur = cur, x * cur - kk * prev
    return cur


def _index_label(j: Sequence[int], names: Sequence[str], hermite: bool) -> str:
    parts = []
    for e, name in zip(j, names):
        if e == 0:
            continue
        if hermite:
            parts.append(f"He{e}({name})")
        elif e == 1:
            parts.append(name)
        else:
            parts.append(f"{name}^{e}")
    return "*".join(parts) if parts else INTERCEPT_LABEL


def _expand_matrix(spec: BasisSpec, X: np.ndarray, names: Sequence[str]):
    """Return (values, labels, orders) for the raw basis on rows of X."""
    n, d = X.shape
    if spec.kind == "binary-interactions" and spec.max_order > d:
        raise ConfigError(f"max_order {spec.max_order} exceeds covariate count {d}")
    n_cols = _count_columns(spec, d)
    if n_cols > MAX_FEATURE_COLUMNS:
        raise ConfigError(
            f"basis would produce {n_cols} columns, over the cap {MAX_FEATURE_COLUMNS}"
        )

    cols: list[np.ndarray] = []
    labels: list[str] = []
    orders: list[int] = []

    if spec.kind == "linear-with-intercept":
        cols.append(np.ones(n))
        labels.append(INTERCEPT_LABEL)
        orders.append(0)
        for jcol, name in enumerate(names):
            cols.append(X[:, jcol].copy())
            labels.append(name)
            orders.append(1)
    elif spec.kind == "binary-interactions":
        if not np.isin(X, (0.0, 1.0)).all():
            raise DataError("binary-interactions basis requires covariates in {0, 1}")
        for j in _multi_indices(d, spec.max_order, binary=True):
            active = [q for q, e in enumerate(j) if e]
            col = np.ones(n)
            for q in active:
                col = col * X[:, q]
            cols.append(col)
            labels.append(_index_label(j, names, hermite=False))
            orders.append(len(active))
    elif spec.kind in ("polynomial", "hermite"):
        herm = spec.kind == "hermite"
        for j in _multi_indices(d, spec.degree, binary=False):
            col = np.ones(n)
            for q, e in enumerate(j):
                if e:
                    col = col * (_hermite(X[:, q], e) if herm else X[:, q] ** e)
            cols.append(col)
            labels.append(_index_label(j, names, hermite=herm))
            orders.append(sum(j))
    else:  # custom-column-list
        for name in spec.columns:
            if name == INTERCEPT_LABEL:
                cols.append(np.ones(n))
                labels.append(INTERCEPT_LABEL)
                orders.append(0)
                continue
            if name not in names:
                raise ConfigError(f"unknown column {name!r} in custom basis")
            cols.append(X[:, list(names).index(name)].copy())
            labels.append(name)
            orders.append(1)
    return np.column_stack(cols), labels, orders


def expand_basis(table: ObservationTable, spec: BasisSpec) -> FeatureMatrix:
    """Expand covariates into feature columns according to ``spec``.

    Column order is deterministic: graded lexicographic over exponent
    vectors.  A column of interaction/power order ``r`` gets the default
    scale ``decay ** r`` (``inf`` for the intercept), which ``spec.scales``
    may override per label.
    """
    names = table.column_names
    values, labels, orders = _expand_matrix(spec, table.covariates, names)
    scales = np.empty(len(labels))
    for k, (label, order) in enumerate(zip(labels, orders)):
        if label in spec.scales:
            scales[k] = spec.scales[label]
        elif label == INTERCEPT_LABEL:
            scales[k] = math.inf
        else:
            scales[k] = spec.decay**order
    intercept = labels.index(INTERCEPT_LABEL) if INTERCEPT_LABEL in labels else None
    return FeatureMatrix(
        values=values,
        scales=scales,
        labels=tuple(labels),
        intercept_index=intercept,
        spec=spec,
        source_columns=names,
    )


def standardize(fm: FeatureMatrix) -> FeatureMatrix:
    """Center and scale every non-intercept column to unit sample spread.

    Spread is the standard deviation with denominator n.  Constant
    non-intercept columns cannot be standardized; they are dropped and the
    event is recorded in ``notes``.
    """
    if fm.standardization is not None:
        raise DataError("feature matrix is already standardized")
    V = fm.values
    center = V.mean(axis=0)
    spread = V.std(axis=0)
    keep = np.ones(fm.p, dtype=bool)
    notes = list(fm.notes)
    if fm.intercept_index is not None:
        center[fm.intercept_index] = 0.0
        spread[fm.intercept_index] = 1.0
    for j in range(fm.p):
        if j == fm.intercept_index:
            continue
        if spread[j] == 0.0:
            keep[j] = False
            notes.append(f"dropped constant column {fm.labels[j]!r} during standardization")
    V = (V[:, keep] - center[keep]) / spread[keep]
    labels = tuple(l for l, k in zip(fm.labels, keep) if k)
    intercept = labels.index(INTERCEPT_LABEL) if INTERCEPT_LABEL in labels else None
    return FeatureMatrix(
        values=V,
        scales=fm.scales[keep],
        labels=labels,
        intercept_index=intercept,
        spec=fm.spec,
        source_columns=fm.source_columns,
        standardization=(center[keep], spread[keep]),
        notes=tuple(notes),
    )


def destandardize(fm: FeatureMatrix) -> FeatureMatrix:
    """Invert :func:`standardize`, recovering original column values."""
    if fm.standardization is None:
        raise DataError("feature matrix is not standardized")
    center, spread = fm.standardization
    return replace(fm, values=fm.values * spread + center, standardization=None)


def evaluate_features(fm: FeatureMatrix, covariates: np.ndarray) -> np.ndarray:
    """Evaluate ``fm``'s basis (and standardization, if any) on new rows.

    ``covariates`` columns must follow ``fm.source_columns`` order.  Used to
    build balance targets from external samples or synthetic draws.
    """
    if fm.spec is None:
        raise ConfigError("feature matrix does not carry a basis spec")
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    if X.shape[1] != len(fm.source_columns):
        raise DataError(
            f"expected {len(fm.source_columns)} covariates, got {X.shape[1]}"
        )
    vals, raw_labels, _ = _expand_matrix(fm.spec, X, fm.source_columns)
    pos = {l: k for k, l in enumerate(raw_labels)}
    try:
        order = [pos[l] for l in fm.labels]
    except KeyError as e:
        raise DataError(f"basis column {e} cannot be rebuilt for new data") from None
    vals = vals[:, order]
    if fm.standardization is not None:
        center, spread = fm.standardization
        vals = (vals - center) / spread
    return vals

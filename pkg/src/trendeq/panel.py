"""Balanced-panel data model, double-demeaning, and placebo-trend estimation.

The canonical design has two groups observed over ``T + 2`` periods: the first
``T + 1`` periods are untreated, period ``T + 1`` is the base period, and
treatment starts in ``T + 2``.  Pooled OLS on double-demeaned data estimates
one placebo coefficient per pre-base period; those coefficients are what the
equivalence tests in :mod:`trendeq.equivalence` consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from .errors import RankError, ValidationError

#: Subsample fractions used by default for the self-normalized trend statistic.
DEFAULT_GRID: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)

_BALANCE_REPORT_LIMIT = 10


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PanelDataset:
    """A validated balanced panel in wide form.

    Attributes
    ----------
    outcomes : ndarray, shape (n, n_periods)
        Outcome of unit ``i`` in period ``t`` (periods are 1-based internally;
        column ``j`` holds period ``j + 1``).
    group : ndarray or None, shape (n,)
        Binary treatment-group indicator (canonical mode).
    cohort : ndarray or None, shape (n,)
        First treatment period per unit, ``np.inf`` for never-treated
        (staggered mode).  Exactly one of ``group``/``cohort`` is set.
    covariates : ndarray or None, shape (n, p)
        Time-invariant unit covariates (staggered mode only).
    base_period : int
        1-based index of the base period (the last pre-treatment period).
    unit_labels, time_labels : ndarray
        Original identifiers, kept for error messages and reports.
    """

    outcomes: np.ndarray
    group: np.ndarray | None
    cohort: np.ndarray | None
    covariates: np.ndarray | None
    base_period: int
    unit_labels: np.ndarray
    time_labels: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 2 or y.shape[0] < 2 or y.shape[1] < 2:
            raise ValidationError("panel needs at least 2 units and 2 periods")
        n, P = y.shape
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes contain non-finite values")
        if (self.group is None) == (self.cohort is None):
            raise ValidationError("exactly one of group/cohort must be given")
        if not 1 <= int(self.base_period) <= P:
            raise ValidationError(
                f"base_period index {self.base_period} outside 1..{P}"
            )
        object.__setattr__(self, "outcomes", _readonly(y))
        object.__setattr__(self, "base_period", int(self.base_period))
        if self.group is not None:
            g = np.asarray(self.group)
            if g.shape != (n,) or not np.isin(g, (0, 1)).all():
                raise ValidationError("group must be a length-n vector of 0/1")
            g = g.astype(np.int64)
            if not 0 < int(g.sum()) < n:
                raise ValidationError(
                    "both treatment and control groups must be non-empty"
                )
            object.__setattr__(self, "group", _readonly(g))
        if self.cohort is not None:
            c = np.asarray(self.cohort, dtype=float)
            if c.shape != (n,):
                raise ValidationError("cohort must be a length-n vector")
            finite = c[np.isfinite(c)]
            if finite.size and (
                np.any(finite != np.round(finite))
                or np.any(finite <= self.base_period)
                or np.any(finite > P)
            ):
                bad = sorted(set(finite[(finite <= self.base_period) | (finite > P) | (finite != np.round(finite))]))
                raise ValidationError(
                    f"unknown cohort label(s) {bad}: adoption periods must be "
                    f"integers in {self.base_period + 1}..{P} or inf"
                )
            object.__setattr__(self, "cohort", _readonly(c))
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 2 or x.shape[0] != n:
                raise ValidationError("covariates must have shape (n, p)")
            object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "unit_labels", _readonly(np.asarray(self.unit_labels)))
        object.__setattr__(self, "time_labels", _readonly(np.asarray(self.time_labels)))
        if self.unit_labels.shape != (n,) or self.time_labels.shape != (P,):
            raise ValidationError("label arrays do not match panel dimensions")

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def T(self) -> int:
        """Number of placebo (pre-base) periods."""
        return self.base_period - 1

    @property
    def is_staggered(self) -> bool:
        return self.cohort is not None

    @classmethod
    def from_arrays(
        cls,
        outcomes: np.ndarray,
        *,
        group: np.ndarray | None = None,
        cohort: np.ndarray | None = None,
        covariates: np.ndarray | None = None,
        base_period: int | None = None,
        unit_labels: np.ndarray | None = None,
        time_labels: np.ndarray | None = None,
    ) -> "PanelDataset":
        """Build a panel directly from arrays (units 0..n-1, periods 1..P)."""
        y = np.asarray(outcomes, dtype=float)
        n, P = y.shape
        if base_period is None:
            base_period = P
        if unit_labels is None:
            unit_labels = np.arange(n)
        if time_labels is None:
            time_labels = np.arange(1, P + 1)
        return cls(
            outcomes=y,
            group=group,
            cohort=cohort,
            covariates=covariates,
            base_period=base_period,
            unit_labels=np.asarray(unit_labels),
            time_labels=np.asarray(time_labels),
        )


@dataclass(frozen=True)
class DemeanedPanel:
    """Double-demeaned outcomes and placebo regressors for a unit subset.

    ``ddY[i, t]`` subtracts the unit mean (over the model periods), the period
    mean over ``subset``, and adds back the subset grand mean.  ``ddW`` applies
    the same transform to each placebo regressor column, so both row sums over
    periods and column sums over the subset vanish.
    """

    ddY: np.ndarray  # (m, P)
    ddW: np.ndarray  # (m, P, K)
    subset: np.ndarray  # (m,) global unit indices

    def __post_init__(self) -> None:
        object.__setattr__(self, "ddY", _readonly(np.asarray(self.ddY, dtype=float)))
        object.__setattr__(self, "ddW", _readonly(np.asarray(self.ddW, dtype=float)))
        object.__setattr__(self, "subset", _readonly(np.asarray(self.subset, dtype=np.int64)))


@dataclass(frozen=True)
class PretrendFit:
    """Pooled-OLS fit of the placebo coefficients on demeaned data.

    Attributes
    ----------
    beta_hat : ndarray, shape (K,)
        Placebo coefficient estimates, one per tested cell.
    residuals : ndarray, shape (m, P)
        Per-unit residual vectors (demeaned scale).
    gram : ndarray, shape (K, K)
        ``(1/m) sum_i W_i' W_i`` over the demeaned regressors.
    n : int
        Number of units entering the fit.
    T : int
        Number of estimated placebo coefficients.
    demeaned : DemeanedPanel
        The design the fit was computed on.
    labels : tuple of str
        Human-readable name per coefficient.
    """

    beta_hat: np.ndarray
    residuals: np.ndarray
    gram: np.ndarray
    n: int
    T: int
    demeaned: DemeanedPanel
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta_hat", _readonly(np.asarray(self.beta_hat, dtype=float)))
        object.__setattr__(self, "residuals", _readonly(np.asarray(self.residuals, dtype=float)))
        object.__setattr__(self, "gram", _readonly(np.asarray(self.gram, dtype=float)))

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.beta_hat)))

    @property
    def mean_coef(self) -> float:
        return float(np.mean(self.beta_hat))

    @property
    def rms_sq(self) -> float:
        return float(np.dot(self.beta_hat, self.beta_hat) / self.T)


@dataclass(frozen=True)
class SequentialPath:
    """Squared-RMS placebo trajectory over nested unit subsamples.

    ``rms_sq[k]`` is the squared RMS of the placebo fit on the first
    ``floor(n * grid[k])`` units of a seeded permutation; ``v_hat`` is the
    root-mean-square deviation of the partial values from the full-sample one
    and acts as the self-normalizer of the RMS equivalence test.
    """

    grid: tuple[float, ...]
    rms_sq: np.ndarray
    rms_sq_full: float
    v_hat: float
    permutation_seed: int | tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rms_sq", _readonly(np.asarray(self.rms_sq, dtype=float)))


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def load_panel(
    source: str | IO[str],
    schema: Mapping[str, object] | str,
    base_period: object | None = None,
) -> PanelDataset:
    """Read a long-format CSV into a validated :class:`PanelDataset`.

    Parameters
    ----------
    source : path or text stream
        CSV with a header row; UTF-8; decimal point.
    schema : mapping or str
        Column mapping with keys ``unit``, ``time``, ``outcome`` and either
        ``group`` (canonical) or ``cohort`` (staggered); staggered panels may
        add ``covariates`` (list of columns).  A string form
        ``"unit=u,time=t,outcome=y,group=g"`` is also accepted.
    base_period : optional
        Original time label of the base period.  Defaults to the largest time
        label, i.e. a panel of pre-treatment periods only.

    Raises
    ------
    ValidationError
        Missing columns, duplicate or missing (unit, time) pairs, non-binary
        group, unknown cohort labels, or time-varying covariates.
    """
    if isinstance(schema, str):
        schema = parse_schema(schema)
    required = {"unit", "time", "outcome"}
    if not required <= set(schema):
        raise ValidationError(f"schema must map {sorted(required)}; got {sorted(schema)}")
    if ("group" in schema) == ("cohort" in schema):
        raise ValidationError("schema must map exactly one of 'group' or 'cohort'")

    df = pd.read_csv(source)
    cols = [schema["unit"], schema["time"], schema["outcome"]]
    cols.append(schema.get("group") or schema.get("cohort"))
    cov_cols = list(schema.get("covariates") or [])
    missing_cols = [c for c in cols + cov_cols if c not in df.columns]
    if missing_cols:
        raise ValidationError(f"columns not found in input: {missing_cols}")

    unit_col, time_col = schema["unit"], schema["time"]
    dup = df.duplicated([unit_col, time_col])
    if dup.any():
        u, t = df.loc[dup.idxmax(), [unit_col, time_col]]
        raise ValidationError(f"duplicate rows for unit {u} time {t}")

    units = np.array(sorted(df[unit_col].unique(), key=_label_key))
    times = np.array(sorted(df[time_col].unique(), key=_label_key))
    wide = df.pivot(index=unit_col, columns=time_col, values=schema["outcome"])
    wide = wide.reindex(index=units, columns=times)
    if wide.isna().any().any():
        missing = []
        holes = np.argwhere(wide.isna().to_numpy())
        for i, j in holes[:_BALANCE_REPORT_LIMIT]:
            missing.append(f"unit {units[i]} missing time {times[j]}")
        more = "" if len(holes) <= _BALANCE_REPORT_LIMIT else f" (+{len(holes) - _BALANCE_REPORT_LIMIT} more)"
        raise ValidationError("unbalanced: " + "; ".join(missing) + more)

    outcomes = wide.to_numpy(dtype=float)

    def per_unit_constant(col: str, what: str) -> np.ndarray:
        by_unit = df.groupby(unit_col, sort=False)[col].nunique()
        if (by_unit > 1).any():
            bad = by_unit.index[by_unit > 1][0]
            raise ValidationError(f"{what} varies within unit {bad}")
        return df.drop_duplicates(unit_col).set_index(unit_col)[col].reindex(units).to_numpy()

    group = cohort = covariates = None
    if "group" in schema:
        group = per_unit_constant(schema["group"], "group")
        if not np.isin(group, (0, 1)).all():
            raise ValidationError(
                f"non-binary group values {sorted(set(group) - {0, 1})} in canonical mode"
            )
        group = group.astype(np.int64)
    else:
        raw = per_unit_constant(schema["cohort"], "cohort")
        cohort = np.array([_parse_cohort_label(v) for v in raw], dtype=float)
        if cov_cols:
            covariates = np.column_stack(
                [per_unit_constant(c, f"covariate {c!r}").astype(float) for c in cov_cols]
            )

    time_positions = {t: j + 1 for j, t in enumerate(times)}
    if base_period is None:
        base_index = len(times)
    else:
        if base_period not in time_positions:
            raise ValidationError(f"base period {base_period!r} is not a time label")
        base_index = time_positions[base_period]

    return PanelDataset(
        outcomes=outcomes,
        group=group,
        cohort=cohort,
        covariates=covariates,
        base_period=base_index,
        unit_labels=units,
        time_labels=times,
    )


def parse_schema(text: str) -> dict[str, object]:
    """Parse ``"unit=u,time=t,outcome=y,group=g[,x=c1+c2]"`` into a mapping."""
    out: dict[str, object] = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValidationError(f"bad schema fragment {part!r}")
        key, _, value = part.partition("=")
        key = key.strip()
        if key == "x":
            out["covariates"] = [v.strip() for v in value.split("+") if v.strip()]
        else:
            out[key] = value.strip()
    return out


def _label_key(v: object) -> tuple:
    # Sort numerically when possible, lexicographically otherwise.
    try:
        return (0, float(v))
    except (TypeError, ValueError):
        return (1, str(v))


def _parse_cohort_label(v: object) -> float:
    if isinstance(v, str):
        s = v.strip().lower()
        if s in ("inf", "never", "nevertreated", "never_treated"):
            return math.inf
        try:
            v = float(s)
        except ValueError:
            raise ValidationError(f"unknown cohort label {v!r}") from None
    x = float(v)
    if math.isinf(x) and x > 0:
        return math.inf
    if not math.isfinite(x) or x != round(x):
        raise ValidationError(f"unknown cohort label {v!r}")
    return x


def select_periods(ds: PanelDataset, time_labels: Sequence[object]) -> PanelDataset:
    """Restrict a panel to the given time labels; the last one becomes the base.

    Useful for testing shorter pre-treatment windows: the selection must be
    the placebo periods plus the base period, in panel time order.
    """
    positions = []
    available = list(ds.time_labels)
    for lab in time_labels:
        matches = [j for j, t in enumerate(available) if t == lab or str(t) == str(lab)]
        if not matches:
            raise ValidationError(f"time label {lab!r} not present (have {available})")
        positions.append(matches[0])
    positions = sorted(set(positions))
    if len(positions) < 2:
        raise ValidationError("need at least two periods (placebo + base)")
    return PanelDataset(
        outcomes=ds.outcomes[:, positions],
        group=ds.group,
        cohort=None if ds.cohort is None else ds.cohort,
        covariates=ds.covariates,
        base_period=len(positions),
        unit_labels=ds.unit_labels,
        time_labels=ds.time_labels[positions],
    )


# ---------------------------------------------------------------------------
# Double-demeaning and fitting
# ---------------------------------------------------------------------------

def _demean_two_way(m: np.ndarray) -> np.ndarray:
    """Subtract row means, column means, and add back the grand mean."""
    return m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()


def double_demean(
    ds: PanelDataset,
    subset: Sequence[int] | None = None,
    periods: Sequence[int] | None = None,
) -> DemeanedPanel:
    """Double-demean outcomes and placebo regressors over a unit subset.

    Unit means are taken over all model ``periods`` for each unit; period and
    grand means are taken over ``subset`` only, so subsample fits remain
    centered against their own cross-section.

    Parameters
    ----------
    ds : PanelDataset
        Canonical-mode panel.
    subset : sequence of int, optional
        Unit indices to demean against (default: all units).
    periods : sequence of int, optional
        1-based period indices of the estimation window (default
        ``1..base_period``); must not contain post-treatment periods and must
        include the base period.
    """
    if ds.group is None:
        raise ValidationError("double_demean expects a canonical (group) panel")
    if periods is None:
        periods = range(1, ds.base_period + 1)
    periods = sorted(set(int(p) for p in periods))
    if any(p < 1 or p > ds.n_periods for p in periods):
        raise ValidationError(f"periods out of range 1..{ds.n_periods}: {periods}")
    if any(p > ds.base_period for p in periods):
        bad = [p for p in periods if p > ds.base_period]
        raise ValidationError(f"periods {bad} are post-treatment (base is {ds.base_period})")
    if ds.base_period not in periods:
        raise ValidationError("periods must include the base period")
    coef_periods = [p for p in periods if p != ds.base_period]
    return _demean_cells(ds, periods, coef_periods, subset)


def _demean_cells(
    ds: PanelDataset,
    periods: Sequence[int],
    coef_periods: Sequence[int],
    subset: Sequence[int] | None,
) -> DemeanedPanel:
    if subset is None:
        subset = np.arange(ds.n)
    else:
        subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValidationError("empty unit subset")
    periods = list(periods)
    cols = [p - 1 for p in periods]
    y = ds.outcomes[subset][:, cols]
    g = ds.group[subset].astype(float)
    P = len(periods)
    dummies = np.zeros((P, len(coef_periods)))
    for k, p in enumerate(coef_periods):
        dummies[periods.index(p), k] = 1.0
    w = g[:, None, None] * dummies[None, :, :]
    ddY = _demean_two_way(y)
    ddW = (
        w
        - w.mean(axis=1, keepdims=True)
        - w.mean(axis=0, keepdims=True)
        + w.mean(axis=(0, 1), keepdims=True)
    )
    return DemeanedPanel(ddY=ddY, ddW=ddW, subset=subset)


def fit_from_demeaned(dm: DemeanedPanel, labels: tuple[str, ...]) -> PretrendFit:
    """Pooled OLS of demeaned outcomes on demeaned regressors."""
    m = dm.ddY.shape[0]
    gram = np.einsum("itl,itk->lk", dm.ddW, dm.ddW) / m
    diag = np.diag(gram)
    scale = max(float(diag.max(initial=0.0)), 1.0)
    dead = [labels[k] for k in range(len(labels)) if diag[k] <= 1e-12 * scale]
    if dead:
        raise RankError(f"no identifying variation for cell(s) {dead}")
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise RankError("placebo design is rank deficient (singular gram matrix)") from None
    target = np.einsum("itl,it->l", dm.ddW, dm.ddY) / m
    beta = _chol_solve(chol, target)
    residuals = dm.ddY - np.einsum("itl,l->it", dm.ddW, beta)
    return PretrendFit(
        beta_hat=beta,
        residuals=residuals,
        gram=gram,
        n=m,
        T=len(labels),
        demeaned=dm,
        labels=labels,
    )


def _chol_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    z = solve_triangular(chol, rhs, lower=True)
    return solve_triangular(chol.T, z, lower=False)


def _fit_cells(
    ds: PanelDataset,
    periods: Sequence[int],
    coef_periods: Sequence[int],
    subset: Sequence[int] | None = None,
) -> PretrendFit:
    subset_arr = np.arange(ds.n) if subset is None else np.asarray(subset, dtype=np.int64)
    g = ds.group[subset_arr]
    treated = int(g.sum())
    if treated == 0:
        raise RankError("subsample contains no treated units")
    if treated == subset_arr.size:
        raise RankError("subsample contains no control units")
    dm = _demean_cells(ds, periods, coef_periods, subset_arr)
    labels = tuple(str(ds.time_labels[p - 1]) for p in coef_periods)
    return fit_from_demeaned(dm, labels)


def fit_pretrend(ds: PanelDataset) -> PretrendFit:
    """Estimate the placebo coefficients on the pre-treatment window.

    Uses periods ``1..base_period`` only; ``beta_hat[l]`` estimates the
    group-mean outcome change of period ``l + 1`` relative to the base period.

    Raises
    ------
    RankError
        If the design is not identified (fewer than 2 units per group, or a
        degenerate cell).
    """
    if ds.group is None:
        raise ValidationError("fit_pretrend expects a canonical (group) panel; "
                              "use trendeq.staggered for cohort panels")
    if ds.T < 1:
        raise ValidationError("need at least one pre-base period")
    periods = list(range(1, ds.base_period + 1))
    coef_periods = periods[:-1]
    return _fit_cells(ds, periods, coef_periods)


def fit_full_model(ds: PanelDataset) -> PretrendFit:
    """Fit placebo cells plus post-treatment effect cells on all periods.

    Coefficients cover every period except the base; the post-base entries are
    treatment-effect estimates (the first of them is the immediate effect).
    """
    if ds.group is None:
        raise ValidationError("fit_full_model expects a canonical (group) panel")
    periods = list(range(1, ds.n_periods + 1))
    coef_periods = [p for p in periods if p != ds.base_period]
    return _fit_cells(ds, periods, coef_periods)


# ---------------------------------------------------------------------------
# Sequential subsample path
# ---------------------------------------------------------------------------

def _validate_grid(grid: Sequence[float]) -> tuple[float, ...]:
    g = tuple(float(x) for x in grid)
    if len(g) < 2:
        raise ValidationError("grid needs at least two points (one interior + 1.0)")
    if any(not 0.0 < x <= 1.0 for x in g):
        raise ValidationError(f"grid values must lie in (0, 1]: {g}")
    if any(b <= a for a, b in zip(g, g[1:])):
        raise ValidationError(f"grid must be strictly increasing: {g}")
    if abs(g[-1] - 1.0) > 1e-12:
        raise ValidationError("last grid value must be 1")
    return g[:-1] + (1.0,)


def _prefix_size(n: int, lam: float) -> int:
    return int(math.floor(n * lam + 1e-9))


def rms_path_from_subsets(
    n: int,
    grid: Sequence[float],
    seed: int | Sequence[int],
    fit_on_subset,
) -> SequentialPath:
    """Build a :class:`SequentialPath` from a subset-fitting callback.

    Units are permuted once with ``seed``; subsamples are nested prefixes of
    the permutation so the trajectory is a genuine partial-sum process.  The
    callback receives a sorted array of unit indices and returns a fit with a
    ``rms_sq`` property.
    """
    grid = _validate_grid(grid)
    perm = np.random.default_rng(seed).permutation(n)
    rms_sq = np.empty(len(grid))
    for k, lam in enumerate(grid):
        m = _prefix_size(n, lam)
        subset = np.sort(perm[:m])
        rms_sq[k] = fit_on_subset(subset).rms_sq
    full = float(rms_sq[-1])
    partial = rms_sq[:-1]
    v_hat = float(np.sqrt(np.mean((partial - full) ** 2)))
    seed_out = int(seed) if np.isscalar(seed) else tuple(int(s) for s in seed)
    return SequentialPath(
        grid=grid,
        rms_sq=rms_sq,
        rms_sq_full=full,
        v_hat=v_hat,
        permutation_seed=seed_out,
    )


def sequential_rms_path(
    ds: PanelDataset,
    grid: Sequence[float] = DEFAULT_GRID,
    seed: int | Sequence[int] = 0,
) -> SequentialPath:
    """Squared-RMS placebo path over nested random subsamples.

    Parameters
    ----------
    ds : PanelDataset
        Canonical-mode panel.
    grid : sequence of float
        Strictly increasing subsample fractions in ``(0, 1]`` ending at 1.
        The interior points carry the (uniform) weighting of the
        self-normalizer.
    seed : int
        Seed of the single unit permutation.

    Raises
    ------
    ValidationError
        If the smallest subsample has fewer than ``T + 2`` units.
    """
    grid = _validate_grid(grid)
    smallest = _prefix_size(ds.n, grid[0])
    if smallest < ds.T + 2:
        raise ValidationError(
            f"subsample of {smallest} units at fraction {grid[0]} is too small "
            f"to identify {ds.T} coefficients (need at least {ds.T + 2})"
        )
    periods = list(range(1, ds.base_period + 1))
    coef_periods = periods[:-1]

    def fit_on_subset(subset: np.ndarray) -> PretrendFit:
        return _fit_cells(ds, periods, coef_periods, subset)

    return rms_path_from_subsets(ds.n, grid, seed, fit_on_subset)

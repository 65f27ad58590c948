"""Staggered-adoption designs with cohort/time cells and placebo extraction.

Treatment cohorts adopt an absorbing treatment in different periods; the
never-treated group is the control.  The regression interacts cohort dummies
with period dummies, separately for post-adoption (treatment-effect) cells and
pre-adoption (placebo) cells, optionally with covariate main effects and
cell-specific covariate slopes centered at cohort means.  Placebo cells never
overlap treatment cells, so the extracted placebo vector is uncontaminated by
treatment effects and can be fed to every test in
:mod:`trendeq.equivalence`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .covariance import CovEstimate, cluster_robust_cov
from .errors import RankError, ValidationError
from .panel import (
    DemeanedPanel,
    PanelDataset,
    PretrendFit,
    SequentialPath,
    DEFAULT_GRID,
    fit_from_demeaned,
    rms_path_from_subsets,
    _readonly,
)

#: Metadata value recording that placebo covariances do not account for the
#: sampling error of the estimated cohort covariate means.
COHORT_MEAN_ADJUSTMENT = "none"


@dataclass(frozen=True)
class Column:
    """One design column: role plus the cohort/time/covariate it refers to."""

    role: str  # time | cov_time | treat | treat_cov | placebo | placebo_cov
    cohort: float | None = None
    time: int | None = None
    cov: int | None = None

    def label(self) -> str:
        parts = [self.role]
        if self.cohort is not None:
            parts.append(f"cohort={int(self.cohort)}")
        if self.time is not None:
            parts.append(f"t={self.time}")
        if self.cov is not None:
            parts.append(f"x{self.cov}")
        return " ".join(parts)


@dataclass(frozen=True)
class StaggeredDesign:
    """Within-transformed design for the staggered placebo regression."""

    cohorts: tuple[int, ...]
    columns: tuple[Column, ...]
    regressors: np.ndarray        # (n, P, C), unit-demeaned
    outcomes_within: np.ndarray   # (n, P), unit-demeaned
    placebo_index: tuple[int, ...]
    pooling_mask: frozenset
    cohort_means: dict
    base_period: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "regressors", _readonly(np.asarray(self.regressors, dtype=float)))
        object.__setattr__(self, "outcomes_within", _readonly(np.asarray(self.outcomes_within, dtype=float)))

    @property
    def placebo_labels(self) -> tuple[str, ...]:
        return tuple(
            f"cohort={int(self.columns[j].cohort)},t={self.columns[j].time}"
            for j in self.placebo_index
        )

    def control_pool(self) -> list[str]:
        """Cells acting as controls: never-treated, base period, pooled cells."""
        pool = ["never-treated cohort (all periods)", f"base period t={self.base_period} (all cohorts)"]
        pool += [f"cohort={m},t={k} (pooled placebo cell)" for m, k in sorted(self.pooling_mask)]
        return pool


@dataclass(frozen=True)
class StaggeredFit:
    """Full staggered regression fit (all cells, covariate slopes, time effects)."""

    design: StaggeredDesign
    coef: np.ndarray
    sigma_hat: np.ndarray  # covariance of sqrt(n)(coef - truth), unit-clustered
    residuals: np.ndarray  # (n, P)
    n: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "coef", _readonly(np.asarray(self.coef, dtype=float)))
        object.__setattr__(self, "sigma_hat", _readonly(np.asarray(self.sigma_hat, dtype=float)))
        object.__setattr__(self, "residuals", _readonly(np.asarray(self.residuals, dtype=float)))

    def coef_table(self) -> list[dict]:
        ses = np.sqrt(np.diag(self.sigma_hat) / self.n)
        return [
            {"label": col.label(), "estimate": float(b), "se_cluster": float(s)}
            for col, b, s in zip(self.design.columns, self.coef, ses)
        ]


@dataclass(frozen=True)
class PlaceboVector:
    """Placebo cell estimates plus everything the equivalence tests consume.

    ``fit`` is a reduced regression with the non-placebo columns partialled
    out; its coefficients, clustered covariance, and residuals coincide with
    the corresponding blocks of the full staggered fit, so the max/mean/RMS
    and bootstrap tests apply unchanged with ``T`` equal to the number of
    placebo cells.
    """

    values: np.ndarray
    labels: tuple[str, ...]
    fit: PretrendFit
    cov: CovEstimate
    cohort_mean_adjustment: str = COHORT_MEAN_ADJUSTMENT


def _placebo_cells(cohorts: Sequence[int], base: int, mask: frozenset) -> list[tuple[int, int]]:
    cells = []
    for m in cohorts:
        for k in range(1, m):
            if k != base and (m, k) not in mask:
                cells.append((m, k))
    return cells


def build_staggered_design(
    ds: PanelDataset,
    pooling_mask: Iterable[tuple[int, int]] | None = None,
) -> StaggeredDesign:
    """Construct the cohort/time cell design on a staggered panel.

    Parameters
    ----------
    ds : PanelDataset
        Staggered-mode panel (cohort labels, never-treated as ``inf``).
    pooling_mask : iterable of (cohort, period), optional
        Placebo cells to drop from the model; the corresponding observations
        then serve as additional controls, which widens the set of cells the
        parallel-trends reading must cover (see ``control_pool``).

    Raises
    ------
    ValidationError
        No never-treated units, a cohort with a single unit while covariates
        are present, or a mask entry that is not a placebo cell.
    """
    if ds.cohort is None:
        raise ValidationError("build_staggered_design expects a cohort panel")
    base = ds.base_period
    P = ds.n_periods
    cohort = ds.cohort
    never = ~np.isfinite(cohort)
    if not never.any():
        raise ValidationError("staggered designs need a never-treated cohort")
    finite = sorted(int(c) for c in set(cohort[np.isfinite(cohort)]))
    if not finite:
        raise ValidationError("no treated cohorts present")

    X = ds.covariates
    p = 0 if X is None else X.shape[1]
    counts = {c: int(np.sum(cohort == c)) for c in finite}
    counts[math.inf] = int(never.sum())
    if p and any(v < 2 for v in counts.values()):
        bad = [k for k, v in counts.items() if v < 2]
        raise ValidationError(
            f"cohort(s) {bad} have a single unit; covariate centering is degenerate"
        )

    mask = frozenset((int(m), int(k)) for m, k in (pooling_mask or ()))
    all_cells = set(_placebo_cells(finite, base, frozenset()))
    bad_mask = mask - all_cells
    if bad_mask:
        raise ValidationError(f"pooling mask entries are not placebo cells: {sorted(bad_mask)}")

    cohort_means = {}
    xdot = None
    if p:
        xdot = np.empty_like(X)
        for c in finite + [math.inf]:
            members = np.isfinite(cohort) & (cohort == c) if math.isfinite(c) else never
            mu = X[members].mean(axis=0)
            cohort_means[c] = mu
            xdot[members] = X[members] - mu

    n = ds.n
    columns: list[Column] = []
    blocks: list[np.ndarray] = []

    def period_dummy(s: int) -> np.ndarray:
        d = np.zeros(P)
        d[s - 1] = 1.0
        return d

    for s in range(1, P + 1):
        if s == base:
            continue
        columns.append(Column("time", time=s))
        blocks.append(np.broadcast_to(period_dummy(s), (n, P)).copy())
    for s in range(1, P + 1):
        if s == base:
            continue
        for j in range(p):
            columns.append(Column("cov_time", time=s, cov=j))
            blocks.append(np.outer(X[:, j], period_dummy(s)))
    for r in finite:
        g = (cohort == r).astype(float)
        for s in range(r, P + 1):
            columns.append(Column("treat", cohort=r, time=s))
            blocks.append(np.outer(g, period_dummy(s)))
            for j in range(p):
                columns.append(Column("treat_cov", cohort=r, time=s, cov=j))
                blocks.append(np.outer(g * xdot[:, j], period_dummy(s)))
    placebo_index = []
    for m, k in _placebo_cells(finite, base, mask):
        g = (cohort == m).astype(float)
        placebo_index.append(len(columns))
        columns.append(Column("placebo", cohort=m, time=k))
        blocks.append(np.outer(g, period_dummy(k)))
        for j in range(p):
            columns.append(Column("placebo_cov", cohort=m, time=k, cov=j))
            blocks.append(np.outer(g * xdot[:, j], period_dummy(k)))

    Z = np.stack(blocks, axis=2)  # (n, P, C)
    Z = Z - Z.mean(axis=1, keepdims=True)
    Yw = ds.outcomes - ds.outcomes.mean(axis=1, keepdims=True)
    return StaggeredDesign(
        cohorts=tuple(finite),
        columns=tuple(columns),
        regressors=Z,
        outcomes_within=Yw,
        placebo_index=tuple(placebo_index),
        pooling_mask=mask,
        cohort_means=cohort_means,
        base_period=base,
    )


def fit_staggered(ds: PanelDataset, design: StaggeredDesign) -> StaggeredFit:
    """Pooled OLS on the within-transformed staggered design.

    Reported covariance is clustered on units and does *not* adjust for the
    estimation of cohort covariate means (see ``COHORT_MEAN_ADJUSTMENT``).
    """
    n, P, C = design.regressors.shape
    Zf = design.regressors.reshape(n * P, C)
    yf = design.outcomes_within.reshape(n * P)
    coef, _, rank, _ = np.linalg.lstsq(Zf, yf, rcond=None)
    if rank < C:
        raise RankError(
            f"staggered design is rank deficient ({rank} < {C}); "
            "check for empty cells or degenerate covariates"
        )
    resid = (yf - Zf @ coef).reshape(n, P)
    gram = Zf.T @ Zf / n
    scores = np.einsum("itc,it->ic", design.regressors, resid)
    middle = scores.T @ scores / n
    gram_inv = np.linalg.inv(gram)
    sigma = gram_inv @ middle @ gram_inv
    sigma = (sigma + sigma.T) / 2.0
    return StaggeredFit(design=design, coef=coef, sigma_hat=sigma, residuals=resid, n=n)


def extract_placebo_vector(sfit: StaggeredFit) -> PlaceboVector:
    """Stack the placebo cell estimates and package them for the tests.

    The non-placebo columns are partialled out of outcomes and placebo
    columns, which reproduces the full fit's placebo coefficients, residuals,
    and clustered covariance block exactly while giving the bootstrap the
    reduced design it needs.
    """
    design = sfit.design
    n, P, C = design.regressors.shape
    pidx = np.asarray(design.placebo_index, dtype=np.int64)
    if pidx.size == 0:
        raise ValidationError("design has no placebo cells (all pooled away?)")
    rest = np.setdiff1d(np.arange(C), pidx)
    Zf = design.regressors.reshape(n * P, C)
    yf = design.outcomes_within.reshape(n * P)
    nuis = Zf[:, rest]
    targets = np.column_stack([Zf[:, pidx], yf])
    gamma, _, rank, _ = np.linalg.lstsq(nuis, targets, rcond=None)
    if rank < rest.size:
        raise RankError("nuisance block of the staggered design is rank deficient")
    resid_targets = targets - nuis @ gamma
    K = pidx.size
    ddW = resid_targets[:, :K].reshape(n, P, K)
    ddY = resid_targets[:, K].reshape(n, P)
    dm = DemeanedPanel(ddY=ddY, ddW=ddW, subset=np.arange(n))
    fit = fit_from_demeaned(dm, design.placebo_labels)
    cov = cluster_robust_cov(fit)
    return PlaceboVector(
        values=fit.beta_hat,
        labels=design.placebo_labels,
        fit=fit,
        cov=cov,
    )


def _subset_panel(ds: PanelDataset, subset: np.ndarray) -> PanelDataset:
    return PanelDataset(
        outcomes=ds.outcomes[subset],
        group=None,
        cohort=ds.cohort[subset],
        covariates=None if ds.covariates is None else ds.covariates[subset],
        base_period=ds.base_period,
        unit_labels=ds.unit_labels[subset],
        time_labels=ds.time_labels,
    )


def staggered_rms_path(
    ds: PanelDataset,
    grid: Sequence[float] = DEFAULT_GRID,
    seed: int | Sequence[int] = 0,
    pooling_mask: Iterable[tuple[int, int]] | None = None,
) -> SequentialPath:
    """Squared-RMS path of the placebo vector over nested unit subsamples.

    The design (including covariate centering) is rebuilt on every prefix, so
    cross-sectional statistics always come from the subsample.  Every prefix
    must retain all cohorts; increase the smallest grid fraction if a cohort
    is rare.
    """
    if ds.cohort is None:
        raise ValidationError("staggered_rms_path expects a cohort panel")
    full_design = build_staggered_design(ds, pooling_mask)
    expected = full_design.cohorts

    def fit_on_subset(subset: np.ndarray) -> PretrendFit:
        sub = _subset_panel(ds, subset)
        if not np.any(~np.isfinite(sub.cohort)):
            raise RankError("subsample lost the never-treated cohort; "
                            "use a larger smallest grid fraction")
        design = build_staggered_design(sub, pooling_mask)
        if design.cohorts != expected:
            missing = sorted(set(expected) - set(design.cohorts))
            raise RankError(f"subsample lost cohort(s) {missing}; "
                            "use a larger smallest grid fraction")
        return extract_placebo_vector(fit_staggered(sub, design)).fit

    return rms_path_from_subsets(ds.n, grid, seed, fit_on_subset)

"""Equivalence tests for placebo trend coefficients.

All tests share the same logic: the null hypothesis states that pre-treatment
trend differences are at least as large as a user threshold, so *rejection* is
evidence that they are negligible.  Four families are provided:

- ``iu_max_test``: per-coefficient folded-normal tests combined by the
  intersection-union principle (level-valid, conservative for many cells).
- ``bootstrap_max_test``: a parametric or wild-cluster bootstrap of the
  max-norm statistic around a null-constrained estimator (more powerful).
- ``mean_test``: folded-normal test of the average coefficient.
- ``rms_test``: self-normalized test of the squared RMS, with pivotal
  critical values from :func:`trendeq.dist.simulate_w_quantile`.

Each test reports the smallest threshold at which it would still reject; small
values relative to the estimated treatment effect support the parallel-trends
assumption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .covariance import CovEstimate, spherical_sigma
from .dist import WQuantileTable, folded_normal_cdf, folded_normal_quantile
from .errors import NumericalError, ValidationError
from .panel import PretrendFit, SequentialPath
from .solvers import box_qp

VARIANTS = ("gaussian", "wild_cluster")
_KIND_BY_VARIANT = {"gaussian": "boot_max", "wild_cluster": "cluster_boot_max"}
MIN_BOOTSTRAP_B = 500


@dataclass(frozen=True)
class TestResult:
    """Outcome of one equivalence test.

    Attributes
    ----------
    kind : str
        ``iu_max``, ``boot_max``, ``cluster_boot_max``, ``mean`` or ``rms``.
    statistic : float
        Max-norm, average, or squared RMS of the coefficients per kind.
    critical_value : float or ndarray
        Rejection cut-off; a per-coefficient vector for ``iu_max``.
    threshold : float
        The equivalence threshold the test was run at.
    alpha : float
        Nominal level.
    reject : bool
        True when the data support negligible trend differences.
    minimal_threshold : float or None
        Smallest threshold at which the test rejects (same data, same seed).
    diagnostics : dict
        Kind-specific extras (bootstrap draws, per-cell margins, table hash).
    """

    kind: str
    statistic: float
    critical_value: float | np.ndarray
    threshold: float
    alpha: float
    reject: bool
    minimal_threshold: float | None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        crit = self.critical_value
        if isinstance(crit, np.ndarray):
            crit = [float(c) for c in crit]
        return {
            "kind": self.kind,
            "statistic": float(self.statistic),
            "critical_value": crit,
            "threshold": float(self.threshold),
            "alpha": float(self.alpha),
            "reject": bool(self.reject),
            "minimal_threshold": None if self.minimal_threshold is None else float(self.minimal_threshold),
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class RmsConfidenceInterval:
    """Interval for the squared RMS of the placebo coefficients."""

    lower: float
    upper: float
    lower_raw: float
    alpha: float

    def covers(self, value: float) -> bool:
        return self.lower_raw <= value <= self.upper


def _check_conformable(fit: PretrendFit, cov: CovEstimate) -> None:
    if cov.sigma_hat.shape != (fit.T, fit.T):
        raise ValidationError(
            f"covariance is {cov.sigma_hat.shape}, fit has {fit.T} coefficients"
        )


def _check_alpha(alpha: float, upper: float = 1.0) -> None:
    if not 0.0 < alpha < upper:
        raise ValidationError(f"alpha must be in (0, {upper}): {alpha}")


def _min_threshold_folded(stat: float, se: float, alpha: float) -> float:
    """Smallest folded-normal threshold rejecting for |statistic| = ``stat``.

    The rejection region grows with the threshold, so the minimum solves
    ``P(|N(d, se^2)| <= stat) = alpha`` in ``d``; when even a vanishing
    threshold rejects, the infimum 0 is returned.
    """
    x = abs(stat)
    if se <= 0.0:
        return x
    if x == 0.0 or folded_normal_cdf(x, 0.0, se) <= alpha:
        return 0.0
    hi = x + se
    while folded_normal_cdf(x, hi, se) > alpha:
        hi *= 2.0
    return float(brentq(
        lambda d: folded_normal_cdf(x, d, se) - alpha, 0.0, hi, xtol=1e-12,
    ))


# ---------------------------------------------------------------------------
# Intersection-union max test
# ---------------------------------------------------------------------------

def iu_max_test(fit: PretrendFit, cov: CovEstimate, delta: float, alpha: float) -> TestResult:
    """Test whether every placebo coefficient is below ``delta`` in magnitude.

    Rejects when each ``|beta_hat[t]|`` falls below the ``alpha`` quantile of
    the folded normal with mean ``delta`` and that coefficient's estimated
    standard error.  Being an intersection-union test it is level-valid but
    conservative when several coefficients sit near the boundary.
    """
    if delta <= 0.0:
        raise ValidationError(f"delta must be positive: {delta}")
    _check_alpha(alpha)
    _check_conformable(fit, cov)
    ses = cov.coef_se(fit.n)
    crit = np.array([
        folded_normal_quantile(delta, se, alpha) if se > 0 else 0.0 for se in ses
    ])
    abs_beta = np.abs(fit.beta_hat)
    reject = bool(np.all(abs_beta < crit))
    per_cell = [_min_threshold_folded(b, se, alpha) for b, se in zip(abs_beta, ses)]
    return TestResult(
        kind="iu_max",
        statistic=fit.max_abs,
        critical_value=crit,
        threshold=float(delta),
        alpha=float(alpha),
        reject=reject,
        minimal_threshold=float(max(per_cell)),
        diagnostics={
            "labels": list(fit.labels),
            "coef_se": [float(s) for s in ses],
            "per_cell_margin": [float(c - b) for b, c in zip(abs_beta, crit)],
            "per_cell_min_threshold": [float(v) for v in per_cell],
        },
    )


# ---------------------------------------------------------------------------
# Constrained estimation and bootstrap max test
# ---------------------------------------------------------------------------

def constrained_estimate(fit: PretrendFit, delta: float) -> np.ndarray:
    """Least-squares coefficients under a max-norm equal to ``delta``.

    Minimizes the demeaned sum of squared residuals over the boundary of the
    box ``[-delta, delta]^T``.  When the unconstrained optimum already has
    max-norm at least ``delta`` the box solution lies on the boundary and is
    returned directly; otherwise all ``2T`` faces are solved as reduced
    box-constrained problems and the SSR-minimal candidate wins.  Ties go to
    the smallest active coordinate, positive sign first, for determinism.
    """
    if delta <= 0.0:
        raise ValidationError(f"delta must be positive: {delta}")
    beta_u = fit.beta_hat
    A = fit.n * fit.gram

    def excess_ssr(beta: np.ndarray) -> float:
        d = beta - beta_u
        return float(d @ A @ d)

    if fit.max_abs >= delta:
        return box_qp(A, A @ beta_u, -delta, delta)

    k = fit.T
    best: np.ndarray | None = None
    best_q = math.inf
    rest = np.arange(k)
    for l in range(k):
        others = np.delete(rest, l)
        for sign in (1.0, -1.0):
            cand = np.empty(k)
            cand[l] = sign * delta
            if others.size:
                A_rr = A[np.ix_(others, others)]
                b_r = (A @ beta_u)[others] - A[others, l] * cand[l]
                cand[others] = box_qp(A_rr, b_r, -delta, delta)
            q = excess_ssr(cand)
            if q < best_q:
                best, best_q = cand, q
    assert best is not None
    return best


def _resolve_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        raise ValidationError(
            "pass a seed (int or sequence), not a Generator: threshold searches "
            "must be able to replay the same random numbers"
        )
    return np.random.default_rng(seed)


def _bootstrap_quantile(
    fit: PretrendFit,
    delta: float,
    alpha: float,
    B: int,
    variant: str,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, float]:
    """One bootstrap pass: returns (quantile, constrained beta, sigma_c)."""
    beta_u = fit.beta_hat
    if fit.max_abs >= delta:
        beta_cc = beta_u
    else:
        beta_cc = constrained_estimate(fit, delta)
    sigma_c = spherical_sigma(fit, beta_cc)
    A = fit.n * fit.gram

    if variant == "gaussian":
        # The refit on regenerated spherical errors is exactly Gaussian around
        # the constrained coefficients with covariance sigma_c * A^-1, so the
        # coefficient draws are sampled from that law directly.
        L = np.linalg.cholesky(np.linalg.inv(A))
        z = rng.standard_normal((fit.T, B))
        draws = beta_cc[:, None] + math.sqrt(sigma_c) * (L @ z)
    else:
        resid_c = fit.demeaned.ddY - np.einsum("itl,l->it", fit.demeaned.ddW, beta_cc)
        scores = np.einsum("itl,it->il", fit.demeaned.ddW, resid_c)  # (n, T)
        signs = rng.integers(0, 2, size=(fit.n, B)).astype(float) * 2.0 - 1.0
        draws = beta_cc[:, None] + np.linalg.solve(A, scores.T @ signs)

    max_norms = np.max(np.abs(draws), axis=0)
    order = min(max(math.ceil(alpha * B) - 1, 0), B - 1)
    q_star = float(np.sort(max_norms)[order])
    return q_star, beta_cc, sigma_c


def bootstrap_max_test(
    fit: PretrendFit,
    delta: float,
    alpha: float,
    B: int = 1000,
    variant: str = "wild_cluster",
    seed: int | Sequence[int] = 0,
    min_threshold: bool = True,
    search_tol: float = 1e-4,
) -> TestResult:
    """Bootstrap equivalence test of the maximum placebo coefficient.

    Coefficients are re-estimated under the null (max-norm pinned to
    ``delta``), bootstrap samples are generated around that constrained fit,
    and the null is rejected when the observed max-norm falls below the
    ``alpha`` quantile of the bootstrap max-norms.

    Parameters
    ----------
    variant : {"gaussian", "wild_cluster"}
        ``gaussian`` draws spherical errors with the pooled residual variance
        (not robust to serial correlation); ``wild_cluster`` flips the sign of
        whole per-unit residual vectors, preserving within-unit dependence.
    B : int
        Bootstrap replications, at least 500.
    seed : int or sequence of int
        Replayed for every threshold evaluated, so the minimal-threshold
        search sees a monotone rejection event (common random numbers).
    min_threshold : bool
        Also compute the smallest rejecting threshold (adds one bisection).
    """
    if delta <= 0.0:
        raise ValidationError(f"delta must be positive: {delta}")
    _check_alpha(alpha, upper=0.5)
    if B < MIN_BOOTSTRAP_B:
        raise ValidationError(f"B={B} is too small; use at least {MIN_BOOTSTRAP_B}")
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}: {variant!r}")
    _resolve_rng(seed)  # validate seed type up front

    q_star, beta_cc, sigma_c = _bootstrap_quantile(
        fit, delta, alpha, B, variant, np.random.default_rng(seed)
    )
    statistic = fit.max_abs
    reject = statistic < q_star

    minimal = None
    if min_threshold:
        def reject_at(d: float) -> bool:
            q, _, _ = _bootstrap_quantile(
                fit, d, alpha, B, variant, np.random.default_rng(seed)
            )
            return statistic < q

        minimal = _bisect_min_threshold(
            reject_at, hint=max(2.0 * statistic, 1e-8), tol=search_tol
        )

    return TestResult(
        kind=_KIND_BY_VARIANT[variant],
        statistic=statistic,
        critical_value=q_star,
        threshold=float(delta),
        alpha=float(alpha),
        reject=bool(reject),
        minimal_threshold=minimal,
        diagnostics={
            "B": B,
            "variant": variant,
            "seed": seed if isinstance(seed, int) else list(seed),
            "sigma_c": float(sigma_c),
            "beta_constrained": [float(b) for b in beta_cc],
            "search_tol": search_tol if min_threshold else None,
        },
    )


# ---------------------------------------------------------------------------
# Mean test
# ---------------------------------------------------------------------------

def mean_test(fit: PretrendFit, cov: CovEstimate, tau: float, alpha: float) -> TestResult:
    """Test whether the average placebo coefficient is below ``tau``.

    Rejects when the absolute coefficient average falls below the ``alpha``
    quantile of the folded normal centered at ``tau`` with the average's
    estimated standard error.  Vulnerable to sign cancellation: use only when
    trend differences can be assumed unidirectional.
    """
    if tau <= 0.0:
        raise ValidationError(f"tau must be positive: {tau}")
    _check_alpha(alpha)
    _check_conformable(fit, cov)
    stat = fit.mean_coef
    se = cov.mean_se(fit.n)
    crit = folded_normal_quantile(tau, se, alpha) if se > 0 else 0.0
    return TestResult(
        kind="mean",
        statistic=stat,
        critical_value=float(crit),
        threshold=float(tau),
        alpha=float(alpha),
        reject=bool(abs(stat) < crit),
        minimal_threshold=_min_threshold_folded(stat, se, alpha),
        diagnostics={"mean_se": float(se)},
    )


# ---------------------------------------------------------------------------
# Self-normalized RMS test
# ---------------------------------------------------------------------------

def _check_grid_match(path: SequentialPath, wtable: WQuantileTable) -> None:
    if len(path.grid) != len(wtable.grid) or any(
        not math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)
        for a, b in zip(path.grid, wtable.grid)
    ):
        raise ValidationError(
            f"quantile table grid {wtable.grid} does not match path grid {path.grid}"
        )


def rms_test(
    path: SequentialPath,
    zeta: float,
    alpha: float,
    wtable: WQuantileTable,
) -> TestResult:
    """Test whether the RMS of the placebo coefficients is below ``zeta``.

    Rejects when the full-sample squared RMS falls below ``zeta^2`` plus the
    tabulated ``alpha`` quantile (negative for small ``alpha``) times the
    subsample self-normalizer, so no covariance estimation is required.
    ``statistic`` and ``critical_value`` are on the squared scale; thresholds
    are on the RMS scale.
    """
    if zeta <= 0.0:
        raise ValidationError(f"zeta must be positive: {zeta}")
    _check_alpha(alpha)
    _check_grid_match(path, wtable)
    q = wtable.quantile(alpha)
    crit = zeta * zeta + q * path.v_hat
    radicand = path.rms_sq_full - q * path.v_hat
    minimal = math.sqrt(radicand) if radicand > 0.0 else 0.0
    return TestResult(
        kind="rms",
        statistic=path.rms_sq_full,
        critical_value=float(crit),
        threshold=float(zeta),
        alpha=float(alpha),
        reject=bool(path.rms_sq_full < crit),
        minimal_threshold=float(minimal),
        diagnostics={
            "v_hat": float(path.v_hat),
            "q_alpha": float(q),
            "grid": list(path.grid),
            "wtable_hash": wtable.content_hash(),
        },
    )


def rms_confidence_interval(
    path: SequentialPath,
    alpha: float,
    wtable: WQuantileTable,
) -> RmsConfidenceInterval:
    """Asymptotic ``1 - alpha`` interval for the squared RMS of the trends.

    Endpoints are the squared-RMS estimate shifted by the ``alpha/2`` and
    ``1 - alpha/2`` quantiles of the pivotal limit times the self-normalizer;
    the reported lower endpoint is clipped at zero (raw value kept).
    """
    _check_alpha(alpha)
    _check_grid_match(path, wtable)
    lower_raw = path.rms_sq_full + wtable.quantile(alpha / 2.0) * path.v_hat
    upper = path.rms_sq_full + wtable.quantile(1.0 - alpha / 2.0) * path.v_hat
    return RmsConfidenceInterval(
        lower=max(lower_raw, 0.0),
        upper=float(upper),
        lower_raw=float(lower_raw),
        alpha=float(alpha),
    )


# ---------------------------------------------------------------------------
# Minimal-threshold search
# ---------------------------------------------------------------------------

def _bisect_min_threshold(reject_at, hint: float, tol: float) -> float:
    """Bisection for the smallest rejecting threshold of a monotone test.

    Returns a value that rejects while ``value - tol`` does not.  The upper
    bracket doubles from ``hint`` until rejection; the lower bracket starts at
    0 (never evaluated: if the test rejects arbitrarily close to 0 the search
    correctly collapses there).
    """
    if tol <= 0.0:
        raise ValidationError(f"tol must be positive: {tol}")
    hi = max(hint, tol)
    for _ in range(200):
        if reject_at(hi):
            break
        hi *= 2.0
    else:
        raise NumericalError("threshold search failed to bracket a rejection")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if reject_at(mid):
            hi = mid
        else:
            lo = mid
    if not reject_at(hi):
        raise NumericalError(
            "non-monotone threshold search: the rejection event changed between "
            "evaluations; reuse a fixed seed so all thresholds share one set of "
            "random numbers"
        )
    return hi


def minimal_threshold(
    kind: str,
    *,
    fit: PretrendFit | None = None,
    cov: CovEstimate | None = None,
    path: SequentialPath | None = None,
    wtable: WQuantileTable | None = None,
    alpha: float = 0.05,
    B: int = 1000,
    variant: str | None = None,
    seed: int | Sequence[int] = 0,
    tol: float = 1e-4,
    method: str = "auto",
) -> float:
    """Smallest equivalence threshold at which the chosen test rejects.

    ``method="auto"`` uses closed forms or one-dimensional root finding where
    available (``iu_max``, ``mean``, ``rms``) and seeded bisection for the
    bootstrap kinds; ``method="bisect"`` forces generic bisection on the
    rejection event for any kind (useful for cross-checks).
    """
    if method not in ("auto", "bisect"):
        raise ValidationError(f"method must be 'auto' or 'bisect': {method!r}")

    if kind in ("iu_max", "mean"):
        if fit is None or cov is None:
            raise ValidationError(f"{kind} threshold needs fit and cov")
        run = iu_max_test if kind == "iu_max" else mean_test
        if method == "auto":
            return run(fit, cov, threshold_probe(fit), alpha).minimal_threshold

        def reject_at(x: float) -> bool:
            return run(fit, cov, x, alpha).reject

        hint = max(fit.max_abs, 1e-8)
    elif kind == "rms":
        if path is None or wtable is None:
            raise ValidationError("rms threshold needs path and wtable")
        if method == "auto":
            return rms_test(path, threshold_probe(path), alpha, wtable).minimal_threshold

        def reject_at(x: float) -> bool:
            return rms_test(path, x, alpha, wtable).reject

        hint = max(math.sqrt(path.rms_sq_full), 1e-8)
    elif kind in ("boot_max", "cluster_boot_max"):
        if fit is None:
            raise ValidationError(f"{kind} threshold needs fit")
        variant = variant or ("gaussian" if kind == "boot_max" else "wild_cluster")
        result = bootstrap_max_test(
            fit, threshold_probe(fit), alpha, B=B, variant=variant, seed=seed,
            min_threshold=True, search_tol=tol,
        )
        return result.minimal_threshold
    else:
        raise ValidationError(f"unknown test kind {kind!r}")

    return _bisect_min_threshold(reject_at, hint=hint, tol=tol)


def threshold_probe(obj) -> float:
    """A harmless positive threshold used when only the minimum is wanted."""
    if isinstance(obj, SequentialPath):
        scale = math.sqrt(obj.rms_sq_full)
    else:
        scale = obj.max_abs
    return max(scale, 1.0)

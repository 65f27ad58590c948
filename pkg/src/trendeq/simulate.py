"""Synthetic panel generators and the rejection-frequency study harness.

Panels follow a two-way fixed-effects outcome equation with unit and period
effects drawn standard normal, a Bernoulli(1/2) treatment group, placebo
coefficients in the pre-base periods, and a treatment effect in the single
post-base period.  Errors are iid normal or a stationary AR(3); violations of
parallel trends are a base-period group shock ("Ashenfelter dip") or a linear
group trend.  ``run_study`` runs every equivalence test over many replications
and aggregates rejection rates, minimal thresholds, treatment-effect coverage,
and the conventional all-cells-insignificant pre-test.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .covariance import cluster_robust_cov
from .dist import WQuantileTable, default_w_table, norm_quantile
from .equivalence import bootstrap_max_test, iu_max_test, mean_test, rms_test
from .errors import ValidationError
from .panel import DEFAULT_GRID, PanelDataset, fit_full_model, fit_pretrend, sequential_rms_path

_AR_BURN_IN = 200
_Z_TWO_SIDED_5PCT = norm_quantile(0.975)

TEST_KINDS = ("iu_max", "boot_max", "cluster_boot_max", "mean", "rms")
MIN_THRESHOLD_MODES = ("none", "fast", "all")
_FAST_THRESHOLD_KEYS = ("iu_max", "mean", "rms")


@dataclass(frozen=True)
class ErrorSpec:
    """Error process of the synthetic panels.

    ``kind="iid_normal"`` draws unit-variance white noise.  ``kind="ar3"``
    draws a stationary AR(3) with unit-variance innovations, initialized by a
    200-period burn-in; ``group_sd_scale="one_plus_g"`` additionally scales
    each treated unit's error path by 2 (heteroskedastic variant).
    """

    kind: str = "iid_normal"
    ar_coeffs: tuple[float, float, float] = (0.5, 0.3, 0.1)
    group_sd_scale: str = "none"

    def __post_init__(self) -> None:
        if self.kind not in ("iid_normal", "ar3"):
            raise ValidationError(f"unknown error process {self.kind!r}")
        if self.group_sd_scale not in ("none", "one_plus_g"):
            raise ValidationError(f"unknown group_sd_scale {self.group_sd_scale!r}")
        if self.kind == "ar3":
            phi = np.asarray(self.ar_coeffs, dtype=float)
            if phi.shape != (3,):
                raise ValidationError("ar3 needs exactly three coefficients")
            companion = np.zeros((3, 3))
            companion[0] = phi
            companion[1, 0] = companion[2, 1] = 1.0
            if np.abs(np.linalg.eigvals(companion)).max() >= 1.0 - 1e-12:
                raise ValidationError(f"AR coefficients {tuple(phi)} are not stationary")


@dataclass(frozen=True)
class SimulationScenario:
    """Full description of one Monte-Carlo design.

    ``beta_pattern`` is ``("zero",)``, ``("all_at", c)`` (every placebo
    coefficient equals ``c``) or ``("first_at", c)`` (only the first one
    does).  ``violation`` is ``("none",)``, ``("ashenfelter", mu)`` (a
    ``N(mu, 1)`` group shock added in the base period, shifting every placebo
    coefficient and the treatment estimate by ``-mu`` in expectation) or
    ``("linear_trend", psi)`` (an unobserved group trend ``psi * t``).
    """

    n: int
    T: int
    beta_pattern: tuple = ("zero",)
    pi_att: float = 0.0
    errors: ErrorSpec = field(default_factory=ErrorSpec)
    violation: tuple = ("none",)
    alpha: float = 0.05
    delta: float = 1.0
    tau: float = 1.0
    zeta: float = 1.0
    M: int = 2000
    seed: int = 0
    bootstrap_b: int = 500
    grid: tuple[float, ...] = DEFAULT_GRID
    min_thresholds: str = "fast"
    name: str = "scenario"

    def __post_init__(self) -> None:
        if self.n < 4:
            raise ValidationError(f"n={self.n} is too small")
        if self.T < 1:
            raise ValidationError(f"T={self.T} must be >= 1")
        if not 0.0 < self.alpha < 0.5:
            raise ValidationError(f"alpha must be in (0, 0.5): {self.alpha}")
        if self.beta_pattern[0] not in ("zero", "all_at", "first_at"):
            raise ValidationError(f"unknown beta pattern {self.beta_pattern!r}")
        if self.violation[0] not in ("none", "ashenfelter", "linear_trend"):
            raise ValidationError(f"unknown violation {self.violation!r}")
        if self.min_thresholds not in MIN_THRESHOLD_MODES:
            raise ValidationError(
                f"min_thresholds must be one of {MIN_THRESHOLD_MODES}: {self.min_thresholds!r}"
            )
        if min(self.delta, self.tau, self.zeta) <= 0.0:
            raise ValidationError("thresholds must be positive")

    @property
    def beta(self) -> np.ndarray:
        kind = self.beta_pattern[0]
        if kind == "zero":
            return np.zeros(self.T)
        level = float(self.beta_pattern[1])
        if kind == "all_at":
            return np.full(self.T, level)
        out = np.zeros(self.T)
        out[0] = level
        return out

    def describe(self) -> str:
        err = self.errors.kind
        if self.errors.kind == "ar3":
            err += str(tuple(self.errors.ar_coeffs))
            if self.errors.group_sd_scale == "one_plus_g":
                err += "*het"
        return (
            f"{self.name}: n={self.n} T={self.T} beta={self.beta_pattern} "
            f"pi_att={self.pi_att} errors={err} violation={self.violation} "
            f"alpha={self.alpha} thresholds=({self.delta},{self.tau},{self.zeta}) "
            f"M={self.M} B={self.bootstrap_b} seed={self.seed}"
        )


def _ar3_panel(rng: np.random.Generator, n: int, periods: int, phi: np.ndarray) -> np.ndarray:
    eps = rng.standard_normal((n, _AR_BURN_IN + periods))
    x = lfilter([1.0], np.concatenate(([1.0], -phi)), eps, axis=1)
    return x[:, _AR_BURN_IN:]


def generate(scn: SimulationScenario, rep: int) -> PanelDataset:
    """Draw one synthetic panel (``T + 2`` periods, base at ``T + 1``).

    Draw order is fixed (unit effects, period effects, group, errors,
    violation shock) so a ``(seed, rep)`` pair always produces the same panel
    regardless of which other replications run.
    """
    rng = np.random.default_rng([scn.seed, rep])
    n, T = scn.n, scn.T
    periods = T + 2
    alpha_i = rng.standard_normal(n)
    lambda_t = rng.standard_normal(periods)
    g = (rng.random(n) < 0.5).astype(np.int64)

    if scn.errors.kind == "iid_normal":
        u = rng.standard_normal((n, periods))
    else:
        u = _ar3_panel(rng, n, periods, np.asarray(scn.errors.ar_coeffs, dtype=float))
    if scn.errors.group_sd_scale == "one_plus_g":
        u = u * (1.0 + g)[:, None]

    if scn.violation[0] == "ashenfelter":
        shock = rng.normal(loc=float(scn.violation[1]), scale=1.0, size=n)
        u[:, T] += g * shock  # column T is period T+1, the base period
    elif scn.violation[0] == "linear_trend":
        psi = float(scn.violation[1])
        u = u + psi * np.outer(g, np.arange(1, periods + 1))

    effect = np.zeros(periods)
    effect[:T] = scn.beta
    effect[T + 1] = scn.pi_att
    y = alpha_i[:, None] + lambda_t[None, :] + np.outer(g, effect) + u
    return PanelDataset.from_arrays(y, group=g, base_period=T + 1)


@dataclass(frozen=True)
class StudyReport:
    """Aggregated Monte-Carlo results for one scenario.

    Every cell comes with a Monte-Carlo standard error (binomial for rates,
    sample-mean for threshold averages).
    """

    scenario: SimulationScenario
    rejection_rates: dict[str, float]
    rejection_se: dict[str, float]
    mean_min_thresholds: dict[str, float]
    min_threshold_se: dict[str, float]
    pi_att_mean: float
    pi_att_mc_se: float
    ci_coverage: float
    ci_coverage_se: float
    all_insignificant_rate: float
    all_insignificant_se: float
    wtable_hash: str

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.describe(),
            "n": self.scenario.n,
            "T": self.scenario.T,
            "M": self.scenario.M,
            "seed": self.scenario.seed,
            "alpha": self.scenario.alpha,
            "thresholds": {
                "delta": self.scenario.delta,
                "tau": self.scenario.tau,
                "zeta": self.scenario.zeta,
            },
            "rejection_rates": self.rejection_rates,
            "rejection_se": self.rejection_se,
            "mean_min_thresholds": self.mean_min_thresholds,
            "min_threshold_se": self.min_threshold_se,
            "pi_att_mean": self.pi_att_mean,
            "pi_att_mc_se": self.pi_att_mc_se,
            "ci_coverage": self.ci_coverage,
            "ci_coverage_se": self.ci_coverage_se,
            "all_insignificant_rate": self.all_insignificant_rate,
            "all_insignificant_se": self.all_insignificant_se,
            "wtable_hash": self.wtable_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [self.scenario.describe(), "-" * 72]
        lines.append(f"{'test':<20}{'reject rate':>14}{'MC SE':>10}")
        for kind in TEST_KINDS:
            lines.append(
                f"{kind:<20}{self.rejection_rates[kind]:>14.4f}{self.rejection_se[kind]:>10.4f}"
            )
        if self.mean_min_thresholds:
            lines.append(f"{'minimal threshold':<20}{'mean':>14}{'MC SE':>10}")
            for kind, value in self.mean_min_thresholds.items():
                lines.append(f"{kind:<20}{value:>14.4f}{self.min_threshold_se[kind]:>10.4f}")
        lines.append(
            f"{'pi_att mean':<20}{self.pi_att_mean:>14.4f}{self.pi_att_mc_se:>10.4f}"
        )
        lines.append(
            f"{'CI coverage':<20}{self.ci_coverage:>14.4f}{self.ci_coverage_se:>10.4f}"
        )
        lines.append(
            f"{'#insig/M':<20}{self.all_insignificant_rate:>14.4f}{self.all_insignificant_se:>10.4f}"
        )
        return "\n".join(lines)


def _one_replication(scn: SimulationScenario, rep: int, wtable: WQuantileTable) -> dict:
    ds = generate(scn, rep)
    fit = fit_pretrend(ds)
    cov = cluster_robust_cov(fit)
    path = sequential_rms_path(ds, scn.grid, seed=[scn.seed, rep, 1])
    want_boot_min = scn.min_thresholds == "all"

    iu = iu_max_test(fit, cov, scn.delta, scn.alpha)
    mean = mean_test(fit, cov, scn.tau, scn.alpha)
    rms = rms_test(path, scn.zeta, scn.alpha, wtable)
    boot = bootstrap_max_test(
        fit, scn.delta, scn.alpha, B=scn.bootstrap_b, variant="gaussian",
        seed=[scn.seed, rep, 2], min_threshold=want_boot_min,
    )
    cboot = bootstrap_max_test(
        fit, scn.delta, scn.alpha, B=scn.bootstrap_b, variant="wild_cluster",
        seed=[scn.seed, rep, 3], min_threshold=want_boot_min,
    )

    full = fit_full_model(ds)
    full_cov = cluster_robust_cov(full)
    pi_hat = float(full.beta_hat[-1])
    pi_se = float(full_cov.coef_se(full.n)[-1])
    covered = abs(pi_hat - scn.pi_att) <= _Z_TWO_SIDED_5PCT * pi_se

    pre_se = cov.coef_se(fit.n)
    all_insig = bool(np.all(np.abs(fit.beta_hat) <= _Z_TWO_SIDED_5PCT * pre_se))

    out = {
        "reject_iu_max": float(iu.reject),
        "reject_boot_max": float(boot.reject),
        "reject_cluster_boot_max": float(cboot.reject),
        "reject_mean": float(mean.reject),
        "reject_rms": float(rms.reject),
        "pi_att": pi_hat,
        "ci_covered": float(covered),
        "all_insig": float(all_insig),
    }
    if scn.min_thresholds != "none":
        out["min_iu_max"] = iu.minimal_threshold
        out["min_mean"] = mean.minimal_threshold
        out["min_rms"] = rms.minimal_threshold
    if want_boot_min:
        out["min_boot_max"] = boot.minimal_threshold
        out["min_cluster_boot_max"] = cboot.minimal_threshold
    return out


def run_study(scn: SimulationScenario, threads: int = 1) -> StudyReport:
    """Run ``scn.M`` replications and aggregate.

    Replications are independent jobs seeded by ``(scenario seed, rep)``;
    results are gathered in replication order, so the report is identical for
    any ``threads`` value.
    """
    if scn.M < 200:
        raise ValidationError(f"M={scn.M} is too small for stable rates (need >= 200)")
    levels = sorted({scn.alpha, scn.alpha / 2.0, 1.0 - scn.alpha / 2.0, 0.05})
    wtable = default_w_table(grid=scn.grid, alpha_levels=tuple(levels))

    reps = range(scn.M)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda r: _one_replication(scn, r, wtable), reps))
    else:
        rows = [_one_replication(scn, r, wtable) for r in reps]

    def column(key: str) -> np.ndarray:
        return np.array([row[key] for row in rows])

    def rate_with_se(key: str) -> tuple[float, float]:
        p = float(column(key).mean())
        return p, math.sqrt(p * (1.0 - p) / scn.M)

    rates, rate_se = {}, {}
    for kind in TEST_KINDS:
        rates[kind], rate_se[kind] = rate_with_se(f"reject_{kind}")

    thresholds, threshold_se = {}, {}
    if scn.min_thresholds != "none":
        keys = list(_FAST_THRESHOLD_KEYS)
        if scn.min_thresholds == "all":
            keys += ["boot_max", "cluster_boot_max"]
        for kind in keys:
            vals = column(f"min_{kind}")
            thresholds[kind] = float(vals.mean())
            threshold_se[kind] = float(vals.std(ddof=1) / math.sqrt(scn.M))

    pi = column("pi_att")
    cover, cover_se = rate_with_se("ci_covered")
    insig, insig_se = rate_with_se("all_insig")
    return StudyReport(
        scenario=scn,
        rejection_rates=rates,
        rejection_se=rate_se,
        mean_min_thresholds=thresholds,
        min_threshold_se=threshold_se,
        pi_att_mean=float(pi.mean()),
        pi_att_mc_se=float(pi.std(ddof=1) / math.sqrt(scn.M)),
        ci_coverage=cover,
        ci_coverage_se=cover_se,
        all_insignificant_rate=insig,
        all_insignificant_se=insig_se,
        wtable_hash=wtable.content_hash(),
    )


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_EXPANDABLE = ("n", "T", "beta")


def _parse_beta(text: str) -> tuple:
    parts = str(text).split()
    if parts[0] == "zero":
        return ("zero",)
    if parts[0] in ("all_at", "first_at") and len(parts) == 2:
        return (parts[0], float(parts[1]))
    raise ValidationError(f"bad beta pattern {text!r} (zero | all_at c | first_at c)")


def _parse_errors(text: str) -> ErrorSpec:
    parts = str(text).split()
    if parts[0] == "iid":
        return ErrorSpec(kind="iid_normal")
    if parts[0] == "ar3":
        coeffs = tuple(float(x) for x in parts[1:4])
        if len(coeffs) != 3:
            raise ValidationError(f"ar3 needs three coefficients: {text!r}")
        scale = "none"
        if len(parts) > 4:
            if parts[4] != "het":
                raise ValidationError(f"bad error spec {text!r}")
            scale = "one_plus_g"
        return ErrorSpec(kind="ar3", ar_coeffs=coeffs, group_sd_scale=scale)
    raise ValidationError(f"bad error spec {text!r} (iid | ar3 p1 p2 p3 [het])")


def _parse_violation(text: str) -> tuple:
    parts = str(text).split()
    if parts[0] == "none":
        return ("none",)
    if parts[0] in ("ashenfelter", "linear_trend") and len(parts) == 2:
        return (parts[0], float(parts[1]))
    raise ValidationError(
        f"bad violation {text!r} (none | ashenfelter mu | linear_trend psi)"
    )


def parse_scenario_text(text: str, name_hint: str = "scenario") -> list[SimulationScenario]:
    """Parse a ``key = value`` scenario file, expanding list-valued keys.

    Values are JSON fragments where possible (numbers, lists) and plain
    strings otherwise.  ``n``, ``T`` and ``beta`` may be JSON lists, in which
    case the cartesian product of scenarios is returned, each with a suffixed
    name.
    """
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"scenario line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            raw[key] = json.loads(value)
        except json.JSONDecodeError:
            raw[key] = value

    known = {
        "name", "n", "T", "beta", "pi_att", "errors", "violation", "alpha",
        "delta", "tau", "zeta", "M", "seed", "bootstrap_b", "grid", "min_thresholds",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")

    grids = {}
    for key in _EXPANDABLE:
        value = raw.get(key)
        grids[key] = value if isinstance(value, list) else [value] if value is not None else [None]

    scenarios = []
    base_name = str(raw.get("name", name_hint))
    for n_val in grids["n"]:
        for t_val in grids["T"]:
            for beta_val in grids["beta"]:
                kwargs: dict = {}
                if n_val is not None:
                    kwargs["n"] = int(n_val)
                if t_val is not None:
                    kwargs["T"] = int(t_val)
                if beta_val is not None:
                    kwargs["beta_pattern"] = _parse_beta(beta_val)
                if "pi_att" in raw:
                    kwargs["pi_att"] = float(raw["pi_att"])
                if "errors" in raw:
                    kwargs["errors"] = _parse_errors(raw["errors"])
                if "violation" in raw:
                    kwargs["violation"] = _parse_violation(raw["violation"])
                for key in ("alpha", "delta", "tau", "zeta"):
                    if key in raw:
                        kwargs[key] = float(raw[key])
                for key in ("M", "seed", "bootstrap_b"):
                    if key in raw:
                        kwargs[key] = int(raw[key])
                if "grid" in raw:
                    kwargs["grid"] = tuple(float(x) for x in raw["grid"])
                if "min_thresholds" in raw:
                    kwargs["min_thresholds"] = str(raw["min_thresholds"])
                suffix = ""
                if len(grids["n"]) > 1:
                    suffix += f"-n{n_val}"
                if len(grids["T"]) > 1:
                    suffix += f"-T{t_val}"
                if len(grids["beta"]) > 1:
                    suffix += f"-{str(beta_val).replace(' ', '')}"
                kwargs["name"] = base_name + suffix
                try:
                    scenarios.append(SimulationScenario(**kwargs))
                except TypeError as exc:
                    raise ValidationError(f"incomplete scenario: {exc}") from None
    return scenarios


def load_scenarios(path: str | Path) -> list[SimulationScenario]:
    """Read and parse a scenario file."""
    path = Path(path)
    return parse_scenario_text(path.read_text(), name_hint=path.stem)

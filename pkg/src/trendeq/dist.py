"""Distributional primitives: folded normal, test power, pivotal quantiles.

The folded-normal helpers back the per-coordinate and mean equivalence tests.
``simulate_w_quantile`` tabulates the quantiles of the self-normalized limit
variable used by the RMS test: a Brownian motion endpoint divided by the root
mean square of ``B(l)/l - B(1)`` over a fixed fraction grid.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ValidationError

DEFAULT_W_GRID: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_W_LEVELS: tuple[float, ...] = (
    0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.975, 0.99, 0.995,
)
DEFAULT_W_REPS = 1_000_000
#: Fixed default seed so the shipped critical values are reproducible.
DEFAULT_W_SEED = 1729
_SIM_CHUNK = 125_000
_CACHE_ENV = "TRENDEQ_CACHE_DIR"
_TABLE_VERSION = 1


def norm_cdf(x: float) -> float:
    """Standard normal CDF (erf-based, accurate to double precision)."""
    return float(ndtr(x))


def norm_quantile(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise ValidationError(f"probability must be in (0, 1): {p}")
    return float(ndtri(p))


def folded_normal_cdf(x: float, mu: float, sigma: float) -> float:
    """CDF of ``|N(mu, sigma^2)|`` at ``x >= 0``.

    Equals ``Phi((x - mu)/sigma) - Phi((-x - mu)/sigma)``.
    """
    if sigma <= 0.0:
        raise ValidationError(f"sigma must be positive: {sigma}")
    if x < 0.0:
        raise ValidationError(f"folded-normal CDF argument must be >= 0: {x}")
    return float(ndtr((x - mu) / sigma) - ndtr((-x - mu) / sigma))


def folded_normal_quantile(mu: float, sigma: float, alpha: float) -> float:
    """Smallest ``x >= 0`` with ``folded_normal_cdf(x, mu, sigma) >= alpha``.

    Solved by bracketed bisection to absolute tolerance 1e-12 (robust over
    fast; these calls are not hot).
    """
    if sigma <= 0.0:
        raise ValidationError(f"sigma must be positive: {sigma}")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must be in (0, 1): {alpha}")
    lo = 0.0
    hi = abs(mu) + sigma
    while folded_normal_cdf(hi, mu, sigma) < alpha:
        hi *= 2.0
        if hi > 1e300:  # pragma: no cover - unreachable for valid inputs
            raise ValidationError("failed to bracket folded-normal quantile")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if folded_normal_cdf(mid, mu, sigma) >= alpha:
            hi = mid
        else:
            lo = mid
    return hi


def folded_test_power(beta1: float, se: float, delta: float, alpha: float) -> float:
    """Rejection probability of the single-coefficient equivalence test.

    The test rejects when the estimate's magnitude falls below the ``alpha``
    quantile of the folded normal with mean ``delta`` and standard deviation
    ``se``; for an estimator centered at ``beta1`` with the same standard
    deviation the rejection probability is the folded-normal CDF of that
    quantile evaluated around ``beta1``.
    """
    if se <= 0.0:
        raise ValidationError(f"se must be positive: {se}")
    if delta <= 0.0:
        raise ValidationError(f"delta must be positive: {delta}")
    f_alpha = folded_normal_quantile(delta, se, alpha)
    return folded_normal_cdf(f_alpha, beta1, se)


# ---------------------------------------------------------------------------
# Quantiles of the self-normalized limit variable
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WQuantileTable:
    """Monte-Carlo quantiles of the self-normalized Brownian ratio.

    Attributes
    ----------
    grid : tuple of float
        Subsample fractions; interior points carry the uniform weighting of
        the denominator, the last point must be 1.
    reps : int
        Number of simulated paths.
    quantiles : dict
        Probability level -> empirical quantile.
    seed : int
        Seed the table was simulated with.
    """

    grid: tuple[float, ...]
    reps: int
    quantiles: dict[float, float]
    seed: int
    version: int = field(default=_TABLE_VERSION)

    def __post_init__(self) -> None:
        levels = sorted(self.quantiles)
        values = [self.quantiles[a] for a in levels]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValidationError("quantiles must be monotone in the level")
        if 0.05 in self.quantiles and self.quantiles[0.05] >= 0.0:
            raise ValidationError("lower 5% quantile must be negative; "
                                  "the simulation looks corrupted")

    def quantile(self, level: float) -> float:
        """Look up a tabulated quantile; raises if the level was not simulated."""
        if level not in self.quantiles:
            raise ValidationError(
                f"level {level} not in table (have {sorted(self.quantiles)}); "
                "re-simulate with the levels you need"
            )
        return self.quantiles[level]

    def to_json(self) -> str:
        payload = {
            "format": "trendeq-wquantiles",
            "version": self.version,
            "grid": list(self.grid),
            "reps": self.reps,
            "seed": self.seed,
            "quantiles": {repr(k): v for k, v in sorted(self.quantiles.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WQuantileTable":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad quantile cache file: {exc}") from None
        if payload.get("format") != "trendeq-wquantiles":
            raise ValidationError("not a trendeq quantile cache file")
        if payload.get("version") != _TABLE_VERSION:
            raise ValidationError(
                f"quantile cache version {payload.get('version')} != {_TABLE_VERSION}; re-simulate"
            )
        return cls(
            grid=tuple(float(x) for x in payload["grid"]),
            reps=int(payload["reps"]),
            quantiles={float(k): float(v) for k, v in payload["quantiles"].items()},
            seed=int(payload["seed"]),
            version=int(payload["version"]),
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _simulate_w_chunk(seed_seq: np.random.SeedSequence, size: int, grid: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    increments = np.diff(grid, prepend=0.0)
    z = rng.standard_normal((size, grid.size)) * np.sqrt(increments)
    b = np.cumsum(z, axis=1)
    end = b[:, -1]
    interior = b[:, :-1] / grid[:-1]
    denom_sq = np.mean((interior - end[:, None]) ** 2, axis=1)
    return end / np.sqrt(denom_sq)


def simulate_w_quantile(
    grid: tuple[float, ...] = DEFAULT_W_GRID,
    alpha_levels: tuple[float, ...] = DEFAULT_W_LEVELS,
    reps: int = DEFAULT_W_REPS,
    seed: int = DEFAULT_W_SEED,
    threads: int = 1,
) -> WQuantileTable:
    """Simulate quantiles of the self-normalized Brownian ratio on ``grid``.

    Brownian motion is evaluated at the grid points only, via independent
    Gaussian increments; under the discrete uniform weighting of the interior
    points this is exact, so no path refinement is needed.  Replications run
    in fixed-size chunks with seeds spawned from ``seed``, and results are
    aggregated in chunk order, so the output is independent of ``threads``.

    Raises
    ------
    ValidationError
        If ``reps < 1000`` (quantile estimates would be too noisy to trust;
        use at least 1e5, ideally 1e6, replications).
    """
    from .panel import _validate_grid

    grid = _validate_grid(grid)
    if reps < 1000:
        raise ValidationError(
            f"reps={reps} is too small for stable tail quantiles; "
            "use at least 1e5 (1e6 recommended)"
        )
    levels = tuple(sorted(set(float(a) for a in alpha_levels)))
    if any(not 0.0 < a < 1.0 for a in levels):
        raise ValidationError(f"alpha levels must be in (0, 1): {levels}")

    garr = np.asarray(grid)
    n_chunks = (reps + _SIM_CHUNK - 1) // _SIM_CHUNK
    sizes = [min(_SIM_CHUNK, reps - k * _SIM_CHUNK) for k in range(n_chunks)]
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_simulate_w_chunk, seeds, sizes, [garr] * n_chunks))
    else:
        chunks = [_simulate_w_chunk(s, m, garr) for s, m in zip(seeds, sizes)]

    samples = np.sort(np.concatenate(chunks))
    quantiles = {}
    for a in levels:
        idx = min(max(math.ceil(a * reps) - 1, 0), reps - 1)
        quantiles[a] = float(samples[idx])
    return WQuantileTable(grid=grid, reps=reps, quantiles=quantiles, seed=seed)


# ---------------------------------------------------------------------------
# Cached default table
# ---------------------------------------------------------------------------

_memo: dict[tuple, WQuantileTable] = {}


def cache_dir() -> Path:
    env = os.environ.get(_CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "trendeq"


def _cache_path(grid, levels, reps, seed) -> Path:
    key = json.dumps([list(grid), list(levels), reps, seed])
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    return cache_dir() / f"wquantiles-v{_TABLE_VERSION}-{digest}.json"


def default_w_table(
    grid: tuple[float, ...] = DEFAULT_W_GRID,
    alpha_levels: tuple[float, ...] = DEFAULT_W_LEVELS,
    reps: int = DEFAULT_W_REPS,
    seed: int = DEFAULT_W_SEED,
    threads: int = 1,
    use_disk_cache: bool = True,
) -> WQuantileTable:
    """Return the quantile table for the given settings, simulating at most once.

    Tables are memoized in-process and, unless disabled, persisted as JSON
    under :func:`cache_dir` (relocatable via the ``TRENDEQ_CACHE_DIR``
    environment variable).
    """
    key = (tuple(grid), tuple(sorted(alpha_levels)), reps, seed)
    if key in _memo:
        return _memo[key]
    path = _cache_path(*key)
    if use_disk_cache and path.exists():
        try:
            table = WQuantileTable.from_json(path.read_text())
        except ValidationError:
            table = None
        if table is not None and table.grid == tuple(grid):
            _memo[key] = table
            return table
    table = simulate_w_quantile(tuple(grid), tuple(alpha_levels), reps, seed, threads)
    _memo[key] = table
    if use_disk_cache:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(table.to_json())
        except OSError:
            pass  # caching is best-effort
    return table

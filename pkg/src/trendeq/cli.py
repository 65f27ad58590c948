"""Command-line front end: data ingestion, tests, threshold search, studies.

Exit codes: 0 success (statistical decisions are data, not errors), 2 invalid
input or configuration, 3 I/O failure, 4 numerical failure (singular design,
failed search).  Every report embeds the provenance (seed, bootstrap size,
grid, version, input hash) needed to re-run it bit-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import cluster_robust_cov
from .dist import (
    DEFAULT_W_GRID,
    DEFAULT_W_LEVELS,
    DEFAULT_W_REPS,
    DEFAULT_W_SEED,
    cache_dir,
    default_w_table,
    simulate_w_quantile,
)
from .equivalence import (
    bootstrap_max_test,
    iu_max_test,
    mean_test,
    rms_confidence_interval,
    rms_test,
)
from .errors import NumericalError, ValidationError
from .panel import (
    DEFAULT_GRID,
    fit_full_model,
    fit_pretrend,
    load_panel,
    select_periods,
    sequential_rms_path,
)
from .simulate import load_scenarios, run_study
from .staggered import (
    build_staggered_design,
    extract_placebo_vector,
    fit_staggered,
    staggered_rms_path,
)

_TEST_TOKENS = ("iu", "boot", "cboot", "mean", "rms")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trendeq",
        description="Equivalence tests for pre-treatment trends in difference-in-differences panels.",
    )
    parser.add_argument("--version", action="version", version=f"trendeq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--input", required=True, help="long-format CSV")
        p.add_argument(
            "--schema", required=True,
            help="column mapping, e.g. unit=id,time=month,outcome=y,group=treated "
                 "(staggered: cohort=adopted[,x=c1+c2])",
        )
        p.add_argument("--periods", help="comma-separated time labels to keep; the last is the base period")
        p.add_argument("--base-period", dest="base_period", help="time label of the base period")
        p.add_argument("--pool", help="staggered placebo cells to pool away, e.g. 5:1,5:2")
        p.add_argument("--tests", default="all", help=f"comma list of {_TEST_TOKENS} or 'all'")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--bootstrap-b", dest="bootstrap_b", type=int, default=1000)
        p.add_argument(
            "--bootstrap-variant", dest="bootstrap_variant",
            choices=("gaussian", "wild_cluster"), default=None,
            help="variant run for the bare 'boot' token (default: run gaussian for "
                 "'boot' and wild cluster for 'cboot')",
        )
        p.add_argument("--grid", help="subsample fractions for the RMS test, e.g. 0.2,0.4,0.6,0.8,1")
        p.add_argument("--seed", type=int, default=None, help="generated and reported when omitted")
        p.add_argument("--out", help="write the JSON report here")
        p.add_argument("--format", choices=("json", "text"), default="text", help="stdout format")
        p.add_argument("--threads", type=int, default=1)

    p_test = sub.add_parser("test", help="run equivalence tests at fixed thresholds")
    add_data_options(p_test)
    p_test.add_argument("--delta", type=float, help="max-test threshold")
    p_test.add_argument("--tau", type=float, help="mean-test threshold")
    p_test.add_argument("--zeta", type=float, help="RMS-test threshold")

    p_thr = sub.add_parser("thresholds", help="smallest thresholds at which each test rejects")
    add_data_options(p_thr)

    p_sim = sub.add_parser("simulate", help="run a Monte-Carlo study from a scenario file")
    p_sim.add_argument("--scenario", required=True, help="scenario file (key = value lines)")
    p_sim.add_argument("--out", help="directory for per-scenario reports")
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--format", choices=("json", "text"), default="text")

    p_wq = sub.add_parser("wquantiles", help="simulate and cache pivotal quantiles")
    p_wq.add_argument("--grid", help="subsample fractions, e.g. 0.2,0.4,0.6,0.8,1")
    p_wq.add_argument("--levels", help="comma list of probability levels")
    p_wq.add_argument("--reps", type=int, default=DEFAULT_W_REPS)
    p_wq.add_argument("--seed", type=int, default=DEFAULT_W_SEED)
    p_wq.add_argument("--threads", type=int, default=1)
    p_wq.add_argument("--out", help="cache file to write (default: shared cache directory)")
    return parser


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers: {text!r}") from None


def _parse_label(text: str):
    try:
        f = float(text)
        return int(f) if f == int(f) else f
    except ValueError:
        return text


def _resolve_seed(seed: int | None) -> int:
    return secrets.randbelow(2**31) if seed is None else int(seed)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _selected_tests(args) -> list[str]:
    tokens = [t.strip() for t in args.tests.split(",") if t.strip()]
    if tokens == ["all"]:
        tokens = list(_TEST_TOKENS)
    bad = [t for t in tokens if t not in _TEST_TOKENS]
    if bad:
        raise ValidationError(f"unknown test token(s) {bad}; choose from {_TEST_TOKENS}")
    if args.bootstrap_variant and "boot" in tokens:
        # --bootstrap-variant retargets the bare 'boot' token.
        tokens = [
            ("cboot" if args.bootstrap_variant == "wild_cluster" else "boot")
            if t == "boot" else t
            for t in tokens
        ]
    return list(dict.fromkeys(tokens))


def _load_dataset(args):
    path = Path(args.input)
    base = _parse_label(args.base_period) if args.base_period else None
    ds = load_panel(path, args.schema, base_period=base)
    if args.periods:
        labels = [_parse_label(x) for x in args.periods.split(",")]
        ds = select_periods(ds, labels)
    return ds, path


def _pool_mask(args):
    if not args.pool:
        return None
    cells = []
    for token in args.pool.split(","):
        m, _, k = token.partition(":")
        try:
            cells.append((int(m), int(k)))
        except ValueError:
            raise ValidationError(f"bad pool cell {token!r}; use cohort:period") from None
    return cells


def _canonical_pieces(ds, args, seed):
    fit = fit_pretrend(ds)
    cov = cluster_robust_cov(fit)
    grid = _parse_floats(args.grid) if args.grid else DEFAULT_GRID
    path = sequential_rms_path(ds, grid, seed=[seed, 1])
    effect = None
    if ds.base_period < ds.n_periods:
        full = fit_full_model(ds)
        full_cov = cluster_robust_cov(full)
        idx = ds.T  # first post-base coefficient
        effect = {
            "label": full.labels[idx],
            "estimate": float(full.beta_hat[idx]),
            "se_cluster": float(full_cov.coef_se(full.n)[idx]),
        }
    return fit, cov, path, grid, effect, None


def _staggered_pieces(ds, args, seed):
    design = build_staggered_design(ds, _pool_mask(args))
    sfit = fit_staggered(ds, design)
    placebo = extract_placebo_vector(sfit)
    grid = _parse_floats(args.grid) if args.grid else DEFAULT_GRID
    path = staggered_rms_path(ds, grid, seed=[seed, 1], pooling_mask=_pool_mask(args))
    treat = [row for row, col in zip(sfit.coef_table(), design.columns) if col.role == "treat"]
    effect = None
    if treat:
        effect = dict(treat[0])
    extras = {
        "placebo_labels": list(placebo.labels),
        "cohort_mean_adjustment": placebo.cohort_mean_adjustment,
        "control_pool": design.control_pool() if design.pooling_mask else None,
        "treatment_cells": treat,
    }
    return placebo.fit, placebo.cov, path, grid, effect, extras


def _coef_rows(fit, cov):
    ses = cov.coef_se(fit.n)
    return [
        {"label": lab, "estimate": float(b), "se_cluster": float(s)}
        for lab, b, s in zip(fit.labels, fit.beta_hat, ses)
    ]


def _provenance(args, seed, path, wtable, extra=None):
    out = {
        "version": __version__,
        "command": " ".join(getattr(args, "_argv", None) or [args.command]),
        "seed": seed,
        "input": str(path),
        "input_sha256": _sha256(path),
        "wtable": {
            "hash": wtable.content_hash(),
            "grid": list(wtable.grid),
            "reps": wtable.reps,
            "seed": wtable.seed,
        },
    }
    if extra:
        out.update(extra)
    return out


def _emit(report: dict, args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(text)


def _threshold_lines(rows: list[tuple[str, float]], effect) -> list[str]:
    lines = ["smallest equivalence thresholds (the data reject 'non-negligible "
             "trends' at any threshold above these):"]
    for name, value in rows:
        if effect and effect["estimate"]:
            ratio = value / abs(effect["estimate"])
            lines.append(f"  {name:<18}{value:>10.4f}   ({ratio:.2f} x |estimated effect|)")
        else:
            lines.append(f"  {name:<18}{value:>10.4f}")
    if effect:
        lines.append(
            f"  estimated effect  {effect['estimate']:>10.4f}   "
            f"(first post-base cell {effect['label']}, se {effect['se_cluster']:.4f})"
        )
        lines.append("  thresholds above the effect magnitude mean equivalence can only be")
        lines.append("  concluded for trend violations as large as the effect itself.")
    return lines


def cmd_test(args) -> int:
    seed = _resolve_seed(args.seed)
    ds, path = _load_dataset(args)
    tokens = _selected_tests(args)
    pieces = _staggered_pieces if ds.is_staggered else _canonical_pieces
    fit, cov, seq_path, grid, effect, extras = pieces(ds, args, seed)
    levels = sorted({args.alpha, args.alpha / 2.0, 1.0 - args.alpha / 2.0, 0.05})
    wtable = default_w_table(grid=grid, alpha_levels=tuple(levels), threads=args.threads)

    need = {"iu": args.delta, "boot": args.delta, "cboot": args.delta,
            "mean": args.tau, "rms": args.zeta}
    missing = [t for t in tokens if need[t] is None]
    if missing:
        flags = {"iu": "--delta", "boot": "--delta", "cboot": "--delta",
                 "mean": "--tau", "rms": "--zeta"}
        raise ValidationError(
            f"tests {missing} need thresholds: supply {sorted({flags[t] for t in missing})}"
        )

    results = []
    for token in tokens:
        if token == "iu":
            results.append(iu_max_test(fit, cov, args.delta, args.alpha))
        elif token in ("boot", "cboot"):
            variant = "gaussian" if token == "boot" else "wild_cluster"
            results.append(bootstrap_max_test(
                fit, args.delta, args.alpha, B=args.bootstrap_b,
                variant=variant, seed=[seed, 2 if token == "boot" else 3],
            ))
        elif token == "mean":
            results.append(mean_test(fit, cov, args.tau, args.alpha))
        else:
            results.append(rms_test(seq_path, args.zeta, args.alpha, wtable))
    interval = rms_confidence_interval(seq_path, args.alpha, wtable)

    report = {
        "kind": "test-report",
        "provenance": _provenance(args, seed, path, wtable,
                                  {"bootstrap_b": args.bootstrap_b, "grid": list(grid)}),
        "data": {
            "mode": "staggered" if ds.is_staggered else "canonical",
            "n": ds.n,
            "n_periods": ds.n_periods,
            "base_period_label": str(ds.time_labels[ds.base_period - 1]),
            "coefficients": _coef_rows(fit, cov),
        },
        "estimated_effect": effect,
        "tests": [r.to_dict() for r in results],
        "rms_squared_interval": {
            "lower": interval.lower, "upper": interval.upper,
            "lower_raw": interval.lower_raw, "alpha": interval.alpha,
        },
    }
    if extras:
        report["staggered"] = extras

    lines = [f"trendeq {__version__}  equivalence report  (seed {seed})"]
    lines.append(f"input: {path}  n={ds.n}  cells={fit.T}  "
                 f"base period={ds.time_labels[ds.base_period - 1]}")
    lines.append(f"{'cell':<22}{'estimate':>12}{'cluster se':>12}")
    for row in report["data"]["coefficients"]:
        lines.append(f"{row['label']:<22}{row['estimate']:>12.4f}{row['se_cluster']:>12.4f}")
    lines.append("")
    lines.append(f"{'test':<18}{'statistic':>11}{'critical':>11}{'thresh':>9}"
                 f"{'reject':>8}{'minimal':>10}")
    for r in results:
        crit = r.critical_value
        crit = float(np.min(crit)) if isinstance(crit, np.ndarray) else float(crit)
        minimal = "-" if r.minimal_threshold is None else f"{r.minimal_threshold:.4f}"
        lines.append(f"{r.kind:<18}{r.statistic:>11.4f}{crit:>11.4f}"
                     f"{r.threshold:>9.3g}{str(r.reject):>8}{minimal:>10}")
    lines.append("")
    rows = [(r.kind, r.minimal_threshold) for r in results if r.minimal_threshold is not None]
    lines += _threshold_lines(rows, effect)
    lines.append("")
    lines.append(f"squared-RMS {100 * (1 - interval.alpha):.0f}% interval: "
                 f"[{interval.lower:.5f}, {interval.upper:.5f}] (raw lower {interval.lower_raw:.5f})")
    _emit(report, args, "\n".join(lines))
    return 0


def cmd_thresholds(args) -> int:
    seed = _resolve_seed(args.seed)
    ds, path = _load_dataset(args)
    tokens = _selected_tests(args)
    pieces = _staggered_pieces if ds.is_staggered else _canonical_pieces
    fit, cov, seq_path, grid, effect, extras = pieces(ds, args, seed)
    levels = sorted({args.alpha, args.alpha / 2.0, 1.0 - args.alpha / 2.0, 0.05})
    wtable = default_w_table(grid=grid, alpha_levels=tuple(levels), threads=args.threads)

    probe = max(fit.max_abs, 1.0)
    minimal: dict[str, float] = {}
    for token in tokens:
        if token == "iu":
            minimal["iu_max"] = iu_max_test(fit, cov, probe, args.alpha).minimal_threshold
        elif token in ("boot", "cboot"):
            variant = "gaussian" if token == "boot" else "wild_cluster"
            res = bootstrap_max_test(
                fit, probe, args.alpha, B=args.bootstrap_b, variant=variant,
                seed=[seed, 2 if token == "boot" else 3], min_threshold=True,
            )
            minimal[res.kind] = res.minimal_threshold
        elif token == "mean":
            minimal["mean"] = mean_test(fit, cov, probe, args.alpha).minimal_threshold
        else:
            minimal["rms"] = rms_test(seq_path, probe, args.alpha, wtable).minimal_threshold

    report = {
        "kind": "thresholds-report",
        "provenance": _provenance(args, seed, path, wtable,
                                  {"bootstrap_b": args.bootstrap_b, "grid": list(grid)}),
        "data": {
            "mode": "staggered" if ds.is_staggered else "canonical",
            "n": ds.n,
            "coefficients": _coef_rows(fit, cov),
        },
        "estimated_effect": effect,
        "minimal_thresholds": minimal,
        "alpha": args.alpha,
    }
    if extras:
        report["staggered"] = extras
    lines = [f"trendeq {__version__}  minimal equivalence thresholds  "
             f"(alpha={args.alpha}, seed {seed})"]
    lines += _threshold_lines(sorted(minimal.items()), effect)
    _emit(report, args, "\n".join(lines))
    return 0


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    blocks = []
    for scn in scenarios:
        if args.seed is not None:
            from dataclasses import replace
            scn = replace(scn, seed=int(args.seed))
        report = run_study(scn, threads=args.threads)
        blocks.append(report)
        if out_dir:
            (out_dir / f"{scn.name}.json").write_text(report.to_json() + "\n")
            (out_dir / f"{scn.name}.txt").write_text(report.to_text() + "\n")
    if args.format == "json":
        print(json.dumps([b.to_dict() for b in blocks], indent=2, sort_keys=True))
    else:
        print("\n\n".join(b.to_text() for b in blocks))
    return 0


def cmd_wquantiles(args) -> int:
    grid = _parse_floats(args.grid) if args.grid else DEFAULT_W_GRID
    levels = _parse_floats(args.levels) if args.levels else DEFAULT_W_LEVELS
    table = simulate_w_quantile(grid, levels, reps=args.reps, seed=args.seed,
                                threads=args.threads)
    if args.out:
        out = Path(args.out)
    else:
        out = cache_dir() / f"wquantiles-manual-{table.content_hash()}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_json() + "\n")
    q05 = table.quantiles.get(0.05)
    if q05 is not None:
        print(f"Q(0.05) = {q05:.4f}")
    print(f"wrote {out}  (hash {table.content_hash()}, reps {table.reps}, seed {table.seed})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    handlers = {
        "test": cmd_test,
        "thresholds": cmd_thresholds,
        "simulate": cmd_simulate,
        "wquantiles": cmd_wquantiles,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

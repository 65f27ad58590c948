import numpy as np
import pytest

from trendeq import (
    ErrorSpec,
    SimulationScenario,
    ValidationError,
    fit_full_model,
    fit_pretrend,
    generate,
    run_study,
)
from trendeq.simulate import _ar3_panel, parse_scenario_text


# ---------------------------------------------------------------------------
# error process
# ---------------------------------------------------------------------------

def test_ar3_rejects_nonstationary_coefficients():
    with pytest.raises(ValidationError, match="not stationary"):
        ErrorSpec(kind="ar3", ar_coeffs=(0.7, 0.4, 0.2))
    ErrorSpec(kind="ar3", ar_coeffs=(0.5, 0.3, 0.1))  # fine


def yule_walker_variance(phi):
    # Solve the order-3 autocorrelation system, then the variance identity.
    p1, p2, p3 = phi
    # rho1 = p1 + p2 rho1 + p3 rho2 ; rho2 = p1 rho1 + p2 + p3 rho1
    a = np.array([[1 - p2, -p3], [-(p1 + p3), 1.0]])
    rho1, rho2 = np.linalg.solve(a, np.array([p1, p2]))
    rho3 = p1 * rho2 + p2 * rho1 + p3
    return 1.0 / (1.0 - p1 * rho1 - p2 * rho2 - p3 * rho3)


def test_ar3_matches_yule_walker_moments():
    rng = np.random.default_rng(0)
    phi = np.array([0.5, 0.3, 0.1])
    x = _ar3_panel(rng, n=60_000, periods=3, phi=phi)
    target = yule_walker_variance(phi)
    assert np.var(x[:, 0]) == pytest.approx(target, rel=0.03)
    # First autocorrelation from the same system.
    p1, p2, p3 = phi
    a = np.array([[1 - p2, -p3], [-(p1 + p3), 1.0]])
    rho1, _ = np.linalg.solve(a, np.array([p1, p2]))
    emp = np.mean(x[:, 0] * x[:, 1]) / np.sqrt(np.var(x[:, 0]) * np.var(x[:, 1]))
    assert emp == pytest.approx(rho1, abs=0.02)


def test_group_scale_variant_doubles_treated_sd():
    scn = SimulationScenario(
        n=4000, T=1, errors=ErrorSpec(kind="ar3", group_sd_scale="one_plus_g"),
        M=200, seed=3,
    )
    ds = generate(scn, rep=0)
    # Within-unit differences isolate the error process.
    d = np.diff(ds.outcomes, axis=1)
    sd1 = d[ds.group == 1].std()
    sd0 = d[ds.group == 0].std()
    assert sd1 / sd0 == pytest.approx(2.0, abs=0.1)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_is_deterministic_per_rep():
    scn = SimulationScenario(n=50, T=2, M=200, seed=9)
    a = generate(scn, rep=3)
    b = generate(scn, rep=3)
    np.testing.assert_array_equal(a.outcomes, b.outcomes)
    assert not np.array_equal(a.outcomes, generate(scn, rep=4).outcomes)


def test_generate_null_dgp_unbiased():
    scn = SimulationScenario(n=120, T=2, M=200, seed=1)
    betas = np.array([fit_pretrend(generate(scn, r)).beta_hat for r in range(300)])
    se = betas.std(axis=0, ddof=1) / np.sqrt(len(betas))
    assert np.all(np.abs(betas.mean(axis=0)) < 5 * se)


def test_ashenfelter_shifts_all_cells_by_minus_mu():
    mu = 0.5
    scn = SimulationScenario(
        n=150, T=2, violation=("ashenfelter", mu), M=200, seed=2,
    )
    betas, pis = [], []
    for r in range(300):
        ds = generate(scn, r)
        betas.append(fit_pretrend(ds).beta_hat)
        pis.append(fit_full_model(ds).beta_hat[-1])
    betas = np.array(betas)
    se = betas.std(axis=0, ddof=1) / np.sqrt(len(betas))
    assert np.all(np.abs(betas.mean(axis=0) - (-mu)) < 5 * se)
    pis = np.array(pis)
    assert abs(pis.mean() - (-mu)) < 5 * pis.std(ddof=1) / np.sqrt(len(pis))


def test_linear_trend_tilts_cells():
    psi = 0.1
    T = 3
    scn = SimulationScenario(
        n=150, T=T, violation=("linear_trend", psi), M=200, seed=4,
    )
    betas, pis = [], []
    for r in range(300):
        ds = generate(scn, r)
        betas.append(fit_pretrend(ds).beta_hat)
        pis.append(fit_full_model(ds).beta_hat[-1])
    betas = np.array(betas)
    expected = psi * (np.arange(1, T + 1) - (T + 1))
    se = betas.std(axis=0, ddof=1) / np.sqrt(len(betas))
    assert np.all(np.abs(betas.mean(axis=0) - expected) < 5 * se)
    pis = np.array(pis)
    assert abs(pis.mean() - psi) < 5 * pis.std(ddof=1) / np.sqrt(len(pis))


# ---------------------------------------------------------------------------
# run_study
# ---------------------------------------------------------------------------

def test_run_study_thread_count_invariant():
    scn = SimulationScenario(n=60, T=2, beta_pattern=("all_at", 1.0), M=200,
                             seed=5, bootstrap_b=500)
    r1 = run_study(scn, threads=1)
    r4 = run_study(scn, threads=4)
    assert r1.to_json() == r4.to_json()


def test_run_study_enforces_minimum_m():
    scn = SimulationScenario(n=60, T=2, M=200, seed=5)
    from dataclasses import replace

    with pytest.raises(ValidationError, match="too small"):
        run_study(replace(scn, M=50))


def test_run_study_reports_all_cells():
    scn = SimulationScenario(n=60, T=1, M=200, seed=6, bootstrap_b=500,
                             min_thresholds="fast")
    rep = run_study(scn)
    assert set(rep.rejection_rates) == {
        "iu_max", "boot_max", "cluster_boot_max", "mean", "rms"
    }
    assert set(rep.mean_min_thresholds) == {"iu_max", "mean", "rms"}
    for v in rep.rejection_rates.values():
        assert 0.0 <= v <= 1.0
    text = rep.to_text()
    assert "#insig/M" in text and "CI coverage" in text


def test_run_study_t1_iu_equals_mean_threshold():
    scn = SimulationScenario(n=80, T=1, M=200, seed=7, bootstrap_b=500)
    rep = run_study(scn)
    assert rep.mean_min_thresholds["iu_max"] == pytest.approx(
        rep.mean_min_thresholds["mean"], abs=1e-9
    )


def test_run_study_all_mode_adds_bootstrap_thresholds():
    scn = SimulationScenario(n=50, T=1, M=200, seed=8, bootstrap_b=500,
                             min_thresholds="all")
    rep = run_study(scn)
    assert "boot_max" in rep.mean_min_thresholds
    assert "cluster_boot_max" in rep.mean_min_thresholds


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def test_scenario_parse_round_trip():
    text = """
    # boundary design
    name = demo
    n = 100
    T = 2
    beta = all_at 1.0
    errors = ar3 0.5 0.3 0.1
    violation = none
    alpha = 0.05
    delta = 1.0
    tau = 1.0
    zeta = 1.0
    M = 250
    seed = 42
    bootstrap_b = 600
    min_thresholds = none
    """
    (scn,) = parse_scenario_text(text)
    assert scn.name == "demo"
    assert scn.errors.kind == "ar3"
    assert scn.errors.group_sd_scale == "none"
    assert scn.beta_pattern == ("all_at", 1.0)
    assert scn.bootstrap_b == 600


def test_scenario_grid_expansion():
    text = "name = g\nn = [50, 100]\nT = [1, 2]\nbeta = [\"zero\", \"all_at 1.0\"]\nM = 200\n"
    scns = parse_scenario_text(text)
    assert len(scns) == 8
    names = {s.name for s in scns}
    assert "g-n50-T1-zero" in names
    assert "g-n100-T2-all_at1.0" in names


def test_scenario_het_variant_and_errors():
    (scn,) = parse_scenario_text("n = 60\nT = 1\nerrors = ar3 0.5 0.3 0.1 het\nM = 200\n")
    assert scn.errors.group_sd_scale == "one_plus_g"
    with pytest.raises(ValidationError, match="unknown scenario keys"):
        parse_scenario_text("n = 60\nT = 1\nM = 200\nbogus = 1\n")
    with pytest.raises(ValidationError, match="bad beta pattern"):
        parse_scenario_text("n = 60\nT = 1\nM = 200\nbeta = everything 1\n")
    with pytest.raises(ValidationError, match="bad violation"):
        parse_scenario_text("n = 60\nT = 1\nM = 200\nviolation = dip\n")


# ---------------------------------------------------------------------------
# reference patterns at desk scale
# ---------------------------------------------------------------------------

def _threshold_means(scn, wtable, reps):
    from trendeq.covariance import cluster_robust_cov
    from trendeq.equivalence import iu_max_test, mean_test, rms_test
    from trendeq.panel import sequential_rms_path

    dius, taus, zetas = [], [], []
    for r in range(reps):
        ds = generate(scn, r)
        fit = fit_pretrend(ds)
        cov = cluster_robust_cov(fit)
        path = sequential_rms_path(ds, scn.grid, seed=[scn.seed, r, 1])
        dius.append(iu_max_test(fit, cov, 1.0, 0.05).minimal_threshold)
        taus.append(mean_test(fit, cov, 1.0, 0.05).minimal_threshold)
        zetas.append(rms_test(path, 1.0, 0.05, wtable).minimal_threshold)
    return np.mean(dius), np.mean(taus), np.mean(zetas)


def test_parallel_trends_mean_minimal_thresholds(wtable):
    # Reference means at n=1000 under exact parallel trends with iid errors:
    # T=1 -> (0.2018, 0.2017, 0.2247); T=4 -> (0.2673, 0.1570, 0.2166).
    scn1 = SimulationScenario(n=1000, T=1, errors=ErrorSpec("iid_normal"), M=500, seed=55)
    diu1, tau1, zeta1 = _threshold_means(scn1, wtable, 500)
    assert diu1 == pytest.approx(0.2018, abs=0.012)
    assert tau1 == pytest.approx(diu1, abs=1e-9)  # identical tests at T=1
    assert zeta1 == pytest.approx(0.2247, abs=0.02)
    assert zeta1 > diu1  # RMS normalizer makes the RMS threshold the widest

    scn4 = SimulationScenario(n=1000, T=4, errors=ErrorSpec("iid_normal"), M=500, seed=55)
    diu4, tau4, zeta4 = _threshold_means(scn4, wtable, 500)
    assert diu4 == pytest.approx(0.2673, abs=0.012)
    assert tau4 == pytest.approx(0.1570, abs=0.012)
    assert zeta4 == pytest.approx(0.2166, abs=0.02)
    assert tau4 < zeta4 < diu4


def test_linear_trend_thresholds_grow_with_horizon(wtable):
    # With a linear group trend (slope 0.025, n=1000) the mean and RMS
    # minimal thresholds increase in T; reference means:
    # tau* 0.1853 -> 0.2696 and zeta* 0.2342 -> 0.3122 from T=4 to T=12.
    means = {}
    for T in (4, 12):
        scn = SimulationScenario(n=1000, T=T, errors=ErrorSpec("iid_normal"),
                                 violation=("linear_trend", 0.025), M=300, seed=56)
        _, tau, zeta = _threshold_means(scn, wtable, 300)
        means[T] = (tau, zeta)
    assert means[4][0] == pytest.approx(0.1853, abs=0.02)
    assert means[12][0] == pytest.approx(0.2696, abs=0.02)
    assert means[4][1] == pytest.approx(0.2342, abs=0.02)
    assert means[12][1] == pytest.approx(0.3122, abs=0.02)
    assert means[12][0] > means[4][0]
    assert means[12][1] > means[4][1]


def test_shipped_scenario_files_parse():
    from trendeq import load_scenarios
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "scenarios"
    files = sorted(root.glob("*.scn"))
    assert len(files) >= 6
    for f in files:
        scns = load_scenarios(f)
        assert scns, f
        for scn in scns:
            assert scn.M >= 200

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendeq import (
    PanelDataset,
    ValidationError,
    RankError,
    double_demean,
    fit_full_model,
    fit_pretrend,
    load_panel,
    select_periods,
    sequential_rms_path,
)
from conftest import make_panel


# ---------------------------------------------------------------------------
# load_panel
# ---------------------------------------------------------------------------

CANONICAL_SCHEMA = "unit=unit,time=time,outcome=y,group=group"


def test_load_minimal_balanced_panel():
    csv = "unit,time,y,group\n1,1,0.5,0\n1,2,0.7,0\n2,1,1.0,1\n2,2,1.4,1\n"
    ds = load_panel(io.StringIO(csv), CANONICAL_SCHEMA)
    assert ds.n == 2
    assert ds.n_periods == 2
    assert ds.base_period == 2  # defaults to the last period
    assert list(ds.unit_labels) == [1, 2]
    assert ds.outcomes[1, 1] == 1.4


def test_load_unbalanced_names_missing_pair():
    csv = "unit,time,y,group\n1,1,0.5,0\n2,1,1.0,1\n2,2,1.4,1\n"
    with pytest.raises(ValidationError, match="unbalanced: unit 1 missing time 2"):
        load_panel(io.StringIO(csv), CANONICAL_SCHEMA)


def test_load_rejects_non_binary_group():
    csv = "unit,time,y,group\n1,1,0.5,0\n1,2,0.7,0\n2,1,1.0,2\n2,2,1.4,2\n"
    with pytest.raises(ValidationError, match="non-binary group"):
        load_panel(io.StringIO(csv), CANONICAL_SCHEMA)


def test_load_rejects_unknown_cohort_label():
    csv = "unit,time,y,cohort\n1,1,0.5,inf\n1,2,0.7,inf\n2,1,1.0,soon\n2,2,1.4,soon\n"
    with pytest.raises(ValidationError, match="unknown cohort label"):
        load_panel(io.StringIO(csv), "unit=unit,time=time,outcome=y,cohort=cohort")


def test_load_rejects_duplicate_rows():
    csv = "unit,time,y,group\n1,1,0.5,0\n1,1,0.6,0\n1,2,0.7,0\n2,1,1.0,1\n2,2,1.4,1\n"
    with pytest.raises(ValidationError, match="duplicate"):
        load_panel(io.StringIO(csv), CANONICAL_SCHEMA)


def test_load_rejects_time_varying_covariate():
    csv = (
        "unit,time,y,cohort,x\n"
        "1,1,0.5,inf,1.0\n1,2,0.7,inf,2.0\n"
        "2,1,1.0,3,0.5\n2,2,1.4,3,0.5\n"
    )
    with pytest.raises(ValidationError, match="varies within unit"):
        load_panel(io.StringIO(csv), "unit=unit,time=time,outcome=y,cohort=cohort,x=x")


def test_select_periods_reindexes_base():
    rng = np.random.default_rng(0)
    ds = make_panel(rng, n=12, T=3)
    sub = select_periods(ds, [2, 3, 4])
    assert sub.n_periods == 3
    assert sub.base_period == 3
    assert list(sub.time_labels) == [2, 3, 4]
    np.testing.assert_allclose(sub.outcomes, ds.outcomes[:, 1:4])


def test_requires_both_groups():
    with pytest.raises(ValidationError, match="non-empty"):
        PanelDataset.from_arrays(np.zeros((3, 2)), group=np.array([1, 1, 1]))


# ---------------------------------------------------------------------------
# double_demean
# ---------------------------------------------------------------------------

def test_demean_kills_constants():
    g = np.array([0, 1, 0, 1])
    ds = PanelDataset.from_arrays(np.full((4, 3), 7.3), group=g, base_period=3)
    dm = double_demean(ds)
    np.testing.assert_allclose(dm.ddY, 0.0, atol=1e-12)


def test_demean_kills_additive_effects():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(6)
    b = rng.standard_normal(4)
    y = a[:, None] + b[None, :]
    g = np.array([0, 1, 0, 1, 0, 1])
    ds = PanelDataset.from_arrays(y, group=g, base_period=4)
    dm = double_demean(ds)
    np.testing.assert_allclose(dm.ddY, 0.0, atol=1e-12)


def test_demean_row_and_column_sums_vanish():
    rng = np.random.default_rng(2)
    y = rng.standard_normal((5, 4))
    g = np.array([0, 1, 1, 0, 1])
    ds = PanelDataset.from_arrays(y, group=g, base_period=4)
    dm = double_demean(ds)
    # Direct summation oracle on both margins.
    assert np.abs(dm.ddY.sum(axis=0)).max() < 1e-12
    assert np.abs(dm.ddY.sum(axis=1)).max() < 1e-12
    assert np.abs(dm.ddW.sum(axis=0)).max() < 1e-12
    assert np.abs(dm.ddW.sum(axis=1)).max() < 1e-12


def test_demean_idempotent():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((7, 4))
    g = (rng.random(7) < 0.5).astype(int)
    g[:2] = [0, 1]
    ds = PanelDataset.from_arrays(y, group=g, base_period=4)
    once = double_demean(ds)
    ds2 = PanelDataset.from_arrays(once.ddY, group=g, base_period=4)
    twice = double_demean(ds2)
    np.testing.assert_allclose(twice.ddY, once.ddY, atol=1e-12)


def test_demean_subset_uses_subset_time_means():
    rng = np.random.default_rng(4)
    ds = make_panel(rng, n=10, T=2)
    subset = np.array([0, 2, 5, 7])
    dm = double_demean(ds, subset=subset)
    assert dm.ddY.shape == (4, 3)
    # Column sums vanish over the subset, row sums over periods.
    assert np.abs(dm.ddY.sum(axis=0)).max() < 1e-12
    assert np.abs(dm.ddY.sum(axis=1)).max() < 1e-12


def test_demean_rejects_empty_subset_and_post_periods():
    rng = np.random.default_rng(5)
    ds = make_panel(rng, n=8, T=2)
    with pytest.raises(ValidationError, match="empty"):
        double_demean(ds, subset=np.array([], dtype=int))
    with pytest.raises(ValidationError, match="post-treatment"):
        double_demean(ds, periods=[1, 2, 3, 4])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_demean_annihilates_any_additive_structure(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    P = int(rng.integers(2, 6))
    y = rng.standard_normal(n)[:, None] + rng.standard_normal(P)[None, :]
    g = np.zeros(n, dtype=int)
    g[: max(1, n // 2)] = 1
    if g.all():
        g[-1] = 0
    ds = PanelDataset.from_arrays(y, group=g, base_period=P)
    dm = double_demean(ds)
    assert np.abs(dm.ddY).max() < 1e-10


# ---------------------------------------------------------------------------
# fit_pretrend
# ---------------------------------------------------------------------------

def lsdv_oracle(ds: PanelDataset, periods: list[int], coef_periods: list[int]) -> np.ndarray:
    """Least squares with explicit unit/time dummies (the slow, obvious way)."""
    n = ds.n
    cols = []
    rows_y = []
    rows_x = []
    for i in range(n):
        for p in periods:
            rows_y.append(ds.outcomes[i, p - 1])
            row = [1.0]
            row += [1.0 if i == j else 0.0 for j in range(1, n)]
            row += [1.0 if p == q else 0.0 for q in periods[1:]]
            row += [float(ds.group[i]) if p == c else 0.0 for c in coef_periods]
            rows_x.append(row)
    X = np.array(rows_x)
    y = np.array(rows_y)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef[-len(coef_periods):]


def test_fit_recovers_noiseless_coefficients():
    rng = np.random.default_rng(6)
    n, T = 10, 2
    g = np.array([0, 1] * 5)
    beta = np.array([0.3, -0.2])
    effect = np.array([0.3, -0.2, 0.0, 1.7])  # arbitrary post effect
    y = rng.standard_normal(n)[:, None] + rng.standard_normal(4)[None, :] + np.outer(g, effect)
    ds = PanelDataset.from_arrays(y, group=g, base_period=3)
    fit = fit_pretrend(ds)
    np.testing.assert_allclose(fit.beta_hat, beta, atol=1e-10)


def test_fit_matches_lsdv_oracle():
    rng = np.random.default_rng(7)
    ds = make_panel(rng, n=6, T=3, beta=np.array([0.5, -0.1, 0.2]), noise=1.0)
    fit = fit_pretrend(ds)
    oracle = lsdv_oracle(ds, periods=[1, 2, 3, 4], coef_periods=[1, 2, 3])
    np.testing.assert_allclose(fit.beta_hat, oracle, atol=1e-8)


def test_fit_matches_lsdv_on_many_random_instances():
    rng = np.random.default_rng(8)
    for _ in range(25):
        n = int(rng.integers(4, 11))
        T = int(rng.integers(1, 5))
        ds = make_panel(rng, n=n, T=T, noise=1.0)
        fit = fit_pretrend(ds)
        periods = list(range(1, T + 2))
        oracle = lsdv_oracle(ds, periods, periods[:-1])
        np.testing.assert_allclose(fit.beta_hat, oracle, atol=1e-8)


def test_full_model_matches_lsdv_and_pretrend():
    rng = np.random.default_rng(9)
    ds = make_panel(rng, n=8, T=2, beta=np.array([0.4, 0.1]), pi_att=0.9, noise=0.8)
    full = fit_full_model(ds)
    oracle = lsdv_oracle(ds, periods=[1, 2, 3, 4], coef_periods=[1, 2, 4])
    np.testing.assert_allclose(full.beta_hat, oracle, atol=1e-8)
    # Cell saturation: placebo estimates agree with the pre-window fit.
    pre = fit_pretrend(ds)
    np.testing.assert_allclose(full.beta_hat[:2], pre.beta_hat, atol=1e-10)


def test_fit_permutation_invariance():
    rng = np.random.default_rng(10)
    ds = make_panel(rng, n=15, T=2)
    perm = rng.permutation(ds.n)
    ds_perm = PanelDataset.from_arrays(
        ds.outcomes[perm], group=ds.group[perm], base_period=ds.base_period
    )
    np.testing.assert_allclose(
        fit_pretrend(ds).beta_hat, fit_pretrend(ds_perm).beta_hat, atol=1e-12
    )


def test_fit_residuals_orthogonal_to_design():
    rng = np.random.default_rng(11)
    ds = make_panel(rng, n=20, T=3, noise=1.3)
    fit = fit_pretrend(ds)
    inner = np.einsum("itl,it->l", fit.demeaned.ddW, fit.residuals)
    scale = np.abs(fit.demeaned.ddW).max() * np.abs(fit.residuals).max() * fit.n
    assert np.abs(inner).max() < 1e-8 * max(scale, 1.0)


def test_fit_monte_carlo_unbiased():
    rng = np.random.default_rng(12)
    reps, hits = 500, []
    for _ in range(reps):
        ds = make_panel(rng, n=200, T=2, beta=np.array([1.0, 1.0]), noise=1.0)
        hits.append(fit_pretrend(ds).beta_hat)
    est = np.array(hits)
    se = est.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(est.mean(axis=0) - 1.0) < 5 * se)


def test_fit_rank_error_when_one_group_empty():
    y = np.random.default_rng(13).standard_normal((5, 3))
    ds = PanelDataset.from_arrays(y, group=np.array([0, 1, 1, 1, 1]), base_period=3)
    from trendeq.panel import _fit_cells

    with pytest.raises(RankError, match="no treated units"):
        _fit_cells(ds, [1, 2, 3], [1, 2], subset=np.array([0]))
    with pytest.raises(RankError, match="no control units"):
        _fit_cells(ds, [1, 2, 3], [1, 2], subset=np.array([1, 2]))


# ---------------------------------------------------------------------------
# sequential_rms_path
# ---------------------------------------------------------------------------

def test_path_zero_on_noiseless_additive_data():
    rng = np.random.default_rng(14)
    n = 25
    g = (rng.random(n) < 0.5).astype(int)
    g[:2] = [0, 1]
    y = rng.standard_normal(n)[:, None] + rng.standard_normal(4)[None, :]
    ds = PanelDataset.from_arrays(y, group=g, base_period=3)
    path = sequential_rms_path(ds, seed=0)
    np.testing.assert_allclose(path.rms_sq, 0.0, atol=1e-20)
    assert path.v_hat < 1e-20


def test_path_last_point_equals_full_fit_exactly():
    rng = np.random.default_rng(15)
    ds = make_panel(rng, n=40, T=3, noise=1.0)
    path = sequential_rms_path(ds, seed=123)
    fit = fit_pretrend(ds)
    assert path.rms_sq_full == fit.rms_sq  # bitwise, not approximate
    assert path.rms_sq[-1] == path.rms_sq_full


def test_path_v_hat_matches_direct_formula():
    rng = np.random.default_rng(16)
    ds = make_panel(rng, n=45, T=2, beta=np.array([0.7, 0.7]), noise=1.0)
    path = sequential_rms_path(ds, seed=7)
    direct = np.sqrt(np.mean((path.rms_sq[:-1] - path.rms_sq[-1]) ** 2))
    assert path.v_hat == pytest.approx(direct, rel=1e-15)
    assert len(path.grid) == 5


def test_path_rejects_too_small_subsample():
    rng = np.random.default_rng(17)
    ds = make_panel(rng, n=12, T=3)
    with pytest.raises(ValidationError, match="too small"):
        sequential_rms_path(ds, grid=(0.2, 1.0), seed=0)


def test_path_grid_validation():
    rng = np.random.default_rng(18)
    ds = make_panel(rng, n=30, T=1)
    with pytest.raises(ValidationError, match="strictly increasing"):
        sequential_rms_path(ds, grid=(0.4, 0.2, 1.0), seed=0)
    with pytest.raises(ValidationError, match="last grid value"):
        sequential_rms_path(ds, grid=(0.2, 0.8), seed=0)


def test_path_v_hat_shrinks_with_n():
    # Root-n self-normalizer: growing n by 9 shrinks the median v_hat by ~3.
    rng = np.random.default_rng(19)
    meds = []
    for n in (90, 810):
        vals = [
            sequential_rms_path(
                make_panel(rng, n=n, T=2, beta=np.array([1.0, 1.0]), noise=1.0),
                seed=int(rng.integers(2**31)),
            ).v_hat
            for _ in range(120)
        ]
        meds.append(np.median(vals))
    ratio = meds[0] / meds[1]
    assert 2.0 < ratio < 4.5

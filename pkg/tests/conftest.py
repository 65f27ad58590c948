import numpy as np
import pytest

from trendeq import PanelDataset
from trendeq.dist import simulate_w_quantile


def make_panel(
    rng: np.random.Generator,
    n: int = 30,
    T: int = 3,
    beta: np.ndarray | None = None,
    pi_att: float = 0.0,
    noise: float = 0.5,
    n_post: int = 1,
) -> PanelDataset:
    """Random canonical panel with known placebo coefficients."""
    periods = T + 1 + n_post
    g = (rng.random(n) < 0.5).astype(int)
    g[0], g[1] = 0, 1  # both groups always present
    effect = np.zeros(periods)
    if beta is not None:
        effect[:T] = beta
    if n_post:
        effect[T + 1] = pi_att
    y = (
        rng.standard_normal(n)[:, None]
        + rng.standard_normal(periods)[None, :]
        + np.outer(g, effect)
        + noise * rng.standard_normal((n, periods))
    )
    return PanelDataset.from_arrays(y, group=g, base_period=T + 1)


@pytest.fixture
def panel_factory():
    return make_panel


@pytest.fixture(scope="session")
def wtable():
    # Medium-size table shared by the unit tests; the acceptance suite runs
    # the full 1e6-replication simulation itself.
    return simulate_w_quantile(reps=400_000, seed=20240801)

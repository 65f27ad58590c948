"""Equivalence testing for pre-treatment trends in difference-in-differences panels.

Typical flow: load or build a :class:`~trendeq.panel.PanelDataset`, fit the
placebo coefficients with :func:`~trendeq.panel.fit_pretrend`, then run any of
the equivalence tests in :mod:`trendeq.equivalence` (max, bootstrap max, mean,
self-normalized RMS) or search for the smallest threshold at which equivalence
of pre-trends can be concluded.
"""

from .covariance import CovEstimate, cluster_robust_cov, spherical_sigma
from .dist import (
    WQuantileTable,
    default_w_table,
    folded_normal_cdf,
    folded_normal_quantile,
    folded_test_power,
    simulate_w_quantile,
)
from .equivalence import (
    RmsConfidenceInterval,
    TestResult,
    bootstrap_max_test,
    constrained_estimate,
    iu_max_test,
    mean_test,
    minimal_threshold,
    rms_confidence_interval,
    rms_test,
)
from .errors import NumericalError, RankError, TrendeqError, ValidationError
from .panel import (
    DEFAULT_GRID,
    DemeanedPanel,
    PanelDataset,
    PretrendFit,
    SequentialPath,
    double_demean,
    fit_full_model,
    fit_pretrend,
    load_panel,
    select_periods,
    sequential_rms_path,
)
from .simulate import (
    ErrorSpec,
    SimulationScenario,
    StudyReport,
    generate,
    load_scenarios,
    run_study,
)
from .staggered import (
    PlaceboVector,
    StaggeredDesign,
    StaggeredFit,
    build_staggered_design,
    extract_placebo_vector,
    fit_staggered,
    staggered_rms_path,
)

__version__ = "0.1.0"

__all__ = [
    "CovEstimate", "cluster_robust_cov", "spherical_sigma",
    "WQuantileTable", "default_w_table", "folded_normal_cdf",
    "folded_normal_quantile", "folded_test_power", "simulate_w_quantile",
    "RmsConfidenceInterval", "TestResult", "bootstrap_max_test",
    "constrained_estimate", "iu_max_test", "mean_test", "minimal_threshold",
    "rms_confidence_interval", "rms_test",
    "NumericalError", "RankError", "TrendeqError", "ValidationError",
    "DEFAULT_GRID", "DemeanedPanel", "PanelDataset", "PretrendFit",
    "SequentialPath", "double_demean", "fit_full_model", "fit_pretrend",
    "load_panel", "select_periods", "sequential_rms_path",
    "ErrorSpec", "SimulationScenario", "StudyReport", "generate",
    "load_scenarios", "run_study",
    "PlaceboVector", "StaggeredDesign", "StaggeredFit",
    "build_staggered_design", "extract_placebo_vector", "fit_staggered",
    "staggered_rms_path",
    "__version__",
]

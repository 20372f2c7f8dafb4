"""Event-study estimation with heterogeneous treatment effects.

Two-way fixed-effects estimators, the implicit cohort weights behind them,
interaction-weighted and doubly robust alternatives, and a Monte Carlo
harness.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .panel import (
    NEVER,
    CohortLayout,
    DemeanedMatrix,
    DesignConfig,
    Panel,
    RelativeTimeDesign,
    build_design,
    cohort_layout,
    demean_two_way,
    load_panel,
)
from .regression import EstimateSet, WaldResult, cluster_vcov, joint_fe_iw_vcov, wald_test, within_ols
from .estimators import (
    ESTIMATED,
    NORMALIZED_ZERO,
    UNIDENTIFIED,
    CattTable,
    IWResult,
    did_catt,
    dynamic_fe,
    iw_dynamic,
    iw_static,
    pretrend_test,
    saturated_catt,
    static_fe,
)
from .weights import WeightDecomposition, dynamic_weights, reconstruct_fe, static_weights
from .montecarlo import DGPSpec, StudySummary, three_cohort_spec, parse_spec, run_study, simulate_panel
from .dr import (
    CovariatePanel,
    DRResult,
    NuisanceSet,
    dr_estimate,
    dr_score,
    ipw_catt,
    orthogonality_check,
    regression_adjust,
)

"""udebias: debiased two-sample U-statistics with cross-fitting.

The package estimates two-sample pair-kernel means with cross-fitted
nuisances and applies them to testing equality of conditional response
distributions under covariate shift.
"""

__version__ = "0.1.0"

from .covshift import (
    TestConfig,
    TieBreakTags,
    comparison_a,
    debiased_kernel,
    double_robustness_probe,
    draw_tags,
    influence_mean_zero_check,
    plugin_kernel,
    run_test,
    run_test_multi,
)
from .dataio import (
    Dataset,
    PartitionSpec,
    load_csv,
    partition,
    repeated_partition_test,
    twice_median_pvalue,
)
from .nuisance import (
    NuisanceBundle,
    NuisanceConfig,
    fit_alpha,
    fit_density_ratio,
    fit_score_s,
    train_bundle,
)
from .simlab import (
    GaussianShiftModel,
    SimConfig,
    apply_ratio_cutoff,
    gen_highdim,
    gen_lowdim,
    run_trials,
)
from .solvers import (
    LassoPath,
    LinearModel,
    fit_lasso_cd,
    fit_logistic_irls,
    fit_ols,
    lasso_cv,
    stability_selection,
)
from .ustat import (
    FoldEstimates,
    FoldGrid,
    LabeledPoint,
    PairKernel,
    Sample,
    TestReport,
    aggregate,
    cross_fit,
    cross_fit_evaluations,
    make_fold_grid,
    normal_cdf,
    normal_quantile,
    u_statistic,
    variance_estimate,
    z_test,
)

__all__ = [
    "__version__",
    "TestConfig", "TieBreakTags", "comparison_a", "debiased_kernel",
    "double_robustness_probe", "draw_tags", "influence_mean_zero_check",
    "plugin_kernel", "run_test", "run_test_multi",
    "Dataset", "PartitionSpec", "load_csv", "partition",
    "repeated_partition_test", "twice_median_pvalue",
    "NuisanceBundle", "NuisanceConfig", "fit_alpha", "fit_density_ratio",
    "fit_score_s", "train_bundle",
    "GaussianShiftModel", "SimConfig", "apply_ratio_cutoff",
    "gen_highdim", "gen_lowdim", "run_trials",
    "LassoPath", "LinearModel", "fit_lasso_cd", "fit_logistic_irls",
    "fit_ols", "lasso_cv", "stability_selection",
    "FoldEstimates", "FoldGrid", "LabeledPoint", "PairKernel", "Sample",
    "TestReport", "aggregate", "cross_fit", "cross_fit_evaluations",
    "make_fold_grid", "normal_cdf", "normal_quantile", "u_statistic",
    "variance_estimate", "z_test",
]

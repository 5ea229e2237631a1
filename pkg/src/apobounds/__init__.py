"""Sharp bounds and bootstrap confidence intervals for continuous-treatment effects.

The average potential outcome of a continuous treatment is point-identified
only under ignorability. This package bounds it under a user-chosen
multiplicative cap ``Gamma`` on how strongly unobserved confounders can
shift the treatment density, producing the tightest interval consistent
with that cap plus a percentile-bootstrap confidence interval, and ships
the nuisance estimators, a synthetic-data generator with closed-form
ground truth, and a rival bound method for comparison.
"""

from .analysis import (
    AnalysisConfig,
    NuisancePredictor,
    RESULT_SCHEMA,
    ResultRecord,
    SensitivityResult,
    benchmark_methods,
    cross_fit,
    preprocess_dataset,
    run_sensitivity,
    standardize_dataset,
)
from .baseline import BaselineConfig, baseline_apo_bounds, baseline_capo_bounds
from .bootstrap import (
    BootstrapConfig,
    compute_nuisances,
    percentile_ci,
    percentile_interval,
    select_bandwidth,
)
from .core import (
    ApoBoundsError,
    BoundResult,
    CiUnreliableError,
    Dataset,
    EmptyNeighborhoodError,
    EmptyTailError,
    FineTuneFailedError,
    KernelFamily,
    KernelSpec,
    NuisanceTable,
    NumericError,
    Sensitivity,
    TrainingDivergedError,
    UnbracketedRootError,
    ValidationError,
    empirical_quantile,
    kernel_eval,
    kernel_weights,
    sensitivity_from_gamma_big,
    tau_grid,
    trim_gps,
)
from .density import (
    ConditionalGaussianMixture,
    DensityModel,
    LinearGaussianModel,
    MdnConfig,
    MixtureDensityNetwork,
    TrainReport,
    fine_tune,
    fit_gps,
    fit_outcome_density,
    load_model,
    mixture_cdf,
    mixture_mean,
    mixture_pdf,
    save_model,
    warm_start_refit,
)
from .estimators import (
    BoundForm,
    BoundSide,
    DiscreteConditional,
    EstimatorKind,
    apo_point,
    discrete_baseline_bound,
    discrete_bound_lp_oracle,
    discrete_sharp_bound,
    discrete_sharp_weights,
    dr_bounds_sample,
    sharp_bounds_sample,
)
from .quantile import QuantileRequest, conditional_quantile, mixture_quantile_batch
from .simulation import (
    OracleGpsModel,
    OracleOutcomeModel,
    SimConfig,
    SimSample,
    build_sigma,
    calibrate_gamma,
    generate,
    oracle_full_gps,
    oracle_gps,
    oracle_outcome_density,
    remove_hat_outliers,
    true_apo,
    true_capo,
    true_sharp_apo_bounds,
    true_sharp_capo_bounds,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

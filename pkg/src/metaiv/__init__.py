"""Vector-valued causal effects from meta-analyses of randomized experiments.

Experimental groups act as instruments: regressing group-level outcome
means on group-level causal-variable means recovers causal effects, a
p-value hard threshold on the group means removes the weak groups that
drive the estimator's large-K bias, and a within-group fold split selects
that threshold against an interventional rather than predictive loss. The
fold split works from raw unit rows or, via exact conditional Gaussian
sampling, from summary statistics alone.
"""

__version__ = "0.1.0"

from .errors import (
    BadParameters,
    BadSpec,
    DegenerateCovariance,
    EstimationError,
    FileDimensionMismatch,
    FileFormatError,
    GroupTooSmall,
    InsufficientRetainedGroups,
    LengthMismatch,
    MetaIVError,
    NoEstimableThreshold,
    SingularDesign,
    SingularNullCovariance,
    TooFewControlGroups,
    TooFewGroups,
    TooFewRows,
    ValidationError,
    ZeroDenominator,
)
from .model import (
    CvResult,
    FirstStageGen,
    FromFile,
    GroupSummary,
    IndependentT,
    MetaDataset,
    NoiseModel,
    RegularizedEstimate,
    ScaleMixtureNormal,
    SimulationSpec,
    TwoComponentMixture,
    WishartT,
    firststage_from_dict,
    firststage_to_dict,
    from_json,
    to_json,
)
from .nulldist import (
    NullPValue,
    estimate_noise_from_controls,
    l0_threshold,
    null_p_value,
    null_p_values,
)
from .estimators import (
    BiasParams,
    grouped_tsls,
    observational_bias_closed_form,
    observational_ols,
    oracle_estimator,
    regularized_iv,
    tsls_bias_closed_form,
)
from .crossval import (
    RawUnitData,
    SplitPair,
    conditional_split,
    conditional_split_dataset,
    default_grid,
    group_means,
    half_noise_model,
    ivcv_loss,
    ivcv_select,
    select_threshold,
    sivcv_select,
    split_raw,
)
from .simgen import (
    ExperimentReport,
    EstimatorSummary,
    LossCurves,
    SimOutput,
    analytic_tau,
    baseline_losses,
    causal_mse,
    gen_first_stage,
    run_experiment,
    simulate_meta,
)
from . import presets, tables

__all__ = [name for name in dir() if not name.startswith("_")]

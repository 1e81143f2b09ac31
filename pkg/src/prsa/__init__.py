"""Searchlight RSA with partial-correlation control of design-induced bias."""

from .exceptions import (
    CollinearityError,
    ConfigError,
    DegenerateModelError,
    DegenerateSignal,
    DesignError,
    EstimationError,
    FilterError,
    FormatError,
    InferenceError,
    NumericError,
    ParameterError,
    PRSAError,
    SingularDesignError,
)
from .glm import (
    BetaDataset,
    DesignMatrix,
    EventTable,
    GLSRegression,
    HrfParams,
    NoiseModel,
    build_design,
    canonical_hrf,
    coefficient_covariance_sandwich,
    dct_highpass,
    design_bcov,
    estimate_ar1,
    fit_two_pass,
    gls_fit,
)
from .inference import (
    GroupResult,
    RsaMap,
    average_volume_correlation,
    bcov_label_permutation,
    group_ttest,
    label_permutation_diagnostic,
    permutation_maxt,
    smooth_gaussian,
)
from .rsa import (
    ConfounderSet,
    SearchlightRSA,
    SimilarityMatrix,
    VectorizationRule,
    brain_neg_correlation,
    brain_sscp,
    build_confounders,
    partial_correlation,
    pearson,
    searchlight_rsa,
    spearman,
    stimulus_similarity,
    vectorize,
    volume_bb,
    volume_svar,
)
from .simulate import (
    Fig1Design,
    LabelPattern,
    SimulationConfig,
    generate_noise_volumes,
    make_fig1_events,
    pattern_labels,
    run_fig1_experiment,
)
from .volumes import (
    Mask,
    SearchlightSpec,
    VolumeGeometry,
    enumerate_searchlights,
    read_volume,
    searchlight_offsets,
    write_volume,
)

__version__ = "0.1.0"

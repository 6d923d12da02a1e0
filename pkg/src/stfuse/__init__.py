"""Spatiotemporal raster fusion: reference-free radiometric normalization,
probability-map refinement and semantic-guided DSM fusion over co-registered
multitemporal stacks."""

__version__ = "0.1.0"

from .errors import (
    DimensionError,
    EmptyDistributionError,
    EmptyEvaluationError,
    FormatError,
    LabelingError,
    ParameterError,
    StackError,
    StfuseError,
    TruncationError,
    ValidationError,
)
from .fuse import FuseConfig, fuse_dsm, fuse_report, resolve_sigma_h
from .metrics import completeness, overall_accuracy, rmse, temporal_consistency
from .preprocess import (
    RULE_CLASSES,
    RuleThresholds,
    compute_ndsm,
    compute_ndvi,
    histogram_match,
    rule_classify,
    seed_probability_maps,
    temporal_median,
)
from .raster import (
    ClassMap,
    ImageStack,
    ProbabilityStack,
    RasterGrid,
    StackManifest,
    read_raster,
    validate_stack,
    write_raster,
    write_stack,
)
from .refine import (
    RefineConfig,
    argmax_classify,
    estimate_sigma_h,
    height_weight,
    refine_step,
    refine_until_converged,
)
from .stfilter import (
    BandwidthConfig,
    spatial_weight,
    spectral_weight,
    st_bilateral_filter,
    temporal_weight,
)
from .synth import SceneSpec, SplitMix64, synth_generate, write_bundle

"""Meta-training and evaluation engine for width-robust per-parameter
learned optimizers."""

from .baselines import MUADAM_M, MUADAM_S, AdamHyper, AdamState, GridSpec, adam_step, grid_search
from .features import FEATURE_COLUMNS, NUM_FEATURES, FeatureConfig, feature_matrix, init_state, update_state
from .lo import (
    FLAT_DIM,
    LOWeights,
    UpdateRuleConfig,
    apply_update,
    init_lo,
    lo_forward,
    load_checkpoint,
    save_checkpoint,
)
from .optimizee import (
    Dataset,
    ForwardRecord,
    MLPSpec,
    OptimizeeParams,
    backward,
    forward,
    init_mlp,
    load_dataset,
    make_gaussian_mixture,
    sample_batch,
    save_dataset,
)
from .parametrization import (
    LayerGeometry,
    LayerRole,
    MultiplierSet,
    ParamMode,
    forward_multiplier,
    init_std,
    update_scale,
)
from .pes import (
    AdamWConfig,
    MetaTrainConfig,
    OuterSchedule,
    PESConfig,
    PesEstimator,
    TaskSet,
    TaskSpec,
    meta_train,
    outer_step,
)
from .tensor import RngStream, gaussian, matmul

__version__ = "0.1.0"

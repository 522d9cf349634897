"""miencap: real-time facial-expression retargeting for stylized characters.

Tracker blendshape weights go through calibration, a history-conditioned
adaption network, and per-character secondary maps to produce clamped rig
controller values, streamable over a small NDJSON/WebSocket protocol.
"""

from .errors import (
    DegenerateGeometryError,
    DimensionError,
    FormatError,
    InfiniteDivergenceError,
    MienCapError,
    StreamError,
    TrainingDivergedError,
    ValidationError,
)
from .features import (
    EMOTION_LABELS,
    FEATURE_NAMES,
    LANDMARK_COUNT,
    FeatureStats,
    LandmarkSet,
    MeanFace,
    SemanticIndexMap,
    denormalize_features,
    fit_mean_face,
    fit_stats,
    geometric_features,
    normalize_features,
    register_landmarks,
    validate_emotion_distribution,
)
from .neural import (
    Dataset,
    DenseLayer,
    NetworkModel,
    TrainConfig,
    backward,
    create_network,
    forward,
    forward_batch,
    gradient_check,
    load_model,
    mse_loss,
    save_model,
    sgd_train,
    softmax_cross_entropy,
)
from .retarget import (
    BlendshapeFrame,
    CalibrationProfile,
    HistoryBuffer,
    PipelineConfig,
    PipelineManifest,
    RetargetPipeline,
    TrainingTuple,
    apply_calibration,
    build_adaption_input,
    build_pipeline,
    build_training_tuples,
    calibrate,
    jitter_metric,
    load_manifest,
    save_manifest,
    upsample_linear,
)
from .retrieval import (
    ExpressionDatabase,
    ExpressionRecord,
    MatchPair,
    build_pair_database,
    geometric_distance,
    jsd,
    kl_divergence,
    load_database,
    load_pairs,
    save_database,
    save_pairs,
    two_step_match,
)
from .rig import (
    BlendshapeBank,
    CharacterRig,
    ControllerFrame,
    ControllerSpec,
    Mesh,
    clamp_controllers,
    compose_blendshapes,
    export_mesh,
    import_mesh,
    load_bank,
    load_rig,
    save_bank,
    save_rig,
)

__version__ = "0.1.0"

"""Face pyramid vision transformer on the fpvt_tensor autodiff engine.

Example:
    import numpy as np
    import fpvt

    model = fpvt.build_model(fpvt.toy_config(), rng_seed=0)
    features = fpvt.forward_features(model, fpvt.Tensor(np.zeros((2, 3, 32, 32))))
    print([seq.length for seq in features.stages])  # [64, 16]
    print(fpvt.audit(model).total)
"""

__version__ = "0.1.0"

from fpvt_tensor import Tensor

from .attention import (
    AttnConfig,
    EncoderLayer,
    FaceSpatialReductionAttention,
    encoder_layer,
    fsra_forward,
    multi_head_attention,
    pool_kv,
    spatial_reduce,
)
from .bench import BenchReport, bench_inference, relative_speed
from .cffn import CffnConfig, ConvFeedForward, cffn_forward, depthwise_param_count
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import OptimConfig, RunConfig, TrainConfig, load_config, parse_config_text, to_text
from .data import SyntheticFaceSpec, augment, generate_dataset, generate_image, make_pairs, read_pairs
from .exceptions import (
    CheckpointError,
    ConfigError,
    ConfigWarning,
    DataError,
    Error,
    GradCheckError,
    GradientError,
    InterfaceError,
    NumericalError,
    PairsFormatError,
    ProtocolError,
    ShapeError,
    TrainingDivergedError,
    UnknownIdentityError,
    Warning,
)
from .fdr_head import (
    FdrConfig,
    FdrState,
    LossConfig,
    assign_groups,
    corresponding_anchor,
    fdr_forward,
    margin_softmax_loss,
    parameter_saving,
)
from .patch_embed import IpeConfig, TokenSequence, add_positional, embed, patch_count
from .pyramid import (
    AuditReport,
    FacePyramidTransformer,
    ModelConfig,
    MultiScaleFeatures,
    StageConfig,
    audit,
    build_model,
    forward_features,
    fpvt_config,
    toy_config,
)
from .train import Trainer
from .verification import EvalReport, VerificationPair, kfold_verification

__all__ = [
    "Tensor",
    # Patch embedding
    "IpeConfig",
    "TokenSequence",
    "patch_count",
    "embed",
    "add_positional",
    # Attention
    "AttnConfig",
    "FaceSpatialReductionAttention",
    "EncoderLayer",
    "spatial_reduce",
    "pool_kv",
    "multi_head_attention",
    "fsra_forward",
    "encoder_layer",
    # Feed-forward
    "CffnConfig",
    "ConvFeedForward",
    "cffn_forward",
    "depthwise_param_count",
    # Pyramid
    "StageConfig",
    "ModelConfig",
    "MultiScaleFeatures",
    "FacePyramidTransformer",
    "AuditReport",
    "build_model",
    "forward_features",
    "audit",
    "toy_config",
    "fpvt_config",
    # Head
    "FdrConfig",
    "FdrState",
    "LossConfig",
    "assign_groups",
    "corresponding_anchor",
    "fdr_forward",
    "margin_softmax_loss",
    "parameter_saving",
    # Pipeline
    "SyntheticFaceSpec",
    "generate_image",
    "generate_dataset",
    "augment",
    "make_pairs",
    "read_pairs",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "Trainer",
    "VerificationPair",
    "EvalReport",
    "kfold_verification",
    "BenchReport",
    "bench_inference",
    "relative_speed",
    # Configuration
    "RunConfig",
    "OptimConfig",
    "TrainConfig",
    "load_config",
    "parse_config_text",
    "to_text",
    # Exceptions
    "Warning",
    "Error",
    "ShapeError",
    "DataError",
    "NumericalError",
    "GradientError",
    "GradCheckError",
    "ConfigWarning",
    "InterfaceError",
    "ConfigError",
    "PairsFormatError",
    "ProtocolError",
    "CheckpointError",
    "UnknownIdentityError",
    "TrainingDivergedError",
]

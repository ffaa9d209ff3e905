"""SO(3)-equivariant interatomic potential toolkit with block-structured
pruning: calibration, importance scoring, equivariance-preserving slicing,
retraining, and benchmarking."""

from .irreps import (
    FeatureTensor,
    IrrepsLayout,
    LayerMask,
    PruneMask,
    apply_block_mask,
    gather_features,
    slice_layout,
)
from .model import (
    AtomicSystem,
    ModelConfig,
    ModelParams,
    Prediction,
    build_model,
    predict,
    predict_batch,
    receptive_field,
    uniform_config,
)
from .so3 import CGCache, Rotation, WignerBlock, clebsch_gordan, random_rotation, wigner_d

__version__ = "0.1.0"

__all__ = [
    "AtomicSystem",
    "CGCache",
    "FeatureTensor",
    "IrrepsLayout",
    "LayerMask",
    "ModelConfig",
    "ModelParams",
    "Prediction",
    "PruneMask",
    "Rotation",
    "WignerBlock",
    "apply_block_mask",
    "build_model",
    "clebsch_gordan",
    "gather_features",
    "predict",
    "predict_batch",
    "random_rotation",
    "receptive_field",
    "slice_layout",
    "uniform_config",
    "wigner_d",
    "__version__",
]

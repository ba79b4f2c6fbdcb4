"""Task-aware per-pixel kernel prediction for rain, snow and haze removal.

Everything runs on numpy with hand-written gradients.  The usual entry
points are re-exported here; the submodules hold the rest.
"""

from .degrade import DegradationKind, oracle_inverse, to_affine
from .image_core import load_image, read_tensor, save_image, write_tensor
from .kernel_engine import apply_multiscale_fast, apply_multiscale_naive, gather_samples, uncertainty_map
from .kpn_net import Model, ModelConfig, init_model, two_stage_forward
from .losses import LossWeights, total_loss
from .metrics import evaluate, psnr, ssim
from .trainer import TrainConfig, parse_config, train

__version__ = "0.1.0"

__all__ = [
    "DegradationKind",
    "oracle_inverse",
    "to_affine",
    "load_image",
    "save_image",
    "read_tensor",
    "write_tensor",
    "gather_samples",
    "apply_multiscale_fast",
    "apply_multiscale_naive",
    "uncertainty_map",
    "Model",
    "ModelConfig",
    "init_model",
    "two_stage_forward",
    "LossWeights",
    "total_loss",
    "psnr",
    "ssim",
    "evaluate",
    "TrainConfig",
    "parse_config",
    "train",
]

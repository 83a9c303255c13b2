"""MS-Net on a small numpy autodiff engine: domain-specific batch normalization,
multi-site knowledge transfer, synthetic multi-site data and evaluation."""

from .engine import ContractError, ShapeError, Tensor, backward, fd_check
from .model import ArchConfig, ModelParams, build_model, forward_aux, forward_universal, strip_aux
from .train import TrainConfig, train_dsbn, train_joint, train_msnet, train_separate

__all__ = [
    "ArchConfig", "ContractError", "ModelParams", "ShapeError", "Tensor", "TrainConfig",
    "backward", "build_model", "fd_check", "forward_aux", "forward_universal", "strip_aux",
    "train_dsbn", "train_joint", "train_msnet", "train_separate",
]
__version__ = "0.1.0"

"""Cascaded dynamic-filter dehazing network on a small numpy autodiff core."""
from .tensor import NonFiniteError, Tensor, default_dtype, get_dtype, no_grad, set_dtype
from .network import CasDyFBlock, CasDyFNet, ModelConfig
from .dfs import Cascade, CascadeConfig
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .training import LossConfig, ScheduleConfig, TrainConfig, cosine_lr, evaluate, fit, multiscale_loss
from .metrics import psnr, ssim
from .analysis import composite_spectrum, count_params_flops, erf_map, kernel_spectrum

__all__ = [
    "NonFiniteError", "Tensor", "default_dtype", "get_dtype", "no_grad", "set_dtype",
    "CasDyFBlock", "CasDyFNet", "ModelConfig", "Cascade", "CascadeConfig",
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "LossConfig", "ScheduleConfig", "TrainConfig", "cosine_lr", "evaluate", "fit", "multiscale_loss",
    "psnr", "ssim", "composite_spectrum", "count_params_flops", "erf_map", "kernel_spectrum",
]

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import conv2d, gaussian_window, lcn, linear, maxpool2
from .model import DESK, FULL, Architecture, EmbedderParams, embed, init_params, shape_trace
from .optim import NonFiniteGradient, OptimizerState, sgd_step

__all__ = [
    "Architecture", "CheckpointError", "DESK", "EmbedderParams", "FULL", "NonFiniteGradient",
    "OptimizerState", "conv2d", "embed", "gaussian_window", "init_params", "lcn", "linear",
    "load_checkpoint", "maxpool2", "save_checkpoint", "sgd_step", "shape_trace",
]

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import swish
from .transformer import (
    ForwardOutput,
    ModelConfig,
    TransformerModel,
    batch_loss,
    forward,
    gradients,
    init_model,
    label_smoothed_loss,
    make_batch,
    parameter_count,
    smoothing_floor,
)

__all__ = [
    "ForwardOutput",
    "ModelConfig",
    "TransformerModel",
    "batch_loss",
    "forward",
    "gradients",
    "init_model",
    "label_smoothed_loss",
    "load_checkpoint",
    "make_batch",
    "parameter_count",
    "save_checkpoint",
    "smoothing_floor",
    "swish",
]

from .ops import (add, affine, avg_pool2, bilinear_up2, cast, concat_channels, conv2d, crop,
                  detach, gelu, group_norm, pad_reflect, relu, total, weighted_l1)
from .optim import Parameter, adam_step, decay_lr
from .serialize import ParameterFormatError, read_ptmw, write_ptmw
from .tensor import NonFiniteError, Tensor, as_tensor, backward, no_grad, set_debug

__all__ = [
    "Tensor", "Parameter", "NonFiniteError", "ParameterFormatError",
    "add", "affine", "as_tensor", "avg_pool2", "backward", "bilinear_up2", "cast",
    "concat_channels", "conv2d", "crop", "decay_lr", "detach", "gelu", "group_norm",
    "no_grad", "pad_reflect", "read_ptmw", "relu", "set_debug", "total", "weighted_l1",
    "adam_step", "write_ptmw",
]

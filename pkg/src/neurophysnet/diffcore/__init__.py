"""Float64 tensors, reverse-mode differentiation and network layers."""

from . import ops
from .gradcheck import GradCheckReport, check_operator, grad_check
from .layers import (BatchNorm, Conv1d, Conv2d, Dropout, LayerNorm, Linear, Module,
                     MultiheadAttention, Parameter, TransformerEncoder, TransformerEncoderLayer)
from .ops import (batch_norm, conv1d, conv2d, cross_entropy, dropout, layer_norm, linear,
                  maxpool1d, maxpool2d, multi_head_attention, relu, softmax)
from .tensor import Tape, Tensor, as_tensor, backward, get_tape, no_grad

__all__ = [
    "BatchNorm", "Conv1d", "Conv2d", "Dropout", "GradCheckReport", "LayerNorm", "Linear",
    "Module", "MultiheadAttention", "Parameter", "Tape", "Tensor", "TransformerEncoder",
    "TransformerEncoderLayer", "as_tensor", "backward", "batch_norm", "check_operator",
    "conv1d", "conv2d", "cross_entropy", "dropout", "get_tape", "grad_check", "layer_norm",
    "linear", "maxpool1d", "maxpool2d", "multi_head_attention", "no_grad", "ops", "relu",
    "softmax",
]

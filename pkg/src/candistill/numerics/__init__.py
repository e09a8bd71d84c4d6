"""Minimal numpy-backed tensor engine with reverse-mode differentiation"""

from .functional import (
    cross_entropy,
    glorot_uniform,
    layer_norm,
    log_softmax,
    one_hot,
    relu,
    sigmoid,
    soft_cross_entropy,
    softmax,
    tanh,
)
from .module import LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .store import load_parameters, read_metadata, save_parameters
from .tensor import Parameter, Tape, Tensor, active_tape, backward, concat, debug_checks, matmul, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "debug_checks",
    "glorot_uniform",
    "layer_norm",
    "load_parameters",
    "log_softmax",
    "matmul",
    "no_grad",
    "one_hot",
    "read_metadata",
    "relu",
    "save_parameters",
    "sigmoid",
    "soft_cross_entropy",
    "softmax",
    "tanh",
]

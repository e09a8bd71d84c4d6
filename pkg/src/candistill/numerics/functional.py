"""Activations, normalisation and losses built on the tape"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def sigmoid(x: Tensor) -> Tensor:
    # 0.5 * (1 + tanh(x/2)) never overflows and is exactly 0.5 at zero
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(out, [(x, lambda g: g * out * (1.0 - out))])


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, [(x, lambda g: g * (1.0 - out * out))])


def relu(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._result(np.maximum(a, 0.0), [(x, lambda g: g * (a > 0))])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> np.ndarray:
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return Tensor._result(out, [(x, rule)])


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g: np.ndarray) -> np.ndarray:
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return Tensor._result(out, [(x, rule)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift"""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    centred = x - x.mean(axis=-1, keepdims=True)
    variance = (centred * centred).mean(axis=-1, keepdims=True)
    normalised = centred / (variance + eps).sqrt()
    return normalised * gain + bias


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_c target_c * log softmax(logits)_c"""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (batch, classes) tensor, got {logits.shape}")
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    return -(log_softmax(logits, axis=-1) * Tensor(targets)).sum(axis=-1).mean()


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(classes, dtype=dtype)[labels]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels, via log-sum-exp"""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"cross_entropy needs a non-empty batch, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("cross_entropy needs at least two classes")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    return soft_cross_entropy(logits, one_hot(labels, logits.shape[1], logits.dtype))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)

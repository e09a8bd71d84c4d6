"""Transformer-encoder teacher over tokenized CAN frames"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .canio import VOCAB_SIZE, DatasetSplit, EncodedDataset, TokenSequence
from .errors import ConfigError, ShapeError
from .numerics import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    cross_entropy,
    relu,
    softmax,
)
from .training import EpochHook, StepHook, TrainingHistory, fit, seeded_generators

logger = logging.getLogger(__name__)

MASK_PENALTY = -1e9
RESIDUAL_FORMS = ("stacked", "post_norm")


@dataclass
class TeacherConfig:
    layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_length: int = 16
    vocab_size: int = VOCAB_SIZE
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 3
    # "stacked": M = g(E) + f(E + g(E)); "post_norm": M = f(E + g(E))
    residual: str = "stacked"
    layer_norm_eps: float = 1e-5
    grad_clip: float = 5.0
    min_improvement: float = 1e-4
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("layers", "d_model", "n_heads", "d_ff", "max_length", "vocab_size", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"teacher.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"teacher.d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("teacher.epochs must be >= 0 and learning_rate > 0")
        if self.residual not in RESIDUAL_FORMS:
            raise ConfigError(f"teacher.residual must be one of {RESIDUAL_FORMS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("teacher.dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(max_length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd columns"""
    positions = np.arange(max_length, dtype=np.float64)[:, None]
    pairs = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, pairs / d_model)
    table = np.zeros((max_length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


class EmbeddingLayer(Module):
    """Token lookup W_e[token] + b_e, i.e. W_e applied to a one-hot vector"""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, dtype=np.float64):
        limit = math.sqrt(6.0 / (vocab_size + d_model))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(vocab_size, d_model)).astype(dtype))
        self.bias = Parameter(np.zeros(d_model, dtype=dtype))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def __call__(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ShapeError(f"token id outside vocabulary of size {self.vocab_size}")
        return self.weight[tokens] + self.bias


def mask_penalty(mask: np.ndarray, dtype) -> Tensor:
    """Additive (batch, 1, keys) term: 0 for real keys, -1e9 for padding"""
    mask = np.asarray(mask, dtype=bool)
    return Tensor(np.where(mask, 0.0, MASK_PENALTY)[:, None, :].astype(dtype))


def scaled_dot_product(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None
) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d) + penalty) V; returns (output, attention weights)"""
    d = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(d)
    if mask is not None:
        scores = scores + mask_penalty(mask, q.dtype)
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


class AttentionHead(Module):
    def __init__(self, d_model: int, d_head: int, rng: np.random.Generator, dtype=np.float64):
        limit = math.sqrt(6.0 / (d_model + d_head))
        self.w_q = Parameter(rng.uniform(-limit, limit, size=(d_model, d_head)).astype(dtype))
        self.w_k = Parameter(rng.uniform(-limit, limit, size=(d_model, d_head)).astype(dtype))
        self.w_v = Parameter(rng.uniform(-limit, limit, size=(d_model, d_head)).astype(dtype))

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> tuple[Tensor, Tensor]:
        return scaled_dot_product(x @ self.w_q, x @ self.w_k, x @ self.w_v, mask)


class MultiHeadAttention(Module):
    """Heads concatenated then projected back to d_model (sub-layer g)"""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.heads = [AttentionHead(d_model, d_model // n_heads, rng, dtype) for _ in range(n_heads)]
        self.output = Linear(d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        outputs = [head(x, mask)[0] for head in self.heads]
        return self.output(concat(outputs, axis=-1))


class FeedForward(Module):
    """Position-wise two-layer ReLU network (sub-layer z)"""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float64):
        self.inner = Linear(d_model, d_ff, rng, dtype)
        self.outer = Linear(d_ff, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))


class TransformerBlock(Module):
    def __init__(self, config: TeacherConfig, rng: np.random.Generator, dtype=np.float64):
        self.attention = MultiHeadAttention(config.d_model, config.n_heads, rng, dtype)
        self.feed_forward = FeedForward(config.d_model, config.d_ff, rng, dtype)
        self.norm1 = LayerNorm(config.d_model, config.layer_norm_eps, dtype)
        self.norm2 = LayerNorm(config.d_model, config.layer_norm_eps, dtype)
        self._residual = config.residual

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        attended = self.attention(x, mask)
        if self._residual == "stacked":
            m = attended + self.norm1(x + attended)
        else:
            m = self.norm1(x + attended)
        transformed = self.feed_forward(m)
        if self._residual == "stacked":
            return transformed + self.norm2(m + transformed)
        return self.norm2(m + transformed)


class TeacherModel(Module):
    """Embedding, L transformer blocks and an affine head on the CLS position"""

    input_kind = "tokens"

    def __init__(self, config: TeacherConfig, rng: np.random.Generator):
        config.validate()
        dtype = np.dtype(config.dtype)
        self.config = config
        self.embedding = EmbeddingLayer(config.vocab_size, config.d_model, rng, dtype)
        self._positions = Tensor(positional_encoding(config.max_length, config.d_model).astype(dtype))
        self.blocks = [TransformerBlock(config, rng, dtype) for _ in range(config.layers)]
        self.head = Linear(config.d_model, 2, rng, dtype)

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.shape[-1] != self.config.max_length:
            raise ShapeError(f"expected {self.config.max_length} tokens, got {tokens.shape[-1]}")
        return self.embedding(tokens) + self._positions

    def encode(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        hidden = self.embed(tokens)
        for block in self.blocks:
            hidden = block(hidden, mask)
        return hidden

    def __call__(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        hidden = self.encode(tokens, mask)
        return self.head(hidden[:, 0, :])

    def batch_logits(self, dataset: EncodedDataset, idx: np.ndarray) -> Tensor:
        return self(dataset.tokens[idx], dataset.mask[idx])


def build_teacher(config: TeacherConfig, seed: int = 0) -> TeacherModel:
    init_rng, _ = seeded_generators(seed)
    return TeacherModel(config, init_rng)


def embed(model: TeacherModel, sequence: TokenSequence) -> Tensor:
    """Embeddings of one sequence, shape (max_length, d_model)"""
    return model.embed(np.array([sequence.tokens]))[0]


def attention(
    head: AttentionHead, embedded: Tensor, mask: Optional[Sequence[bool]] = None
) -> tuple[Tensor, Tensor]:
    """One head over one sequence (length, d_model); returns (output, weights)"""
    batch_mask = None if mask is None else np.array([mask], dtype=bool)
    out, weights = head(embedded.reshape(1, *embedded.shape), batch_mask)
    return out[0], weights[0]


def block_forward(block: TransformerBlock, embedded: Tensor, mask: Optional[Sequence[bool]] = None) -> Tensor:
    batch_mask = None if mask is None else np.array([mask], dtype=bool)
    return block(embedded.reshape(1, *embedded.shape), batch_mask)[0]


def teacher_forward(model: TeacherModel, sequence: TokenSequence) -> Tensor:
    """Two logits for a single token sequence"""
    logits = model(np.array([sequence.tokens]), np.array([sequence.attention_mask], dtype=bool))
    return logits[0]


def train_teacher(
    split: DatasetSplit,
    config: TeacherConfig,
    seed: int = 0,
    on_step: Optional[StepHook] = None,
    on_epoch: Optional[EpochHook] = None,
) -> tuple[TeacherModel, TrainingHistory]:
    """Supervised cross-entropy training; returns the final-epoch model"""
    config.validate()
    train = split.train
    train.require_both_classes()
    if train.max_length != config.max_length:
        raise ShapeError(f"dataset max_length {train.max_length} != teacher max_length {config.max_length}")

    init_rng, shuffle_rng = seeded_generators(seed)
    model = TeacherModel(config, init_rng)
    logger.info(
        "training teacher: %d parameters, %d examples, %d epoch(s)",
        model.num_parameters(),
        len(train),
        config.epochs,
    )

    def objective(idx: np.ndarray):
        loss = cross_entropy(model.batch_logits(train, idx), train.labels[idx])
        return loss, {"ce": loss.item()}

    history = fit(
        model,
        objective,
        len(train),
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        shuffle_rng=shuffle_rng,
        grad_clip=config.grad_clip,
        min_improvement=config.min_improvement,
        on_step=on_step,
        on_epoch=on_epoch,
    )
    return model, history

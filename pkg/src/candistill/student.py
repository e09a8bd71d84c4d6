"""Lightweight students: a BiLSTM over the 10 feature fields and a small DNN"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .canio import FEATURE_DIM, DatasetSplit, EncodedDataset, FeatureVector
from .errors import ConfigError, ShapeError
from .numerics import (
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    cross_entropy,
    glorot_uniform,
    relu,
    sigmoid,
    tanh,
)
from .training import EpochHook, StepHook, TrainingHistory, fit, seeded_generators

logger = logging.getLogger(__name__)

STUDENT_KINDS = ("bilstm", "dnn")


@dataclass
class StudentConfig:
    kind: str = "bilstm"
    hidden_size: int = 64
    lstm_layers: int = 2
    dnn_layers: int = 2
    batch_size: int = 1024
    learning_rate: float = 5e-3
    epochs: int = 8
    grad_clip: float = 5.0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.kind not in STUDENT_KINDS:
            raise ConfigError(f"student.kind must be one of {STUDENT_KINDS}, got {self.kind!r}")
        for name in ("hidden_size", "lstm_layers", "dnn_layers", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"student.{name} must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("student.epochs must be >= 0 and learning_rate > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("student.dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


class LstmCell(Module):
    """Four gates, each a sigmoid/tanh of W [h_{t-1}, x_t] + b"""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float64):
        width = hidden_size + input_size
        self.w_i = Parameter(glorot_uniform(rng, width, hidden_size, dtype))
        self.w_o = Parameter(glorot_uniform(rng, width, hidden_size, dtype))
        self.w_f = Parameter(glorot_uniform(rng, width, hidden_size, dtype))
        self.w_c = Parameter(glorot_uniform(rng, width, hidden_size, dtype))
        self.b_i = Parameter(np.zeros(hidden_size, dtype=dtype))
        self.b_o = Parameter(np.zeros(hidden_size, dtype=dtype))
        self.b_f = Parameter(np.zeros(hidden_size, dtype=dtype))
        self.b_c = Parameter(np.zeros(hidden_size, dtype=dtype))
        self.input_size = input_size
        self.hidden_size = hidden_size


def lstm_step(cell: LstmCell, h_prev: Tensor, c_prev: Tensor, x_t: Tensor) -> tuple[Tensor, Tensor]:
    """One timestep over batched (B, h), (B, h), (B, input) tensors"""
    if h_prev.shape[-1] != cell.hidden_size or c_prev.shape[-1] != cell.hidden_size:
        raise ShapeError(f"state width must be {cell.hidden_size}, got {h_prev.shape} / {c_prev.shape}")
    if x_t.shape[-1] != cell.input_size:
        raise ShapeError(f"input width must be {cell.input_size}, got {x_t.shape}")
    joined = concat([h_prev, x_t], axis=-1)
    i_t = sigmoid(joined @ cell.w_i + cell.b_i)
    o_t = sigmoid(joined @ cell.w_o + cell.b_o)
    f_t = sigmoid(joined @ cell.w_f + cell.b_f)
    candidate = tanh(joined @ cell.w_c + cell.b_c)
    c_t = f_t * c_prev + i_t * candidate
    h_t = o_t * tanh(c_t)
    return h_t, c_t


class BiLstm(Module):
    """Forward and backward LSTM stacks; final states concatenated into a 2-logit head"""

    input_kind = "features"

    def __init__(self, config: StudentConfig, rng: np.random.Generator):
        dtype = np.dtype(config.dtype)
        h = config.hidden_size
        self.config = config
        self.forward_cells = [
            LstmCell(1 if layer == 0 else h, h, rng, dtype) for layer in range(config.lstm_layers)
        ]
        self.backward_cells = [
            LstmCell(1 if layer == 0 else h, h, rng, dtype) for layer in range(config.lstm_layers)
        ]
        self.head = Linear(2 * h, 2, rng, dtype)

    @staticmethod
    def _run_stack(cells: list[LstmCell], steps: list[Tensor]) -> Tensor:
        batch = steps[0].shape[0]
        for cell in cells:
            zeros = np.zeros((batch, cell.hidden_size), dtype=steps[0].dtype)
            h, c = Tensor(zeros), Tensor(zeros)
            outputs = []
            for x_t in steps:
                h, c = lstm_step(cell, h, c, x_t)
                outputs.append(h)
            steps = outputs
        return steps[-1]

    def encode(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Final forward and backward hidden states of the top layer"""
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
            raise ShapeError(f"expected (batch, {FEATURE_DIM}) features, got {features.shape}")
        steps = [features[:, t : t + 1] for t in range(FEATURE_DIM)]
        forward = self._run_stack(self.forward_cells, steps)
        backward = self._run_stack(self.backward_cells, steps[::-1])
        return forward, backward

    def __call__(self, features: Tensor) -> Tensor:
        forward, backward = self.encode(features)
        return self.head(concat([forward, backward], axis=-1))

    def batch_logits(self, dataset: EncodedDataset, idx: np.ndarray) -> Tensor:
        return self(Tensor(dataset.features[idx].astype(self.head.weight.dtype)))


class DnnModel(Module):
    """ReLU hidden layers followed by a linear 2-logit readout"""

    input_kind = "features"

    def __init__(self, config: StudentConfig, rng: np.random.Generator):
        dtype = np.dtype(config.dtype)
        widths = [FEATURE_DIM] + [config.hidden_size] * config.dnn_layers
        self.config = config
        self.hidden = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.output = Linear(widths[-1], 2, rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
            raise ShapeError(f"expected (batch, {FEATURE_DIM}) features, got {features.shape}")
        x = features
        for layer in self.hidden:
            x = relu(layer(x))
        return self.output(x)

    def batch_logits(self, dataset: EncodedDataset, idx: np.ndarray) -> Tensor:
        return self(Tensor(dataset.features[idx].astype(self.output.weight.dtype)))


StudentModel = Union[BiLstm, DnnModel]


def build_student(config: StudentConfig, rng: np.random.Generator) -> StudentModel:
    config.validate()
    return BiLstm(config, rng) if config.kind == "bilstm" else DnnModel(config, rng)


def _as_batch(x: Union[FeatureVector, np.ndarray, Tensor], dtype) -> Tensor:
    if isinstance(x, FeatureVector):
        x = x.as_array()
    if isinstance(x, Tensor):
        return x.reshape(1, -1) if x.ndim == 1 else x
    array = np.asarray(x, dtype=dtype)
    return Tensor(array.reshape(1, -1) if array.ndim == 1 else array)


def bilstm_forward(model: BiLstm, sequence: Union[FeatureVector, np.ndarray, Tensor]) -> Tensor:
    """Two logits for a single 10-field sequence"""
    x = _as_batch(sequence, model.head.weight.dtype)
    if x.shape != (1, FEATURE_DIM):
        raise ShapeError(f"BiLSTM input must have {FEATURE_DIM} steps, got shape {x.shape}")
    return model(x)[0]


def dnn_forward(model: DnnModel, x: Union[FeatureVector, np.ndarray, Tensor]) -> Tensor:
    batch = _as_batch(x, model.output.weight.dtype)
    if batch.shape != (1, FEATURE_DIM):
        raise ShapeError(f"DNN input must have {FEATURE_DIM} components, got shape {batch.shape}")
    return model(batch)[0]


def train_student_plain(
    split: DatasetSplit,
    config: StudentConfig,
    seed: int = 0,
    on_step: Optional[StepHook] = None,
    on_epoch: Optional[EpochHook] = None,
) -> tuple[StudentModel, TrainingHistory]:
    """Cross-entropy-only baseline; returns the final-epoch model"""
    config.validate()
    train = split.train
    train.require_both_classes()
    init_rng, shuffle_rng = seeded_generators(seed)
    model = build_student(config, init_rng)
    logger.info(
        "training %s student (plain CE): %d parameters, %d examples",
        config.kind,
        model.num_parameters(),
        len(train),
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
        on_step=on_step,
        on_epoch=on_epoch,
    )
    return model, history

"""Shared mini-batch training loop for the teacher and the students"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import TrainingError
from .numerics import Adam, Module, Tape, Tensor, clip_grad_norm

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[Tensor, dict[str, float]]]
StepHook = Callable[[dict[str, Any]], None]
EpochHook = Callable[[Module, int, float], dict[str, Any]]


def seeded_generators(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for weight initialisation and batch shuffling"""
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(shuffle_seq)


@dataclass
class EpochSummary:
    epoch: int
    train_loss: float
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"event": "epoch", "epoch": self.epoch, "train_loss": self.train_loss, **self.extra}


@dataclass
class TrainingHistory:
    epochs: list[EpochSummary] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def fit(
    model: Module,
    objective: Objective,
    n_examples: int,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    shuffle_rng: np.random.Generator,
    grad_clip: Optional[float] = 5.0,
    min_improvement: Optional[float] = None,
    on_step: Optional[StepHook] = None,
    on_epoch: Optional[EpochHook] = None,
) -> TrainingHistory:
    """Run Adam over shuffled mini-batches for a fixed epoch budget.

    Stops early when ``min_improvement`` is set and the epoch loss improves
    by less than it.
    """
    if n_examples == 0:
        raise TrainingError("training set is empty")
    if batch_size <= 0:
        raise TrainingError(f"batch_size must be positive, got {batch_size}")

    params = model.parameters()
    optimizer = Adam(params, learning_rate=learning_rate)
    history = TrainingHistory()

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n_examples)
        running = 0.0
        for start in range(0, n_examples, batch_size):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                loss, parts = objective(idx)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite at step {history.steps + 1}")
            tape.backward(loss)
            norm = clip_grad_norm(params, grad_clip) if grad_clip else None
            optimizer.step()

            running += value * len(idx)
            history.steps += 1
            if on_step is not None:
                on_step({"event": "step", "step": history.steps, "epoch": epoch, "loss": value, **parts})
            logger.debug(
                "epoch %d step %d loss %.6f grad-norm %s", epoch, history.steps, value, norm
            )

        epoch_loss = running / n_examples
        extra = on_epoch(model, epoch, epoch_loss) if on_epoch is not None else {}
        history.epochs.append(EpochSummary(epoch=epoch, train_loss=epoch_loss, extra=extra))
        logger.info("epoch %d/%d train loss %.6f", epoch, epochs, epoch_loss)

        if min_improvement is not None and len(history.epochs) > 1:
            if history.epochs[-2].train_loss - epoch_loss < min_improvement:
                history.stopped_early = True
                logger.info("loss improved by less than %g; stopping after epoch %d", min_improvement, epoch)
                break
    return history

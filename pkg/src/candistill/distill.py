"""Knowledge distillation from the transformer teacher into a student"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .canio import DatasetSplit, EncodedDataset
from .errors import ConfigError, DatasetError
from .numerics import Tensor, cross_entropy, log_softmax, no_grad, softmax
from .student import StudentConfig, StudentModel, build_student
from .teacher import TeacherModel
from .training import EpochHook, StepHook, TrainingHistory, fit, seeded_generators

logger = logging.getLogger(__name__)

TEACHER_BATCH = 2048


@dataclass
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.5
    student: StudentConfig = field(default_factory=StudentConfig)
    # "both": student log-probabilities also use T; "strict": student at T=1
    student_temperature: str = "both"
    scale_by_t_squared: bool = False

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"distill.temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"distill.alpha must lie in [0, 1], got {self.alpha}")
        if self.student_temperature not in ("both", "strict"):
            raise ConfigError("distill.student_temperature must be 'both' or 'strict'")
        self.student.validate()

    def to_dict(self) -> dict:
        return asdict(self)


def soften_logits(logits: Union[Tensor, np.ndarray], temperature: float) -> Tensor:
    """exp(Z_i / T) / sum_j exp(Z_j / T) along the last axis"""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return softmax(logits / temperature, axis=-1)


def kd_loss(
    student_logits: Tensor,
    teacher_soft: Union[Tensor, np.ndarray],
    temperature: float,
    strict: bool = False,
) -> Tensor:
    """-(1/K) sum_{i,c} teacher_ic * log P^S_ic, with K the batch size"""
    if student_logits.ndim != 2 or student_logits.shape[0] == 0:
        raise DatasetError("distillation loss needs a non-empty batch")
    targets = teacher_soft.data if isinstance(teacher_soft, Tensor) else np.asarray(teacher_soft)
    if targets.shape != student_logits.shape:
        raise DatasetError(
            f"teacher targets {targets.shape} do not match student logits {student_logits.shape}"
        )
    scale = 1.0 if strict else temperature
    log_probs = log_softmax(student_logits / scale, axis=-1)
    weighted = log_probs * Tensor(targets.astype(student_logits.dtype))
    return -weighted.sum(axis=-1).mean()


def combined_loss(ce, kd, alpha: float):
    """alpha * CE + (1 - alpha) * KD; works for floats and tensors alike"""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * ce + (1.0 - alpha) * kd


def teacher_soft_targets(
    teacher: TeacherModel,
    dataset: EncodedDataset,
    temperature: float,
    threads: int = 1,
    batch_size: int = TEACHER_BATCH,
) -> np.ndarray:
    """Temperature-softened teacher distribution for every example, teacher frozen"""

    def shard(start: int) -> np.ndarray:
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        with no_grad():
            return soften_logits(teacher.batch_logits(dataset, idx), temperature).data.astype(np.float64)

    starts = range(0, len(dataset), batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(shard, starts))
    else:
        parts = [shard(s) for s in starts]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))


def train_student_with_kd(
    split: DatasetSplit,
    teacher: TeacherModel,
    config: DistillConfig,
    seed: int = 0,
    threads: int = 1,
    on_step: Optional[StepHook] = None,
    on_epoch: Optional[EpochHook] = None,
) -> tuple[StudentModel, TrainingHistory]:
    """Blend hard-label CE with the teacher's softened distribution"""
    config.validate()
    train = split.train
    train.require_both_classes()
    if len(train.tokens) != len(train.features) or len(train.features) != len(train.labels):
        raise DatasetError("teacher and student inputs are misaligned (count mismatch)")

    soft = teacher_soft_targets(teacher, train, config.temperature, threads=threads)
    if len(soft) != len(train):
        raise DatasetError(f"teacher produced {len(soft)} targets for {len(train)} examples")

    init_rng, shuffle_rng = seeded_generators(seed)
    model = build_student(config.student, init_rng)
    logger.info(
        "distilling into %s student: T=%g alpha=%g, %d examples",
        config.student.kind,
        config.temperature,
        config.alpha,
        len(train),
    )
    strict = config.student_temperature == "strict"
    kd_scale = config.temperature**2 if config.scale_by_t_squared else 1.0

    def objective(idx: np.ndarray):
        logits = model.batch_logits(train, idx)
        ce = cross_entropy(logits, train.labels[idx])
        kd = kd_loss(logits, soft[idx], config.temperature, strict=strict)
        if kd_scale != 1.0:
            kd = kd * kd_scale
        loss = combined_loss(ce, kd, config.alpha)
        return loss, {"ce": ce.item(), "kd": kd.item()}

    history = fit(
        model,
        objective,
        len(train),
        epochs=config.student.epochs,
        batch_size=config.student.batch_size,
        learning_rate=config.student.learning_rate,
        shuffle_rng=shuffle_rng,
        grad_clip=config.student.grad_clip,
        on_step=on_step,
        on_epoch=on_epoch,
    )
    return model, history

"""Experiment records: one directory per run with config, checkpoint, log and metrics"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .errors import CheckpointError, ConfigError, DatasetError
from .evaluation import MetricsReport
from .numerics import load_parameters, save_parameters
from .student import StudentConfig, StudentModel, build_student
from .teacher import TeacherConfig, TeacherModel

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
LOG_FILE = "train.log.jsonl"
METRICS_FILE = "metrics.json"
CHECKPOINTS = {"teacher": "teacher.ckpt", "student": "student.ckpt"}

Model = Union[TeacherModel, StudentModel]


class TrainingLog:
    """Append-only JSON-lines sink for step and epoch events"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w")

    def write(self, event: dict[str, Any]) -> None:
        self._file.write(json.dumps(event, sort_keys=True) + "\n")

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_training_log(path: Path) -> list[dict[str, Any]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def model_kind(model: Model) -> str:
    return "teacher" if isinstance(model, TeacherModel) else "student"


@dataclass
class ExperimentRecord:
    """A run directory laid out as ``<dir>/{config.json, *.ckpt, train.log.jsonl, metrics.json}``"""

    directory: Path

    def __post_init__(self):
        self.directory = Path(self.directory)

    @property
    def name(self) -> str:
        return self.directory.name

    @property
    def config_path(self) -> Path:
        return self.directory / CONFIG_FILE

    @property
    def log_path(self) -> Path:
        return self.directory / LOG_FILE

    @property
    def metrics_path(self) -> Path:
        return self.directory / METRICS_FILE

    def checkpoint_path(self, kind: str) -> Path:
        return self.directory / CHECKPOINTS[kind]

    def create(self) -> "ExperimentRecord":
        self.directory.mkdir(parents=True, exist_ok=True)
        return self

    def open_log(self) -> TrainingLog:
        return TrainingLog(self.log_path)

    def save_model(self, model: Model, metadata: Optional[dict[str, Any]] = None) -> Path:
        kind = model_kind(model)
        path = self.checkpoint_path(kind)
        save_checkpoint(path, model, metadata)
        logger.info("saved %s checkpoint to %s", kind, path)
        return path

    def write_metrics(self, report: MetricsReport) -> None:
        self.metrics_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")

    def read_metrics(self) -> MetricsReport:
        if not self.metrics_path.exists():
            raise DatasetError(f"{self.directory} holds no {METRICS_FILE}")
        try:
            data = json.loads(self.metrics_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{self.metrics_path}: {e}")
        return MetricsReport.from_dict(data)

    def find_checkpoint(self) -> Path:
        """The student checkpoint if present, otherwise the teacher's"""
        for kind in ("student", "teacher"):
            path = self.checkpoint_path(kind)
            if path.exists():
                return path
        raise CheckpointError(f"{self.directory} holds no checkpoint")


def save_checkpoint(path: Path, model: Model, metadata: Optional[dict[str, Any]] = None) -> None:
    header = {"model": model_kind(model), "config": model.config.to_dict(), **(metadata or {})}
    save_parameters(path, model.state_dict(), header)


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """Accept a checkpoint file or a record directory"""
    path = Path(path)
    if path.is_dir():
        return ExperimentRecord(path).find_checkpoint()
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


def load_model(path: Union[str, Path]) -> tuple[Model, dict[str, Any]]:
    """Rebuild a teacher or student from its checkpoint; returns (model, metadata)"""
    path = resolve_checkpoint(path)
    params, metadata = load_parameters(path)
    kind = metadata.get("model")
    try:
        if kind == "teacher":
            model: Model = TeacherModel(TeacherConfig(**metadata["config"]), np.random.default_rng(0))
        elif kind == "student":
            model = build_student(StudentConfig(**metadata["config"]), np.random.default_rng(0))
        else:
            raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: malformed model config ({e})")
    try:
        model.load_state_dict(params)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}")
    logger.debug("loaded %s from %s", kind, path)
    return model, metadata

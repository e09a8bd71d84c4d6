"""Command bodies: simulate, preprocess, train, distill, evaluate and compare"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from .canio import (
    DatasetSplit,
    EncodedDataset,
    load_dataset,
    load_split,
    read_log,
    split_dataset,
    write_canonical_csv,
)
from .config import RunConfig
from .distill import train_student_with_kd
from .errors import CheckpointError, ConfigError, DatasetError
from .evaluation import Comparison, MetricsReport, compare_reports, confusion, detect, evaluate_model, metrics
from .records import ExperimentRecord, Model, TrainingLog, load_model
from .student import train_student_plain
from .teacher import TeacherModel, train_teacher
from .trafficgen import GeneratedLog, benign_rate, default_profile, generate_benign, inject
from .training import EpochSummary, TrainingHistory

logger = logging.getLogger(__name__)


def prepare_output(config: RunConfig, command: str) -> ExperimentRecord:
    """Create the output directory and write the resolved config before any work"""
    record = ExperimentRecord(config.output_dir(command)).create()
    config.write(record.config_path)
    logger.info("%s: writing to %s", command, record.directory)
    return record


def _require_dataset(config: RunConfig) -> Path:
    if not config.dataset:
        raise ConfigError("a dataset is required (--dataset or 'dataset' in the config file)")
    path = Path(config.dataset).expanduser()
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    return path


def _load_training_split(config: RunConfig, max_length: int) -> DatasetSplit:
    path = _require_dataset(config)
    split = load_split(path, max_length=max_length, seed=config.seed, train_ratio=config.train_ratio)
    logger.info(
        "dataset %s: train %s, test %s",
        path,
        split.train.class_counts(),
        split.test.class_counts(),
    )
    return split


def _report_values(report: MetricsReport) -> dict[str, Any]:
    data = report.to_dict()
    return {"confusion": data["confusion"], **data["metrics"]}


def _epoch_hook(split: DatasetSplit, log: TrainingLog, threads: int):
    """Log train and test metrics after every epoch"""

    def on_epoch(model: Model, epoch: int, loss: float) -> dict[str, Any]:
        extra = {}
        for part, dataset in (("train", split.train), ("test", split.test)):
            if len(dataset) == 0:
                continue
            report = metrics(confusion(detect(model, dataset, threads=threads), dataset.labels))
            extra[f"{part}_metrics"] = _report_values(report)
        log.write(EpochSummary(epoch=epoch, train_loss=loss, extra=extra).to_dict())
        return extra

    return on_epoch


def _finish(
    record: ExperimentRecord,
    config: RunConfig,
    model: Model,
    history: TrainingHistory,
    split: DatasetSplit,
    model_id: str,
    parameters: dict[str, int],
) -> MetricsReport:
    record.save_model(
        model,
        {
            "seed": config.seed,
            "train_hash": split.train.content_hash(),
            "dataset": str(config.dataset),
            "epochs_run": len(history.epochs),
            "stopped_early": history.stopped_early,
        },
    )
    report, latency = evaluate_model(
        model,
        split.test,
        threads=config.threads,
        model_id=model_id,
        dataset_id=f"{config.dataset}:test",
        dataset_hash=split.test.content_hash(),
        seed=config.seed,
    )
    report.extra["parameters"] = parameters
    record.write_metrics(report)
    logger.info("%s: test F1 %s, %.1f us/frame", model_id, report.f1, latency)
    return report


def cmd_simulate(config: RunConfig) -> GeneratedLog:
    """Generate benign traffic, inject one attack and write log.csv plus manifest.json"""
    record = prepare_output(config, "simulate")
    sim = config.simulate
    log = generate_benign(default_profile(), sim.duration, seed=config.seed)
    spec = sim.attack_spec(seed=config.seed, benign_rate=benign_rate(log))
    log = inject(log, spec)
    log.write(record.directory / "log.csv", record.directory / "manifest.json")
    logger.info("simulate: %s", log.manifest.to_dict())
    return log


def cmd_preprocess(config: RunConfig) -> dict[str, Any]:
    """Parse a raw log and write a stratified train.csv / test.csv split"""
    source = _require_dataset(config)
    record = prepare_output(config, "preprocess")
    parsed = read_log(source, strict=config.strict, threads=config.threads)
    if not parsed.frames:
        raise DatasetError(f"no frames in dataset {source}")
    split = split_dataset(parsed.frames, config.train_ratio, config.seed, config.teacher.max_length)
    write_canonical_csv(record.directory / "train.csv", split.train.frames)
    write_canonical_csv(record.directory / "test.csv", split.test.frames)
    summary = {
        "source": str(source),
        "seed": config.seed,
        "train_ratio": config.train_ratio,
        "skipped": len(parsed.skipped),
        "counts": {"train": split.train.class_counts(), "test": split.test.class_counts()},
        "hashes": {"train": split.train.content_hash(), "test": split.test.content_hash()},
    }
    (record.directory / "split.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train_teacher(config: RunConfig) -> MetricsReport:
    record = prepare_output(config, "teacher")
    split = _load_training_split(config, config.teacher.max_length)
    with record.open_log() as log:
        model, history = train_teacher(
            split,
            config.teacher,
            seed=config.seed,
            on_step=log.write,
            on_epoch=_epoch_hook(split, log, config.threads),
        )
    return _finish(record, config, model, history, split, "teacher", {"teacher": model.num_parameters()})


def cmd_train_student(config: RunConfig) -> MetricsReport:
    record = prepare_output(config, "student")
    split = _load_training_split(config, config.teacher.max_length)
    with record.open_log() as log:
        model, history = train_student_plain(
            split,
            config.student,
            seed=config.seed,
            on_step=log.write,
            on_epoch=_epoch_hook(split, log, config.threads),
        )
    return _finish(
        record, config, model, history, split, config.student.kind, {"student": model.num_parameters()}
    )


def load_teacher(path: Optional[str]) -> tuple[TeacherModel, dict[str, Any]]:
    if not path:
        raise ConfigError("distill needs a teacher checkpoint (--teacher or 'teacher_checkpoint')")
    model, metadata = load_model(path)
    if not isinstance(model, TeacherModel):
        raise CheckpointError(f"{path} holds a {metadata.get('model')} checkpoint, not a teacher")
    return model, metadata


def cmd_distill(config: RunConfig) -> MetricsReport:
    record = prepare_output(config, "distill")
    teacher, teacher_meta = load_teacher(config.teacher_checkpoint)
    split = _load_training_split(config, teacher.config.max_length)
    if teacher_meta.get("train_hash") not in (None, split.train.content_hash()):
        logger.warning("teacher was trained on a different training set (%s)", teacher_meta.get("train_hash"))

    with record.open_log() as log:
        model, history = train_student_with_kd(
            split,
            teacher,
            config.distill,
            seed=config.seed,
            threads=config.threads,
            on_step=log.write,
            on_epoch=_epoch_hook(split, log, config.threads),
        )
    parameters = {"teacher": teacher.num_parameters(), "student": model.num_parameters()}
    return _finish(record, config, model, history, split, f"kd-{config.student.kind}", parameters)


def _evaluation_set(config: RunConfig, max_length: int) -> tuple[EncodedDataset, str]:
    path = _require_dataset(config)
    if path.is_dir():
        path = path / f"{config.eval_split}.csv"
    return load_dataset(path, max_length=max_length, strict=config.strict), str(path)


def cmd_evaluate(config: RunConfig) -> tuple[MetricsReport, float]:
    """Score a checkpoint on a labelled log; returns the report and microseconds per frame"""
    if not config.model:
        raise ConfigError("evaluate needs a model checkpoint (--model or 'model' in the config file)")
    record = prepare_output(config, "evaluate")
    model, metadata = load_model(config.model)
    max_length = model.config.max_length if isinstance(model, TeacherModel) else config.teacher.max_length
    dataset, dataset_id = _evaluation_set(config, max_length)
    report, latency = evaluate_model(
        model,
        dataset,
        threads=config.threads,
        model_id=str(config.model),
        dataset_id=dataset_id,
        dataset_hash=dataset.content_hash(),
        seed=metadata.get("seed"),
    )
    report.extra["parameters"] = {metadata["model"]: model.num_parameters()}
    record.write_metrics(report)
    return report, latency


def cmd_compare(
    config: RunConfig, records: Sequence[str], baseline: Optional[str] = None
) -> Comparison:
    """Tabulate metrics.json of several records with deltas against a baseline"""
    if len(records) < 2:
        raise ConfigError("compare needs at least two records")
    output = prepare_output(config, "compare")
    reports = [(str(path), ExperimentRecord(Path(path)).read_metrics()) for path in records]
    comparison = compare_reports(reports, baseline)
    (output.directory / "comparison.json").write_text(
        json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    (output.directory / "comparison.txt").write_text(comparison.render() + "\n")
    return comparison

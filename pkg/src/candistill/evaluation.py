"""Detection loop, confusion matrix and the six detection metrics"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

import numpy as np

from .canio import EncodedDataset, Label
from .errors import DatasetError, ShapeError
from .numerics import Tensor, no_grad, softmax

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 4096
METRIC_NAMES = ("acc", "pre", "rec", "f1", "fpr", "fnr")

REPORT_SCHEMA: dict[str, Any] = {
    "required": ["model_id", "dataset_id", "dataset_hash", "seed", "confusion", "metrics", "undefined"],
    "confusion": ["tp", "tn", "fp", "fn"],
    "metrics": list(METRIC_NAMES),
}


class Detector(Protocol):
    input_kind: str

    def batch_logits(self, dataset: EncodedDataset, idx: np.ndarray) -> Tensor: ...


def predict_logits(
    model: Detector, dataset: EncodedDataset, threads: int = 1, batch_size: int = INFERENCE_BATCH
) -> np.ndarray:
    """Logits for every example, (n, 2); read-only so shards may run in parallel"""

    def shard(start: int) -> np.ndarray:
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        with no_grad():
            return model.batch_logits(dataset, idx).data

    starts = range(0, len(dataset), batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(shard, starts))
    else:
        parts = [shard(s) for s in starts]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax of softmax; equal probabilities resolve to Normal"""
    logits = np.atleast_2d(np.asarray(logits))
    probs = softmax(Tensor(logits), axis=-1).data
    return (probs[:, Label.ATTACK] > probs[:, Label.NORMAL]).astype(np.int64)


def detect(model: Detector, dataset: EncodedDataset, threads: int = 1) -> np.ndarray:
    return labels_from_logits(predict_logits(model, dataset, threads=threads))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with Attack as the positive class"""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion(predictions, labels) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    positive = labels == Label.ATTACK
    flagged = predictions == Label.ATTACK
    return ConfusionMatrix(
        tp=int(np.sum(positive & flagged)),
        tn=int(np.sum(~positive & ~flagged)),
        fp=int(np.sum(~positive & flagged)),
        fn=int(np.sum(positive & ~flagged)),
    )


def _ratio(numerator: int, denominator: int, name: str, undefined: dict[str, str]) -> Optional[float]:
    if denominator == 0:
        undefined[name] = "zero denominator"
        return None
    return numerator / denominator


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    acc: Optional[float]
    pre: Optional[float]
    rec: Optional[float]
    f1: Optional[float]
    fpr: Optional[float]
    fnr: Optional[float]
    undefined: dict[str, str] = field(default_factory=dict)
    model_id: str = ""
    dataset_id: str = ""
    dataset_hash: str = ""
    seed: Optional[int] = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "dataset_hash": self.dataset_hash,
            "seed": self.seed,
            "confusion": self.confusion.to_dict(),
            "metrics": {name: getattr(self, name) for name in METRIC_NAMES},
            "undefined": dict(self.undefined),
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsReport":
        validate_report(data)
        return cls(
            confusion=ConfusionMatrix(**data["confusion"]),
            undefined=dict(data["undefined"]),
            model_id=data["model_id"],
            dataset_id=data["dataset_id"],
            dataset_hash=data["dataset_hash"],
            seed=data["seed"],
            extra=dict(data.get("extra", {})),
            **{name: data["metrics"][name] for name in METRIC_NAMES},
        )


def metrics(cm: ConfusionMatrix, **metadata: Any) -> MetricsReport:
    if cm.total == 0:
        raise DatasetError("cannot compute metrics over zero examples")
    undefined: dict[str, str] = {}
    pre = _ratio(cm.tp, cm.tp + cm.fp, "pre", undefined)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "rec", undefined)
    if pre is None or rec is None:
        f1 = None
        undefined["f1"] = "precision or recall undefined"
    elif pre + rec == 0:
        f1 = None
        undefined["f1"] = "precision and recall are both zero"
    else:
        f1 = 2 * pre * rec / (pre + rec)
    return MetricsReport(
        confusion=cm,
        acc=(cm.tp + cm.tn) / cm.total,
        pre=pre,
        rec=rec,
        f1=f1,
        fpr=_ratio(cm.fp, cm.tn + cm.fp, "fpr", undefined),
        fnr=_ratio(cm.fn, cm.tp + cm.fn, "fnr", undefined),
        undefined=undefined,
        **metadata,
    )


def validate_report(data: dict[str, Any]) -> None:
    """Check a serialised report against REPORT_SCHEMA"""
    missing = [key for key in REPORT_SCHEMA["required"] if key not in data]
    if missing:
        raise DatasetError(f"metrics report lacks {missing}")
    for key in REPORT_SCHEMA["confusion"]:
        value = data["confusion"].get(key)
        if not isinstance(value, int) or value < 0:
            raise DatasetError(f"confusion.{key} must be a non-negative integer")
    for key in REPORT_SCHEMA["metrics"]:
        if key not in data["metrics"]:
            raise DatasetError(f"metrics.{key} missing")
        value = data["metrics"][key]
        if value is None:
            if key not in data["undefined"]:
                raise DatasetError(f"metrics.{key} is null without a reason")
        elif not 0.0 <= value <= 1.0:
            raise DatasetError(f"metrics.{key}={value} outside [0, 1]")


def evaluate_model(
    model: Detector, dataset: EncodedDataset, threads: int = 1, **metadata: Any
) -> tuple[MetricsReport, float]:
    """Detect over a labelled dataset; returns the report and microseconds per frame"""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    started = time.perf_counter()
    predictions = detect(model, dataset, threads=threads)
    elapsed = time.perf_counter() - started
    report = metrics(confusion(predictions, dataset.labels), **metadata)
    return report, elapsed / len(dataset) * 1e6


def format_percent(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value * 100:.2f}"


# -- comparison ---------------------------------------------------------------


@dataclass
class ComparisonRow:
    record: str
    model_id: str
    metrics: dict[str, Optional[float]]
    delta_pp: dict[str, Optional[float]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "record": self.record,
            "model_id": self.model_id,
            "metrics": dict(self.metrics),
            "delta_pp": dict(self.delta_pp),
        }


@dataclass
class Comparison:
    """Side-by-side metrics with signed percentage-point deltas versus a baseline"""

    baseline: str
    dataset_hash: str
    rows: list[ComparisonRow]

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline": self.baseline,
            "dataset_hash": self.dataset_hash,
            "records": [row.to_dict() for row in self.rows],
        }

    def render(self) -> str:
        width = max(len("record"), *(len(row.record) for row in self.rows))
        header = f"{'record':<{width}}  " + "  ".join(f"{name.upper():>16}" for name in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for row in self.rows:
            cells = []
            for name in METRIC_NAMES:
                delta = row.delta_pp[name]
                shown = "n/a" if delta is None else f"{delta:+.2f}"
                cells.append(f"{format_percent(row.metrics[name]):>7} ({shown:>6})")
            lines.append(f"{row.record:<{width}}  " + "  ".join(cells))
        lines.append(f"deltas in percentage points versus {self.baseline}")
        return "\n".join(lines)


def compare_reports(
    reports: list[tuple[str, MetricsReport]], baseline: Optional[str] = None
) -> Comparison:
    """Deltas of every report against the named baseline (default: the first)"""
    if len(reports) < 2:
        raise DatasetError("compare needs at least two records")
    hashes = {report.dataset_hash for _, report in reports}
    if len(hashes) > 1:
        detail = ", ".join(f"{name}={report.dataset_hash}" for name, report in reports)
        raise DatasetError(f"records were evaluated on different test sets: {detail}")
    names = [name for name, _ in reports]
    base_name = baseline if baseline is not None else names[0]
    if base_name not in names:
        raise DatasetError(f"baseline {base_name!r} is not among the compared records {names}")
    base = dict(reports)[base_name]

    rows = []
    for name, report in reports:
        values = {metric: getattr(report, metric) for metric in METRIC_NAMES}
        deltas = {}
        for metric in METRIC_NAMES:
            ref = getattr(base, metric)
            deltas[metric] = None if values[metric] is None or ref is None else (values[metric] - ref) * 100
        rows.append(ComparisonRow(record=name, model_id=report.model_id, metrics=values, delta_pp=deltas))
    return Comparison(baseline=base_name, dataset_hash=hashes.pop(), rows=rows)

import json

import numpy as np
import pytest

from candistill.canio import EncodedDataset
from candistill.errors import DatasetError, ShapeError
from candistill.evaluation import (
    METRIC_NAMES,
    ConfusionMatrix,
    MetricsReport,
    compare_reports,
    confusion,
    detect,
    evaluate_model,
    format_percent,
    labels_from_logits,
    metrics,
    predict_logits,
    validate_report,
)
from candistill.student import StudentConfig, build_student

from .conftest import make_frames


def report_with(f1, dataset_hash="abc", **values):
    base = {name: 0.5 for name in METRIC_NAMES}
    base.update(values)
    base["f1"] = f1
    return MetricsReport(confusion=ConfusionMatrix(1, 1, 1, 1), dataset_hash=dataset_hash, **base)


def test_tie_and_clear_cases():
    assert labels_from_logits(np.array([[5.0, -5.0]])).tolist() == [0]
    assert labels_from_logits(np.array([[0.0, 0.0]])).tolist() == [0]
    assert labels_from_logits(np.array([[-1.0, 2.0], [3.0, 3.0]])).tolist() == [1, 0]


def test_batched_detection_matches_single(rng):
    model = build_student(StudentConfig(kind="dnn", hidden_size=4, dtype="float64"), rng)
    dataset = EncodedDataset.from_frames(make_frames(30, 10))
    whole = detect(model, dataset)
    small_batches = labels_from_logits(predict_logits(model, dataset, batch_size=3))
    threaded = detect(model, dataset, threads=4)
    assert np.array_equal(whole, small_batches)
    assert np.array_equal(whole, threaded)


def test_confusion_extremes():
    labels = np.array([0, 1, 1, 0, 1])
    assert confusion(labels, labels) == ConfusionMatrix(tp=3, tn=2, fp=0, fn=0)
    assert confusion(1 - labels, labels) == ConfusionMatrix(tp=0, tn=0, fp=2, fn=3)
    with pytest.raises(ShapeError):
        confusion([0, 1], [0])


def test_confusion_matches_brute_force(rng):
    for _ in range(10_000):
        n = int(rng.integers(1, 20))
        predictions = rng.integers(0, 2, size=n)
        labels = rng.integers(0, 2, size=n)
        counts = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
        for p, y in zip(predictions, labels):
            if p == 1 and y == 1:
                counts["tp"] += 1
            elif p == 0 and y == 0:
                counts["tn"] += 1
            elif p == 1:
                counts["fp"] += 1
            else:
                counts["fn"] += 1
        cm = confusion(predictions, labels)
        assert cm.to_dict() == counts
        assert cm.total == n


def test_perfect_detector():
    report = metrics(ConfusionMatrix(tp=100, tn=100, fp=0, fn=0))
    assert (report.acc, report.pre, report.rec, report.f1) == (1.0, 1.0, 1.0, 1.0)
    assert (report.fpr, report.fnr) == (0.0, 0.0)
    assert report.undefined == {}


def test_formulas_on_random_matrices(rng):
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(1, 500, size=4))
        report = metrics(ConfusionMatrix(tp, tn, fp, fn))
        pre, rec = tp / (tp + fp), tp / (tp + fn)
        assert report.acc == pytest.approx((tp + tn) / (tp + tn + fp + fn), abs=1e-12)
        assert report.pre == pytest.approx(pre, abs=1e-12)
        assert report.rec == pytest.approx(rec, abs=1e-12)
        assert report.f1 == pytest.approx(2 * pre * rec / (pre + rec), abs=1e-12)
        assert report.fpr == pytest.approx(fp / (tn + fp), abs=1e-12)
        assert report.fnr == pytest.approx(fn / (tp + fn), abs=1e-12)
        assert abs(report.fnr + report.rec - 1.0) <= 1e-15
        assert min(report.pre, report.rec) - 1e-12 <= report.f1 <= max(report.pre, report.rec) + 1e-12
        swapped = metrics(ConfusionMatrix(tn, tp, fn, fp))
        assert swapped.acc == report.acc


def test_f1_spot_value():
    pre, rec = 1.0, 0.9572
    report = metrics(ConfusionMatrix(tp=9572, tn=500, fp=0, fn=428))
    assert report.pre == pre and report.rec == pytest.approx(rec)
    assert report.f1 == pytest.approx(0.9781, abs=1e-4)


def test_zero_denominators_are_explicit():
    report = metrics(ConfusionMatrix(tp=0, tn=10, fp=0, fn=0))
    assert report.pre is None and report.rec is None and report.f1 is None and report.fnr is None
    assert set(report.undefined) == {"pre", "rec", "f1", "fnr"}
    assert report.acc == 1.0 and report.fpr == 0.0
    validate_report(report.to_dict())

    both_zero = metrics(ConfusionMatrix(tp=0, tn=5, fp=3, fn=2))
    assert both_zero.pre == 0.0 and both_zero.rec == 0.0
    assert both_zero.f1 is None and "f1" in both_zero.undefined

    with pytest.raises(DatasetError):
        metrics(ConfusionMatrix())


def test_validate_report_rejects_bad_documents():
    data = metrics(ConfusionMatrix(3, 4, 1, 2)).to_dict()
    validate_report(data)

    missing = dict(data)
    del missing["dataset_hash"]
    with pytest.raises(DatasetError):
        validate_report(missing)

    unexplained = json.loads(json.dumps(data))
    unexplained["metrics"]["pre"] = None
    with pytest.raises(DatasetError, match="without a reason"):
        validate_report(unexplained)

    out_of_range = json.loads(json.dumps(data))
    out_of_range["metrics"]["acc"] = 1.5
    with pytest.raises(DatasetError):
        validate_report(out_of_range)


def test_report_json_round_trip():
    report = metrics(ConfusionMatrix(7, 80, 3, 10), model_id="m", dataset_id="d", dataset_hash="h", seed=3)
    again = MetricsReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert again == report


def test_evaluate_model_returns_latency_outside_report(rng):
    model = build_student(StudentConfig(kind="dnn", hidden_size=4), rng)
    dataset = EncodedDataset.from_frames(make_frames(15, 5))
    report, latency = evaluate_model(model, dataset, model_id="dnn", seed=1)
    assert report.confusion.total == 20
    assert latency >= 0
    assert "latency" not in json.dumps(report.to_dict())
    with pytest.raises(DatasetError):
        evaluate_model(model, EncodedDataset.from_frames([]))


def test_compare_against_self_is_zero():
    report = report_with(0.9781)
    comparison = compare_reports([("a", report), ("b", report)])
    assert all(delta == 0.0 for row in comparison.rows for delta in row.delta_pp.values())


def test_compare_delta_in_percentage_points():
    comparison = compare_reports([("base", report_with(0.9781)), ("kd", report_with(0.9999))])
    assert comparison.baseline == "base"
    assert comparison.rows[1].delta_pp["f1"] == pytest.approx(2.18, abs=1e-9)
    assert "+2.18" in comparison.render()


def test_compare_undefined_and_errors():
    comparison = compare_reports([("x", report_with(None)), ("y", report_with(0.5))], baseline="y")
    assert comparison.rows[0].delta_pp["f1"] is None
    assert "n/a" in comparison.render()

    with pytest.raises(DatasetError, match="different test sets"):
        compare_reports([("x", report_with(0.5, "h1")), ("y", report_with(0.5, "h2"))])
    with pytest.raises(DatasetError):
        compare_reports([("x", report_with(0.5))])
    with pytest.raises(DatasetError, match="baseline"):
        compare_reports([("x", report_with(0.5)), ("y", report_with(0.5))], baseline="z")


def test_rendered_table_agrees_with_json():
    comparison = compare_reports([("base", report_with(0.9781)), ("kd", report_with(0.9999))])
    data = comparison.to_dict()
    text = comparison.render()
    for record in data["records"]:
        line = next(line for line in text.splitlines() if line.startswith(record["record"]))
        for name in METRIC_NAMES:
            assert format_percent(record["metrics"][name]) in line
    assert format_percent(None) == "n/a"
    assert format_percent(0.97812) == "97.81"

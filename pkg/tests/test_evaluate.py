import re

import numpy as np
import pytest

from tinytransfer.errors import ClassMismatch, EmptyDataset
from tinytransfer.evaluate import (
    EvalReport,
    confusion_matrix,
    curves_svg,
    emit_report,
    evaluate,
    format_report,
    read_confusion_csv,
    read_history_csv,
)
from tinytransfer.head import HeadModel, TrainHistory, export_head

NAMES = ["dog", "rain", "siren", "bell", "car"]


def argmax_model(k=5, activation="softmax"):
    """A model whose prediction is the argmax of its k-vector input."""
    return export_head(HeadModel((k,), np.eye(k) * 10, np.zeros(k), NAMES[:k], activation))


def onehot_row(k):
    x = np.zeros(len(NAMES), np.float32)
    x[k] = 1.0
    return x


def history(n):
    r = np.linspace(0, 1, n)
    return TrainHistory(list(1 - r), list(r), list(1.2 - r), list(r * 0.9))


def test_all_correct():
    data = [(onehot_row(i % 5), i % 5) for i in range(20)]
    report = evaluate(argmax_model(), data)
    assert report.accuracy == 1.0
    np.testing.assert_array_equal(report.confusion, np.diag([4] * 5))
    assert report.precision == [1.0] * 5 and report.recall == [1.0] * 5


def test_twenty_five_clips_five_classes(rng):
    data = []
    for i in range(25):
        patches = rng.standard_normal((int(rng.integers(1, 4)), 5)).astype(np.float32)
        data.append((patches, i % 5))
    report = evaluate(argmax_model(activation="sigmoid"), data, "per_clip")
    assert report.confusion.shape == (5, 5)
    assert report.confusion.sum() == report.sample_count == 25
    assert report.confusion.sum(axis=1).tolist() == [5] * 5


def test_constant_predictor_scores_one_over_k():
    model = export_head(HeadModel((5,), np.zeros((5, 5)), [0, 0, 3, 0, 0], NAMES))
    data = [(np.ones(5, np.float32), i % 5) for i in range(50)]
    report = evaluate(model, data)
    assert report.accuracy == pytest.approx(1 / 5)
    assert report.confusion[:, 2].tolist() == [10] * 5


def test_ties_go_to_lowest_index():
    data = [(np.ones(5, np.float32), 3)]
    assert evaluate(argmax_model(), data).confusion[3, 0] == 1


def test_accuracy_is_trace_over_total(rng):
    t = rng.integers(0, 4, 200)
    p = np.where(rng.random(200) < 0.7, t, rng.integers(0, 4, 200))
    report = EvalReport(confusion_matrix(t, p, 4), list("abcd"))
    assert report.accuracy == np.mean(t == p)


def test_order_invariance(rng):
    data = [(rng.standard_normal((int(rng.integers(1, 3)), 5)).astype(np.float32), int(rng.integers(0, 5))) for _ in range(30)]
    model = argmax_model()
    for aggregation in ("per_sample", "per_clip"):
        a = evaluate(model, data, aggregation)
        b = evaluate(model, [data[i] for i in rng.permutation(len(data))], aggregation)
        np.testing.assert_array_equal(a.confusion, b.confusion)


def test_per_clip_equals_per_sample_for_single_patch_clips(rng):
    data = [(rng.standard_normal((1, 5)).astype(np.float32), int(rng.integers(0, 5))) for _ in range(40)]
    a = evaluate(argmax_model(), data, "per_clip")
    b = evaluate(argmax_model(), data, "per_sample")
    np.testing.assert_array_equal(a.confusion, b.confusion)


def test_per_clip_averages_probabilities():
    # patch 1 says class 0 weakly, patches 2 and 3 say class 1 weakly, patch 4 says class 0 strongly
    clip = np.array([[0.2, 0, 0, 0, 0], [0, 0.1, 0, 0, 0], [0, 0.1, 0, 0, 0], [2.0, 0, 0, 0, 0]], np.float32)
    report = evaluate(argmax_model(), [(clip, 0)], "per_clip")
    assert report.confusion[0, 0] == 1
    assert evaluate(argmax_model(), [(clip, 0)], "per_sample").confusion[0].tolist() == [2, 2, 0, 0, 0]


def test_class_name_mismatch():
    with pytest.raises(ClassMismatch):
        evaluate(argmax_model(), [(onehot_row(0), 0)], class_names=list("abcde"))


def test_empty():
    with pytest.raises(EmptyDataset):
        evaluate(argmax_model(), [])


def test_unknown_aggregation():
    with pytest.raises(ValueError):
        evaluate(argmax_model(), [], "per_file")


def test_report_files_roundtrip(tmp_path, rng):
    t = rng.integers(0, 5, 60)
    report = EvalReport(confusion_matrix(t, rng.integers(0, 5, 60), 5), NAMES, model_bytes=1234)
    files = emit_report(report, history(30), tmp_path)
    assert sorted(f.name for f in files) == ["confusion.csv", "curves.svg", "history.csv", "report.txt"]
    names, matrix = read_confusion_csv(tmp_path / "confusion.csv")
    assert names == NAMES
    np.testing.assert_array_equal(matrix, report.confusion)
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    back = read_history_csv(tmp_path / "history.csv")
    assert back == history(30)


def test_svg_has_one_point_per_epoch():
    svg = curves_svg(history(30))
    polylines = re.findall(r'points="([^"]*)"', svg)
    assert len(polylines) == 4
    assert all(len(p.split()) == 30 for p in polylines)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_report_accuracy_to_one_decimal():
    confusion = np.array([[941, 59], [0, 0]])
    text = format_report(EvalReport(confusion, ["car", "other"]))
    assert "accuracy: 94.1%" in text.splitlines()

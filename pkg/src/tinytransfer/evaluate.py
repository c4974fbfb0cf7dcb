"""Accuracy / confusion-matrix evaluation and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .engine import ExecutionPlan, argmax
from .errors import ClassMismatch, EmptyDataset
from .graph import class_names as model_class_names

AGGREGATIONS = ("per_sample", "per_clip")


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    class_names: list
    model_bytes: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.sample_count if self.sample_count else 0.0

    @property
    def precision(self):
        col = self.confusion.sum(axis=0)
        return [float(self.confusion[k, k] / col[k]) if col[k] else 0.0 for k in range(len(self.class_names))]

    @property
    def recall(self):
        row = self.confusion.sum(axis=1)
        return [float(self.confusion[k, k] / row[k]) if row[k] else 0.0 for k in range(len(self.class_names))]


def pct(x: float) -> str:
    return f"{x * 100:.1f}%"


def confusion_matrix(true_idx, pred_idx, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(true_idx, dtype=np.int64), np.asarray(pred_idx, dtype=np.int64)), 1)
    return m


def evaluate(model, dataset, aggregation: str = "per_sample", class_names=None, batch_size: int = 32) -> EvalReport:
    """Score a packaged model on ``(sample, class_index)`` items.

    An item may be a stack of inputs (all patches of one audio clip). With
    ``per_clip`` the item's class probabilities are averaged before the
    argmax; with ``per_sample`` every row is scored on its own.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    plan = model if isinstance(model, ExecutionPlan) else ExecutionPlan(model)
    names = model_class_names(plan.graph)
    if class_names is not None and names is not None and list(class_names) != list(names):
        raise ClassMismatch(f"model classes {names} != dataset classes {list(class_names)}")
    names = list(class_names or names or [])
    k = plan.output_shape[-1]
    if len(names) != k:
        raise ClassMismatch(f"model emits {k} scores but {len(names)} class names are known")
    in_shape = tuple(plan.graph.input_shape[1:])

    truth, preds = [], []
    for sample, cls in dataset:
        x = np.asarray(sample, dtype=np.float32)
        if x.shape == in_shape:
            x = x[None]
        probs = np.concatenate([plan.run(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
        if aggregation == "per_clip":
            truth.append(int(cls))
            preds.append(argmax(probs.astype(np.float64).mean(axis=0)))
        else:
            truth.extend([int(cls)] * len(probs))
            preds.extend(argmax(p) for p in probs)
    if not truth:
        raise EmptyDataset("nothing to evaluate")
    return EvalReport(confusion_matrix(truth, preds, k), names)


# -- report files -------------------------------------------------------------


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for epoch, *vals in history.rows():
            w.writerow([epoch] + [repr(float(v)) for v in vals])


def read_history_csv(path):
    from .head import TrainHistory

    h = TrainHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            h.train_loss.append(float(row["train_loss"]))
            h.train_acc.append(float(row["train_acc"]))
            h.val_loss.append(float(row["val_loss"]))
            h.val_acc.append(float(row["val_acc"]))
    return h


def write_confusion_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(report.class_names))
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name] + [int(v) for v in row])


def read_confusion_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def format_report(report: EvalReport, size_report=None) -> str:
    lines = [
        f"samples: {report.sample_count}",
        f"accuracy: {pct(report.accuracy)}",
    ]
    if report.model_bytes is not None:
        lines.append(f"model_bytes: {report.model_bytes}")
    if size_report is not None:
        lines.append(f"size_before_bytes: {size_report.before_bytes}")
        lines.append(f"size_after_bytes: {size_report.after_bytes}")
        lines.append(f"size_reduction: {pct(size_report.reduction)}")
    for key, value in sorted(report.extra.items()):
        lines.append(f"{key}: {value}")
    lines.append("")
    width = max(len(n) for n in report.class_names)
    lines.append(f"{'class':<{width}}  precision  recall  support")
    support = report.confusion.sum(axis=1)
    for name, p, r, s in zip(report.class_names, report.precision, report.recall, support):
        lines.append(f"{name:<{width}}  {pct(p):>9}  {pct(r):>6}  {int(s):>7}")
    return "\n".join(lines) + "\n"


def _polyline(values, x0, y0, w, h, lo, hi, color):
    pts = []
    n = len(values)
    for i, v in enumerate(values):
        x = x0 + (w * i / (n - 1) if n > 1 else w / 2)
        frac = 0.5 if hi == lo else (v - lo) / (hi - lo)
        pts.append(f"{x:.2f},{y0 + h - frac * h:.2f}")
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>'


def curves_svg(history) -> str:
    """Loss and accuracy vs epoch as a standalone SVG (one polyline per series)."""
    panels = [
        ("loss", [("train_loss", history.train_loss, "#1f77b4"), ("val_loss", history.val_loss, "#ff7f0e")]),
        ("accuracy", [("train_acc", history.train_acc, "#1f77b4"), ("val_acc", history.val_acc, "#ff7f0e")]),
    ]
    pw, ph, pad = 360, 220, 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * (pw + 2 * pad)}" height="{ph + 2 * pad}" '
        f'font-family="sans-serif" font-size="11">'
    ]
    for p, (title, series) in enumerate(panels):
        x0 = p * (pw + 2 * pad) + pad
        finite = [v for _, vals, _ in series for v in vals if math.isfinite(v)]
        lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
        parts.append(f'<rect x="{x0}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0 + pw / 2}" y="{pad - 12}" text-anchor="middle">{escape(title)} vs epoch</text>')
        parts.append(f'<text x="{x0 - 4}" y="{pad + 4}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{pad + ph}" text-anchor="end">{lo:.3g}</text>')
        for j, (name, vals, color) in enumerate(series):
            if vals and all(math.isfinite(v) for v in vals):
                parts.append(f"<!-- {name} -->")
                parts.append(_polyline(vals, x0, pad, pw, ph, lo, hi, color))
                parts.append(f'<text x="{x0 + 6}" y="{pad + ph + 16 + 12 * j}" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, history, out_dir, size_report=None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if history is not None:
        write_history_csv(history, out / "history.csv")
        (out / "curves.svg").write_text(curves_svg(history))
        files += [out / "history.csv", out / "curves.svg"]
    write_confusion_csv(report, out / "confusion.csv")
    (out / "report.txt").write_text(format_report(report, size_report))
    files += [out / "confusion.csv", out / "report.txt"]
    return files

"""Post-training symmetric int8 weight quantization and model size accounting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import dequantize
from .errors import AlreadyQuantized
from .graph import WEIGHTED_OPS, ModelGraph, validate
from .tensor import QTensor

QMAX = 127


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w) -> QTensor:
    """Per-tensor symmetric quantization: scale = max|w| / 127 (1 for an all-zero tensor)."""
    w = np.asarray(w, dtype=np.float32)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(peak / QMAX)) if peak > 0 else 1.0
    q = np.clip(round_half_away(w.astype(np.float64) / scale), -QMAX, QMAX).astype(np.int8)
    return QTensor(q, scale)


def dequantize_blob(blob: QTensor) -> np.ndarray:
    return dequantize(blob)


def quantize_model(graph: ModelGraph) -> ModelGraph:
    """Replace every conv/depthwise/dense kernel with an int8 blob; biases stay float32."""
    if graph.is_quantized() or graph.metadata.get("quantization"):
        raise AlreadyQuantized(f"{graph.name} already holds int8 weights")
    kernels = {n.weight_refs[0] for n in graph.nodes if n.op in WEIGHTED_OPS and n.weight_refs}
    weights = {ref: quantize_tensor(w) if ref in kernels else w for ref, w in graph.weights.items()}
    metadata = dict(graph.metadata)
    metadata["quantization"] = json.dumps({"scheme": "symmetric-per-tensor-int8", "activations": "float32"}, sort_keys=True)
    out = ModelGraph(graph.name, list(graph.nodes), weights, graph.input_shape, metadata)
    validate(out)
    return out


@dataclass
class SizeReport:
    before_bytes: int
    after_bytes: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.after_bytes / self.before_bytes if self.before_bytes else 0.0

    def as_table(self) -> str:
        return (
            f"{'before':<10}{self.before_bytes:>14,d} bytes  ({self.before_bytes / 1e6:.1f} MB)\n"
            f"{'after':<10}{self.after_bytes:>14,d} bytes  ({self.after_bytes / 1e6:.1f} MB)\n"
            f"{'reduction':<10}{self.reduction * 100:>13.1f}%\n"
        )

    def as_text(self) -> str:
        return f"before_bytes={self.before_bytes}\nafter_bytes={self.after_bytes}\nreduction_pct={self.reduction * 100:.1f}\n"


def size_report(before_path, after_path) -> SizeReport:
    return SizeReport(os.path.getsize(before_path), os.path.getsize(after_path))

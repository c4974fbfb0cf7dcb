"""Graph execution on float kernels.

Quantized weight blobs are dequantized once when an :class:`ExecutionPlan` is
built; activations are never quantized.
"""

from __future__ import annotations

import numpy as np

from . import tensor as K
from .errors import MissingLabels, ShapeMismatch
from .graph import INPUT, ModelGraph, class_names, infer_shapes
from .tensor import QTensor


def dequantize(blob) -> np.ndarray:
    """float32 view of a weight blob; ``scale * q`` for quantized blobs."""
    if isinstance(blob, QTensor):
        return np.float32(blob.scale) * blob.q.astype(np.float32)
    return np.asarray(blob, dtype=np.float32)


class ExecutionPlan:
    """Validated graph plus resolved shapes and a float weight cache.

    Read-only after construction, so one plan can serve concurrent ``run`` calls.
    """

    def __init__(self, graph: ModelGraph, max_batch: int = 8):
        self.graph = graph
        self.shapes = infer_shapes(graph)
        self.weights = {ref: dequantize(graph.weights[ref]) for ref in graph.referenced_blobs()}
        self.max_batch = max_batch
        # last use of each value, so intermediates can be released early
        self._last_use = {}
        for i, node in enumerate(graph.nodes):
            for ref in node.inputs:
                self._last_use[ref] = i

    @property
    def output_shape(self):
        return self.shapes[self.graph.output_id]

    def _check_input(self, batch):
        expected = self.graph.input_shape[1:]
        if batch.ndim != len(expected) + 1 or tuple(batch.shape[1:]) != tuple(expected):
            raise ShapeMismatch(f"batch shape {batch.shape} does not match graph input (N, {', '.join(map(str, expected))})")
        if batch.shape[0] < 1:
            raise ShapeMismatch("batch must contain at least one sample")

    def _run_chunk(self, x):
        values = {INPUT: x}
        for i, node in enumerate(self.graph.nodes):
            args = [values[r] for r in node.inputs]
            w = [self.weights[r] for r in node.weight_refs]
            p = node.params
            op = node.op
            if op == "conv2d":
                out = K.conv2d(args[0], w[0], w[1] if len(w) > 1 else None, int(p.get("stride", 1)), p.get("padding", "same"))
            elif op == "depthwise_conv2d":
                out = K.depthwise_conv2d(
                    args[0], w[0], w[1] if len(w) > 1 else None, int(p.get("stride", 1)), p.get("padding", "same")
                )
            elif op == "dense":
                out = K.dense(args[0], w[0], w[1] if len(w) > 1 else None)
            elif op == "global_average_pool":
                out = K.global_average_pool(args[0])
            elif op == "activation":
                out = K.activation(args[0], p["kind"])
            elif op == "add":
                out = K.check_finite((args[0].astype(np.float64) + args[1]).astype(np.float32), "add")
            elif op == "dropout_marker":
                out = args[0]
            elif op == "flatten":
                out = args[0].reshape(args[0].shape[0], -1)
            else:
                raise AssertionError(op)
            values[node.id] = out
            for r in node.inputs:
                if self._last_use.get(r) == i:
                    values.pop(r, None)
        return values[self.graph.output_id]

    def run(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        self._check_input(batch)
        chunks = [self._run_chunk(batch[i : i + self.max_batch]) for i in range(0, batch.shape[0], self.max_batch)]
        return np.concatenate(chunks, axis=0) if len(chunks) > 1 else chunks[0]


def run(graph: ModelGraph, batch) -> np.ndarray:
    return ExecutionPlan(graph).run(batch)


def argmax(probs) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    return int(np.argmax(np.asarray(probs)))


def predict_probs(graph_or_plan, sample):
    """Class scores and winning label for one unbatched sample."""
    plan = graph_or_plan if isinstance(graph_or_plan, ExecutionPlan) else ExecutionPlan(graph_or_plan)
    labels = class_names(plan.graph)
    width = plan.output_shape[-1]
    if not labels or len(labels) != width:
        raise MissingLabels(f"model metadata needs {width} class names, has {labels!r}")
    sample = np.asarray(sample, dtype=np.float32)
    if sample.ndim == len(plan.graph.input_shape) and sample.shape[0] == 1:
        sample = sample[0]
    probs = plan.run(sample[None])[0]
    return probs, labels[argmax(probs)]

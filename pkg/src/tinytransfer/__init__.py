"""Transfer-learning classifier builder for images and audio.

Frozen backbone -> cached features -> small trained head -> int8-weight
single-file model (``.ttml``).
"""

from .engine import ExecutionPlan, predict_probs, run
from .graph import GraphNode, ModelGraph, compose, load_model, save_model, truncate, validate
from .tensor import QTensor

__version__ = "0.1.0"

__all__ = [
    "ExecutionPlan",
    "GraphNode",
    "ModelGraph",
    "QTensor",
    "compose",
    "load_model",
    "predict_probs",
    "run",
    "save_model",
    "truncate",
    "validate",
]

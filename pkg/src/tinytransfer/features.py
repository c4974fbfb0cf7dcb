"""Frozen-backbone feature extraction and the ``.ttfc`` feature cache.

The cache reuses the ``.ttml`` container layout under the magic ``TTFC``:
a JSON manifest (class names, backbone fingerprint, preprocessing id, batch
sizes) followed by float32 ``features``/``labels`` blobs and the per-row
source index as float32 ``sources``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ExecutionPlan
from .errors import EmptyDataset, FormatError, ShapeMismatch, StaleCache
from .graph import ModelGraph, pack_container, read_container, to_bytes

log = logging.getLogger(__name__)

CACHE_MAGIC = b"TTFC"
DEFAULT_BATCH_SIZE = 32


@dataclass(eq=False)
class FeatureCache:
    features: np.ndarray
    labels: np.ndarray
    class_names: list
    backbone_fingerprint: str
    preprocessing_id: str
    sources: np.ndarray = None
    batch_sizes: list = field(default_factory=list)

    def __post_init__(self):
        if self.sources is None:
            self.sources = np.arange(self.features.shape[0])
        self.sources = np.asarray(self.sources, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0] or self.sources.shape[0] != self.features.shape[0]:
            raise ShapeMismatch(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} label rows")
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.class_names):
            raise ShapeMismatch(f"labels {self.labels.shape} do not match {len(self.class_names)} classes")
        if len(self.labels) and not np.all((self.labels.sum(axis=1) == 1) & np.isin(self.labels, (0, 1)).all(axis=1)):
            raise ValueError("every label row must be one-hot")

    def __len__(self):
        return self.features.shape[0]

    @property
    def class_indices(self):
        return self.labels.argmax(axis=1)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureCache)
            and self.class_names == other.class_names
            and self.backbone_fingerprint == other.backbone_fingerprint
            and self.preprocessing_id == other.preprocessing_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sources, other.sources)
        )


def fingerprint_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def fingerprint(backbone) -> str:
    """Hash of the backbone file (path) or of its serialized form (in-memory graph)."""
    if isinstance(backbone, ModelGraph):
        return fingerprint_bytes(to_bytes(backbone))
    return fingerprint_bytes(Path(backbone).read_bytes())


def one_hot(indices, k: int) -> np.ndarray:
    out = np.zeros((len(indices), k), dtype=np.float32)
    out[np.arange(len(indices)), np.asarray(indices, dtype=np.int64)] = 1.0
    return out


def extract_features(
    backbone: ModelGraph,
    dataset,
    sample_count: int | None,
    class_names,
    batch_size: int = DEFAULT_BATCH_SIZE,
    preprocessing_id: str = "",
    backbone_fingerprint: str | None = None,
) -> FeatureCache:
    """Run ``dataset`` through ``backbone`` in batches and collect labelled features.

    ``dataset`` yields ``(sample, class_index)``; a sample is either one input
    (shape of the backbone input) or a stack of them (e.g. every patch of one
    audio clip), in which case each row inherits the class and is tagged with
    the index of the item it came from. Extraction stops once ``sample_count``
    rows are filled; a short final batch is processed, not dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    plan = ExecutionPlan(backbone)
    in_shape = tuple(backbone.input_shape[1:])
    out_shape = tuple(plan.output_shape[1:])
    k = len(class_names)

    feats, labels, sources, batch_sizes = [], [], [], []
    pending_x, pending_y, pending_s = [], [], []
    filled = 0

    def flush(n):
        nonlocal filled
        feats.append(plan.run(np.concatenate(pending_x[:n])))
        labels.extend(pending_y[:n])
        sources.extend(pending_s[:n])
        batch_sizes.append(n)
        filled += n
        del pending_x[:n], pending_y[:n], pending_s[:n]

    limit = float("inf") if sample_count is None else sample_count
    for index, (sample, cls) in enumerate(dataset):
        sample = np.asarray(sample, dtype=np.float32)
        if sample.shape == in_shape:
            sample = sample[None]
        if sample.shape[1:] != in_shape:
            raise ShapeMismatch(f"sample {index} has shape {sample.shape}, backbone expects (N, {in_shape})")
        if not 0 <= int(cls) < k:
            raise ValueError(f"class index {cls} outside [0, {k})")
        for row in sample:
            if filled + len(pending_x) >= limit:
                break
            pending_x.append(row[None])
            pending_y.append(int(cls))
            pending_s.append(index)
            if len(pending_x) == batch_size:
                flush(batch_size)
        if filled + len(pending_x) >= limit:
            break
    if pending_x:
        flush(len(pending_x))
    if filled == 0:
        raise EmptyDataset("dataset produced no samples")
    if sample_count is not None and filled < sample_count:
        log.warning("dataset ended after %d of %d requested samples", filled, sample_count)

    return FeatureCache(
        features=np.concatenate(feats).reshape((filled,) + out_shape),
        labels=one_hot(labels, k),
        class_names=list(class_names),
        backbone_fingerprint=backbone_fingerprint or fingerprint(backbone),
        preprocessing_id=preprocessing_id,
        sources=np.asarray(sources),
        batch_sizes=batch_sizes,
    )


def save_cache(cache: FeatureCache, path) -> int:
    manifest = {
        "kind": "feature_cache",
        "class_names": list(cache.class_names),
        "backbone_fingerprint": cache.backbone_fingerprint,
        "preprocessing_id": cache.preprocessing_id,
        "batch_sizes": [int(b) for b in cache.batch_sizes],
    }
    blobs = [
        ("features", np.ascontiguousarray(cache.features, dtype=np.float32)),
        ("labels", cache.labels.astype(np.float32)),
        ("sources", cache.sources.astype(np.float32)),
    ]
    data = pack_container(manifest, blobs, magic=CACHE_MAGIC)
    Path(path).write_bytes(data)
    return len(data)


def load_cache(path, backbone_fingerprint: str | None = None, preprocessing_id: str | None = None) -> FeatureCache:
    """Read a cache; raises StaleCache if it was built from a different backbone or front-end."""
    manifest, blobs = read_container(Path(path).read_bytes(), magic=CACHE_MAGIC)
    try:
        cache = FeatureCache(
            features=blobs["features"],
            labels=blobs["labels"],
            class_names=list(manifest["class_names"]),
            backbone_fingerprint=manifest["backbone_fingerprint"],
            preprocessing_id=manifest["preprocessing_id"],
            sources=blobs["sources"].astype(np.int64),
            batch_sizes=list(manifest.get("batch_sizes", [])),
        )
    except KeyError as exc:
        raise FormatError(f"feature cache missing {exc}") from None
    if backbone_fingerprint is not None and cache.backbone_fingerprint != backbone_fingerprint:
        raise StaleCache(f"{path}: built from backbone {cache.backbone_fingerprint}, current is {backbone_fingerprint}")
    if preprocessing_id is not None and cache.preprocessing_id != preprocessing_id:
        raise StaleCache(f"{path}: built with preprocessing {cache.preprocessing_id!r}, current is {preprocessing_id!r}")
    return cache

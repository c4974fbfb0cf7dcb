"""End-to-end model creation: ingest -> preprocess -> extract -> train -> package."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audio, image
from .dataset import TASKS, DatasetManifest, ingest
from .engine import ExecutionPlan, argmax
from .errors import ConfigError, PreprocessingMismatch, StageError, TinyTransferError
from .evaluate import EvalReport, emit_report, evaluate
from .features import FeatureCache, extract_features, fingerprint_bytes, load_cache, save_cache
from .graph import ModelGraph, class_names, compose, from_bytes, load_model, save_model, truncate
from .head import TrainConfig, TrainHistory, export_head, train
from .image import AugmentConfig
from .quantize import SizeReport, quantize_model, size_report

log = logging.getLogger(__name__)

# keys describing where files live; kept out of the model so reruns elsewhere are byte-identical
_LOCATION_KEYS = ("output", "threads", "use_cache")


@dataclass
class RunConfig:
    task: str = "image"
    dataset: str = ""
    backbone: str = ""
    output: str = "out"
    drop_last: int = 0
    split_ratio: float = 0.8
    split_seed: int = 0
    batch_size: int = 32
    dropout: float | None = None
    silence_threshold: float = audio.DEFAULT_SILENCE_RMS
    trim: bool = True
    quantize: bool = True
    aggregation: str | None = None
    threads: int = 0
    use_cache: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.dropout is None:
            self.dropout = 0.5 if self.task == "image" else 0.0
        if self.aggregation is None:
            self.aggregation = "per_sample" if self.task == "image" else "per_clip"
        if self.batch_size < 1 or self.drop_last < 0:
            raise ConfigError("batch_size must be >= 1 and drop_last >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def model_metadata(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _LOCATION_KEYS}
        return json.dumps(d, sort_keys=True)

    @property
    def threshold(self):
        return self.silence_threshold if self.trim else None

    @property
    def preprocessing_id(self):
        return image.PREPROCESSING_ID if self.task == "image" else audio.PREPROCESSING_ID


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# -- media -> samples ---------------------------------------------------------


def load_image_sample(path, augment_cfg: AugmentConfig | None = None, index: int = 0, variant: int = 0) -> np.ndarray:
    img = image.decode_image(Path(path).read_bytes())
    if augment_cfg is not None and augment_cfg.enabled:
        img = image.augment(img, augment_cfg, image.augment_rng(augment_cfg.seed, index, variant))
    return image.preprocess(img)


def load_audio_sample(path, silence_threshold: float | None = audio.DEFAULT_SILENCE_RMS) -> np.ndarray:
    return audio.wav_to_patches(Path(path).read_bytes(), silence_threshold)


def _pool_size(threads):
    return threads if threads and threads > 0 else (os.cpu_count() or 1)


def sample_stream(items, cfg: RunConfig, augment: bool, variant: int = 0):
    """Yield ``(sample, class_index)`` in manifest order, decoding in a thread pool."""
    aug = cfg.augment if (augment and cfg.task == "image") else None

    def load(job):
        i, (path, k) = job
        try:
            if cfg.task == "image":
                return load_image_sample(path, aug, i, variant), k
            return load_audio_sample(path, cfg.threshold), k
        except TinyTransferError as exc:
            raise type(exc)(f"{path}: {exc}") from exc

    jobs = list(enumerate(items))
    with ThreadPoolExecutor(max_workers=_pool_size(cfg.threads)) as pool:
        for start in range(0, len(jobs), 64):
            yield from pool.map(load, jobs[start : start + 64])


# -- stages -------------------------------------------------------------------


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if isinstance(exc, (TinyTransferError, OSError, ValueError)):
            if isinstance(exc, OSError) and not isinstance(exc, TinyTransferError):
                exc = ConfigError(str(exc)) if self.name == "config" else exc
            raise StageError(self.name, exc) from exc
        return False


def stage(name):
    return _Stage(name)


@dataclass
class Backbone:
    graph: ModelGraph
    fingerprint: str


def load_backbone(path, drop_last: int = 0) -> Backbone:
    data = Path(path).read_bytes()
    graph = from_bytes(data)
    if drop_last:
        graph = truncate(graph, drop_last)
    return Backbone(graph, f"{fingerprint_bytes(data)}:drop{drop_last}")


def augment_variants(cfg: RunConfig) -> int:
    return cfg.augment.variants if cfg.task == "image" and cfg.augment.enabled else 1


def _cache_key(cfg: RunConfig, items, augment: bool, variant: int = 0) -> str:
    extra = {"items": [[str(p), k] for p, k in items]}
    if augment and cfg.task == "image":
        extra["augment"] = asdict(cfg.augment)
        extra["variant"] = variant
    if cfg.task == "audio":
        extra["silence_threshold"] = cfg.threshold
    digest = hashlib.sha256(json.dumps(extra, sort_keys=True).encode()).hexdigest()[:16]
    return f"{cfg.preprocessing_id}|{digest}"


def extract_split(
    backbone: Backbone, manifest: DatasetManifest, cfg: RunConfig, which: str, cache_path=None, variant: int = 0
) -> FeatureCache:
    items = manifest.paths(which)
    rel = manifest.train if which == "train" else manifest.val
    augment = which == "train"
    key = _cache_key(cfg, rel, augment, variant)
    if cache_path is not None and cfg.use_cache and Path(cache_path).exists():
        try:
            cache = load_cache(cache_path, backbone.fingerprint, key)
            log.info("reusing feature cache %s", cache_path)
            return cache
        except TinyTransferError as exc:
            log.info("rebuilding feature cache %s (%s)", cache_path, exc)
    if not items:
        out_shape = ExecutionPlan(backbone.graph).output_shape[1:]
        cache = FeatureCache(
            np.zeros((0,) + tuple(out_shape), np.float32),
            np.zeros((0, len(manifest.classes)), np.float32),
            list(manifest.classes),
            backbone.fingerprint,
            key,
        )
    else:
        cache = extract_features(
            backbone.graph,
            sample_stream(items, cfg, augment, variant),
            None,
            manifest.classes,
            batch_size=cfg.batch_size,
            preprocessing_id=key,
            backbone_fingerprint=backbone.fingerprint,
        )
    if cache_path is not None:
        save_cache(cache, cache_path)
    return cache


def extract_train_views(backbone: Backbone, manifest: DatasetManifest, cfg: RunConfig, cache_dir) -> list:
    """One training cache per augmentation variant (a single one when augmentation is off)."""
    n = augment_variants(cfg)
    names = ["train.ttfc"] if n == 1 else [f"train.v{v}.ttfc" for v in range(n)]
    return [extract_split(backbone, manifest, cfg, "train", Path(cache_dir) / name, v) for v, name in enumerate(names)]


def package(backbone: ModelGraph, head_graph: ModelGraph, cfg: RunConfig) -> ModelGraph:
    model = compose(backbone, head_graph)
    model.name = f"{cfg.task}_classifier"
    model.metadata.update(
        {
            "task": cfg.task,
            "preprocessing_id": cfg.preprocessing_id,
            "run_config": cfg.model_metadata(),
        }
    )
    if cfg.task == "audio":
        model.metadata["silence_threshold"] = json.dumps(cfg.threshold)
        model.metadata["aggregation"] = cfg.aggregation
    for key in ("architecture", "init_seed"):
        model.metadata.pop(key, None)
    return model


@dataclass
class CreateResult:
    model_path: Path
    report: EvalReport
    history: TrainHistory
    size: SizeReport | None
    files: list


def create(cfg: RunConfig) -> CreateResult:
    out = Path(cfg.output)
    with stage("config"):
        if not cfg.backbone or not Path(cfg.backbone).is_file():
            raise ConfigError(f"backbone file not found: {cfg.backbone!r}")
        if not cfg.dataset or not Path(cfg.dataset).is_dir():
            raise ConfigError(f"dataset directory not found: {cfg.dataset!r}")
        out.mkdir(parents=True, exist_ok=True)
    with stage("ingest"):
        manifest = ingest(cfg.dataset, cfg.task, cfg.split_ratio, cfg.split_seed)
    with stage("load-backbone"):
        backbone = load_backbone(cfg.backbone, cfg.drop_last)
    with stage("extract"):
        cache_dir = out / "cache"
        cache_dir.mkdir(exist_ok=True)
        train_views = extract_train_views(backbone, manifest, cfg, cache_dir)
        val_cache = extract_split(backbone, manifest, cfg, "val", cache_dir / "val.ttfc")
    with stage("train"):
        head, history = train(train_views, val_cache if len(val_cache) else None, cfg.train, _head_activation(cfg), cfg.dropout)
    with stage("package"):
        model = package(backbone.graph, export_head(head, cfg.train), cfg)
        size = None
        if cfg.quantize:
            float_path = out / "model.float.ttml"
            save_model(model, float_path)
            model = quantize_model(model)
            model_path = out / "model.ttml"
            save_model(model, model_path)
            size = size_report(float_path, model_path)
        else:
            model_path = out / "model.ttml"
            save_model(model, model_path)
    with stage("evaluate"):
        eval_items = manifest.paths("val") or manifest.paths("train")
        report = evaluate(
            ExecutionPlan(model),
            sample_stream(eval_items, cfg, augment=False),
            cfg.aggregation,
            manifest.classes,
            cfg.batch_size,
        )
        report.model_bytes = model_path.stat().st_size
        report.extra["evaluated_on"] = "val" if manifest.val else "train"
        report.extra["aggregation"] = cfg.aggregation
        report.extra["final_val_acc"] = f"{history.val_acc[-1] * 100:.1f}%" if manifest.val else "n/a"
        files = emit_report(report, history, out, size)
        if size is not None:
            (out / "size_report.txt").write_text(size.as_text())
            files.append(out / "size_report.txt")
    return CreateResult(model_path, report, history, size, files)


def _head_activation(cfg):
    # image heads end in softmax, audio heads in sigmoid
    return "softmax" if cfg.task == "image" else "sigmoid"


# -- prediction ---------------------------------------------------------------


def media_kind(path) -> str:
    head = Path(path).read_bytes()[:12]
    if head[:4] == b"RIFF" and head[8:12] == b"WAVE":
        return "audio"
    if image.sniff_format(head) is not None:
        return "image"
    raise PreprocessingMismatch(f"{path}: unrecognised media type")


def predict(model_path, media_path):
    """Returns ``(labels, probabilities, winning label)`` for one media file."""
    model = load_model(model_path)
    pre_id = model.metadata.get("preprocessing_id", "")
    task = model.metadata.get("task") or pre_id.split("/", 1)[0]
    kind = media_kind(media_path)
    if kind != task or pre_id not in (image.PREPROCESSING_ID, audio.PREPROCESSING_ID):
        raise PreprocessingMismatch(f"model expects {task} input ({pre_id!r}), got a {kind} file")
    labels = class_names(model)
    plan = ExecutionPlan(model)
    if task == "image":
        x = load_image_sample(media_path)
    else:
        threshold = json.loads(model.metadata.get("silence_threshold", json.dumps(audio.DEFAULT_SILENCE_RMS)))
        x = load_audio_sample(media_path, threshold)
    probs = plan.run(x).astype(np.float64).mean(axis=0)
    if model.metadata.get("head_activation") == "softmax":
        probs = probs / probs.sum()
    return labels, probs, labels[argmax(probs)]


"""Directory-per-class dataset discovery and train/val splitting.

Two layouts are accepted::

    root/<class>/<file>                  split by ratio (stratified, seeded)
    root/train/<class>/<file>
    root/val/<class>/<file>              explicit split
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassMismatch, ConfigError, EmptyClass, MixedLayout, NoClasses

EXTENSIONS = {
    "image": (".ppm", ".png", ".jpg", ".jpeg"),
    "audio": (".wav",),
}
TASKS = tuple(EXTENSIONS)


@dataclass
class DatasetManifest:
    root: str
    task: str
    classes: list
    train: list  # (relative path, class index)
    val: list
    split: dict = field(default_factory=dict)

    def counts(self, which="train"):
        items = self.train if which == "train" else self.val
        out = [0] * len(self.classes)
        for _, k in items:
            out[k] += 1
        return out

    def paths(self, which="train"):
        items = self.train if which == "train" else self.val
        return [(Path(self.root) / rel, k) for rel, k in items]

    def to_json(self) -> str:
        return json.dumps(
            {
                "root": self.root,
                "task": self.task,
                "classes": self.classes,
                "split": self.split,
                "train": [[p, k] for p, k in self.train],
                "val": [[p, k] for p, k in self.val],
            },
            indent=2,
            sort_keys=True,
        )

    def digest_items(self):
        """Root-independent description of the file lists, for cache keys."""
        return {"classes": self.classes, "train": [[p, k] for p, k in self.train], "val": [[p, k] for p, k in self.val]}


def _media_files(d: Path, task: str):
    exts = EXTENSIONS[task]
    return sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in exts)


def _class_dirs(d: Path):
    return sorted(p for p in d.iterdir() if p.is_dir() and not p.name.startswith("."))


def ingest(root, task: str, split_ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    subdirs = _class_dirs(root)
    names = {d.name for d in subdirs}
    if names & {"train", "val"}:
        if names != {"train", "val"} and names != {"train"}:
            raise MixedLayout(f"{root} mixes train/val directories with class directories: {sorted(names)}")
        return _explicit(root, task)
    if not 0.0 < split_ratio <= 1.0:
        raise ConfigError("split ratio must be in (0, 1]")
    return _ratio(root, task, subdirs, split_ratio, seed)


def _check_classes(root, classes):
    if len(classes) < 2:
        raise NoClasses(f"{root}: need at least 2 class directories, found {len(classes)}")


def _ratio(root, task, subdirs, ratio, seed):
    classes = [d.name for d in subdirs]
    _check_classes(root, classes)
    train, val = [], []
    for k, d in enumerate(subdirs):
        files = [p.relative_to(root).as_posix() for p in _media_files(d, task)]
        if not files:
            raise EmptyClass(f"class {d.name!r} has no {task} files")
        order = np.random.default_rng([int(seed), k]).permutation(len(files))
        n_train = min(len(files), max(1, int(round(ratio * len(files)))))
        picked = sorted(order[:n_train])
        rest = sorted(order[n_train:])
        train += [(files[i], k) for i in picked]
        val += [(files[i], k) for i in rest]
    return DatasetManifest(str(root), task, classes, train, val, {"mode": "ratio", "ratio": ratio, "seed": int(seed)})


def _explicit(root, task):
    train_dirs = _class_dirs(root / "train")
    classes = [d.name for d in train_dirs]
    _check_classes(root / "train", classes)
    train, val = [], []
    for k, d in enumerate(train_dirs):
        files = _media_files(d, task)
        if not files:
            raise EmptyClass(f"class {d.name!r} has no {task} training files")
        train += [(p.relative_to(root).as_posix(), k) for p in files]
    if (root / "val").is_dir():
        index = {name: k for k, name in enumerate(classes)}
        for d in _class_dirs(root / "val"):
            if d.name not in index:
                raise ClassMismatch(f"validation class {d.name!r} has no training directory")
            val += [(p.relative_to(root).as_posix(), index[d.name]) for p in _media_files(d, task)]
    return DatasetManifest(str(root), task, classes, train, val, {"mode": "explicit"})

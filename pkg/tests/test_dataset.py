import json

import numpy as np
import pytest

from tinytransfer.dataset import ingest
from tinytransfer.errors import ClassMismatch, ConfigError, EmptyClass, MixedLayout, NoClasses


def touch_files(d, n, ext=".wav"):
    d.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        (d / f"f{i:02d}{ext}").write_bytes(b"")


def test_explicit_split_75_25(tmp_path):
    for name in ["cat", "dog", "rain", "siren", "bell"]:
        touch_files(tmp_path / "train" / name, 15)
        touch_files(tmp_path / "val" / name, 5)
    m = ingest(tmp_path, "audio")
    assert m.classes == ["bell", "cat", "dog", "rain", "siren"]
    assert len(m.train) == 75 and len(m.val) == 25
    assert m.counts("train") == [15] * 5 and m.counts("val") == [5] * 5


def test_single_class_rejected(tmp_path):
    touch_files(tmp_path / "only", 4)
    with pytest.raises(NoClasses):
        ingest(tmp_path, "audio")


def test_ratio_split_is_stratified_and_seeded(tmp_path):
    for name in ["a", "b", "c"]:
        touch_files(tmp_path / name, 10, ".png")
    m = ingest(tmp_path, "image", 0.8, seed=7)
    assert m.counts("train") == [8] * 3 and m.counts("val") == [2] * 3
    for k, name in enumerate(m.classes):
        order = np.random.default_rng([7, k]).permutation(10)
        expected_val = sorted(f"{name}/f{i:02d}.png" for i in order[8:])
        assert sorted(p for p, c in m.val if c == k) == expected_val
    again = ingest(tmp_path, "image", 0.8, seed=7)
    assert again.to_json() == m.to_json()
    other = ingest(tmp_path, "image", 0.8, seed=8)
    assert other.val != m.val
    assert not {p for p, _ in m.train} & {p for p, _ in m.val}


def test_mixed_layout(tmp_path):
    touch_files(tmp_path / "train" / "a", 2)
    touch_files(tmp_path / "b", 2)
    with pytest.raises(MixedLayout):
        ingest(tmp_path, "audio")


def test_empty_class(tmp_path):
    touch_files(tmp_path / "a", 3)
    (tmp_path / "b").mkdir()
    with pytest.raises(EmptyClass):
        ingest(tmp_path, "audio")


def test_val_class_without_training_dir(tmp_path):
    for name in ["a", "b"]:
        touch_files(tmp_path / "train" / name, 2)
    touch_files(tmp_path / "val" / "zzz", 1)
    with pytest.raises(ClassMismatch):
        ingest(tmp_path, "audio")


def test_other_media_ignored(tmp_path):
    touch_files(tmp_path / "a", 2, ".wav")
    touch_files(tmp_path / "b", 2, ".wav")
    touch_files(tmp_path / "b", 3, ".txt")
    (tmp_path / "a" / ".hidden.wav").write_bytes(b"")
    m = ingest(tmp_path, "audio", 1.0)
    assert len(m.train) == 4 and not m.val


def test_bad_inputs(tmp_path):
    with pytest.raises(ConfigError):
        ingest(tmp_path / "missing", "audio")
    with pytest.raises(ConfigError):
        ingest(tmp_path, "video")


def test_manifest_json(tmp_path):
    for name in ["x", "y"]:
        touch_files(tmp_path / name, 5)
    data = json.loads(ingest(tmp_path, "audio", 0.6, seed=1).to_json())
    assert data["split"] == {"mode": "ratio", "ratio": 0.6, "seed": 1}
    assert len(data["train"]) == 6 and len(data["val"]) == 4

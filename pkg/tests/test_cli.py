import json
import subprocess
import sys

import numpy as np
import pytest
from synth import color_texture_image, tone_clip, write_audio_dataset, write_image_dataset

from tinytransfer.audio import encode_wav
from tinytransfer.cli import main
from tinytransfer.graph import class_names, load_model
from tinytransfer.image import encode_ppm

FIVE_KINDS = ("sine", "square", "noise", "chirp", "clicks")


@pytest.fixture(scope="module")
def image_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("image_cli")
    write_image_dataset(d / "ds", 8, 2, seed=3)
    assert main(["fixture", "mobilenet_v2", str(d / "mnv2.ttml")]) == 0
    code = main(
        ["create", "--task", "image", "--data", str(d / "ds"), "--backbone", str(d / "mnv2.ttml"), "--out", str(d / "out"), "--epochs", "100", "--lr", "0.01", "--no-augment"]
    )
    assert code == 0
    return d


def test_fixture_and_inspect(tmp_path, capsys):
    assert main(["fixture", "yamnet", str(tmp_path / "y.ttml")]) == 0
    assert "57 nodes" in capsys.readouterr().out
    assert main(["inspect", str(tmp_path / "y.ttml")]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["nodes"][-1]["op"] == "activation"
    assert main(["fixture", "yamnet", str(tmp_path / "body.ttml"), "--no-top"]) == 0
    assert "54 nodes" in capsys.readouterr().out


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "tinytransfer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "create" in proc.stdout


def test_unknown_flag_is_config_error():
    assert main(["create", "--bogus"]) == 2


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"task": "image", "colour": "blue"}))
    assert main(["create", "--config", str(tmp_path / "cfg.json")]) == 2
    assert "colour" in capsys.readouterr().err


def test_missing_backbone_is_stage_tagged(tmp_path, capsys):
    write_image_dataset(tmp_path / "ds", 1, 0)
    code = main(["create", "--task", "image", "--data", str(tmp_path / "ds"), "--backbone", str(tmp_path / "nope.ttml"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "[config]" in capsys.readouterr().err


def test_corrupt_media_is_data_error(tmp_path, capsys):
    write_image_dataset(tmp_path / "ds", 2, 0)
    (tmp_path / "ds" / "train" / "warm" / "bad.ppm").write_bytes(b"P6\n9 9\n255\n123")
    main(["fixture", "mobilenet_v2", str(tmp_path / "m.ttml")])
    code = main(["create", "--task", "image", "--data", str(tmp_path / "ds"), "--backbone", str(tmp_path / "m.ttml"), "--out", str(tmp_path / "o")])
    assert code == 3
    err = capsys.readouterr().err
    assert "[extract]" in err and "bad.ppm" in err


def test_ingest_prints_manifest(tmp_path, capsys):
    write_audio_dataset(tmp_path / "ds", 2, 1, seconds=0.5)
    assert main(["ingest", "--task", "audio", "--data", str(tmp_path / "ds")]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["classes"] == ["noise", "sine", "square"]
    assert len(manifest["train"]) == 6 and len(manifest["val"]) == 3


def test_create_outputs(image_run):
    out = image_run / "out"
    for name in ["model.ttml", "model.float.ttml", "history.csv", "confusion.csv", "report.txt", "curves.svg", "size_report.txt"]:
        assert (out / name).is_file(), name
    model = load_model(out / "model.ttml")
    assert model.is_quantized()
    assert class_names(model) == ["cool", "warm"]
    cfg = json.loads(model.metadata["run_config"])
    assert cfg["train"]["epochs"] == 100 and cfg["augment"]["enabled"] is False
    assert "output" not in cfg


def test_predict_memorises_training_image(image_run, capsys):
    img = next((image_run / "ds" / "train" / "warm").glob("*.ppm"))
    assert main(["predict", str(image_run / "out" / "model.ttml"), str(img)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "warm"
    probs = {ln.split()[0]: float(ln.split()[1]) for ln in lines[1:]}
    assert abs(sum(probs.values()) - 1.0) < 1e-6
    assert probs["warm"] > 0.9


def test_predict_fresh_image(image_run, tmp_path, capsys):
    path = tmp_path / "new.ppm"
    path.write_bytes(encode_ppm(color_texture_image(1, np.random.default_rng(99), 50)))
    assert main(["predict", str(image_run / "out" / "model.ttml"), str(path)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "cool"


def test_image_model_rejects_wav(image_run, tmp_path, capsys):
    wav = tmp_path / "a.wav"
    wav.write_bytes(encode_wav(tone_clip("sine", np.random.default_rng(0), 1.0)))
    assert main(["predict", str(image_run / "out" / "model.ttml"), str(wav)]) == 3
    assert "error:" in capsys.readouterr().err


def test_quantize_command(image_run, tmp_path, capsys):
    float_model = image_run / "out" / "model.float.ttml"
    assert main(["quantize", str(float_model), "--out", str(tmp_path / "q.ttml")]) == 0
    assert "reduction" in capsys.readouterr().out
    text = (tmp_path / "q.ttml.size.txt").read_text()
    pct = float(text.split("reduction_pct=")[1])
    assert 70.0 <= pct <= 78.0
    assert (tmp_path / "q.ttml").read_bytes() == (image_run / "out" / "model.ttml").read_bytes()
    assert main(["quantize", str(tmp_path / "q.ttml"), "--out", str(tmp_path / "qq.ttml")]) == 3


def test_eval_command(image_run, tmp_path, capsys):
    code = main(["eval", str(image_run / "out" / "model.ttml"), "--which", "train", "--history", str(image_run / "out" / "history.csv"), "--out", str(tmp_path)])
    assert code == 0
    assert "accuracy: 100.0%" in capsys.readouterr().out
    assert (tmp_path / "curves.svg").is_file()


def test_extract_then_train(tmp_path, capsys):
    write_audio_dataset(tmp_path / "ds", 3, 1, seconds=1.0)
    main(["fixture", "yamnet", str(tmp_path / "y.ttml")])
    base = ["--task", "audio", "--data", str(tmp_path / "ds"), "--backbone", str(tmp_path / "y.ttml"), "--drop-last", "3"]
    assert main(["extract", *base, "--out", str(tmp_path / "feat")]) == 0
    assert main(["train", "--train-cache", str(tmp_path / "feat" / "train.ttfc"), "--val-cache", str(tmp_path / "feat" / "val.ttfc"),
                 "--activation", "sigmoid", "--epochs", "5", "--out", str(tmp_path / "head")]) == 0
    head = load_model(tmp_path / "head" / "head.ttml")
    assert class_names(head) == ["noise", "sine", "square"]
    assert len((tmp_path / "head" / "history.csv").read_text().splitlines()) == 6
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "feat" / "train.ttfc")]) == 0
    assert "class_names" in json.loads(capsys.readouterr().out)


def test_audio_five_class_metadata(tmp_path):
    write_audio_dataset(tmp_path / "ds", 2, 1, kinds=FIVE_KINDS, seconds=1.0)
    main(["fixture", "yamnet", str(tmp_path / "y.ttml")])
    config = {"task": "audio", "dataset": str(tmp_path / "ds"), "backbone": str(tmp_path / "y.ttml"), "drop_last": 3, "train": {"epochs": 3}}
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    assert main(["create", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "out")]) == 0
    model = load_model(tmp_path / "out" / "model.ttml")
    assert class_names(model) == sorted(FIVE_KINDS)
    assert model.metadata["head_activation"] == "sigmoid"
    assert model.metadata["aggregation"] == "per_clip"
    wav = next((tmp_path / "ds" / "val" / "chirp").glob("*.wav"))
    assert main(["predict", str(tmp_path / "out" / "model.ttml"), str(wav)]) == 0

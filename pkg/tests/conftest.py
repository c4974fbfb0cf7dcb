import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def audio_run(tmp_path_factory):
    """One real `create` run: YAMNet fixture body + trained 3-class head, quantized."""
    from synth import write_audio_dataset

    from tinytransfer import backbones
    from tinytransfer.graph import save_model
    from tinytransfer.pipeline import RunConfig, create

    d = tmp_path_factory.mktemp("audio_run")
    write_audio_dataset(d / "ds", 30, 10, seed=0)
    save_model(backbones.yamnet(), d / "yamnet.ttml")
    cfg = RunConfig(task="audio", dataset=str(d / "ds"), backbone=str(d / "yamnet.ttml"), output=str(d / "out"), drop_last=3)
    return create(cfg)

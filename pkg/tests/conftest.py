import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rgaekit.model import ModelConfig, ProjectorConfig, ToyMLLM  # noqa: E402
from rgaekit.task import SyntheticTask  # noqa: E402
from rgaekit.training import train  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


def make_model(kind="avgpool", out_tokens=4, seed=0, side=4, **kw):
    return ToyMLLM(ModelConfig(patch_grid_side=side, projector=ProjectorConfig(kind, out_tokens), seed=seed, **kw))


@pytest.fixture(scope="session")
def task():
    return SyntheticTask(4)


@pytest.fixture(scope="session")
def trained_resampler(task):
    """Fixed-seed resampler model, one-stage, 300 SGD steps."""
    model = make_model("resampler", 4, seed=3)
    train(model, task, stages=1, steps=300, lr=0.3)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def check_golden(name, data: bytes):
    """Compare ``data`` with ``tests/golden/<name>``.

    Set RGAEKIT_REGEN_GOLDEN=1 to rewrite the file after inspecting a render.
    """
    path = GOLDEN / name
    if os.environ.get("RGAEKIT_REGEN_GOLDEN") == "1":
        GOLDEN.mkdir(exist_ok=True)
        path.write_bytes(data)
    assert path.exists(), f"golden file {name} missing; regenerate with RGAEKIT_REGEN_GOLDEN=1"
    assert path.read_bytes() == data, f"render differs from golden {name}"

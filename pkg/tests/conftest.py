import logging
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from seguidance.diffusion_core import DenoiserConfig, make_noise_schedule
from seguidance.harness.train import EmbedderConfig, TrainConfig, train_embedder, train_generator
from seguidance.metrics import ToyEmbedder
from seguidance.pipeline import ModelConfig, SubjectDiffusionModel

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
CHECKPOINTS = Path(os.environ.get("SEGUIDANCE_CHECKPOINTS", ROOT / "checkpoints"))

TINY = ModelConfig(DenoiserConfig(channels=(8, 16, 16), context_dim=16, attn_dim=8, t_dim=16),
                   image_tokens=2, image_width=16)


@pytest.fixture(scope="session")
def sched():
    return make_noise_schedule(1000, "cosine")


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained small bundle: fast structural and equivalence checks."""
    torch.manual_seed(0)
    return SubjectDiffusionModel(cfg=TINY).eval()


def _cached(path: Path, build, load):
    if path.exists():
        return load(path)
    logging.getLogger(__name__).warning("training %s (first use only)", path.name)
    obj = build()
    obj.save(path)
    return obj


@pytest.fixture(scope="session")
def trained_model():
    """The toy generator; trained deterministically on first use."""
    return _cached(CHECKPOINTS / "generator.ckpt",
                   lambda: train_generator(TrainConfig(seed=0)),
                   SubjectDiffusionModel.load)


@pytest.fixture(scope="session")
def embedders():
    clip = _cached(CHECKPOINTS / "clip.ckpt", lambda: train_embedder(EmbedderConfig(seed=0), "clip"),
                   ToyEmbedder.load)
    dino = _cached(CHECKPOINTS / "dino.ckpt", lambda: train_embedder(EmbedderConfig(seed=1000), "dino"),
                   ToyEmbedder.load)
    return clip, dino


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

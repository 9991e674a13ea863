"""Shared fixtures for tests."""

import numpy as np
import pytest

import src.observability  # noqa: F401  configures logging before the package modules
from src.dataset import SceneSpec
from src.dataset import generate
from src.model import build
from src.model_config import ModelConfig

SMALL_SIZE = 64


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    """Four-head FSA model at 64 px with narrow stages, fast enough for per-test forwards."""
    return ModelConfig(input_size=SMALL_SIZE, width_per_stage=(8, 8, 16, 16, 32), mhsa_heads=2).validate()


@pytest.fixture
def small_model(small_config):
    return build(small_config, seed=0)


@pytest.fixture
def small_scene():
    return SceneSpec(image_size=SMALL_SIZE, seed=3)


@pytest.fixture
def synthetic_dir(tmp_path, small_scene):
    """Four generated 64 px scenes on disk."""
    return generate(small_scene, 4, tmp_path / "synth", workers=1)

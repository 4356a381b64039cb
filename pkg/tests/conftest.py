# tests/conftest.py
import numpy as np
import pytest

from app.models.sample import SceneSpec
from app.services.segmenter import DiffSegModel
from tests.utils import make_sample, tiny_model_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return DiffSegModel(tiny_cfg, seed=0)


@pytest.fixture
def tiny_samples():
    return [make_sample(seed=i, sample_id=i) for i in range(4)]


@pytest.fixture
def small_scene_spec():
    return SceneSpec(num_classes=4, height=32, width=32, max_objects=3)

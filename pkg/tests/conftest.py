"""Shared fixtures for the mil_action test suite."""

import logging

import numpy as np
import pytest

from mil_action.geometry import BoundingBox, Tubelet
from mil_action.synthgen import SyntheticConfig


def _make_box(x, y, w=10.0, h=20.0, score=1.0):
    return BoundingBox(x, y, x + w, y + h, score)


def _make_tubelet(start, x, y, K=4, tubelet_id=0, clip_id="clip_0000", actor_id=-1,
                  dx=0.0, feature=None, w=10.0, h=20.0, score=1.0):
    boxes = tuple(_make_box(x + dx * i, y, w, h, score) for i in range(K))
    feat = np.zeros(2) if feature is None else np.asarray(feature, dtype=np.float64)
    return Tubelet(start, boxes, feat, tubelet_id, clip_id, actor_id)


@pytest.fixture
def make_box():
    return _make_box


@pytest.fixture
def make_tubelet():
    return _make_tubelet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return SyntheticConfig(num_clips=6, frames_per_clip=64, num_classes=3, feature_dim=8,
                           action_duration_range=(16, 32), seed=7)


@pytest.fixture
def noise_free_config():
    """Spatially disjoint actors, perfect detector, no bystanders."""
    return SyntheticConfig(num_clips=4, frames_per_clip=64, num_classes=3, feature_dim=8,
                           actors_per_clip_range=(2, 3), bystander_rate=0.0,
                           fn_rate=0.0, fp_rate=0.0, jitter_std=0.0, feature_noise_std=0.0,
                           action_duration_range=(16, 32), actor_layout="lanes", seed=3)


@pytest.fixture(autouse=True)
def _reset_mil_action_logger():
    yield
    logger = logging.getLogger("MilAction")
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

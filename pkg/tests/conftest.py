from __future__ import annotations

import numpy as np
import pytest

from spotground.data import EventAnnotation, FeatureSequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_features(T=100, D=8, game_id="g0", half=1, seed=0, data=None):
    if data is None:
        data = np.random.default_rng(seed).normal(size=(T, D)).astype(np.float32)
    return FeatureSequence(game_id, half, data, (data.shape[1],))


def make_event(time_s, label="Goal", game_id="g0", half=1):
    return EventAnnotation(game_id, half, time_s, label)

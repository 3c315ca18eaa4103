import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from egoexo.datamodel import ClipPair, ClipRef, Dataset
from egoexo.synth import SynthConfig, generate_feature_pairs

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(n_videos=3, views=("side",), splits=None):
    clips, pairs = [], []
    for i in range(n_videos):
        vid = f"v{i}"
        clips.append(ClipRef(f"{vid}_ego", vid, "ego", "a0", "walking"))
        for view in views:
            clips.append(ClipRef(f"{vid}_{view}", vid, view, "a0", "walking"))
            pairs.append(ClipPair(f"{vid}_ego", f"{vid}_{view}", view))
    return Dataset(clips, pairs, splits or {})


@pytest.fixture
def tiny_dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def small_synth():
    """Linear-coupled synthetic features: 2 actions x 5 videos x 3 clips, both views."""
    return generate_feature_pairs(SynthConfig(action_count=2, videos_per_action=5, clips_per_video=3, seed=4))

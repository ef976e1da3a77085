import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def small_epochs():
    from cssstn.store import EpochSet

    rng = np.random.default_rng(0)
    data = rng.standard_normal((12, 2, 50)).astype(np.float32)
    labels = np.array([1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0])
    return EpochSet(data=data, labels=labels, subject_id="S01", sampling_rate=250.0)


def make_feature_set(n_per_class=20, channels=2, size=16, separation=0.0, seed=0,
                     subject_id="S01"):
    """Two-class feature set; class means differ by ``separation`` per pixel."""
    from cssstn.store import FeatureSet

    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    values = rng.standard_normal((n, channels, size, size)).astype(np.float32)
    labels = np.array([0, 1] * n_per_class)
    values[labels == 1] += separation
    return FeatureSet(values=values, labels=labels, subject_id=subject_id)

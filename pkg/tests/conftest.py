from __future__ import annotations

import numpy as np
import pytest

from quadnet.config import RunConfig
from quadnet.data import generate_dataset, load_dataset

# smoke configuration: 4 seen + 2 unseen classes, 20 samples per class
SMOKE_DATA = dict(num_classes=6, num_seen=4, samples_per_class=20, seed=1)
SMOKE_TRAIN = dict(arch="desk", dim=16, batch=8, max_iters=300, window=30, patience=3)


@pytest.fixture(scope="session")
def smoke_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke-data")
    generate_dataset(out_dir=out, **SMOKE_DATA)
    return out


@pytest.fixture(scope="session")
def smoke_bundle(smoke_dir):
    return load_dataset(smoke_dir)


@pytest.fixture(scope="session")
def smoke_model(smoke_bundle):
    from quadnet.train import train

    result = train(smoke_bundle, RunConfig(loss="hingem5", seed=0, **SMOKE_TRAIN))
    return smoke_bundle, result.params_t, result.params_r


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

"""Shared test configuration.

Thread pinning must happen before numpy is first imported so the timed
checks (gradient suite, overfit run) measure honest single-core work.
"""

import os

os.environ["OMP_NUM_THREADS"] = "1"
os.environ["OPENBLAS_NUM_THREADS"] = "1"
os.environ["MKL_NUM_THREADS"] = "1"
os.environ["NUMEXPR_NUM_THREADS"] = "1"

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from kneemark.nn.model import ModelConfig, build_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    # smallest legal network: 16 px input, one hourglass level, two maps
    return ModelConfig(width=4, depth=1, landmarks=2, input_side=16, dropout=0.0)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=7)

"""Shared fixtures: a small class bank, a default model and its memory.

Module-scoped where construction is cheap, session-scoped where a fixture
backs several test modules.
"""

import numpy as np
import pytest
import torch

from ddeseg.config import RunConfig
from ddeseg.data import gen_class_bank
from ddeseg.train import build_memory_for_model, build_model

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def bank():
    return gen_class_bank(6, 3, seed=0)


@pytest.fixture(scope="session")
def model(bank):
    return build_model(RunConfig(seed=0))


@pytest.fixture(scope="session")
def memory(model, bank):
    return build_memory_for_model(model, bank, RunConfig(seed=0))


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)

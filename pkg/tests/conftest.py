import numpy as np
import pytest

from streamtrain.cpu_optimizer import AdamHyper
from streamtrain.data import make_synthetic_batch, new_store
from streamtrain.memory_model import ModelSpec

TINY = ModelSpec(num_layers=4, hidden_size=16, ffn_size=32, vocab_size=24, num_heads=2)


@pytest.fixture
def tiny_spec():
    return TINY


@pytest.fixture
def tiny_store():
    return new_store(TINY, seed=3)


@pytest.fixture
def hyper():
    return AdamHyper(lr=1e-2)


@pytest.fixture
def batch():
    return make_synthetic_batch("copy", 5, 12, TINY.vocab_size)


def rng(seed=0):
    return np.random.default_rng(seed)

import hashlib

import numpy as np
import pytest

from moelab.data import gen_mixture, gen_synthetic
from moelab.model import LanguageModel, ModelConfig, MoESpec


def checksum(t) -> str:
    """Stable digest of a parameter's exact bytes."""
    arr = np.ascontiguousarray(t.data, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def model_checksums(model: LanguageModel) -> dict[str, str]:
    return {name: checksum(p) for name, p in model.parameters()}


TINY_MOE = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32,
                       max_seq_len=16, moe=MoESpec(n_experts=4, top_k=2,
                                                   layer_indices=(1,)))
TINY_DENSE = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32,
                         max_seq_len=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def moe_teacher():
    return LanguageModel(TINY_MOE, np.random.default_rng(1))


@pytest.fixture
def dense_student():
    return LanguageModel(TINY_DENSE, np.random.default_rng(2))


@pytest.fixture
def copy_pairs():
    return gen_synthetic("copy", 24, np.random.default_rng(3), min_len=2, max_len=4)


@pytest.fixture
def mixture_pairs():
    return gen_mixture(["copy", "reverse"], 24, np.random.default_rng(4),
                       min_len=2, max_len=4)

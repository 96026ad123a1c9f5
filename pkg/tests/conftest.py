import numpy as np
import pytest
from hypothesis import settings

from chunkreuse.model import ModelConfig, init_model
from chunkreuse.preprocessing import PreprocessConfig, preprocess_isolated
from chunkreuse.retrieval import Chunk, KnowledgeBase

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def small_model():
    return init_model(ModelConfig(layers=2, heads=2, head_dim=8, seed=3))


def random_chunks(rng, n, lo=3, hi=12, prefix="c"):
    out = []
    for i in range(n):
        toks = rng.integers(32, 127, size=int(rng.integers(lo, hi + 1)))
        out.append(Chunk.from_tokens(toks, f"{prefix}{i}"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def isolated_setup(model, chunks):
    kb = KnowledgeBase(chunks)
    store, system, _ = preprocess_isolated(kb, model, PreprocessConfig())
    return kb, store, system

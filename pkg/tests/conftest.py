import numpy as np
import pytest

from pspindex.vecstore import VectorStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_store(n, d, seed=0):
    return VectorStore(np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32))


@pytest.fixture(scope="session")
def small_index():
    """n=1000 Gaussian index with scaled-down parameters, shared by several modules."""
    from pspindex.build import build_index
    from pspindex.graph import BuildParams

    store = gaussian_store(1000, 16, seed=7)
    params = BuildParams(K=32, L=64, R=16, S=3, c=8, m=128)
    return build_index(store, params, seed=0)

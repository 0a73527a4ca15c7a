import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from regformer.model import ModelConfig

# Small GEMMs everywhere; multithreaded BLAS only adds sync overhead and
# makes sums depend on the thread count.
threadpool_limits(1, "blas")


TINY = ModelConfig(base_channels=8, blocks=(1, 1, 1, 1), heads=(2, 2, 2, 2))
DESK = ModelConfig(base_channels=16, blocks=(2, 2, 2, 2), heads=(2, 2, 2, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_weights_rma(rng, c, scale=0.4):
    """Weight dict for one single-head attention block, oracle layout."""
    return {
        "qkv_w": rng.normal(size=(3 * c, c, 1, 1)) * scale,
        "dw_w": rng.normal(size=(3 * c, 1, 3, 3)) * scale,
        "dw_b": rng.normal(size=3 * c) * scale,
        "temperature": 1.3,
        "proj_w": rng.normal(size=(c, c, 1, 1)) * scale,
        "proj_b": rng.normal(size=c) * scale,
    }


def rand_weights_mgfb(rng, c, n, kernels, expansion, scale=0.4):
    hidden = c * expansion
    group = hidden // n
    weights = {
        "expand_w": rng.normal(size=(hidden, c, 1, 1)) * scale,
        "expand_b": rng.normal(size=hidden) * scale,
        "dw_w": rng.normal(size=(hidden, 1, 3, 3)) * scale,
        "dw_b": rng.normal(size=hidden) * scale,
        "proj_w": rng.normal(size=(c, group, 1, 1)) * scale,
        "proj_b": rng.normal(size=c) * scale,
    }
    for i, k in enumerate(kernels):
        weights[f"branch{i}_w"] = rng.normal(size=(group, 1, k, k)) * scale
        weights[f"branch{i}_b"] = rng.normal(size=group) * scale
    return weights

import numpy as np
import pytest

from blockdiff.kernel import FLOAT64
from blockdiff.model import ModelConfig, init_params


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def scramble(params, seed: int, std: float = 0.5) -> None:
    """Replace every weight with O(1) noise.

    Fresh initialization keeps the output head at zero (an untrained model
    predicts uniformly), which would make leak and gradient tests vacuous:
    all logits would be exactly zero and all gradients exactly flat.
    Structural tests therefore run on scrambled weights.
    """
    rng = rng_for(seed)
    for _, t in params.named():
        t.data = rng.normal(0.0, std, size=t.shape).astype(t.dtype)


def tiny_model(seed: int = 0, vocab: int = 13, dim: int = 8, heads: int = 2,
               layers: int = 2, two_stream_layers: int = 1,
               query_mode: str = "two_stream", precision=FLOAT64,
               scrambled: bool = True):
    config = ModelConfig(vocab=vocab, dim=dim, heads=heads, layers=layers,
                         two_stream_layers=two_stream_layers, query_mode=query_mode)
    params = init_params(config, rng_for(seed), precision=precision)
    if scrambled:
        scramble(params, seed + 7919)
    return params, config


@pytest.fixture
def rng():
    return rng_for(1234)

import numpy as np
import pytest
import torch

# Single-core machine: oversubscribed BLAS threads are a 10x slowdown.
torch.set_num_threads(1)

from patchflow.corpus import SyntheticCorpusSpec, build_vocabulary, make_corpus
from patchflow.latents import PatchTokenizer, PatchTokenizerConfig


@pytest.fixture(scope="session")
def tokenizer() -> PatchTokenizer:
    return PatchTokenizer(PatchTokenizerConfig())


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(512)


@pytest.fixture(scope="session")
def pair_corpus(tokenizer):
    """16 caption-image pairs at 32x32."""
    return make_corpus(
        SyntheticCorpusSpec(size_per_category=16, categories=("pair",)),
        tokenizer,
    )


@pytest.fixture(scope="session")
def mixed_corpus(tokenizer):
    return make_corpus(SyntheticCorpusSpec(size_per_category=4), tokenizer)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)

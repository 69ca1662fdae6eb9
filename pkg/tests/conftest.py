import pytest
import torch

from smfea.config import TrainConfig
from smfea.corpus import SyntheticSpec, synth_samples
from smfea.vocab import build_category_dicts, build_word_vocab

TINY_SPEC = SyntheticSpec(
    n_pairs=12,
    n_fragment_types=10,
    n_relation_types=5,
    regions_per_image=8,
    d_region=16,
    noise_sigma=0.1,
    seed=7,
)

TINY_CONFIG = TrainConfig(
    d_region=16,
    d_embed=32,
    d_node=16,
    word_dim=8,
    max_epochs=2,
    batch_size=4,
    seed=1,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_samples(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_word_vocab(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_dicts(tiny_corpus):
    return build_category_dicts(tiny_corpus)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)

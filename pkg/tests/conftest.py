"""Shared fixtures: a tiny model configuration and a two-domain synthetic task."""

# Import built-in modules
import dataclasses
from typing import List
from typing import Tuple

# Import third-party modules
import numpy as np
import pytest

# Import local modules
from dtnmt import tensor as T
from dtnmt.config import DataConfig
from dtnmt.config import ModelConfig
from dtnmt.config import OptimConfig
from dtnmt.config import TrainConfig
from dtnmt.data import RULES
from dtnmt.data import DomainCorpus
from dtnmt.data import Vocabulary
from dtnmt.data import generate_synthetic
from dtnmt.data import split_corpus
from dtnmt.data import synthetic_vocabulary
from dtnmt.model import ModelParams
from dtnmt.model import init_params


ALPHABET = 8
DOMAINS = ("identity", "reversal")


def make_config(**overrides: object) -> TrainConfig:
    config = TrainConfig(
        model=ModelConfig(
            vocab_size_src=len(synthetic_vocabulary(ALPHABET, DOMAINS)),
            vocab_size_tgt=len(synthetic_vocabulary(ALPHABET, DOMAINS)),
            d_model=16,
            n_heads=2,
            n_enc_layers=1,
            n_dec_layers=1,
            d_ffn=32,
            max_len=32,
            dropout_rate=0.0,
        ),
        optim=OptimConfig(lr=3e-3, warmup_steps=10),
        data=DataConfig(
            n_domains=2, sizes=[40, 40], test_size=10, len_range=[3, 6], alphabet_size=ALPHABET, batch_tokens=80
        ),
        max_steps=6,
        finetune_steps=3,
        unified_steps=4,
        probe_steps=5,
        log_every=2,
        seed=3,
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def make_oracle_config(n_domains: int = 2, **overrides: object) -> TrainConfig:
    """A model large enough to learn the synthetic rules in a few hundred steps."""
    size = len(synthetic_vocabulary(ALPHABET, RULES[:n_domains]))
    config = make_config(max_steps=600, finetune_steps=200, unified_steps=300, probe_steps=300, seed=1)
    config.model = dataclasses.replace(
        config.model, vocab_size_src=size, vocab_size_tgt=size, d_model=32, n_heads=4, d_ffn=64
    )
    config.optim = dataclasses.replace(config.optim, lr=5e-3, warmup_steps=50)
    config.data = dataclasses.replace(config.data, n_domains=n_domains, sizes=[300] * n_domains, batch_tokens=200)
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def oracle_split(
    seed: int, n_domains: int = 2, size: int = 340, heldout: int = 40
) -> Tuple[List[DomainCorpus], List[DomainCorpus]]:
    corpora = generate_synthetic(
        seed, n_domains=n_domains, sizes=[size] * n_domains, len_range=(3, 6), alphabet_size=ALPHABET
    )
    pairs = [split_corpus(c, heldout) for c in corpora]
    return [train for train, _ in pairs], [test for _, test in pairs]


@pytest.fixture(autouse=True)
def clean_tape():
    T.get_tape().reset()
    yield
    T.get_tape().reset()


@pytest.fixture
def tiny_config() -> TrainConfig:
    return make_config()


@pytest.fixture
def vocab() -> Vocabulary:
    return synthetic_vocabulary(ALPHABET, DOMAINS)


@pytest.fixture
def corpora() -> List[DomainCorpus]:
    return generate_synthetic(3, n_domains=2, sizes=[50, 50], len_range=(3, 6), alphabet_size=ALPHABET)


@pytest.fixture
def train_corpora(corpora: List[DomainCorpus]) -> List[DomainCorpus]:
    return [split_corpus(c, 10)[0] for c in corpora]


@pytest.fixture
def test_corpora(corpora: List[DomainCorpus]) -> List[DomainCorpus]:
    return [split_corpus(c, 10)[1] for c in corpora]


@pytest.fixture
def tiny_params(tiny_config: TrainConfig) -> ModelParams:
    return init_params(tiny_config.model, np.random.default_rng(0))

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ectg.config import RunConfig
from ectg.corpus import build_vocab, load_corpus

FIXTURES = Path(__file__).parent / "fixtures"
TOY_CORPUS = FIXTURES / "toy_corpus.jsonl"
MINI_CORPUS = FIXTURES / "mini_girlfriend.jsonl"


@pytest.fixture(scope="session")
def toy_dialogues():
    return load_corpus(TOY_CORPUS)


@pytest.fixture(scope="session")
def mini_dialogues():
    return load_corpus(MINI_CORPUS)


@pytest.fixture(scope="session")
def toy_vocab(toy_dialogues):
    return build_vocab(toy_dialogues, min_freq=1)


def small_config(**overrides) -> RunConfig:
    """Desk-test sizes: tiny dims, higher lr, everything else default."""
    base = dict(
        corpus=str(TOY_CORPUS),
        d_model=32,
        d_gru=48,
        n_heads=2,
        lr=0.01,
        batch_size=8,
        steps=50,
        seed=3,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(0)

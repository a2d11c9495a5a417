"""Shared fixtures: a tiny copy-task model trained once per session."""

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from charnorm.alphabet import Alphabet, default_alphabet
from charnorm.encoders import EncoderConfig
from charnorm.model import Model, ModelConfig
from charnorm.pipeline import DatasetSplit, SentencePair
from charnorm.training import TrainConfig, train


def copy_texts():
    """36 strings over 'abcde', twelve each of lengths 4, 3 and 2.

    Grouped by length so every training batch is padding-free, which
    keeps the encoder's view identical between training and decoding.
    """
    rng = np.random.default_rng(0)
    pool = list("abcde")
    texts = []
    for length in (4, 3, 2):
        seen = set()
        while len(seen) < 12:
            seen.add("".join(rng.choice(pool, size=length)))
        texts.extend(sorted(seen))
    return texts


@dataclass
class TrainedCopy:
    model: Model
    alphabet: Alphabet
    texts: list
    pairs: list
    dataset: DatasetSplit
    train_config: TrainConfig


@pytest.fixture(scope="session")
def alphabet():
    return default_alphabet()


@pytest.fixture(scope="session")
def trained_copy(alphabet):
    """A small model fit to reproduce its input, EOS emission included."""
    texts = copy_texts()
    pairs = [SentencePair(t, t) for t in texts]
    cfg = ModelConfig(
        encoder=EncoderConfig(kind="cfe", channels=16, layers=2, kernel=2),
        decoder_hidden=32, d=3, embed_dim=16, attn_hidden=16, max_output=12)
    model = Model(cfg, alphabet, np.random.default_rng(1))
    dataset = DatasetSplit(train=pairs, validation=pairs[:6], test=pairs[:6])
    train_config = TrainConfig(seed=0, batch_size=12, learning_rate=5e-3,
                               max_iterations=2500)
    train(model, dataset, train_config)
    return TrainedCopy(model=model, alphabet=alphabet, texts=texts,
                       pairs=pairs, dataset=dataset, train_config=train_config)

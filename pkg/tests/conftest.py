import numpy as np
import pytest

from cbdec.data import SPECIALS, EncodedExample, Example, Vocabulary, encode_example
from cbdec.model import ModelConfig, TwoDecoderModel


def toy_vocab(size: int = 20) -> Vocabulary:
    return Vocabulary(list(SPECIALS) + [f"w{i}" for i in range(size - 4)])


def random_example(rng: np.random.Generator, vocab: Vocabulary, enc_len: int = 5, dec_len: int = 3,
                   n_oov: int = 0) -> EncodedExample:
    """Random article/summary over ``vocab`` plus ``n_oov`` unseen words copied into the summary."""
    words = [vocab.token(i) for i in range(4, len(vocab))]
    article = [str(w) for w in rng.choice(words, enc_len)]
    oovs = [f"oov{k}" for k in range(n_oov)]
    for k, w in enumerate(oovs):
        article[k % enc_len] = w
    summary = [str(w) for w in rng.choice(words, dec_len)]
    for k, w in enumerate(oovs[:dec_len]):
        summary[k] = w
    return encode_example(Example(article, summary), vocab)


def toy_model(vocab_size: int = 20, hidden: int = 8, embed: int = 8, coverage: bool = False,
              seed: int = 0, init_scale: float = 0.3) -> TwoDecoderModel:
    cfg = ModelConfig(vocab_size=vocab_size, embed_dim=embed, hidden_dim=hidden,
                      coverage_enabled=coverage, init_scale=init_scale)
    return TwoDecoderModel.create(cfg, seed)


@pytest.fixture
def vocab20():
    return toy_vocab(20)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

from pathlib import Path

import numpy as np
import pytest

from inkmark.corpus import Vocabulary, build_vocabulary, load_documents, tokenize
from inkmark.langmodel import train_ngram

DATA = Path(__file__).resolve().parents[1] / "src" / "inkmark" / "data"
TASKS = DATA / "tasks"


class TableModel:
    """LogitSource returning hand-set logits per last token (default: zeros)."""

    def __init__(self, vocab, table=None, default=None):
        self.vocab = vocab
        self.table = table or {}
        self.default = np.zeros(vocab.size) if default is None else np.asarray(default, float)

    def next_logits(self, prefix):
        last = prefix[-1] if len(prefix) else None
        return np.asarray(self.table.get(last, self.default), dtype=float)


@pytest.fixture(scope="session")
def bundled_docs():
    return load_documents(DATA / "corpus.txt")


@pytest.fixture(scope="session")
def bundled_model(bundled_docs):
    vocab = build_vocabulary(bundled_docs)
    return train_ngram([tokenize(d, vocab) for d in bundled_docs], vocab)


@pytest.fixture
def small_vocab():
    return build_vocabulary(["a b", "a c"], min_count=1)


@pytest.fixture
def letters_vocab():
    words = " ".join(chr(ord("a") + i) for i in range(20))
    return build_vocabulary([words], min_count=1)


def make_vocab(words):
    return Vocabulary(("<unk>", "<s>", "</s>") + tuple(words), 1)

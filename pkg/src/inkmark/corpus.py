"""Text ingestion, word-level tokenization and vocabulary management."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, InsufficientDocuments

UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
RESERVED = (UNK, BOS, EOS)

TokenSequence = tuple  # tuple[int, ...]; immutable so it is safe to share

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace, keeping each punctuation mark as its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_count: int = 2
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if self.tokens[:3] != RESERVED:
            raise ValueError(f"first three tokens must be {RESERVED}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def id(self, token: str) -> int:
        return self._index.get(token, 0)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return digest.hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": list(self.tokens), "min_count": self.min_count, "hash": self.hash},
            ensure_ascii=False,
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        vocab = cls(tuple(obj["tokens"]), int(obj.get("min_count", 2)))
        if "hash" in obj and obj["hash"] != vocab.hash:
            raise ValueError("vocabulary hash does not match its token list")
        return vocab

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls.from_dict(json.loads(text))


def build_vocabulary(documents: Sequence[str], min_count: int = 2) -> Vocabulary:
    """Collect every word seen at least ``min_count`` times.

    Ordering is frequency-descending with lexicographic tie-breaks, after the
    reserved UNK/BOS/EOS entries at ids 0, 1, 2.
    """
    if not documents:
        raise EmptyCorpus("no documents given")
    counts = Counter()
    for doc in documents:
        counts.update(split_words(doc))
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = [tok for tok, c in counts.items() if c >= min_count]
    if not kept:
        raise EmptyCorpus(f"no token occurs at least {min_count} times")
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(RESERVED + tuple(kept), min_count)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return tuple(vocab.id(w) for w in split_words(text))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids)


def normalize(text: str, vocab: Vocabulary) -> str:
    """The form ``detokenize(tokenize(text))`` is expected to reproduce."""
    return " ".join(w if w in vocab else UNK for w in split_words(text))


@dataclass(frozen=True)
class CorpusSplit:
    calibration_prefixes: list
    perplexity_snippets: list
    calibration_ids: tuple[int, ...]
    perplexity_ids: tuple[int, ...]


def split_corpus(
    documents: Sequence[str],
    n_calib: int,
    n_ppl: int,
    seed: int,
    vocab: Vocabulary,
    prefix_tokens: int | None = None,
    snippet_tokens: int | None = None,
) -> CorpusSplit:
    """Sample two disjoint document sets without replacement.

    Calibration prefixes are truncated to ``prefix_tokens`` and perplexity
    snippets to ``snippet_tokens`` when those are given.
    """
    if n_calib + n_ppl > len(documents):
        raise InsufficientDocuments(
            f"need {n_calib + n_ppl} documents, corpus has {len(documents)}"
        )
    order = np.random.default_rng(seed).permutation(len(documents))
    calib_ids = tuple(int(i) for i in order[:n_calib])
    ppl_ids = tuple(int(i) for i in order[n_calib : n_calib + n_ppl])
    prefixes = [tokenize(documents[i], vocab)[:prefix_tokens] for i in calib_ids]
    snippets = [tokenize(documents[i], vocab)[:snippet_tokens] for i in ppl_ids]
    return CorpusSplit(prefixes, snippets, calib_ids, ppl_ids)


def load_documents(path: str | Path) -> list[str]:
    """Read one document per line (.txt) or per ``{"text": ...}`` record (.jsonl)."""
    path = Path(path)
    docs = []
    with path.open(encoding="utf-8") as fh:
        if path.suffix == ".jsonl":
            for line in fh:
                if line.strip():
                    docs.append(json.loads(line)["text"])
        else:
            docs = [line.rstrip("\n") for line in fh if line.strip()]
    return docs

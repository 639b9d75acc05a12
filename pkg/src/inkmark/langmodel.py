"""Token-probability sources: the LogitSource contract and a built-in n-gram model."""

from __future__ import annotations

import json
import math
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import Vocabulary
from .errors import EmptyCorpus, EmptySequence

# (prefix, logits) -> logits; a watermark processor is one of these
LogitTransform = Callable[[Sequence[int], np.ndarray], np.ndarray]

MODEL_FORMAT = "inkmark-ngram/1"


class LogitSource(Protocol):
    vocab: Vocabulary

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        """Logits over ``vocab`` for the token following ``prefix``; must be deterministic."""
        ...


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


class NGramModel:
    """Jelinek-Mercer interpolated n-gram model.

    Level 0 mixes the unigram ML estimate with a uniform distribution; each
    longer context whose history was seen in training mixes its ML estimate
    with the level below using weight ``alpha``. Unseen histories back off
    entirely. A final ``epsilon`` floor keeps every logit finite.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        tables: list[dict[tuple, dict[int, int]]],
        alpha: float = 0.7,
        epsilon: float = 1e-6,
        cache_size: int = 65536,
    ):
        if order < 1:
            raise ValueError("order must be >= 1")
        if not 0.0 < alpha < 1.0 or epsilon <= 0:
            raise ValueError("need 0 < alpha < 1 and epsilon > 0")
        self.vocab = vocab
        self.order = order
        self.alpha = alpha
        self.epsilon = epsilon
        self.tables = tables
        self.cache_size = cache_size
        self._compile()

    def _compile(self):
        V = self.vocab.size
        uni = np.zeros(V)
        for tok, c in self.tables[0].get((), {}).items():
            uni[tok] = c
        uni /= uni.sum()
        self._base = self.alpha * uni + (1 - self.alpha) / V
        # per level: history -> (ids, ML probabilities)
        self._levels = []
        for table in self.tables[1:]:
            compiled = {}
            for ctx, row in table.items():
                ids = np.fromiter(row.keys(), dtype=np.int64, count=len(row))
                cnt = np.fromiter(row.values(), dtype=np.float64, count=len(row))
                compiled[ctx] = (ids, cnt / cnt.sum())
            self._levels.append(compiled)
        self._cache: OrderedDict = OrderedDict()

    def __getstate__(self):
        state = self.__dict__.copy()
        for key in ("_base", "_levels", "_cache"):
            state.pop(key)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._compile()

    def history(self, prefix: Sequence[int]) -> tuple:
        n = self.order - 1
        if n == 0:
            return ()
        padded = (self.vocab.bos_id,) * n + tuple(prefix[-n:])
        return padded[-n:]

    def probs(self, prefix: Sequence[int]) -> np.ndarray:
        hist = self.history(prefix)
        p = self._base.copy()
        for c, level in enumerate(self._levels, start=1):
            hit = level.get(hist[len(hist) - c :])
            if hit is None:
                continue
            ids, ml = hit
            p *= 1 - self.alpha
            p[ids] += self.alpha * ml
        p += self.epsilon / self.vocab.size
        return p / (1 + self.epsilon)

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        hist = self.history(prefix)
        cached = self._cache.get(hist)
        if cached is not None:
            self._cache.move_to_end(hist)
            return cached
        logits = np.log(self.probs(prefix))
        logits.flags.writeable = False
        self._cache[hist] = logits
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return logits

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        tables = []
        for table in self.tables:
            rows = [
                [list(ctx), sorted([tok, c] for tok, c in row.items())]
                for ctx, row in sorted(table.items())
            ]
            tables.append(rows)
        return {
            "format": MODEL_FORMAT,
            "order": self.order,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "vocab": json.loads(self.vocab.to_json()),
            "tables": tables,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NGramModel":
        if obj.get("format") != MODEL_FORMAT:
            raise ValueError(f"not an {MODEL_FORMAT} model file")
        vocab = Vocabulary.from_dict(obj["vocab"])
        tables = [
            {tuple(ctx): {int(t): int(c) for t, c in row} for ctx, row in level}
            for level in obj["tables"]
        ]
        return cls(vocab, obj["order"], tables, obj["alpha"], obj["epsilon"])

    def save(self, path: str | Path) -> None:
        """Write compact JSON; byte-identical for identical models."""
        payload = json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False)
        Path(path).write_text(payload + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train_ngram(
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    order: int = 3,
    alpha: float = 0.7,
    epsilon: float = 1e-6,
) -> NGramModel:
    """Count every history of length 0..order-1 over BOS-padded, EOS-terminated sequences."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if not corpus or not any(len(s) for s in corpus):
        raise EmptyCorpus("no tokens to train on")
    tables: list[dict] = [dict() for _ in range(order)]
    pad = (vocab.bos_id,) * (order - 1)
    for seq in corpus:
        padded = pad + tuple(seq) + (vocab.eos_id,)
        for pos in range(len(pad), len(padded)):
            tok = padded[pos]
            for c in range(order):
                ctx = padded[pos - c : pos]
                row = tables[c].setdefault(ctx, Counter())
                row[tok] += 1
    tables = [{ctx: dict(row) for ctx, row in t.items()} for t in tables]
    return NGramModel(vocab, order, tables, alpha, epsilon)


def perplexity(
    model: LogitSource,
    seq: Sequence[int],
    transform: LogitTransform | None = None,
    context: Sequence[int] = (),
) -> float:
    """exp(mean NLL) of ``seq``, each token scored given ``context`` plus the tokens before it."""
    if len(seq) == 0:
        raise EmptySequence("perplexity of an empty sequence")
    full = tuple(context) + tuple(seq)
    nll = 0.0
    for i in range(len(context), len(full)):
        logits = model.next_logits(full[:i])
        if transform is not None:
            logits = transform(full[:i], logits)
        nll -= log_softmax(logits)[full[i]]
    return math.exp(nll / len(seq))


def entropy_at(model: LogitSource, prefix: Sequence[int]) -> float:
    """Shannon entropy (nats) of the next-token distribution."""
    logp = log_softmax(model.next_logits(prefix))
    p = np.exp(logp)
    h = float(-(p * logp).sum())
    return min(max(h, 0.0), math.log(len(p)))


class MarginModel:
    """Wraps a source so its top-1 logit leads the runner-up by at least ``margin``.

    Used to build near-deterministic models for the greedy-decoding margin analysis.
    """

    def __init__(self, base: LogitSource, margin: float):
        self.base = base
        self.vocab = base.vocab
        self.margin = margin

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        logits = np.array(self.base.next_logits(prefix), dtype=float)
        top = int(np.argmax(logits))
        runner_up = np.max(np.delete(logits, top))
        logits[top] = max(logits[top], runner_up + self.margin)
        return logits


class UniformModel:
    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._logits = np.zeros(vocab.size)
        self._logits.flags.writeable = False

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return self._logits


def load_model(path: str | Path) -> NGramModel:
    return NGramModel.load(path)

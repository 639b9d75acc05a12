"""Green/red vocabulary partitions, logit biasing and watermarked decoding.

KGW partition construction (bit-exact):

    mix64(z):   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
                z ^= z >> 27; z *= 0x94D049BB133111EB
                z ^= z >> 31                      (all mod 2**64)
    seed      = mix64(key ^ mix64(token + 0x9E3779B97F4A7C15))
    r[t]      = mix64(seed + (t + 1) * 0x9E3779B97F4A7C15),  t = 0, 1, ...
    perm      = [0, 1, ..., |V|-1]
    for t, i in enumerate(|V|-1 down to 1):
        j = ((r[t] >> 32) * (i + 1)) >> 32        # uniform in [0, i]
        swap perm[i], perm[j]
    green     = perm[:floor(gamma * |V|)]

``token`` is the last prefix token, or BOS for an empty prefix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, SchemeMismatch

SCHEMES = ("KGW", "EWD", "SIR")

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

SIR_DIM = 64
SIR_WINDOW = 16


@dataclass(frozen=True)
class WatermarkSpec:
    scheme: str
    gamma: float | None
    delta: float
    key: int

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "SIR":
            if self.gamma is not None:
                raise ValueError("SIR has no settable gamma")
        elif self.gamma is None or not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.delta >= 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    @classmethod
    def sir(cls, delta: float, key: int) -> "WatermarkSpec":
        return cls("SIR", None, delta, key)

    def with_delta(self, delta: float) -> "WatermarkSpec":
        return WatermarkSpec(self.scheme, self.gamma, float(delta), self.key)

    def with_key(self, key: int) -> "WatermarkSpec":
        return WatermarkSpec(self.scheme, self.gamma, self.delta, key)

    @property
    def nominal_gamma(self) -> float:
        """gamma for KGW/EWD; 0.5 for SIR, whose green fraction centres there."""
        return 0.5 if self.gamma is None else self.gamma

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "gamma": self.gamma, "delta": self.delta, "key": self.key}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "WatermarkSpec":
        gamma = obj.get("gamma")
        return cls(obj["scheme"], None if gamma is None else float(gamma), float(obj["delta"]), int(obj["key"]))


@dataclass(frozen=True)
class Partition:
    green_mask: np.ndarray = field(repr=False)
    green_count: int

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Partition":
        mask = np.asarray(mask, dtype=bool)
        mask.flags.writeable = False
        return cls(mask, int(mask.sum()))

    @property
    def green_fraction(self) -> float:
        return self.green_count / len(self.green_mask)


# keyed PRF ---------------------------------------------------------------


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def kgw_seed(key: int, token: int) -> int:
    return mix64((key & MASK64) ^ mix64(token + GOLDEN))


def random_stream(seed: int, n: int) -> np.ndarray:
    """Counter-mode splitmix64 outputs r[0..n-1] as uint64."""
    counters = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN) + np.uint64(seed & MASK64)
    return _mix64_array(counters)


def keyed_permutation(seed: int, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of range(n) driven by ``random_stream(seed)``."""
    perm = list(range(n))
    if n > 1:
        i_vals = np.arange(n - 1, 0, -1, dtype=np.uint64)
        draws = random_stream(seed, n - 1)
        js = ((draws >> np.uint64(32)) * (i_vals + np.uint64(1))) >> np.uint64(32)
        for i, j in zip(range(n - 1, 0, -1), js.tolist()):
            perm[i], perm[j] = perm[j], perm[i]
    out = np.array(perm, dtype=np.int64)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=8192)
def _kgw_permutation(key: int, token: int, vocab_size: int) -> np.ndarray:
    return keyed_permutation(kgw_seed(key, token), vocab_size)


def kgw_partition(spec: WatermarkSpec, last_token: int, vocab_size: int) -> Partition:
    if spec.scheme not in ("KGW", "EWD"):
        raise SchemeMismatch(f"kgw_partition needs KGW or EWD, got {spec.scheme}")
    if not 0 <= last_token < vocab_size:
        raise ValueError(f"token {last_token} outside vocabulary of size {vocab_size}")
    return _kgw_partition(spec.key, spec.gamma, last_token, vocab_size)


@lru_cache(maxsize=8192)
def _kgw_partition(key: int, gamma: float, token: int, vocab_size: int) -> Partition:
    perm = _kgw_permutation(key, token, vocab_size)
    mask = np.zeros(vocab_size, dtype=bool)
    mask[perm[: math.floor(gamma * vocab_size)]] = True
    return Partition.from_mask(mask)


# SIR surrogate -------------------------------------------------------------


@lru_cache(maxsize=16)
def _sir_tables(key: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    k = key & MASK64
    token_vectors = np.random.default_rng([k, 0x5151]).standard_normal((vocab_size, SIR_DIM))
    projection = np.random.default_rng([k, 0x5252]).standard_normal((vocab_size, SIR_DIM))
    token_vectors.flags.writeable = False
    projection.flags.writeable = False
    return token_vectors, projection


def embed_prefix(prefix: Sequence[int], key: int, vocab_size: int, bos_id: int = 1) -> np.ndarray:
    """Unit-norm mean of keyed token vectors over the trailing window of the prefix."""
    token_vectors, _ = _sir_tables(key, vocab_size)
    window = list(prefix[-SIR_WINDOW:]) or [bos_id]
    v = token_vectors[window].mean(axis=0)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v = token_vectors[bos_id]
        norm = np.linalg.norm(v)
    return v / norm


def sir_partition(
    spec: WatermarkSpec, prefix: Sequence[int], vocab_size: int, bos_id: int = 1
) -> Partition:
    if spec.scheme != "SIR":
        raise SchemeMismatch(f"sir_partition needs SIR, got {spec.scheme}")
    _, projection = _sir_tables(spec.key, vocab_size)
    return Partition.from_mask(projection @ embed_prefix(prefix, spec.key, vocab_size, bos_id) > 0)


# biasing -----------------------------------------------------------------


def apply_bias(logits: np.ndarray, partition: Partition, delta: float) -> np.ndarray:
    """Return a new array with ``delta`` added to every green logit."""
    logits = np.asarray(logits, dtype=float)
    if logits.shape != partition.green_mask.shape:
        raise LengthMismatch(f"{logits.shape} logits vs {partition.green_mask.shape} mask")
    return logits + delta * partition.green_mask


class WatermarkProcessor:
    """Callable ``(prefix, logits) -> logits`` applying one watermark spec.

    SIR is applied as a hard +delta / -delta bias on green / red tokens.
    """

    def __init__(self, spec: WatermarkSpec, vocab_size: int, bos_id: int = 1):
        self.spec = spec
        self.vocab_size = vocab_size
        self.bos_id = bos_id

    def partition(self, prefix: Sequence[int]) -> Partition:
        if self.spec.scheme == "SIR":
            return sir_partition(self.spec, prefix, self.vocab_size, self.bos_id)
        last = prefix[-1] if len(prefix) else self.bos_id
        return kgw_partition(self.spec, last, self.vocab_size)

    def bias(self, logits: np.ndarray, partition: Partition) -> np.ndarray:
        if self.spec.scheme == "SIR":
            return apply_bias(logits, partition, 2 * self.spec.delta) - self.spec.delta
        return apply_bias(logits, partition, self.spec.delta)

    def __call__(self, prefix: Sequence[int], logits: np.ndarray) -> np.ndarray:
        if self.spec.delta == 0:
            return np.array(logits, dtype=float)
        return self.bias(logits, self.partition(prefix))


def processor_for(spec: WatermarkSpec | None, vocab) -> WatermarkProcessor | None:
    if spec is None:
        return None
    return WatermarkProcessor(spec, vocab.size, vocab.bos_id)


# decoding ----------------------------------------------------------------


@dataclass(frozen=True)
class Generation:
    tokens: tuple[int, ...]
    green: tuple[bool, ...]  # empty when generated without a watermark

    @property
    def green_count(self) -> int:
        return sum(self.green)


def watermarked_generate(
    model,
    spec: WatermarkSpec | None,
    prompt: Sequence[int],
    max_tokens: int,
    decode: str = "greedy",
    seed: int | None = None,
    min_tokens: int = 0,
    stop_ids: Sequence[int] = (),
) -> Generation:
    """Decode up to ``max_tokens`` tokens after ``prompt``.

    Stops at EOS (never before ``min_tokens``) or at any id in ``stop_ids``;
    neither EOS nor the stop token is included in the output. BOS is never
    emitted. Greedy ties go to the lowest token id.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if decode not in ("greedy", "multinomial"):
        raise ValueError(f"unknown decode mode {decode!r}")
    vocab = model.vocab
    proc = processor_for(spec, vocab)
    rng = np.random.default_rng(seed) if decode == "multinomial" else None
    stops = set(stop_ids)
    seq = list(prompt)
    out: list[int] = []
    greens: list[bool] = []
    for step in range(max_tokens):
        logits = np.array(model.next_logits(seq), dtype=float)
        part = None
        if proc is not None:
            part = proc.partition(seq)
            if spec.delta:
                logits = proc.bias(logits, part)
        logits[vocab.bos_id] = -np.inf
        if step < min_tokens:
            logits[vocab.eos_id] = -np.inf
        if rng is None:
            tok = int(np.argmax(logits))
        else:
            p = np.exp(logits - logits.max())
            cdf = np.cumsum(p)
            tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            tok = min(tok, len(cdf) - 1)
        if tok == vocab.eos_id or tok in stops:
            break
        out.append(tok)
        if part is not None:
            greens.append(bool(part.green_mask[tok]))
        seq.append(tok)
    return Generation(tuple(out), tuple(greens))

"""Watermark detection: green counting, z statistics and empirical ROC curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptySample, SequenceTooShort, UndefinedStatistic
from .langmodel import entropy_at
from .watermark import WatermarkProcessor, WatermarkSpec

EWD_WEIGHT_FLOOR = 1e-3
DEFAULT_THRESHOLD = 4.0


@dataclass(frozen=True)
class DetectionReport:
    green_count: float  # weighted green sum for EWD
    scored_length: int
    z: float
    threshold: float
    gamma: float
    weights: tuple[float, ...] = field(default=(), repr=False)

    @property
    def decision(self) -> bool:
        return self.z > self.threshold

    def to_dict(self) -> dict:
        return {
            "green_count": self.green_count,
            "scored_length": self.scored_length,
            "z": self.z,
            "threshold": self.threshold,
            "gamma": self.gamma,
            "decision": self.decision,
            "weights": list(self.weights),
        }


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def green_flags(
    seq: Sequence[int], spec: WatermarkSpec, vocab_size: int, start: int = 1, bos_id: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Per scored position: whether the token is green, and that step's green fraction."""
    if len(seq) < 2 or start >= len(seq):
        raise SequenceTooShort(f"need a token after position {start}, sequence has {len(seq)}")
    start = max(start, 1)
    proc = WatermarkProcessor(spec, vocab_size, bos_id)
    flags = np.empty(len(seq) - start, dtype=bool)
    fractions = np.empty(len(seq) - start)
    for n, i in enumerate(range(start, len(seq))):
        part = proc.partition(seq[:i])
        flags[n] = part.green_mask[seq[i]]
        fractions[n] = part.green_fraction
    return flags, fractions


def count_green(
    seq: Sequence[int], spec: WatermarkSpec, vocab_size: int, start: int = 1, bos_id: int = 1
) -> tuple[int, int]:
    """(green_count, scored_length) over positions ``start..len(seq)-1``."""
    flags, _ = green_flags(seq, spec, vocab_size, start, bos_id)
    return int(flags.sum()), len(flags)


def z_score(green_count: float, T: int, gamma: float) -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return (green_count - gamma * T) / math.sqrt(T * gamma * (1 - gamma))


def weighted_z_score(flags: Sequence[bool], weights: Sequence[float], gamma: float) -> float:
    """Entropy-weighted statistic; reduces to ``z_score`` for constant weights."""
    w = np.asarray(weights, dtype=float)
    g = np.asarray(flags, dtype=float)
    if w.shape != g.shape:
        raise ValueError("flags and weights differ in length")
    sq = float((w * w).sum())
    if sq == 0.0:
        raise UndefinedStatistic("all weights are zero")
    return (float((w * g).sum()) - gamma * float(w.sum())) / math.sqrt(gamma * (1 - gamma) * sq)


def detect(
    seq: Sequence[int],
    spec: WatermarkSpec,
    vocab_size: int,
    start: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
    bos_id: int = 1,
) -> DetectionReport:
    """Plain z test. For SIR, gamma is the mean green fraction of the recomputed partitions."""
    flags, fractions = green_flags(seq, spec, vocab_size, start, bos_id)
    gamma = float(fractions.mean()) if spec.scheme == "SIR" else spec.gamma
    T = len(flags)
    count = int(flags.sum())
    return DetectionReport(count, T, z_score(count, T, gamma), threshold, gamma)


def entropy_weights(
    model, seq: Sequence[int], start: int = 1, floor: float | None = EWD_WEIGHT_FLOOR
) -> np.ndarray:
    """Entropy of the distribution each scored token was drawn from, floored at ``floor``."""
    w = np.array([entropy_at(model, seq[:i]) for i in range(max(start, 1), len(seq))])
    if floor is not None:
        w = np.maximum(w, floor)
    return w


def ewd_z_score(
    seq: Sequence[int],
    spec: WatermarkSpec,
    model,
    start: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
    weights: Sequence[float] | None = None,
    floor: float | None = EWD_WEIGHT_FLOOR,
) -> DetectionReport:
    vocab = model.vocab
    flags, _ = green_flags(seq, spec, vocab.size, start, vocab.bos_id)
    if weights is None:
        w = entropy_weights(model, seq, start, floor)
    else:
        w = np.asarray(weights, dtype=float)
        if floor is not None:
            w = np.maximum(w, floor)
    z = weighted_z_score(flags, w, spec.gamma)
    return DetectionReport(
        float((w * flags).sum()), len(flags), z, threshold, spec.gamma, tuple(w.tolist())
    )


def score(
    seq: Sequence[int], spec: WatermarkSpec, detector: str, model=None, vocab=None, start: int = 1
) -> float:
    """z statistic of one sequence under the named detector (``plain`` or ``ewd``)."""
    vocab = vocab or model.vocab
    if detector == "ewd":
        if model is None:
            raise ValueError("the ewd detector needs a model for entropies")
        return ewd_z_score(seq, spec, model, start).z
    if detector == "plain":
        return detect(seq, spec, vocab.size, start, bos_id=vocab.bos_id).z
    raise ValueError(f"unknown detector {detector!r}")


def detector_for(scheme: str) -> str:
    return "ewd" if scheme == "EWD" else "plain"


def roc_from_scores(pos: Sequence[float], neg: Sequence[float]) -> list[RocPoint]:
    """ROC over every observed score as threshold (decision is ``z > threshold``)."""
    if len(pos) == 0 or len(neg) == 0:
        raise EmptySample("ROC needs at least one positive and one negative")
    pos = np.sort(np.asarray(pos, dtype=float))
    neg = np.sort(np.asarray(neg, dtype=float))
    thresholds = np.concatenate(([-np.inf], np.unique(np.concatenate((pos, neg)))))
    tpr = (len(pos) - np.searchsorted(pos, thresholds, side="right")) / len(pos)
    fpr = (len(neg) - np.searchsorted(neg, thresholds, side="right")) / len(neg)
    return [RocPoint(float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr)]


def tpr_at_fpr(points: Sequence[RocPoint], target: float = 0.01) -> float:
    """TPR at the threshold where FPR first drops to ``target`` or below.

    FPR is monotone in the threshold, so this is the best TPR whose FPR
    never exceeds the target.
    """
    ok = [p for p in points if p.fpr <= target]
    return min(ok, key=lambda p: p.threshold).tpr


def empirical_roc(
    positives: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    spec: WatermarkSpec,
    detector: str = "plain",
    model=None,
    vocab=None,
    pos_starts: Sequence[int] | None = None,
    neg_starts: Sequence[int] | None = None,
) -> list[RocPoint]:
    if not positives or not negatives:
        raise EmptySample("ROC needs at least one positive and one negative")
    pos_starts = pos_starts or [1] * len(positives)
    neg_starts = neg_starts or [1] * len(negatives)
    pos = [score(s, spec, detector, model, vocab, st) for s, st in zip(positives, pos_starts)]
    neg = [score(s, spec, detector, model, vocab, st) for s, st in zip(negatives, neg_starts)]
    return roc_from_scores(pos, neg)

"""Label-partition enumeration for CLS tasks and rank-stability analysis for MCQ tasks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import tokenize
from .errors import (
    IncompleteEnumeration,
    InvalidCount,
    KTooLarge,
    MultiTokenLabel,
    NotCLS,
    TooManyLabels,
)
from .langmodel import log_softmax
from .taskeval import (
    DegenerateBaseline,
    TaskExample,
    normalized_score,
    option_scores,
    random_baseline,
    task_category,
)
from .watermark import WatermarkSpec

MAX_LABELS = 20
COLLAPSE_TOLERANCE = 0.02


def partition_probability(n_total: int, n_green: int, gamma: float, specific: bool = True) -> float:
    """Binomial probability of a label split.

    ``specific=True`` gives the mass of one particular assignment with
    ``n_green`` green labels; ``specific=False`` the mass of the whole count
    class, i.e. C(n_total, n_green) times that.
    """
    if not (0 <= n_green <= n_total):
        raise InvalidCount(f"n_green={n_green} outside [0, {n_total}]")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    p = gamma**n_green * (1 - gamma) ** (n_total - n_green)
    return p if specific else math.comb(n_total, n_green) * p


@dataclass(frozen=True)
class LabelPartitionOutcome:
    assignment: tuple[bool, ...]  # True = label token is green
    probability: float
    accuracy: float
    normalized: float | None

    @property
    def bitstring(self) -> str:
        return "".join("1" if g else "0" for g in self.assignment)


def label_token_ids(task: Sequence[TaskExample], vocab) -> list[int]:
    if task_category(task) != "CLS":
        raise NotCLS("label partitions only apply to CLS tasks")
    ids = []
    for label in task[0].labels:
        toks = tokenize(label, vocab)
        if len(toks) != 1:
            raise MultiTokenLabel(f"label {label!r} spans {len(toks)} tokens")
        if toks[0] == vocab.unk_id:
            raise ValueError(f"label {label!r} is not in the vocabulary")
        ids.append(toks[0])
    return ids


def label_logits(model, task: Sequence[TaskExample]) -> np.ndarray:
    """Unwatermarked log-probabilities of each label at the label position, shape (examples, labels)."""
    vocab = model.vocab
    ids = label_token_ids(task, vocab)
    rows = [log_softmax(model.next_logits(tokenize(ex.prompt, vocab)))[ids] for ex in task]
    return np.array(rows)


def effective_label_delta(spec: WatermarkSpec) -> float:
    """Logit gap between green and red labels: delta, or 2*delta for SIR's +/- bias."""
    return 2 * spec.delta if spec.scheme == "SIR" else spec.delta


def _accuracy(logits: np.ndarray, gold: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == gold))


def enumerate_partitions(
    model,
    task: Sequence[TaskExample],
    delta: float,
    gamma: float,
    cached_logits: np.ndarray | None = None,
) -> list[LabelPartitionOutcome]:
    """Re-decide every example under each of the 2^|L| green/red label assignments."""
    if task_category(task) != "CLS":
        raise NotCLS("label partitions only apply to CLS tasks")
    n_labels = len(task[0].labels)
    if n_labels > MAX_LABELS:
        raise TooManyLabels(f"{n_labels} labels > {MAX_LABELS}")
    logits = label_logits(model, task) if cached_logits is None else np.asarray(cached_logits)
    gold = np.array([ex.gold_index for ex in task])
    base = random_baseline(task)
    unwatermarked = _accuracy(logits, gold)
    outcomes = []
    for assignment in itertools.product((False, True), repeat=n_labels):
        mask = np.array(assignment, dtype=float)
        acc = _accuracy(logits + delta * mask, gold)
        try:
            norm = normalized_score(acc, unwatermarked, base)
        except DegenerateBaseline:
            norm = None
        prob = partition_probability(n_labels, sum(assignment), gamma)
        outcomes.append(LabelPartitionOutcome(assignment, prob, acc, norm))
    return outcomes


def _check_complete(outcomes: Sequence[LabelPartitionOutcome]):
    if not outcomes:
        raise IncompleteEnumeration("no outcomes")
    n = len(outcomes[0].assignment)
    seen = {o.assignment for o in outcomes}
    if len(seen) != 2**n or abs(sum(o.probability for o in outcomes) - 1.0) > 1e-9:
        raise IncompleteEnumeration(f"{len(seen)} of {2**n} assignments present")


def expected_accuracy(outcomes: Sequence[LabelPartitionOutcome]) -> float:
    _check_complete(outcomes)
    return float(sum(o.probability * o.accuracy for o in outcomes))


def worst_case_accuracy(outcomes: Sequence[LabelPartitionOutcome]) -> float:
    return min(o.accuracy for o in outcomes)


def best_case_accuracy(outcomes: Sequence[LabelPartitionOutcome]) -> float:
    return max(o.accuracy for o in outcomes)


def expected_normalized_score(
    outcomes: Sequence[LabelPartitionOutcome], unwatermarked_raw: float, baseline: float
) -> float:
    return normalized_score(expected_accuracy(outcomes), unwatermarked_raw, baseline)


def probability_of_random_collapse(
    outcomes: Sequence[LabelPartitionOutcome], baseline: float, tolerance: float = COLLAPSE_TOLERANCE
) -> float:
    """Total probability of assignments that leave accuracy at or below random + tolerance."""
    _check_complete(outcomes)
    return float(sum(o.probability for o in outcomes if o.accuracy <= baseline + tolerance))


# MCQ rank stability ----------------------------------------------------------


@dataclass(frozen=True)
class RankStabilityRow:
    k: int
    proportion_unchanged: float
    random_permutation_baseline: float
    variant: str  # "ordered" or "set"


def _preference(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def preference_orders(model, spec: WatermarkSpec | None, task: Sequence[TaskExample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(unwatermarked, watermarked) preference orders per example."""
    if task_category(task) != "MCQ":
        raise ValueError("rank stability needs an MCQ task")
    out = []
    for ex in task:
        bare = option_scores(model, None, ex, average=True)
        marked = bare if spec is None or spec.delta == 0 else option_scores(model, spec, ex, average=True)
        out.append((_preference(bare), _preference(marked)))
    return out


def _unchanged(pair: tuple[np.ndarray, np.ndarray], k: int, variant: str) -> bool:
    a, b = pair[0][:k], pair[1][:k]
    if variant == "ordered":
        return bool(np.array_equal(a, b))
    return set(a.tolist()) == set(b.tolist())


def _chance(n: int, k: int, variant: str) -> float:
    return 1.0 / (math.perm(n, k) if variant == "ordered" else math.comb(n, k))


def rank_stability(
    model,
    spec: WatermarkSpec | None,
    task: Sequence[TaskExample],
    k_values: Sequence[int],
    variants: Sequence[str] = ("ordered", "set"),
    orders: list | None = None,
) -> list[RankStabilityRow]:
    """Share of examples whose top-k preference is unchanged by the watermark."""
    n_min = min(len(ex.choices) for ex in task)
    if max(k_values) > n_min:
        raise KTooLarge(f"k={max(k_values)} exceeds the smallest choice count {n_min}")
    orders = orders if orders is not None else preference_orders(model, spec, task)
    rows = []
    for variant in variants:
        for k in k_values:
            prop = float(np.mean([_unchanged(pair, k, variant) for pair in orders]))
            chance = float(np.mean([_chance(len(ex.choices), k, variant) for ex in task]))
            rows.append(RankStabilityRow(k, prop, chance, variant))
    return rows


def mean_option_words(example: TaskExample) -> float:
    return float(np.mean([len(c.split()) for c in example.choices]))


def stability_by_length(
    model,
    spec: WatermarkSpec | None,
    task: Sequence[TaskExample],
    buckets: Sequence[tuple[float, float]],
    k: int = 1,
    variant: str = "set",
    orders: list | None = None,
) -> list[dict]:
    """Top-k stability per bucket of mean option length (words, inclusive bounds).

    Buckets that receive no examples are left out.
    """
    orders = orders if orders is not None else preference_orders(model, spec, task)
    lengths = [mean_option_words(ex) for ex in task]
    rows = []
    for lo, hi in buckets:
        idx = [i for i, n in enumerate(lengths) if lo <= n <= hi]
        if not idx:
            continue
        prop = float(np.mean([_unchanged(orders[i], k, variant) for i in idx]))
        rows.append({"bucket": f"{lo}-{hi}", "lo": lo, "hi": hi, "n": len(idx), "k": k, "proportion": prop})
    return rows


def disagreement_probability(gamma: float) -> float:
    """Chance two independently placed tokens fall on opposite sides of the partition."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return 1.0 - gamma**2 - (1.0 - gamma) ** 2

"""Task decoders (CLS, MCQ, SGEN, LGEN), metrics, random baselines and normalized scores."""

from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import detokenize, tokenize
from .errors import (
    CategoryMismatch,
    DegenerateBaseline,
    LengthMismatch,
    MixedCategories,
)
from .langmodel import log_softmax
from .watermark import WatermarkSpec, processor_for, watermarked_generate

CATEGORIES = ("CLS", "MCQ", "SGEN", "LGEN")
METRICS = {"CLS": "accuracy", "MCQ": "accuracy", "SGEN": "f1", "LGEN": "bleu"}
MAX_TOKENS = {"SGEN": 32, "LGEN": 256}


@dataclass(frozen=True)
class TaskExample:
    category: str
    prompt: str
    labels: tuple[str, ...] = ()
    choices: tuple[str, ...] = ()
    references: tuple[str, ...] = ()
    gold_index: int | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.category == "MCQ":
            if len(self.choices) < 2:
                raise ValueError("MCQ examples need at least two choices")
            if self.gold_index is None or not 0 <= self.gold_index < len(self.choices):
                raise ValueError("MCQ gold_index out of range")
        if self.category == "CLS":
            if self.gold_index is None or not 0 <= self.gold_index < len(self.labels):
                raise ValueError("CLS gold_index out of range")

    @property
    def options(self) -> tuple[str, ...]:
        return self.labels if self.category == "CLS" else self.choices

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskExample":
        return cls(
            obj["category"],
            obj["prompt"],
            tuple(obj.get("labels", ())),
            tuple(obj.get("choices", ())),
            tuple(obj.get("references", ())),
            obj.get("gold_index"),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def load_task(path: str | Path) -> list[TaskExample]:
    task = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                task.append(TaskExample.from_dict(json.loads(line)))
    labels = {ex.labels for ex in task if ex.category == "CLS"}
    if len(labels) > 1:
        raise ValueError(f"{path}: CLS examples must share one label list")
    return task


def task_category(task: Sequence[TaskExample]) -> str:
    cats = {ex.category for ex in task}
    if len(cats) != 1:
        raise MixedCategories(f"task mixes categories {sorted(cats)}")
    return cats.pop()


# scoring -----------------------------------------------------------------


def continuation_logprobs(model, spec, context: Sequence[int], continuation: Sequence[int]) -> np.ndarray:
    """Log-probability of each continuation token, watermarking every scored position."""
    proc = processor_for(spec, model.vocab)
    seq = list(context)
    out = np.empty(len(continuation))
    for n, tok in enumerate(continuation):
        logits = model.next_logits(seq)
        if proc is not None:
            logits = proc(seq, logits)
        out[n] = log_softmax(logits)[tok]
        seq.append(tok)
    return out


def _require(example: TaskExample, *categories: str):
    if example.category not in categories:
        raise CategoryMismatch(f"expected {'/'.join(categories)}, got {example.category}")


def option_scores(model, spec, example: TaskExample, average: bool) -> np.ndarray:
    vocab = model.vocab
    context = tokenize(example.prompt, vocab)
    scores = []
    for option in example.options:
        ids = tokenize(option, vocab)
        if not ids:
            raise ValueError(f"option {option!r} has no tokens")
        lp = continuation_logprobs(model, spec, context, ids)
        scores.append(lp.mean() if average else lp.sum())
    return np.array(scores)


def cls_predict(model, spec: WatermarkSpec | None, example: TaskExample) -> int:
    """Label with the highest summed log-probability; ties go to the lowest index."""
    _require(example, "CLS")
    return int(np.argmax(option_scores(model, spec, example, average=False)))


def mcq_predict(model, spec: WatermarkSpec | None, example: TaskExample) -> int:
    """Choice with the highest average token log-likelihood."""
    _require(example, "MCQ")
    return int(np.argmax(option_scores(model, spec, example, average=True)))


def generate_answer(
    model, spec: WatermarkSpec | None, example: TaskExample, max_tokens: int | None = None, mode: str | None = None
) -> str:
    mode = mode or example.category
    _require(example, mode)
    if mode not in MAX_TOKENS:
        raise CategoryMismatch(f"{mode} is not a generation category")
    vocab = model.vocab
    stops = [vocab.id("\n")] if mode == "SGEN" and "\n" in vocab else []
    gen = watermarked_generate(
        model,
        spec,
        tokenize(example.prompt, vocab),
        max_tokens or MAX_TOKENS[mode],
        decode="greedy",
        stop_ids=stops,
    )
    return detokenize(gen.tokens, vocab)


# metrics -------------------------------------------------------------------

_PUNCT = str.maketrans("", "", string.punctuation)


def _f1_tokens(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def token_f1(prediction: str, references: Sequence[str]) -> float:
    """Best bag-of-tokens F1 against any reference (lowercased, punctuation stripped)."""
    pred = _f1_tokens(prediction)
    best = 0.0
    for ref in references:
        gold = _f1_tokens(ref)
        if not pred or not gold:
            best = max(best, float(pred == gold))
            continue
        common = sum((Counter(pred) & Counter(gold)).values())
        if common == 0:
            continue
        p, r = common / len(pred), common / len(gold)
        best = max(best, 2 * p * r / (p + r))
    return best


_BLEU_TOKEN = re.compile(r"\w+|[^\w\s]")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(predictions: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram counts and the closest-reference brevity penalty.

    A higher-order precision with zero matches is smoothed to 1 / (total + 1).
    """
    if len(predictions) != len(references):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(references)} reference sets")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for pred, refs in zip(predictions, references):
        hyp = _BLEU_TOKEN.findall(pred)
        ref_toks = [_BLEU_TOKEN.findall(r) for r in refs]
        hyp_len += len(hyp)
        if ref_toks:
            ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in ref_toks)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            max_ref = Counter()
            for r in ref_toks:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if n > 0 and matches[n] == 0:
            log_p += math.log(1.0 / (totals[n] + 1))
        else:
            log_p += math.log(matches[n] / totals[n])
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


def random_baseline(task: Sequence[TaskExample]) -> float:
    """Expected score of a uniform random predictor: mean 1/k for CLS/MCQ, 0 for generation."""
    cat = task_category(task)
    if cat in ("SGEN", "LGEN"):
        return 0.0
    return float(np.mean([1.0 / len(ex.options) for ex in task]))


def normalized_score(raw_watermarked: float, raw_unwatermarked: float, baseline: float) -> float:
    denom = raw_unwatermarked - baseline
    if denom == 0:
        raise DegenerateBaseline("unwatermarked score equals the random baseline")
    return (raw_watermarked - baseline) / denom


# task-level evaluation -----------------------------------------------------


@dataclass
class ScoreReport:
    raw: float
    random_baseline: float
    normalized: float | None
    metric_name: str
    unwatermarked_raw: float
    predictions: list = field(default_factory=list, repr=False)
    unwatermarked_predictions: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return asdict(self)


def predict_task(model, spec: WatermarkSpec | None, task: Sequence[TaskExample]) -> tuple[float, list]:
    """Raw metric and per-example predictions under ``spec`` (None = unwatermarked)."""
    cat = task_category(task)
    if cat == "CLS":
        preds = [cls_predict(model, spec, ex) for ex in task]
        return float(np.mean([p == ex.gold_index for p, ex in zip(preds, task)])), preds
    if cat == "MCQ":
        preds = [mcq_predict(model, spec, ex) for ex in task]
        return float(np.mean([p == ex.gold_index for p, ex in zip(preds, task)])), preds
    preds = [generate_answer(model, spec, ex) for ex in task]
    if cat == "SGEN":
        return float(np.mean([token_f1(p, ex.references) for p, ex in zip(preds, task)])), preds
    return corpus_bleu(preds, [ex.references for ex in task]), preds


def score_task(model, spec: WatermarkSpec | None, task: Sequence[TaskExample]) -> ScoreReport:
    base = random_baseline(task)
    raw_u, preds_u = predict_task(model, None, task)
    if spec is None or spec.delta == 0:
        raw_w, preds_w = raw_u, list(preds_u)
    else:
        raw_w, preds_w = predict_task(model, spec, task)
    try:
        norm = normalized_score(raw_w, raw_u, base)
    except DegenerateBaseline:
        norm = None
    return ScoreReport(raw_w, base, norm, METRICS[task_category(task)], raw_u, preds_w, preds_u)


def logit_margin_profile(model, examples: Sequence[TaskExample], positions: int = 8, top_k: int = 20) -> np.ndarray:
    """Mean of the descending-sorted top-``top_k`` logits over greedy decoding steps."""
    vocab = model.vocab
    top_k = min(top_k, vocab.size)
    rows = []
    for ex in examples:
        seq = list(tokenize(ex.prompt, vocab))
        for _ in range(positions):
            logits = np.asarray(model.next_logits(seq), dtype=float)
            rows.append(np.sort(logits)[::-1][:top_k])
            tok = int(np.argmax(logits))
            if tok == vocab.eos_id:
                break
            seq.append(tok)
    if not rows:
        return np.zeros(top_k)
    return np.mean(rows, axis=0)

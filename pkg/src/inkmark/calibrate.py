"""Matching watermark strength across schemes, then picking the least perplexity-hurting setting.

For every gamma, delta is bisected until the empirical TPR at FPR=0.01 over
50-token generations hits the intensity target; among the calibrated
(gamma, delta) pairs the one with the lowest watermarked perplexity on
held-out snippets wins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .detect import detector_for, roc_from_scores, score, tpr_at_fpr
from .errors import NoFeasibleGamma, UnachievableTarget
from .langmodel import perplexity
from .watermark import WatermarkProcessor, WatermarkSpec, watermarked_generate
from .util import derive_seed

log = logging.getLogger(__name__)

GAMMA_GRID = (0.1, 0.25, 0.5, 0.75)
DELTA_MAX = 15.0
TPR_TOLERANCE = 0.05
MAX_ITERATIONS = 20


@dataclass(frozen=True)
class IntensityTarget:
    name: str
    target_tpr: float
    fpr: float = 0.01
    gen_length: int = 50


INTENSITIES = {
    "light": IntensityTarget("light", 0.5),
    "moderate": IntensityTarget("moderate", 0.75),
    "heavy": IntensityTarget("heavy", 0.95),
}


def generate_batch(
    model, spec: WatermarkSpec | None, prefixes: Sequence[Sequence[int]], gen_length: int, seed: int, tag: str
) -> list[tuple[int, ...]]:
    """Prefix + exactly ``gen_length`` sampled tokens for every prefix (EOS suppressed)."""
    out = []
    for i, prefix in enumerate(prefixes):
        gen = watermarked_generate(
            model, spec, prefix, gen_length, decode="multinomial",
            seed=derive_seed(seed, tag, i), min_tokens=gen_length,
        )
        out.append(tuple(prefix) + gen.tokens)
    return out


def score_tail(model, spec: WatermarkSpec, seqs: Sequence[Sequence[int]], gen_length: int) -> list[float]:
    """Detection statistic over the last ``gen_length`` tokens of each sequence."""
    detector = detector_for(spec.scheme)
    return [score(s, spec, detector, model, start=len(s) - gen_length) for s in seqs]


def empirical_tpr_fn(
    model,
    spec_template: WatermarkSpec,
    target: IntensityTarget,
    prefixes: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    seed: int = 0,
) -> Callable[[float], float]:
    """delta -> TPR@FPR over fresh watermarked generations from ``prefixes``.

    Positive seeds are shared across delta values so the curve is smooth in delta.
    """
    neg_scores = score_tail(model, spec_template, negatives, target.gen_length)

    def tpr(delta: float) -> float:
        spec = spec_template.with_delta(delta)
        pos = generate_batch(model, spec, prefixes, target.gen_length, seed, "positive")
        roc = roc_from_scores(score_tail(model, spec, pos, target.gen_length), neg_scores)
        return tpr_at_fpr(roc, target.fpr)

    return tpr


def calibrate_delta(
    model,
    spec_template: WatermarkSpec,
    target: IntensityTarget,
    prefixes: Sequence[Sequence[int]] = (),
    negatives: Sequence[Sequence[int]] = (),
    seed: int = 0,
    tpr_fn: Callable[[float], float] | None = None,
    delta_max: float = DELTA_MAX,
    tolerance: float = TPR_TOLERANCE,
    max_iterations: int = MAX_ITERATIONS,
) -> tuple[float, float]:
    """Bisect delta in [0, delta_max] until |TPR - target| <= tolerance.

    ``negatives`` are unwatermarked sequences whose last ``gen_length``
    tokens are scored. ``tpr_fn`` replaces the empirical measurement (used
    for synthetic checks). Returns (delta, achieved TPR).
    """
    if tpr_fn is None:
        if len(prefixes) < 50:
            raise ValueError(f"need at least 50 prefixes, got {len(prefixes)}")
        tpr_fn = empirical_tpr_fn(model, spec_template, target, prefixes, negatives, seed)
    goal = target.target_tpr

    t_lo = tpr_fn(0.0)
    if t_lo >= goal - tolerance:
        return 0.0, t_lo
    t_hi = tpr_fn(delta_max)
    if t_hi < goal - tolerance:
        raise UnachievableTarget(
            f"TPR {t_hi:.3f} at delta={delta_max} is below {goal} - {tolerance}"
        )
    lo, hi, best = 0.0, delta_max, (delta_max, t_hi)
    for _ in range(max_iterations):
        mid = (lo + hi) / 2
        t = tpr_fn(mid)
        log.debug("gamma=%s delta=%.4f tpr=%.3f", spec_template.gamma, mid, t)
        if abs(t - goal) <= tolerance:
            return mid, t
        if t < goal:
            lo = mid
        else:
            hi, best = mid, (mid, t)
    return best


@dataclass
class CalibrationResult:
    scheme: str
    intensity: str
    key: int
    per_gamma: dict = field(default_factory=dict)  # gamma (None for SIR) -> (delta, tpr)
    perplexities: dict = field(default_factory=dict)  # gamma -> mean watermarked perplexity
    chosen: tuple = (None, None)  # (gamma, delta)
    infeasible: list = field(default_factory=list)
    effective_gamma: float | None = None

    @property
    def spec(self) -> WatermarkSpec:
        gamma, delta = self.chosen
        return WatermarkSpec(self.scheme, gamma, delta, self.key)

    def to_dict(self) -> dict:
        def k(g):
            return "auto" if g is None else repr(g)

        return {
            "scheme": self.scheme,
            "intensity": self.intensity,
            "key": self.key,
            "per_gamma": {k(g): {"delta": d, "tpr": t} for g, (d, t) in self.per_gamma.items()},
            "perplexities": {k(g): p for g, p in self.perplexities.items()},
            "chosen": {"gamma": self.chosen[0], "delta": self.chosen[1]},
            "infeasible": [k(g) for g in self.infeasible],
            "effective_gamma": self.effective_gamma,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationResult":
        def g(s):
            return None if s == "auto" else float(s)

        return cls(
            obj["scheme"],
            obj["intensity"],
            obj["key"],
            {g(s): (v["delta"], v["tpr"]) for s, v in obj["per_gamma"].items()},
            {g(s): p for s, p in obj["perplexities"].items()},
            (obj["chosen"]["gamma"], obj["chosen"]["delta"]),
            [g(s) for s in obj["infeasible"]],
            obj.get("effective_gamma"),
        )


def mean_perplexity(model, spec: WatermarkSpec, snippets: Sequence[Sequence[int]]) -> float:
    proc = WatermarkProcessor(spec, model.vocab.size, model.vocab.bos_id)
    return float(np.mean([perplexity(model, s, proc) for s in snippets if len(s)]))


def pareto_select(
    per_gamma: dict,
    snippets: Sequence[Sequence[int]],
    model,
    scheme: str,
    key: int = 0,
    intensity: str = "",
    ppl_fn: Callable[[WatermarkSpec], float] | None = None,
) -> CalibrationResult:
    """Pick the calibrated (gamma, delta) with the lowest watermarked perplexity.

    Ties go to the smaller delta, then the smaller gamma.
    """
    if not per_gamma:
        raise NoFeasibleGamma("no gamma reached the target strength")
    ppl_fn = ppl_fn or (lambda spec: mean_perplexity(model, spec, snippets))
    result = CalibrationResult(scheme, intensity, key, dict(per_gamma))
    for gamma, (delta, _) in per_gamma.items():
        result.perplexities[gamma] = ppl_fn(WatermarkSpec(scheme, gamma, delta, key))

    def rank(gamma):
        g = -math.inf if gamma is None else gamma
        return (result.perplexities[gamma], per_gamma[gamma][0], g)

    best = min(per_gamma, key=rank)
    result.chosen = (best, per_gamma[best][0])
    return result


def calibrate_scheme(
    model,
    scheme: str,
    intensity: str,
    prefixes: Sequence[Sequence[int]],
    snippets: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    key: int,
    seed: int = 0,
    gamma_grid: Sequence[float] = GAMMA_GRID,
) -> CalibrationResult:
    """Full calibration for one scheme: per-gamma delta search then pareto selection."""
    target = INTENSITIES[intensity]
    grid = [None] if scheme == "SIR" else list(gamma_grid)
    per_gamma, infeasible = {}, []
    for gamma in grid:
        template = WatermarkSpec(scheme, gamma, 0.0, key)
        try:
            per_gamma[gamma] = calibrate_delta(
                model, template, target, prefixes, negatives, derive_seed(seed, scheme, gamma)
            )
        except UnachievableTarget as exc:
            log.info("%s gamma=%s infeasible: %s", scheme, gamma, exc)
            infeasible.append(gamma)
    result = pareto_select(per_gamma, snippets, model, scheme, key, intensity)
    result.infeasible = infeasible
    if scheme == "SIR":
        result.effective_gamma = sir_effective_gamma(model, result.spec, prefixes)
    return result


def sir_effective_gamma(model, spec: WatermarkSpec, prefixes: Sequence[Sequence[int]]) -> float:
    """Mean green fraction of SIR partitions over the given prefixes."""
    proc = WatermarkProcessor(spec, model.vocab.size, model.vocab.bos_id)
    return float(np.mean([proc.partition(p).green_fraction for p in prefixes]))

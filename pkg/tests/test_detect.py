import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inkmark.detect import (
    DetectionReport,
    count_green,
    detect,
    detector_for,
    empirical_roc,
    entropy_weights,
    ewd_z_score,
    roc_from_scores,
    tpr_at_fpr,
    weighted_z_score,
    z_score,
)
from inkmark.errors import EmptySample, SequenceTooShort, UndefinedStatistic
from inkmark.watermark import WatermarkSpec, kgw_partition, watermarked_generate


def test_z_examples():
    assert z_score(25, 100, 0.25) == 0.0
    assert z_score(40, 100, 0.25) == pytest.approx(15 / math.sqrt(18.75), abs=1e-12)
    assert z_score(40, 100, 0.25) == pytest.approx(3.4641016, abs=1e-6)
    assert z_score(16, 16, 0.5) == 4.0


def test_z_rejects_bad_inputs():
    with pytest.raises(ValueError):
        z_score(1, 0, 0.5)
    with pytest.raises(ValueError):
        z_score(1, 2, 1.0)


def test_report_decision_and_bounds():
    r = DetectionReport(10, 12, 4.5, 4.0, 0.25)
    assert r.decision and r.to_dict()["decision"]
    assert not DetectionReport(1, 12, 4.0, 4.0, 0.25).decision


def test_count_green_recounts_partitions():
    spec = WatermarkSpec("KGW", 0.25, 1.0, 8)
    seq = [4, 17, 3, 3, 9, 40, 2]
    expected = sum(kgw_partition(spec, seq[i - 1], 50).green_mask[seq[i]] for i in range(1, len(seq)))
    assert count_green(seq, spec, 50) == (expected, len(seq) - 1)


def test_too_short():
    with pytest.raises(SequenceTooShort):
        count_green([3], WatermarkSpec("KGW", 0.25, 1.0, 1), 10)


def test_random_tokens_green_fraction():
    rng = np.random.default_rng(0)
    seq = rng.integers(0, 300, size=10_001).tolist()
    g, T = count_green(seq, WatermarkSpec("KGW", 0.25, 1.0, 3), 300)
    assert 0.23 <= g / T <= 0.27


def test_saturated_generation_fully_green(bundled_model):
    spec = WatermarkSpec("KGW", 0.25, 50.0, 5)
    gen = watermarked_generate(bundled_model, spec, (4, 5), 40, "greedy", min_tokens=40)
    seq = (4, 5) + gen.tokens
    g, T = count_green(seq, spec, bundled_model.vocab.size, start=2)
    assert g == T == 40


@pytest.mark.parametrize("scheme,gamma", [("KGW", 0.25), ("EWD", 0.5), ("SIR", None)])
def test_detection_consistent_with_generation(bundled_model, scheme, gamma):
    spec = WatermarkSpec(scheme, gamma, 2.0, 13)
    prompt = (4, 9, 12)
    gen = watermarked_generate(bundled_model, spec, prompt, 50, "multinomial", seed=3, min_tokens=50)
    g, T = count_green(prompt + gen.tokens, spec, bundled_model.vocab.size, start=len(prompt))
    assert (g, T) == (gen.green_count, 50)


def test_sir_uses_mean_green_fraction(bundled_model):
    spec = WatermarkSpec.sir(2.0, 4)
    gen = watermarked_generate(bundled_model, spec, (4,), 30, "multinomial", seed=1, min_tokens=30)
    r = detect((4,) + gen.tokens, spec, bundled_model.vocab.size)
    assert 0.3 < r.gamma < 0.7 and r.gamma != 0.5
    assert r.z == pytest.approx(z_score(r.green_count, r.scored_length, r.gamma))


def test_weighted_reduces_to_plain():
    flags = [True, False, True, True, False]
    for c in (0.3, 1.0, 7.0):
        assert weighted_z_score(flags, [c] * 5, 0.25) == pytest.approx(z_score(3, 5, 0.25), abs=1e-12)


def test_weighted_zero_weights():
    with pytest.raises(UndefinedStatistic):
        weighted_z_score([True, False], [0.0, 0.0], 0.5)


def test_ewd_clipping_gives_finite(bundled_model):
    spec = WatermarkSpec("EWD", 0.5, 1.0, 1)
    r = ewd_z_score([4, 5, 6, 7], spec, bundled_model, weights=[0.0, 0.0, 0.0])
    assert math.isfinite(r.z)
    assert r.weights == (1e-3,) * 3
    with pytest.raises(UndefinedStatistic):
        ewd_z_score([4, 5, 6, 7], spec, bundled_model, weights=[0.0, 0.0, 0.0], floor=None)


def test_entropy_weighting_rewards_green_high_entropy():
    flags = [True, True, False, False]
    weights = [3.0, 3.0, 0.1, 0.1]
    assert weighted_z_score(flags, weights, 0.25) > z_score(2, 4, 0.25)


def test_ewd_weights_are_model_entropies(bundled_model):
    seq = [4, 8, 15, 16, 23]
    w = entropy_weights(bundled_model, seq, start=1)
    assert len(w) == 4 and np.all(w >= 1e-3)
    r = ewd_z_score(seq, WatermarkSpec("EWD", 0.25, 1.0, 2), bundled_model)
    np.testing.assert_allclose(r.weights, w)


def test_detector_dispatch():
    assert detector_for("EWD") == "ewd"
    assert detector_for("KGW") == detector_for("SIR") == "plain"


def test_roc_monotone_and_conservative_threshold():
    roc = roc_from_scores([1.0, 2.0, 3.0, 4.0], [0.5, 1.5, 2.5, 3.5])
    thresholds = [p.threshold for p in roc]
    assert thresholds == sorted(thresholds) and thresholds[0] == -np.inf
    for a, b in zip(roc, roc[1:]):
        assert b.tpr <= a.tpr and b.fpr <= a.fpr
    assert (roc[0].tpr, roc[0].fpr) == (1.0, 1.0)
    # FPR <= 0.25 first reached at threshold 2.5 where TPR is 0.5
    assert tpr_at_fpr(roc, 0.25) == 0.5
    assert tpr_at_fpr(roc, 0.0) == 0.25


def test_roc_identical_samples():
    scores = [0.1, 0.4, 0.4, 2.0, 3.3]
    for p in roc_from_scores(scores, scores):
        assert p.tpr == p.fpr


def test_roc_empty():
    with pytest.raises(EmptySample):
        roc_from_scores([], [1.0])
    with pytest.raises(EmptySample):
        empirical_roc([], [(1, 2)], WatermarkSpec("KGW", 0.5, 1.0, 1))


def test_empirical_roc_separates(bundled_model):
    spec = WatermarkSpec("KGW", 0.25, 4.0, 6)
    prompts = [(4 + i,) for i in range(40)]
    pos = [p + watermarked_generate(bundled_model, spec, p, 30, "multinomial", seed=i, min_tokens=30).tokens for i, p in enumerate(prompts)]
    neg = [p + watermarked_generate(bundled_model, None, p, 30, "multinomial", seed=100 + i, min_tokens=30).tokens for i, p in enumerate(prompts)]
    roc = empirical_roc(pos, neg, spec, "plain", vocab=bundled_model.vocab)
    assert tpr_at_fpr(roc, 0.05) >= 0.9


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 500), st.sampled_from([0.1, 0.25, 0.5, 0.75]), st.data())
def test_z_matches_exact_rational(T, gamma, data):
    g = data.draw(st.integers(0, T))
    num = Fraction(g) - Fraction(gamma) * T
    var = Fraction(T) * Fraction(gamma) * (1 - Fraction(gamma))
    exact = float(num) / math.sqrt(float(var))
    assert z_score(g, T, gamma) == pytest.approx(exact, abs=1e-9)

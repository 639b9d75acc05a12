import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inkmark.corpus import detokenize, tokenize
from inkmark.errors import CategoryMismatch, DegenerateBaseline, LengthMismatch, MixedCategories
from inkmark.langmodel import MarginModel, UniformModel, log_softmax
from inkmark.taskeval import (
    TaskExample,
    cls_predict,
    corpus_bleu,
    generate_answer,
    load_task,
    logit_margin_profile,
    mcq_predict,
    normalized_score,
    predict_task,
    random_baseline,
    score_task,
    token_f1,
)
from inkmark.watermark import WatermarkSpec, kgw_partition

from conftest import TASKS, TableModel, make_vocab


# metrics -------------------------------------------------------------------


def test_f1_examples():
    assert token_f1("a b c", ["a b d"]) == pytest.approx(2 / 3, abs=0)
    assert token_f1("The Mill.", ["the mill"]) == 1.0
    assert token_f1("x y", ["a b"]) == 0.0
    assert token_f1("a b", ["zzz", "a b"]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), st.randoms())
def test_f1_order_invariant(pred, ref, rnd):
    shuffled = pred[:]
    rnd.shuffle(shuffled)
    assert token_f1(" ".join(pred), [" ".join(ref)]) == token_f1(" ".join(shuffled), [" ".join(ref)])


def test_bleu_identical_is_one():
    preds = ["the cat sat on the mat", "a dog ran far away today"]
    assert corpus_bleu(preds, [[p] for p in preds]) == pytest.approx(1.0, abs=1e-12)


def test_bleu_empty_predictions():
    assert corpus_bleu(["", ""], [["a b"], ["c"]]) == 0.0


def test_bleu_two_sentence_fixture():
    # hand counts: p1 = 8/9, p2 = 5/7, p3 = 2/5, p4 = 0/3 smoothed to 1/4;
    # hypothesis length 9, closest reference length 6 + 4 = 10
    expected = math.exp(1 - 10 / 9) * (8 / 9 * 5 / 7 * 2 / 5 * 1 / 4) ** 0.25
    got = corpus_bleu(["the cat sat on the mat", "a dog ran"], [["the cat is on the mat"], ["a dog ran away"]])
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(0.4491847, abs=1e-6)


def test_bleu_order_sensitive():
    ref = [["one two three four five"]]
    assert corpus_bleu(["one two three four five"], ref) > corpus_bleu(["five four three two one"], ref)


def test_bleu_length_mismatch():
    with pytest.raises(LengthMismatch):
        corpus_bleu(["a"], [])


def test_baselines_and_normalized():
    cls = [TaskExample("CLS", "q", ("yes", "no"), gold_index=0)] * 3
    mcq = [TaskExample("MCQ", "q", choices=("a", "b", "c", "d"), gold_index=1)] * 2
    assert random_baseline(cls) == 0.5
    assert random_baseline(mcq) == 0.25
    assert random_baseline([TaskExample("LGEN", "q", references=("x",))]) == 0.0
    with pytest.raises(MixedCategories):
        random_baseline(cls + mcq)
    assert normalized_score(0.8, 0.8, 0.5) == 1.0
    assert normalized_score(0.5, 0.8, 0.5) == 0.0
    assert normalized_score(0.7, 0.8, 0.5) == pytest.approx(2 / 3)
    assert normalized_score(0.2, 0.8, 0.5) < 0
    with pytest.raises(DegenerateBaseline):
        normalized_score(0.7, 0.5, 0.5)


@settings(max_examples=100)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_normalized_identities(x, u, b):
    if u != b:
        assert normalized_score(u, u, b) == 1.0
        assert normalized_score(b, u, b) == 0.0


# decoders ------------------------------------------------------------------


@pytest.fixture
def label_setup():
    """Vocabulary q0..q19 (prompt tokens) + yes/no; hand-set label logits per prompt."""
    vocab = make_vocab([f"q{i}" for i in range(20)] + ["yes", "no"])
    rng = np.random.default_rng(7)
    table, task, wins = {}, [], 0
    for i in range(20):
        logits = np.zeros(vocab.size)
        y, n = rng.normal(size=2)
        logits[vocab.id("yes")], logits[vocab.id("no")] = y, n
        table[vocab.id(f"q{i}")] = logits
        gold = int(rng.integers(0, 2))
        wins += (y > n) == (gold == 0)
        task.append(TaskExample("CLS", f"q{i}", ("yes", "no"), gold_index=gold))
    return TableModel(vocab, table), task, wins / 20


def test_cls_accuracy_matches_hand_count(label_setup):
    model, task, expected = label_setup
    raw, preds = predict_task(model, None, task)
    assert raw == expected


def test_cls_delta_zero_identical(label_setup):
    model, task, _ = label_setup
    spec = WatermarkSpec("KGW", 0.5, 0.0, 3)
    assert [cls_predict(model, spec, ex) for ex in task] == [cls_predict(model, None, ex) for ex in task]


def test_cls_saturated_boost_picks_green_label(label_setup):
    model, task, _ = label_setup
    vocab = model.vocab
    yes, no = vocab.id("yes"), vocab.id("no")
    ex = task[0]
    last = tokenize(ex.prompt, vocab)[-1]
    for key in range(1000):
        mask = kgw_partition(WatermarkSpec("KGW", 0.5, 1.0, key), last, vocab.size).green_mask
        if mask[no] and not mask[yes]:
            break
    assert cls_predict(model, WatermarkSpec("KGW", 0.5, 50.0, key), ex) == 1


def test_cls_ties_go_to_lowest_index(small_vocab):
    ex = TaskExample("CLS", "a", ("b", "c"), gold_index=1)
    assert cls_predict(UniformModel(small_vocab), None, ex) == 0


def test_category_mismatch(label_setup):
    model, task, _ = label_setup
    with pytest.raises(CategoryMismatch):
        mcq_predict(model, None, task[0])
    with pytest.raises(CategoryMismatch):
        generate_answer(model, None, task[0])


@pytest.fixture
def mcq_setup():
    vocab = make_vocab(["q", "a", "b", "c", "d"])
    ids = {w: vocab.id(w) for w in "qabcd"}
    rng = np.random.default_rng(3)
    table = {ids[w]: rng.normal(size=vocab.size) * 2 for w in "qabcd"}
    return TableModel(vocab, table), ids


def test_mcq_average_loglik_oracle(mcq_setup):
    model, ids = mcq_setup
    choices = ("a b", "c", "d a b")
    ex = TaskExample("MCQ", "q", choices=choices, gold_index=0)

    def avg(choice):
        prev, total = ids["q"], 0.0
        words = choice.split()
        for w in words:
            logits = model.table[prev]
            total += logits[ids[w]] - math.log(sum(math.exp(x) for x in logits))
            prev = ids[w]
        return total / len(words)

    assert mcq_predict(model, None, ex) == int(np.argmax([avg(c) for c in choices]))


def test_mcq_overwhelming_choice():
    vocab = make_vocab(["q", "a", "b"])
    logits = np.zeros(vocab.size)
    logits[vocab.id("b")] = 30.0
    ex = TaskExample("MCQ", "q", choices=("a", "b"), gold_index=1)
    assert mcq_predict(TableModel(vocab, default=logits), None, ex) == 1


def test_mcq_shift_invariance(mcq_setup):
    model, ids = mcq_setup
    shifted = TableModel(model.vocab, {k: v + 7.5 for k, v in model.table.items()})
    spec = WatermarkSpec("KGW", 0.25, 2.0, 5)
    for choices in [("a b", "c", "d a b"), ("a", "b", "c", "d")]:
        ex = TaskExample("MCQ", "q", choices=choices, gold_index=0)
        assert mcq_predict(model, spec, ex) == mcq_predict(shifted, spec, ex)


def test_generation_delta_zero_identical(bundled_model):
    task = load_task(TASKS / "sgen.jsonl")[:20]
    spec = WatermarkSpec("KGW", 0.25, 0.0, 4)
    assert [generate_answer(bundled_model, spec, ex) for ex in task] == [generate_answer(bundled_model, None, ex) for ex in task]


def test_generation_margin_beats_delta(bundled_model):
    model = MarginModel(bundled_model, 20.0)
    spec = WatermarkSpec("KGW", 0.25, 2.0, 4)
    for ex in load_task(TASKS / "sgen.jsonl")[:30]:
        assert generate_answer(model, spec, ex) == generate_answer(model, None, ex)


def test_generation_saturated_all_green(bundled_model):
    spec = WatermarkSpec("KGW", 0.25, 50.0, 4)
    vocab = bundled_model.vocab
    for ex in load_task(TASKS / "lgen.jsonl")[:5]:
        out = tokenize(generate_answer(bundled_model, spec, ex, max_tokens=20), vocab)
        seq = list(tokenize(ex.prompt, vocab)) + list(out)
        n = len(seq) - len(out)
        assert all(kgw_partition(spec, seq[i - 1], vocab.size).green_mask[seq[i]] for i in range(n, len(seq)))


def test_generation_respects_caps(bundled_model):
    ex = load_task(TASKS / "lgen.jsonl")[0]
    assert len(generate_answer(bundled_model, None, ex, max_tokens=3).split()) <= 3


# task files and reports ---------------------------------------------------


def test_bundled_tasks_load():
    sizes = {p.stem: len(load_task(p)) for p in sorted(TASKS.glob("*.jsonl"))}
    assert sizes == {"boolq_like": 200, "cb_like": 100, "lgen": 40, "mcq_long": 300, "mcq_mixed": 600, "mcq_short": 300, "sgen": 100}
    cb = load_task(TASKS / "cb_like.jsonl")
    assert sum(ex.gold_index == 2 for ex in cb) == 6  # "neither" minority class


def test_load_task_rejects_mixed_labels(tmp_path):
    rows = [
        {"category": "CLS", "prompt": "x", "labels": ["yes", "no"], "gold_index": 0},
        {"category": "CLS", "prompt": "y", "labels": ["no", "yes"], "gold_index": 0},
    ]
    path = tmp_path / "t.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    with pytest.raises(ValueError):
        load_task(path)


def test_example_validation():
    with pytest.raises(ValueError):
        TaskExample("MCQ", "q", choices=("a",), gold_index=0)
    with pytest.raises(ValueError):
        TaskExample("MCQ", "q", choices=("a", "b"), gold_index=2)
    ex = TaskExample("MCQ", "q", choices=("a", "b"), gold_index=1)
    assert TaskExample.from_dict(ex.to_dict()) == ex


@pytest.mark.parametrize("name", ["boolq_like", "mcq_short", "sgen"])
def test_delta_zero_reproduces_unwatermarked(bundled_model, name):
    task = load_task(TASKS / f"{name}.jsonl")
    report = score_task(bundled_model, WatermarkSpec("KGW", 0.25, 0.0, 1), task)
    assert report.raw == report.unwatermarked_raw
    assert report.normalized == 1.0


def test_score_report_fields(bundled_model):
    report = score_task(bundled_model, WatermarkSpec("KGW", 0.25, 3.0, 1), load_task(TASKS / "cb_like.jsonl"))
    assert report.metric_name == "accuracy"
    assert report.random_baseline == pytest.approx(1 / 3)
    assert report.normalized == pytest.approx((report.raw - 1 / 3) / (report.unwatermarked_raw - 1 / 3))
    assert len(report.predictions) == 100


def test_margin_profile(small_vocab, bundled_model):
    ex = [TaskExample("SGEN", "a b", references=("c",))]
    flat = logit_margin_profile(UniformModel(small_vocab), ex, positions=3, top_k=6)
    assert np.all(flat == flat[0])
    hot = np.full(6, -5.0)
    hot[3] = 4.0
    prof = logit_margin_profile(TableModel(small_vocab, default=hot), ex, positions=2, top_k=6)
    assert prof[0] - prof[1] == 9.0
    sgen = load_task(TASKS / "sgen.jsonl")
    prof = logit_margin_profile(bundled_model, sgen, positions=8)
    assert np.all(np.diff(prof) <= 0)

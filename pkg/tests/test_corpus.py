import json

import pytest
from hypothesis import given, settings, strategies as st

from inkmark.corpus import (
    Vocabulary,
    build_vocabulary,
    detokenize,
    load_documents,
    normalize,
    split_corpus,
    tokenize,
)
from inkmark.errors import EmptyCorpus, InsufficientDocuments


def test_min_count_one_keeps_everything(small_vocab):
    assert small_vocab.tokens == ("<unk>", "<s>", "</s>", "a", "b", "c")
    assert small_vocab.size == 6


def test_min_count_two_keeps_only_repeated():
    v = build_vocabulary(["a b", "a c"], min_count=2)
    assert v.tokens == ("<unk>", "<s>", "</s>", "a")


def test_ordering_frequency_then_lexicographic():
    v = build_vocabulary(["z y y x x x", "w w"], min_count=1)
    assert v.tokens[3:] == ("x", "w", "y", "z")


def test_empty_corpus_errors():
    with pytest.raises(EmptyCorpus):
        build_vocabulary([])
    with pytest.raises(EmptyCorpus):
        build_vocabulary(["a b c"], min_count=2)


def test_vocabulary_bijection_and_reserved(bundled_docs):
    v = build_vocabulary(bundled_docs)
    assert (v.unk_id, v.bos_id, v.eos_id) == (0, 1, 2)
    for i, tok in enumerate(v.tokens):
        assert v.id(tok) == i and v.token(i) == tok


def test_vocabulary_is_byte_identical_across_runs(bundled_docs):
    docs = bundled_docs[:200]
    assert build_vocabulary(docs).to_json() == build_vocabulary(list(docs)).to_json()


def test_vocabulary_json_round_trip(small_vocab):
    obj = json.loads(small_vocab.to_json())
    assert set(obj) == {"tokens", "min_count", "hash"}
    assert Vocabulary.from_json(small_vocab.to_json()) == small_vocab
    obj["hash"] = "0" * 16
    with pytest.raises(ValueError):
        Vocabulary.from_dict(obj)


def test_tokenize_examples(small_vocab):
    assert tokenize("", small_vocab) == ()
    assert tokenize("a b", small_vocab) == (3, 4)
    assert tokenize("a zebra c", small_vocab) == (3, 0, 5)


def test_tokenize_splits_punctuation_and_lowercases(small_vocab):
    assert tokenize("A, b.", small_vocab) == (3, 0, 4, 0)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcxyz ,.?!\n\t", max_size=60))
def test_round_trip_up_to_unk_and_whitespace(text):
    v = build_vocabulary(["a b c , ."], min_count=1)
    assert detokenize(tokenize(text, v), v) == normalize(text, v)


def test_round_trip_on_bundled_documents(bundled_docs):
    v = build_vocabulary(bundled_docs)
    for doc in bundled_docs[:1000]:
        assert detokenize(tokenize(doc, v), v) == normalize(doc, v)


def test_split_is_disjoint_and_deterministic(bundled_docs):
    v = build_vocabulary(bundled_docs)
    docs = bundled_docs[:400]
    a = split_corpus(docs, 200, 200, seed=3, vocab=v)
    b = split_corpus(docs, 200, 200, seed=3, vocab=v)
    assert len(a.calibration_prefixes) == len(a.perplexity_snippets) == 200
    assert not set(a.calibration_ids) & set(a.perplexity_ids)
    assert a == b
    assert split_corpus(docs, 200, 200, seed=4, vocab=v).calibration_ids != a.calibration_ids


def test_split_truncates(bundled_docs):
    v = build_vocabulary(bundled_docs)
    s = split_corpus(bundled_docs, 10, 10, seed=0, vocab=v, prefix_tokens=5, snippet_tokens=7)
    assert all(len(p) <= 5 for p in s.calibration_prefixes)
    assert all(len(p) <= 7 for p in s.perplexity_snippets)


def test_split_insufficient(small_vocab):
    with pytest.raises(InsufficientDocuments):
        split_corpus(["a", "b"], 2, 1, seed=0, vocab=small_vocab)


def test_load_documents_txt_and_jsonl(tmp_path):
    (tmp_path / "c.txt").write_text("one doc\n\ntwo doc\n", encoding="utf-8")
    (tmp_path / "c.jsonl").write_text('{"text": "x y"}\n{"text": "z"}\n', encoding="utf-8")
    assert load_documents(tmp_path / "c.txt") == ["one doc", "two doc"]
    assert load_documents(tmp_path / "c.jsonl") == ["x y", "z"]

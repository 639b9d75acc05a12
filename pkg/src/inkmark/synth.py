"""Deterministic generator for the bundled toy corpus and evaluation tasks.

The corpus is produced by a small weighted grammar so the n-gram model has
realistic-looking, moderately entropic text to learn from. Besides plain
narrative lines it contains four kinds of patterned lines that the bundled
tasks probe:

* ``... so the mood was <cue> ? yes|no .``          (binary CLS, BoolQ-like)
* ``... then the claim seems <cue> ; true|false|neither .``  (3-class CLS, CB-like)
* ``... where ? answer : <place phrase> .``          (SGEN)
* ``english : <sentence> french : <reversed words>`` (LGEN)

Run ``python -m inkmark.synth OUT_DIR`` to regenerate the files under
``inkmark/data``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

DETS = ["the", "a", "this", "that", "every", "some"]
ADJS = """old young quiet tall small bright dark heavy gentle brave tired happy
angry clever loud busy strange lonely proud calm wild green red golden
silver rusty narrow wide distant ancient""".split()
NOUNS = """farmer teacher child dog horse merchant soldier sailor baker doctor
cat bird king queen painter fisherman driver stranger neighbor student
wolf fox captain priest singer hunter miller weaver boy girl woman man
goat crow judge nurse poet clerk smith guard monk thief
lamp basket letter book coat wagon boat bell cart box""".split()
NAMES = """anna boris clara david elena felix greta hugo irene jonas
karl lena marta nils olga peter rosa simon tanya victor""".split()
PLACES = """market river village forest castle harbor church bridge mill
garden tower valley station school hill field lake road square farm
shop inn cellar meadow palace""".split()
VERBS_T = """found carried watched helped followed called met painted sold
bought opened pulled pushed visited greeted fed washed hid lost chased
built fixed moved left took showed kept cleaned ate raised""".split()
VERBS_I = """walked slept waited laughed sang danced rested worked ran
wandered smiled cried prayed stayed returned""".split()
ADVS = """slowly quickly quietly happily sadly carefully loudly gently
early late again often suddenly warmly badly""".split()
PREPS = ["near", "behind", "inside", "across", "beside", "past", "toward", "under"]
TIMES = [
    "in the morning", "at night", "on sunday", "after dinner", "before dawn",
    "in the spring", "last winter", "every day", "at noon", "in the evening",
]
CONJ = ["and", "but", "while", "because", "so"]

BOOL_YES_CUES = "sunny warm bright cheerful merry lively sweet hopeful".split()
BOOL_NO_CUES = "gloomy grey bleak dreary somber dull sour grim".split()
CB_TRUE_CUES = "certain proven obvious clear correct plain".split()
CB_FALSE_CUES = "wrong false mistaken absurd doubtful flawed".split()
CB_NEITHER_CUES = "vague unclear murky".split()

N_NARRATIVE = 3000
N_BOOL = 400
N_CB = 400
N_SGEN = 400
N_LGEN = 300


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


class Grammar:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._weights = {}

    def pick(self, words: list[str]) -> str:
        key = id(words)
        if key not in self._weights:
            self._weights[key] = _zipf(len(words))
        return words[self.rng.choice(len(words), p=self._weights[key])]

    def chance(self, p: float) -> bool:
        return self.rng.random() < p

    def noun_phrase(self) -> list[str]:
        if self.chance(0.2):
            return [self.pick(NAMES)]
        np_ = [self.pick(DETS)]
        if self.chance(0.5):
            np_.append(self.pick(ADJS))
        np_.append(self.pick(NOUNS))
        return np_

    def place_phrase(self) -> list[str]:
        out = [self.pick(PREPS), "the"]
        if self.chance(0.4):
            out.append(self.pick(ADJS))
        out.append(self.pick(PLACES))
        return out

    def verb_phrase(self) -> list[str]:
        if self.chance(0.6):
            vp = [self.pick(VERBS_T)] + self.noun_phrase()
        else:
            vp = [self.pick(VERBS_I)]
        if self.chance(0.3):
            vp.append(self.pick(ADVS))
        return vp

    def clause(self) -> list[str]:
        words = self.noun_phrase() + self.verb_phrase()
        if self.chance(0.6):
            words += self.place_phrase()
        if self.chance(0.3):
            words += self.pick(TIMES).split()
        return words

    def sentence(self) -> list[str]:
        words = self.clause()
        if self.chance(0.25):
            words += [self.pick(CONJ)] + self.clause()
        return words + ["."]

    def text(self, n_sentences: int) -> list[str]:
        out = []
        for _ in range(n_sentences):
            out += self.sentence()
        return out

    def words(self, n: int) -> list[str]:
        """Fluent text cut to exactly ``n`` whitespace-separated words."""
        out: list[str] = []
        while len(out) < n:
            out += self.sentence()
        return out[:n]


def _join(words: list[str]) -> str:
    return " ".join(words)


def _draw(rng, labels, probs):
    return labels[rng.choice(len(labels), p=probs)]


BOOL_PROBS = {"yes": [0.8, 0.2], "no": [0.25, 0.75]}
CB_LABELS = ["true", "false", "neither"]
CB_PROBS = {
    "true": [0.65, 0.2, 0.15],
    "false": [0.2, 0.65, 0.15],
    "neither": [0.25, 0.25, 0.5],
}


def _bool_line(g: Grammar, cue: str, label: str | None) -> list[str]:
    return g.sentence() + ["so", "the", "mood", "was", cue, "?"] + ([label, "."] if label else [])


def _cb_line(g: Grammar, cue: str, label: str | None) -> list[str]:
    return g.sentence() + ["then", "the", "claim", "seems", cue, ";"] + ([label, "."] if label else [])


def _cue_kind(cue: str) -> str:
    if cue in BOOL_YES_CUES:
        return "yes"
    if cue in BOOL_NO_CUES:
        return "no"
    if cue in CB_TRUE_CUES:
        return "true"
    if cue in CB_FALSE_CUES:
        return "false"
    return "neither"


def make_corpus(seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    g = Grammar(rng)
    docs = []
    for _ in range(N_NARRATIVE):
        docs.append(_join(g.text(int(rng.integers(2, 6)))))
    for _ in range(N_BOOL):
        cue = g.rng.choice(BOOL_YES_CUES + BOOL_NO_CUES)
        label = _draw(rng, ["yes", "no"], BOOL_PROBS[_cue_kind(cue)])
        docs.append(_join(_bool_line(g, cue, label)))
    cb_cues = CB_TRUE_CUES + CB_FALSE_CUES + CB_NEITHER_CUES
    for _ in range(N_CB):
        cue = g.rng.choice(cb_cues)
        docs.append(_join(_cb_line(g, cue, _draw(rng, CB_LABELS, CB_PROBS[_cue_kind(cue)]))))
    for _ in range(N_SGEN):
        q, a = _sgen_pair(g)
        docs.append(_join(q + a))
    for _ in range(N_LGEN):
        src, tgt = _lgen_pair(g)
        docs.append(_join(src + tgt))
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]


def _sgen_pair(g: Grammar) -> tuple[list[str], list[str]]:
    q = g.noun_phrase() + g.verb_phrase() + ["where", "?", "answer", ":"]
    return q, g.place_phrase() + ["."]


def _lgen_pair(g: Grammar) -> tuple[list[str], list[str]]:
    src = g.clause()
    tgt = [w[::-1] for w in src]
    return ["english", ":"] + src + ["french", ":"], tgt + ["."]


# tasks ---------------------------------------------------------------------


def bool_task(seed: int = 1, n: int = 200) -> list[dict]:
    """Binary yes/no task; roughly 60% of gold labels are ``yes``."""
    rng = np.random.default_rng(seed)
    g = Grammar(rng)
    out = []
    for _ in range(n):
        cues = BOOL_YES_CUES if rng.random() < 0.62 else BOOL_NO_CUES
        cue = g.rng.choice(cues)
        gold = _draw(rng, ["yes", "no"], BOOL_PROBS[_cue_kind(cue)])
        out.append({
            "category": "CLS",
            "prompt": _join(_bool_line(g, cue, None)),
            "labels": ["yes", "no"],
            "gold_index": ["yes", "no"].index(gold),
        })
    return out


def cb_task(seed: int = 2, n: int = 100, minority: float = 0.06, noise: float = 0.1) -> list[dict]:
    """Three-way task where ``neither`` is the gold label of exactly ``minority`` of examples."""
    rng = np.random.default_rng(seed)
    g = Grammar(rng)
    n_neither = round(minority * n)
    golds = ["neither"] * n_neither + [("true", "false")[i % 2] for i in range(n - n_neither)]
    golds = [golds[i] for i in rng.permutation(n)]
    out = []
    for gold in golds:
        if gold == "neither":
            cue = g.rng.choice(CB_NEITHER_CUES)
        else:
            # a fraction of examples carry the misleading cue
            wrong = rng.random() < noise
            kind = gold if not wrong else ("false" if gold == "true" else "true")
            cue = g.rng.choice(CB_TRUE_CUES if kind == "true" else CB_FALSE_CUES)
        out.append({
            "category": "CLS",
            "prompt": _join(_cb_line(g, cue, None)),
            "labels": list(CB_LABELS),
            "gold_index": CB_LABELS.index(gold),
        })
    return out


def _corrupt(g: Grammar, words: list[str], rate: float, pool: list[str]) -> list[str]:
    out = list(words)
    n_swap = max(1, round(rate * len(out)))
    for i in g.rng.choice(len(out), size=n_swap, replace=False):
        out[i] = pool[g.rng.integers(len(pool))]
    return out


MCQ_CORRUPTION = (0.15, 0.3, 0.45)


def mcq_task(seed: int, n: int, min_words: int, max_words: int, log_uniform: bool = False) -> list[dict]:
    """Four-choice task: one fluent continuation and three with rising word-corruption rates.

    Option lengths are uniform in [min_words, max_words], or log-uniform so
    that doubling-width length buckets get similar counts.
    """
    rng = np.random.default_rng(seed)
    g = Grammar(rng)
    pool = sorted(set(ADJS + NOUNS + PLACES + VERBS_T + VERBS_I + ADVS + NAMES))
    out = []
    for _ in range(n):
        if log_uniform:
            length = int(round(np.exp(rng.uniform(np.log(min_words), np.log(max_words)))))
        else:
            length = int(rng.integers(min_words, max_words + 1))
        choices = [_join(g.words(length))]
        for rate in MCQ_CORRUPTION:
            choices.append(_join(_corrupt(g, g.words(length), rate, pool)))
        order = rng.permutation(len(choices))
        out.append({
            "category": "MCQ",
            "prompt": _join(g.sentence()),
            "choices": [choices[i] for i in order],
            "gold_index": int(np.where(order == 0)[0][0]),
        })
    return out


def sgen_task(seed: int = 6, n: int = 100) -> list[dict]:
    g = Grammar(np.random.default_rng(seed))
    out = []
    for _ in range(n):
        q, a = _sgen_pair(g)
        out.append({"category": "SGEN", "prompt": _join(q), "references": [_join(a[:-1])]})
    return out


def lgen_task(seed: int = 7, n: int = 40) -> list[dict]:
    g = Grammar(np.random.default_rng(seed))
    out = []
    for _ in range(n):
        src, tgt = _lgen_pair(g)
        out.append({"category": "LGEN", "prompt": _join(src), "references": [_join(tgt)]})
    return out


TASKS = {
    "boolq_like": lambda: bool_task(),
    "cb_like": lambda: cb_task(),
    "mcq_short": lambda: mcq_task(3, 300, 2, 6),
    "mcq_long": lambda: mcq_task(4, 300, 32, 64),
    "mcq_mixed": lambda: mcq_task(5, 600, 4, 64, log_uniform=True),
    "sgen": lambda: sgen_task(),
    "lgen": lambda: lgen_task(),
}


def write_bundle(out_dir: str | Path, seed: int = 0) -> None:
    out_dir = Path(out_dir)
    (out_dir / "tasks").mkdir(parents=True, exist_ok=True)
    (out_dir / "corpus.txt").write_text("\n".join(make_corpus(seed)) + "\n", encoding="utf-8")
    for name, build in TASKS.items():
        lines = [json.dumps(ex, ensure_ascii=False) for ex in build()]
        (out_dir / "tasks" / f"{name}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    write_bundle(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data")

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polytrans.corpus import ParallelCorpus, PromptRecord, WeightedTranslation
from polytrans.metrics import (
    CorpusScore,
    NormalizeConfig,
    corpus_score,
    harmonic_mean,
    normalize_text,
    prompt_score,
    score_corpus,
)

from oracles import brute_force_corpus, brute_force_prompt


def record(pid, pairs):
    return PromptRecord(pid, "src " + pid, tuple(WeightedTranslation(t, w) for t, w in pairs))


def test_hand_example():
    gold = record("p", [("a", 0.6), ("b", 0.3), ("c", 0.1)])
    s = prompt_score(["a", "d"], gold)
    assert s.precision == 0.5
    assert s.weighted_recall == pytest.approx(0.6, abs=1e-12)
    assert s.weighted_f1 == pytest.approx(2 * 0.5 * 0.6 / 1.1, abs=1e-12)
    assert (s.tp_count, s.fp_count, s.fn_count) == (1, 1, 2)


def test_exact_match_and_empty():
    gold = record("p", [("a", 0.6), ("b", 0.4)])
    s = prompt_score(["b", "a"], gold)
    assert (s.precision, s.weighted_recall, s.weighted_f1) == (1.0, 1.0, 1.0)
    e = prompt_score([], gold)
    assert (e.precision, e.weighted_recall, e.weighted_f1, e.f1) == (0.0, 0.0, 0.0, 0.0)


def test_duplicates_count_once():
    gold = record("p", [("a", 0.5), ("b", 0.5)])
    s = prompt_score(["a", " a ", "a"], gold)
    assert s.tp_count == 1 and s.fp_count == 0
    assert s.precision == 1.0


def test_normalize_text():
    assert normalize_text("  itt   vagyok ") == "itt vagyok"
    assert normalize_text("Itt Vagyok", NormalizeConfig(lowercase=True)) == "itt vagyok"
    assert normalize_text("Itt Vagyok") == "Itt Vagyok"


@given(st.text(alphabet=" \tabC\n", max_size=20), st.booleans())
def test_normalize_idempotent(s, lower):
    cfg = NormalizeConfig(lowercase=lower)
    once = normalize_text(s, cfg)
    assert normalize_text(once, cfg) == once


def test_harmonic_mean_zero_convention():
    assert harmonic_mean(0, 0) == 0.0
    assert harmonic_mean(1, 1) == 1.0


def test_corpus_score_single_prompt_micro_equals_macro():
    gold = record("p", [("a", 0.6), ("b", 0.3), ("c", 0.1)])
    s = prompt_score(["a", "d"], gold)
    for micro in ("macro_pr", "pooled"):
        c = corpus_score([s], micro)
        assert c.MaF == pytest.approx(c.MiF, abs=1e-15)
        assert c.WMaF == pytest.approx(c.WMiF, abs=1e-15)
        assert c.WMaF == s.weighted_f1


def test_two_prompt_mean():
    g1 = record("p1", [("a", 1.0)])
    g2 = record("p2", [("b", 1.0)])
    c = corpus_score([prompt_score(["a"], g1), prompt_score(["x"], g2)])
    assert c.WMaF == 0.5


def test_corpus_score_empty_raises():
    with pytest.raises(ValueError):
        corpus_score([])
    with pytest.raises(ValueError):
        corpus_score([prompt_score([], record("p", [("a", 1.0)]))], micro="bogus")


def test_macro_pr_micro_reading_matches_published_rows():
    # rows of the published ablation table: MiF = hm(P, R), WMiF = hm(P, WR)
    rows = [
        (52.41, 6.32, 41.18, 11.28, 46.12),
        (72.71, 10.60, 51.90, 18.51, 60.56),
    ]
    for P, R, WR, MiF, WMiF in rows:
        assert harmonic_mean(P, R) == pytest.approx(MiF, abs=0.01)
        assert harmonic_mean(P, WR) == pytest.approx(WMiF, abs=0.01)


def test_report_line_format():
    c = CorpusScore(1, 1, 1, 1, 1, 1, 0.5454545)
    assert c.report_line() == "100.00 100.00 100.00 100.00 100.00 100.00 54.55"
    assert CorpusScore.header() == "P R WR MiF MaF WMiF WMaF"


def test_missing_prompts_are_empty_predictions():
    gold = ParallelCorpus((record("p1", [("a", 1.0)]), record("p2", [("b", 1.0)])))
    c = score_corpus({"p1": ["a"]}, gold)
    assert c.WMaF == 0.5


def _random_corpus(rng, n):
    vocab = [f"w{i}" for i in range(8)]
    recs, preds = [], {}
    for i in range(n):
        texts = rng.sample(vocab, rng.randint(1, 6))
        pairs = [(t, rng.choice([0.0, rng.random(), 1.0, 0.25])) for t in texts]
        recs.append(record(f"p{i}", pairs))
        preds[f"p{i}"] = [rng.choice(vocab) for _ in range(rng.randint(0, 6))]
    return ParallelCorpus(tuple(recs)), preds


@pytest.mark.parametrize("micro", ["macro_pr", "pooled"])
def test_matches_brute_force_oracle(micro):
    rng = random.Random(11)
    corpus, preds = _random_corpus(rng, 200)
    got = score_corpus(preds, corpus, micro=micro)
    want = brute_force_corpus(
        [preds[r.prompt_id] for r in corpus.records],
        [[(t.target_text, t.weight) for t in r.translations] for r in corpus.records],
        micro=micro,
    )
    for name in CorpusScore.header().split():
        assert getattr(got, name) == pytest.approx(want[name], abs=1e-12), name


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from("abcdefg"), st.integers(1, 100)), min_size=1, max_size=6,
             unique_by=lambda x: x[0]),
    st.lists(st.sampled_from("abcdefgxyz"), max_size=6),
)
def test_prompt_properties(gold_pairs, preds):
    gold = record("p", [(t, w / 100) for t, w in gold_pairs])
    s = prompt_score(preds, gold)
    ref = brute_force_prompt(preds, [(t, w / 100) for t, w in gold_pairs])
    assert s.weighted_f1 == pytest.approx(ref["WF"], abs=1e-12)
    for v in (s.precision, s.recall, s.weighted_recall, s.f1, s.weighted_f1):
        assert 0.0 <= v <= 1.0
    gold_set = {t for t, _ in gold_pairs}
    assert (s.weighted_f1 == 1.0) == (set(preds) == gold_set)
    assert (s.weighted_f1 == 0.0) == (not set(preds) & gold_set)
    # adding a correct prediction never lowers WR; a wrong one never raises precision
    missing = sorted(gold_set - set(preds))
    if missing:
        assert prompt_score(preds + missing[:1], gold).weighted_recall >= s.weighted_recall
    assert prompt_score(preds + ["zzz"], gold).precision <= s.precision


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(1, 1000), min_size=1, max_size=6),
    st.sets(st.integers(0, 7), max_size=6),
    st.sampled_from([Fraction(1, 10), Fraction(3), Fraction(1000), Fraction(7, 3)]),
)
def test_scale_invariance_exact(weights, picked, c):
    texts = [f"t{i}" for i in range(len(weights))]
    preds = [f"t{i}" for i in picked]
    gold = record("p", [(t, Fraction(w, 1000)) for t, w in zip(texts, weights)])
    scaled = record("p", [(t, Fraction(w, 1000) * c) for t, w in zip(texts, weights)])
    assert prompt_score(preds, gold).weighted_f1 == prompt_score(preds, scaled).weighted_f1
    assert prompt_score(preds, gold).weighted_recall == prompt_score(preds, scaled).weighted_recall

"""Weighted/unweighted precision, recall and F1 for multi-reference outputs.

Per prompt: precision is unweighted, weighted recall sums the gold weights of
matched references, and the weighted F1 is their harmonic mean. Corpus macro
scores average the per-prompt values.

Two readings of the micro columns are available:

``"macro_pr"`` (default)
    harmonic mean of the prompt-averaged precision and (weighted) recall.
    This reproduces published ablation tables to two decimals.
``"pooled"``
    harmonic mean of precision/recall computed from counts and weight sums
    pooled over all prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Sequence

MICRO_MODES = ("macro_pr", "pooled")


@dataclass(frozen=True)
class NormalizeConfig:
    lowercase: bool = False


def normalize_text(s: str, config: NormalizeConfig | None = None) -> str:
    out = " ".join(s.split())
    if config is not None and config.lowercase:
        out = out.lower()
    return out


def harmonic_mean(a: float, b: float) -> float:
    if a + b == 0:
        return 0.0
    return 2 * a * b / (a + b)


@dataclass(frozen=True)
class PromptScore:
    tp_count: int
    fp_count: int
    fn_count: int
    wtp: float
    wfn: float
    precision: float
    recall: float
    weighted_recall: float
    f1: float
    weighted_f1: float


@dataclass(frozen=True)
class CorpusScore:
    P: float
    R: float
    WR: float
    MiF: float
    MaF: float
    WMiF: float
    WMaF: float

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def report_line(self) -> str:
        return " ".join(f"{100 * v:.2f}" for v in self.as_tuple())

    @staticmethod
    def header() -> str:
        return " ".join(f.name for f in fields(CorpusScore))


def _ratio(num, den) -> float:
    return float(num / den) if den else 0.0


def prompt_score(predictions: Sequence[str], gold, normalizer: NormalizeConfig | None = None):
    """Score one prompt's predictions against its weighted gold set.

    ``gold`` is a PromptRecord (or anything with ``.translations`` of
    ``(target_text, weight)`` objects). Weight sums use exact rational
    arithmetic so that rescaling a prompt's weights by an exactly
    representable factor leaves the result bit-identical.
    """
    gold_weights: dict[str, Fraction] = {}
    for t in gold.translations:
        key = normalize_text(t.target_text, normalizer)
        gold_weights[key] = gold_weights.get(key, Fraction(0)) + Fraction(t.weight)
    preds = list(dict.fromkeys(normalize_text(p, normalizer) for p in predictions))
    preds = [p for p in preds if p]

    matched = {p for p in preds if p in gold_weights}
    tp = len(matched)
    fp = len(preds) - tp
    fn = len(gold_weights) - tp
    wtp = sum((gold_weights[g] for g in matched), Fraction(0))
    wfn = sum((w for g, w in gold_weights.items() if g not in matched), Fraction(0))

    precision = _ratio(Fraction(tp), tp + fp)
    recall = _ratio(Fraction(tp), tp + fn)
    weighted_recall = _ratio(wtp, wtp + wfn)
    return PromptScore(
        tp_count=tp,
        fp_count=fp,
        fn_count=fn,
        wtp=float(wtp),
        wfn=float(wfn),
        precision=precision,
        recall=recall,
        weighted_recall=weighted_recall,
        f1=harmonic_mean(precision, recall),
        weighted_f1=harmonic_mean(precision, weighted_recall),
    )


def _mean(values):
    return math.fsum(values) / len(values)


def corpus_score(scores: Sequence[PromptScore], micro: str = "macro_pr") -> CorpusScore:
    if not scores:
        raise ValueError("corpus_score needs at least one prompt")
    if micro not in MICRO_MODES:
        raise ValueError(f"micro must be one of {MICRO_MODES}")
    P = _mean([s.precision for s in scores])
    R = _mean([s.recall for s in scores])
    WR = _mean([s.weighted_recall for s in scores])
    if micro == "macro_pr":
        mif = harmonic_mean(P, R)
        wmif = harmonic_mean(P, WR)
    else:
        tp = sum(s.tp_count for s in scores)
        fp = sum(s.fp_count for s in scores)
        fn = sum(s.fn_count for s in scores)
        wtp = math.fsum(s.wtp for s in scores)
        wall = math.fsum(s.wtp + s.wfn for s in scores)
        pooled_p = tp / (tp + fp) if tp + fp else 0.0
        pooled_r = tp / (tp + fn) if tp + fn else 0.0
        pooled_wr = wtp / wall if wall else 0.0
        mif = harmonic_mean(pooled_p, pooled_r)
        wmif = harmonic_mean(pooled_p, pooled_wr)
    return CorpusScore(
        P=P,
        R=R,
        WR=WR,
        MiF=mif,
        MaF=_mean([s.f1 for s in scores]),
        WMiF=wmif,
        WMaF=_mean([s.weighted_f1 for s in scores]),
    )


def score_corpus(predictions: dict, gold_corpus, normalizer=None, micro="macro_pr"):
    """Score ``{prompt_id: [texts]}`` against every prompt of ``gold_corpus``.

    Prompts missing from ``predictions`` count as empty prediction sets.
    """
    per_prompt = [
        prompt_score(predictions.get(rec.prompt_id, ()), rec, normalizer)
        for rec in gold_corpus.records
    ]
    return corpus_score(per_prompt, micro=micro)

"""Weighted parallel corpora: file format, oversampling, splitting, reversal, fixtures.

Corpus file layout (UTF-8)::

    prompt_id|source text
    target text one|0.6
    target text two|0.4

    next_prompt|...

Blocks are separated by a blank line. ``|`` is reserved and may not appear in
any text field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FIELD_SEP = "|"


class CorpusFormatError(ValueError):
    """Raised for malformed corpus or prediction files."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


def normalize_space(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class WeightedTranslation:
    target_text: str
    weight: float

    def __post_init__(self):
        if not normalize_space(self.target_text):
            raise ValueError("target_text is empty")
        if not (self.weight >= 0) or math.isinf(self.weight):
            raise ValueError(f"weight must be finite and non-negative, got {self.weight!r}")


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    source_text: str
    translations: tuple[WeightedTranslation, ...]

    def __post_init__(self):
        object.__setattr__(self, "translations", tuple(self.translations))
        if not self.translations:
            raise ValueError(f"prompt {self.prompt_id!r} has no translations")
        seen = set()
        for t in self.translations:
            key = normalize_space(t.target_text)
            if key in seen:
                raise ValueError(f"prompt {self.prompt_id!r}: duplicate translation {key!r}")
            seen.add(key)

    @property
    def targets(self) -> list[str]:
        return [t.target_text for t in self.translations]


@dataclass(frozen=True)
class ParallelCorpus:
    records: tuple[PromptRecord, ...] = ()
    src_lang: str = "src"
    tgt_lang: str = "tgt"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.prompt_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate prompt ids: {dup}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def pair_count(self) -> int:
        return sum(len(r.translations) for r in self.records)

    @property
    def prompt_ids(self) -> list[str]:
        return [r.prompt_id for r in self.records]

    def by_id(self) -> dict[str, PromptRecord]:
        return {r.prompt_id: r for r in self.records}

    def subset(self, prompt_ids: Iterable[str]) -> "ParallelCorpus":
        keep = set(prompt_ids)
        return ParallelCorpus(
            [r for r in self.records if r.prompt_id in keep], self.src_lang, self.tgt_lang
        )


@dataclass(frozen=True)
class SampledPair:
    prompt_id: str
    source_text: str
    target_text: str


@dataclass(frozen=True)
class CorpusStats:
    prompt_count: int
    pair_count: int
    max_source_len: int
    max_target_len: int
    p99_source_len: int
    p99_target_len: int


# -- file format ---------------------------------------------------------------

def _blocks(text: str):
    """Yield lists of (line_no, line) for each blank-line separated block."""
    block = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            if block:
                yield block
                block = []
            continue
        block.append((line_no, line))
    if block:
        yield block


def _split_header(line_no, line):
    if FIELD_SEP not in line:
        raise CorpusFormatError("expected 'prompt_id|source_text'", line_no)
    prompt_id, source = line.split(FIELD_SEP, 1)
    if FIELD_SEP in source:
        raise CorpusFormatError("'|' is reserved and may not appear in source text", line_no)
    if not prompt_id.strip():
        raise CorpusFormatError("empty prompt id", line_no)
    return prompt_id.strip(), source.strip()


def parse_corpus(text: str, src_lang="src", tgt_lang="tgt") -> ParallelCorpus:
    records = []
    seen = {}
    for block in _blocks(text):
        line_no, header = block[0]
        prompt_id, source = _split_header(line_no, header)
        if prompt_id in seen:
            raise CorpusFormatError(
                f"duplicate prompt id {prompt_id!r} (first seen on line {seen[prompt_id]})", line_no
            )
        seen[prompt_id] = line_no
        translations = []
        for t_line_no, line in block[1:]:
            parts = line.split(FIELD_SEP)
            if len(parts) != 2:
                raise CorpusFormatError("expected 'target_text|weight'", t_line_no)
            target, weight_str = parts[0].strip(), parts[1].strip()
            try:
                weight = float(weight_str)
            except ValueError:
                raise CorpusFormatError(f"bad weight {weight_str!r}", t_line_no) from None
            if not (0.0 <= weight <= 1.0):
                raise CorpusFormatError(f"weight {weight_str} outside [0, 1]", t_line_no)
            try:
                translations.append(WeightedTranslation(target, weight))
            except ValueError as exc:
                raise CorpusFormatError(str(exc), t_line_no) from None
        try:
            records.append(PromptRecord(prompt_id, source, tuple(translations)))
        except ValueError as exc:
            raise CorpusFormatError(str(exc), line_no) from None
    return ParallelCorpus(tuple(records), src_lang, tgt_lang)


def _check_field(text):
    if FIELD_SEP in text or "\n" in text:
        raise ValueError(f"text may not contain '|' or newlines: {text!r}")
    return text


def format_weight(weight) -> str:
    return repr(float(weight))


def serialize_corpus(corpus: ParallelCorpus) -> str:
    blocks = []
    for rec in corpus.records:
        lines = [f"{_check_field(rec.prompt_id)}|{_check_field(rec.source_text)}"]
        lines += [
            f"{_check_field(t.target_text)}|{format_weight(t.weight)}" for t in rec.translations
        ]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def read_corpus(path, **kwargs) -> ParallelCorpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh.read(), **kwargs)


def write_corpus(corpus: ParallelCorpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(corpus))


@dataclass
class PredictionBlock:
    """One prompt of a prediction/decoder file.

    ``scores`` is either None (plain predictions) or a list aligned with
    ``candidates`` of ``(total_logprob, token_logprobs)`` pairs.
    """

    prompt_id: str
    source_text: str
    candidates: list[str] = field(default_factory=list)
    scores: list | None = None


def parse_predictions(text: str) -> list[PredictionBlock]:
    blocks = []
    seen = set()
    for block in _blocks(text):
        line_no, header = block[0]
        prompt_id, source = _split_header(line_no, header)
        if prompt_id in seen:
            raise CorpusFormatError(f"duplicate prompt id {prompt_id!r}", line_no)
        seen.add(prompt_id)
        candidates, scores = [], []
        for c_line_no, line in block[1:]:
            parts = line.split(FIELD_SEP)
            if len(parts) == 1:
                candidates.append(parts[0].strip())
                scores.append(None)
            elif len(parts) == 3:
                try:
                    total = float(parts[1])
                    token_scores = [float(s) for s in parts[2].split(",") if s.strip()]
                except ValueError:
                    raise CorpusFormatError("bad score fields", c_line_no) from None
                candidates.append(parts[0].strip())
                scores.append((total, token_scores))
            else:
                raise CorpusFormatError("expected 'text' or 'text|total|scores'", c_line_no)
        if any(s is None for s in scores):
            if any(s is not None for s in scores):
                raise CorpusFormatError("mixed scored and unscored candidates", line_no)
            scores = None
        elif not candidates:
            scores = None
        blocks.append(PredictionBlock(prompt_id, source, candidates, scores))
    return blocks


def serialize_predictions(blocks: Sequence[PredictionBlock], emit_scores=False) -> str:
    out = []
    for b in blocks:
        lines = [f"{_check_field(b.prompt_id)}|{_check_field(b.source_text)}"]
        for i, cand in enumerate(b.candidates):
            line = _check_field(cand)
            if emit_scores:
                if b.scores is None:
                    raise ValueError(f"prompt {b.prompt_id!r} has no scores to emit")
                total, token_scores = b.scores[i]
                line += f"|{total!r}|" + ",".join(repr(float(s)) for s in token_scores)
            lines.append(line)
        out.append("\n".join(lines) + "\n")
    return "\n".join(out)


def read_predictions(path) -> list[PredictionBlock]:
    with open(path, encoding="utf-8") as fh:
        return parse_predictions(fh.read())


def write_predictions(blocks, path, emit_scores=False):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_predictions(blocks, emit_scores=emit_scores))


def serialize_pairs(pairs: Sequence[SampledPair]) -> str:
    return "".join(
        f"{_check_field(p.prompt_id)}|{_check_field(p.source_text)}|{_check_field(p.target_text)}\n"
        for p in pairs
    )


def parse_pairs(text: str) -> list[SampledPair]:
    pairs = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(FIELD_SEP)
        if len(parts) != 3:
            raise CorpusFormatError("expected 'prompt_id|source|target'", line_no)
        pairs.append(SampledPair(*(p.strip() for p in parts)))
    return pairs


# -- operations ----------------------------------------------------------------

def oversample_count(weight, factor) -> int:
    return int(math.floor(weight * factor))


def oversample(corpus: ParallelCorpus, factor: float = 50.0, max_pairs: int | None = None):
    """Duplicate each pair ``floor(weight * factor)`` times.

    Pairs whose weight is below ``1 / factor`` vanish. Duplicates are adjacent
    and follow corpus order.
    """
    if not factor > 0:
        raise ValueError("factor must be positive")
    if max_pairs is not None:
        total = sum(
            oversample_count(t.weight, factor) for r in corpus.records for t in r.translations
        )
        if total > max_pairs:
            raise ValueError(
                f"oversampling would emit {total} pairs, above the max_pairs cap of {max_pairs}"
            )
    pairs = []
    for rec in corpus.records:
        for t in rec.translations:
            n = oversample_count(t.weight, factor)
            if n:
                pairs.extend([SampledPair(rec.prompt_id, rec.source_text, t.target_text)] * n)
    return pairs


def all_pairs(corpus: ParallelCorpus) -> list[SampledPair]:
    """Every pair exactly once (the no-oversampling training set)."""
    return [
        SampledPair(r.prompt_id, r.source_text, t.target_text)
        for r in corpus.records
        for t in r.translations
    ]


def validation_size(n_prompts: int, fraction: float) -> int:
    n_val = int(math.floor(fraction * n_prompts + 0.5))
    return min(max(n_val, 1), n_prompts - 1)


def split_by_prompt(corpus: ParallelCorpus, validation_fraction: float = 0.15, seed: int = 0):
    """Split at prompt granularity; returns ``(train, validation)``.

    The validation side holds ``round(fraction * n)`` prompts (clamped so both
    sides are non-empty). Each side keeps the original corpus order.
    """
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must lie in (0, 1)")
    n = len(corpus.records)
    if n < 2:
        raise ValueError("need at least 2 prompts to split")
    n_val = validation_size(n, validation_fraction)
    rng = np.random.default_rng(seed)
    val_idx = set(rng.permutation(n)[:n_val].tolist())
    train = [r for i, r in enumerate(corpus.records) if i not in val_idx]
    val = [r for i, r in enumerate(corpus.records) if i in val_idx]
    return (
        ParallelCorpus(tuple(train), corpus.src_lang, corpus.tgt_lang),
        ParallelCorpus(tuple(val), corpus.src_lang, corpus.tgt_lang),
    )


REVERSE_TAG = "#rev"


def reverse_pairs(corpus: ParallelCorpus) -> ParallelCorpus:
    """Swap direction; every pair becomes its own prompt ``<id>#rev<k>``."""
    records = []
    for rec in corpus.records:
        for k, t in enumerate(rec.translations):
            records.append(
                PromptRecord(
                    f"{rec.prompt_id}{REVERSE_TAG}{k}",
                    t.target_text,
                    (WeightedTranslation(rec.source_text, t.weight),),
                )
            )
    return ParallelCorpus(tuple(records), corpus.tgt_lang, corpus.src_lang)


def percentile_length(lengths: Sequence[int], q: int = 99) -> int:
    """Smallest L with at least q% of lengths <= L."""
    if not lengths:
        raise ValueError("no lengths")
    ordered = sorted(lengths)
    k = -(-q * len(ordered) // 100)  # ceil(q * n / 100), integer arithmetic
    return ordered[max(k, 1) - 1]


def corpus_stats(corpus: ParallelCorpus, tokenizer) -> CorpusStats:
    """Table-style statistics; ``tokenizer`` needs an ``encode(text)`` method."""
    if not corpus.records:
        raise ValueError("empty corpus")
    src_lens = [len(tokenizer.encode(r.source_text)) for r in corpus.records]
    tgt_lens = [
        len(tokenizer.encode(t.target_text)) for r in corpus.records for t in r.translations
    ]
    return CorpusStats(
        prompt_count=len(corpus.records),
        pair_count=corpus.pair_count,
        max_source_len=max(src_lens),
        max_target_len=max(tgt_lens),
        p99_source_len=percentile_length(src_lens),
        p99_target_len=percentile_length(tgt_lens),
    )


# -- synthetic fixtures ----------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_words(rng, n, min_syl=1, max_syl=2, taken=()):
    words = []
    seen = set(taken)
    while len(words) < n:
        syl = rng.integers(min_syl, max_syl + 1)
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class ToyLanguage:
    """Word-level substitution lexicon with target-side synonyms.

    ``lexicon[w]`` lists the target renderings of source word ``w``; the first
    is canonical. Two-word sentences may also swap their target word order.
    """

    source_words: tuple[str, ...]
    lexicon: dict

    def variants(self, source_words: Sequence[str], max_variants: int) -> list[str]:
        options = [[]]
        for w in source_words:
            options = [o + [t] for o in options for t in self.lexicon[w]]
        texts = [" ".join(o) for o in options]
        if len(source_words) >= 2:
            texts += [" ".join(o[1:] + o[:1]) for o in options]
        unique = list(dict.fromkeys(texts))
        return unique[:max_variants]


def toy_language(seed: int, n_words: int = 24, synonym_rate: float = 0.5) -> ToyLanguage:
    rng = np.random.default_rng(seed)
    src = _make_words(rng, n_words, 1, 2)
    tgt = _make_words(rng, 2 * n_words, 1, 2, taken=src)
    lexicon = {}
    for i, w in enumerate(src):
        renderings = [tgt[2 * i]]
        if rng.random() < synonym_rate:
            renderings.append(tgt[2 * i + 1])
        lexicon[w] = tuple(renderings)
    return ToyLanguage(tuple(src), lexicon)


def synth_fixture(
    seed: int,
    n_prompts: int,
    max_refs: int = 4,
    min_len: int = 2,
    max_len: int = 4,
    n_words: int = 24,
) -> ParallelCorpus:
    """Deterministic toy corpus with a learnable source to target mapping.

    Translations of a prompt are the synonym/word-order variants of its
    word-by-word rendering; weights are a normalized gamma draw sorted
    descending, so they sum to one per prompt.
    """
    if n_prompts < 1:
        raise ValueError("n_prompts must be >= 1")
    if max_refs < 1:
        raise ValueError("max_refs must be >= 1")
    lang = toy_language(seed, n_words)
    rng = np.random.default_rng([seed, 1])
    records = []
    used = set()
    width = len(str(n_prompts))
    attempts = 0
    while len(records) < n_prompts:
        attempts += 1
        if attempts > 100 * n_prompts + 1000:
            raise ValueError("vocabulary too small for the requested number of prompts")
        length = int(rng.integers(min_len, max_len + 1))
        words = [lang.source_words[i] for i in rng.integers(0, len(lang.source_words), length)]
        source = " ".join(words)
        if source in used:
            continue
        used.add(source)
        n_refs = int(rng.integers(1, max_refs + 1))
        variants = lang.variants(words, n_refs)
        raw = rng.gamma(1.0, 1.0, len(variants)) + 0.05
        weights = sorted((raw / raw.sum()).tolist(), reverse=True)
        weights[-1] = 1.0 - math.fsum(weights[:-1])
        translations = tuple(WeightedTranslation(t, w) for t, w in zip(variants, weights))
        records.append(PromptRecord(f"p{len(records):0{width}d}", source, translations))
    return ParallelCorpus(tuple(records), "src", "tgt")

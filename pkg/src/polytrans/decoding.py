"""Beam search, nucleus sampling and the multi-output target helpers.

Decoders talk to a model through ``model.prefix_scorer(src_ids)``, which
returns a callable mapping a batch of equal-length prefixes (each starting
with BOS) to an ``(N, V)`` array of next-token log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .subword import BOS, EOS, PAD, SEP_TOKEN


@dataclass(frozen=True)
class Hypothesis:
    token_ids: tuple
    token_logprobs: tuple
    total_logprob: float
    truncated: bool = False

    def score(self, alpha=0.0):
        if alpha == 0 or not self.token_ids:
            return self.total_logprob
        return self.total_logprob / len(self.token_ids) ** alpha

    @property
    def content_ids(self):
        """Token ids without the trailing EOS."""
        if self.token_ids and self.token_ids[-1] == EOS:
            return self.token_ids[:-1]
        return self.token_ids


@dataclass
class DecodeConfig:
    beam_size: int = 10
    top_k: int = 10
    max_len: int = 64
    length_norm_alpha: float = 0.0
    nucleus_p: float = 0.95
    n_samples: int = 10

    def __post_init__(self):
        if not 1 <= self.top_k <= self.beam_size:
            raise ValueError("need 1 <= top_k <= beam_size")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0 < self.nucleus_p <= 1:
            raise ValueError("nucleus_p must lie in (0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _rank_key(h: Hypothesis, alpha):
    return (-h.score(alpha), h.token_ids)


def beam_search(model, src_ids, config: DecodeConfig, eos_id=EOS, bos_id=BOS,
                banned=(PAD, BOS)):
    """Top-k finished hypotheses ranked by ``total / len**alpha``.

    Each step expands every alive prefix by every allowed token and keeps the
    ``beam_size`` best candidates (ties broken lexicographically on token
    ids). Candidates ending in EOS retire to the finished pool. If nothing
    finishes within ``max_len`` the best unfinished prefix is returned with
    ``truncated=True``.
    """
    scorer = model.prefix_scorer(src_ids)
    alpha = config.length_norm_alpha
    # (tokens, token_logprobs, total)
    alive = [((), (), 0.0)]
    finished: dict[tuple, Hypothesis] = {}
    for _ in range(config.max_len):
        prefixes = [(bos_id,) + a[0] for a in alive]
        lp = np.array(scorer(prefixes), dtype=np.float64)
        if banned:
            lp[:, list(banned)] = -np.inf
        totals = np.array([a[2] for a in alive])[:, None] + lp
        flat = totals.ravel()
        n_live = int(np.isfinite(flat).sum())
        if n_live == 0:
            break
        k = min(config.beam_size, n_live)
        cutoff = np.partition(flat, flat.size - k)[flat.size - k]
        V = lp.shape[1]
        cands = []
        for idx in np.flatnonzero(flat >= cutoff):
            i, v = divmod(int(idx), V)
            tokens, tlp, _ = alive[i]
            cands.append((-flat[idx], tokens + (v,), i, float(lp[i, v])))
        cands.sort(key=lambda c: (c[0], c[1]))
        new_alive = []
        for neg_total, tokens, i, step_lp in cands[:k]:
            tlp = alive[i][1] + (step_lp,)
            total = math.fsum(tlp)
            if tokens[-1] == eos_id:
                h = Hypothesis(tokens, tlp, total)
                prev = finished.get(tokens)
                if prev is None or h.total_logprob > prev.total_logprob:
                    finished[tokens] = h
            else:
                new_alive.append((tokens, tlp, total))
        alive = new_alive
        if not alive:
            break
        if alpha == 0 and len(finished) >= config.top_k:
            kth = sorted(h.total_logprob for h in finished.values())[-config.top_k]
            # log-probs are <= 0, so alive prefixes can only get worse
            if max(a[2] for a in alive) < kth:
                break
    if not finished:
        if not alive:
            return []
        tokens, tlp, total = min(alive, key=lambda a: (-a[2], a[0]))
        return [Hypothesis(tokens, tlp, total, truncated=True)]
    ranked = sorted(finished.values(), key=lambda h: _rank_key(h, alpha))
    return ranked[: config.top_k]


def greedy_decode(model, src_ids, max_len=64, eos_id=EOS, bos_id=BOS, banned=(PAD, BOS)):
    scorer = model.prefix_scorer(src_ids)
    tokens, tlp = (), ()
    for _ in range(max_len):
        lp = np.array(scorer([(bos_id,) + tokens])[0], dtype=np.float64)
        if banned:
            lp[list(banned)] = -np.inf
        v = int(np.argmax(lp))
        tokens += (v,)
        tlp += (float(lp[v]),)
        if v == eos_id:
            return Hypothesis(tokens, tlp, math.fsum(tlp))
    return Hypothesis(tokens, tlp, math.fsum(tlp), truncated=True)


# -- nucleus sampling --------------------------------------------------------------

def nucleus_set(probs, p):
    """Token ids of the smallest probability-sorted prefix with mass >= p.

    Sorting is by descending probability, ties by ascending id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p, side="left"))
    return order[: min(k, probs.size - 1) + 1]


def sample_nucleus_token(probs, p, rng) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    ids = nucleus_set(probs, p)
    q = probs[ids] / probs[ids].sum()
    return int(ids[rng.choice(ids.size, p=q)])


def nucleus_sample(model, src_ids, config: DecodeConfig, seed=0, eos_id=EOS, bos_id=BOS,
                   banned=(PAD, BOS)):
    """``n_samples`` top-p samples, deduplicated by token ids (first kept).

    Recorded token log-probs are the model's (un-truncated) log-probs so they
    stay comparable with beam-search scores.
    """
    rng = np.random.default_rng(seed)
    scorer = model.prefix_scorer(src_ids)
    n = config.n_samples
    tokens = [() for _ in range(n)]
    tlps = [() for _ in range(n)]
    done = [False] * n
    for _ in range(config.max_len):
        live = [i for i in range(n) if not done[i]]
        if not live:
            break
        lp = np.array(scorer([(bos_id,) + tokens[i] for i in live]), dtype=np.float64)
        for row, i in enumerate(live):
            probs = np.exp(lp[row])
            if banned:
                probs[list(banned)] = 0.0
            probs /= probs.sum()
            v = sample_nucleus_token(probs, config.nucleus_p, rng)
            tokens[i] += (v,)
            tlps[i] += (float(lp[row, v]),)
            if v == eos_id:
                done[i] = True
    out = {}
    for i in range(n):
        if tokens[i] not in out:
            out[tokens[i]] = Hypothesis(tokens[i], tlps[i], math.fsum(tlps[i]), truncated=not done[i])
    return list(out.values())


# -- multi-output targets -------------------------------------------------------------

def make_multi_output_target(translations, top_n=5, sep=SEP_TOKEN) -> str:
    """Join the ``top_n`` highest-weight translations with the separator token.

    Ties keep their original order.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    translations = list(translations)
    if not translations:
        raise ValueError("no translations to concatenate")
    ranked = sorted(enumerate(translations), key=lambda it: (-it[1].weight, it[0]))
    return f" {sep} ".join(" ".join(t.target_text.split()) for _, t in ranked[:top_n])


def split_multi_output(text: str, sep=SEP_TOKEN) -> list[str]:
    parts = (" ".join(p.split()) for p in text.split(sep))
    return list(dict.fromkeys(p for p in parts if p))

"""Byte-pair encoding with a shared source/target vocabulary."""

from __future__ import annotations

from collections import Counter

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "<sep>")
SEP_TOKEN = SPECIAL_TOKENS[SEP]
EOW = "</w>"
_MAGIC = "#polytrans-bpe v1"


def _word_symbols(word):
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_word(symbols, pair, merged):
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


class BpeTokenizer(BaseEstimator, TransformerMixin):
    """Greedy BPE trained on whitespace-pretokenized words.

    Words carry an end-of-word marker on their last symbol so spaces can be
    restored on decode. The five special tokens occupy ids 0-4.

    Parameters
    ----------
    vocab_size : int
        Total vocabulary budget including specials and the base alphabet.
    seed : int
        Accepted for interface symmetry; training is fully deterministic.
    """

    def __init__(self, vocab_size=512, seed=0):
        self.vocab_size = vocab_size
        self.seed = seed

    # -- training ----------------------------------------------------------
    def fit(self, X, y=None):
        texts = list(X)
        if not texts:
            raise ValueError("cannot train BPE on an empty text list")
        word_freq = Counter()
        for text in texts:
            for w in text.split():
                if w not in SPECIAL_TOKENS:
                    word_freq[w] += 1
        words = {_word_symbols(w): c for w, c in word_freq.items()}
        # every character in both word-internal and word-final form, so any
        # string over the training alphabet round-trips
        chars = {ch for w in word_freq for ch in w}
        alphabet = sorted(chars | {ch + EOW for ch in chars})
        budget = self.vocab_size - len(SPECIAL_TOKENS) - len(alphabet)
        if budget < 0:
            raise ValueError(
                f"vocab_size {self.vocab_size} is below specials ({len(SPECIAL_TOKENS)}) "
                f"plus alphabet ({len(alphabet)})"
            )
        vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for s in alphabet:
            vocab[s] = len(vocab)
        merges = []
        while len(vocab) < self.vocab_size:
            pairs = Counter()
            for syms, c in words.items():
                for a, b in zip(syms, syms[1:]):
                    pairs[a, b] += c
            if not pairs:
                break
            best_count = max(pairs.values())
            if best_count < 2:
                break
            best = min(p for p, c in pairs.items() if c == best_count)
            merged = best[0] + best[1]
            merges.append(best)
            if merged not in vocab:
                vocab[merged] = len(vocab)
            words = {_merge_word(syms, best, merged): c for syms, c in words.items()}
        self._set_state(alphabet, merges)
        return self

    def _set_state(self, alphabet, merges):
        vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for s in alphabet:
            vocab.setdefault(s, len(vocab))
        for a, b in merges:
            vocab.setdefault(a + b, len(vocab))
        self.alphabet_ = list(alphabet)
        self.merges_ = list(merges)
        self.vocab_ = vocab
        self.id_to_token_ = [None] * len(vocab)
        for tok, i in vocab.items():
            self.id_to_token_[i] = tok
        self.ranks_ = {pair: r for r, pair in enumerate(merges)}
        self._cache = {}

    @property
    def n_tokens(self):
        check_is_fitted(self, "vocab_")
        return len(self.vocab_)

    # -- encode / decode -----------------------------------------------------
    def _encode_word(self, word):
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        if word in SPECIAL_TOKENS:
            ids = [self.vocab_[word]]
        else:
            syms = _word_symbols(word)
            while len(syms) > 1:
                ranked = [
                    (self.ranks_[p], p) for p in zip(syms, syms[1:]) if p in self.ranks_
                ]
                if not ranked:
                    break
                _, pair = min(ranked)
                syms = _merge_word(syms, pair, pair[0] + pair[1])
            ids = [self.vocab_.get(s, UNK) for s in syms]
        self._cache[word] = ids
        return ids

    def encode(self, text):
        check_is_fitted(self, "vocab_")
        ids = []
        for w in text.split():
            ids.extend(self._encode_word(w))
        return ids

    def decode(self, ids, keep_sep=False):
        """Inverse of :meth:`encode` up to whitespace normalization.

        pad/bos/eos are always dropped; sep is dropped unless ``keep_sep``,
        in which case it is rendered as a standalone ``<sep>`` word.
        """
        check_is_fitted(self, "vocab_")
        pieces = []
        n = len(self.id_to_token_)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise ValueError(f"token id {i} out of range [0, {n})")
            if i in (PAD, BOS, EOS):
                continue
            if i == SEP:
                if keep_sep:
                    pieces.append(f" {SEP_TOKEN} ")
                continue
            tok = self.id_to_token_[i]
            if tok.endswith(EOW):
                pieces.append(tok[: -len(EOW)] + " ")
            else:
                pieces.append(tok)
        return " ".join("".join(pieces).split())

    def transform(self, X):
        return [self.encode(t) for t in X]

    def inverse_transform(self, X):
        return [self.decode(ids) for ids in X]

    # -- persistence ---------------------------------------------------------
    def to_text(self):
        check_is_fitted(self, "vocab_")
        lines = [
            _MAGIC,
            "vocab_size " + str(self.vocab_size),
            "specials " + " ".join(SPECIAL_TOKENS),
            f"symbols {len(self.alphabet_)}",
            *self.alphabet_,
            f"merges {len(self.merges_)}",
            *(f"{a} {b}" for a, b in self.merges_),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0] != _MAGIC:
            raise ValueError("not a BPE model file")
        vocab_size = int(lines[1].split()[1])
        specials = tuple(lines[2].split()[1:])
        if specials != SPECIAL_TOKENS:
            raise ValueError(f"unexpected special tokens {specials}")
        n_sym = int(lines[3].split()[1])
        alphabet = lines[4 : 4 + n_sym]
        n_merge = int(lines[4 + n_sym].split()[1])
        merge_lines = lines[5 + n_sym : 5 + n_sym + n_merge]
        if len(merge_lines) != n_merge:
            raise ValueError("truncated BPE model file")
        merges = [tuple(line.split(" ")) for line in merge_lines]
        tok = cls(vocab_size=vocab_size)
        tok._set_state(alphabet, merges)
        return tok

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def train_bpe(texts, vocab_size=512, seed=0) -> BpeTokenizer:
    return BpeTokenizer(vocab_size=vocab_size, seed=seed).fit(texts)


def encode(model: BpeTokenizer, text: str) -> list[int]:
    return model.encode(text)


def decode(model: BpeTokenizer, ids) -> str:
    return model.decode(ids)

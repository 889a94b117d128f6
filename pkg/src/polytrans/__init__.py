"""Multi-reference neural translation toolkit: corpus handling, BPE, a small
NumPy transformer, decoding, filtering, boosted trees and weighted-F1 scoring."""

from .corpus import ParallelCorpus, PromptRecord, WeightedTranslation, read_corpus
from .metrics import CorpusScore, score_corpus
from .subword import BpeTokenizer

__version__ = "0.1.0"

__all__ = [
    "BpeTokenizer",
    "CorpusScore",
    "ParallelCorpus",
    "PromptRecord",
    "WeightedTranslation",
    "read_corpus",
    "score_corpus",
]

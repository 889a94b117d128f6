"""Post-processing of decoded hypotheses: max-token-score thresholding and the
learned accept/reject filter over fixed-length score vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import NormalizeConfig, normalize_text

DEFAULT_THRESHOLD = -3.5
DEFAULT_FEATURE_LEN = 11


@dataclass(frozen=True)
class ThresholdConfig:
    min_max_token_logprob: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        # -inf is accepted as "keep everything"
        if np.isnan(self.min_max_token_logprob) or self.min_max_token_logprob == np.inf:
            raise ValueError("threshold must be finite or -inf")


def max_token_logprob(token_logprobs) -> float:
    """Largest per-token log-prob; an empty list counts as -inf."""
    return max(token_logprobs) if len(token_logprobs) else -np.inf


def threshold_filter(hypotheses, config: ThresholdConfig | float = DEFAULT_THRESHOLD):
    """Keep hypotheses whose max token log-prob is >= the threshold, in order."""
    t = config.min_max_token_logprob if isinstance(config, ThresholdConfig) else float(config)
    return [h for h in hypotheses if max_token_logprob(h.token_logprobs) >= t]


def featurize(token_logprobs, n_features=DEFAULT_FEATURE_LEN, pad_value=0.0) -> np.ndarray:
    """First ``n_features`` scores, right-padded with ``pad_value``.

    Accepts a Hypothesis or a plain sequence of scores.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    scores = getattr(token_logprobs, "token_logprobs", token_logprobs)
    out = np.full(n_features, pad_value, dtype=np.float64)
    head = np.asarray(list(scores)[:n_features], dtype=np.float64)
    out[: head.size] = head
    return out


class ScoreFeaturizer(BaseEstimator, TransformerMixin):
    """Stateless transformer: score sequences -> (n, n_features) matrix."""

    def __init__(self, n_features=DEFAULT_FEATURE_LEN, pad_value=0.0):
        self.n_features = n_features
        self.pad_value = pad_value

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.vstack([featurize(x, self.n_features, self.pad_value) for x in X]).reshape(
            -1, self.n_features
        )


def label_predictions(predictions, gold, normalizer: NormalizeConfig | None = None,
                      n_features=DEFAULT_FEATURE_LEN, pad_value=0.0):
    """Features and accept(1)/reject(0) labels for one prompt's predictions.

    ``predictions`` is a list of ``(text, token_logprobs)``; a prediction is
    accepted iff its normalized text matches a normalized gold translation.
    """
    golds = {normalize_text(t.target_text, normalizer) for t in gold.translations}
    if not golds:
        raise ValueError("gold set is empty")
    out = []
    for text, scores in predictions:
        label = int(normalize_text(text, normalizer) in golds)
        out.append((featurize(scores, n_features, pad_value), label))
    return out


def model_filter(hypotheses, classifier, decision_threshold=0.5, n_features=None, pad_value=0.0):
    """Keep hypotheses whose predicted accept probability >= ``decision_threshold``.

    ``classifier`` follows the scikit-learn ``predict_proba`` convention with
    column 1 the accept class; its ``n_features_in_`` fixes the vector length.
    """
    hypotheses = list(hypotheses)
    if not hypotheses:
        return []
    expected = getattr(classifier, "n_features_in_", None)
    if n_features is None:
        n_features = expected if expected is not None else DEFAULT_FEATURE_LEN
    if expected is not None and expected != n_features:
        raise ValueError(f"classifier expects {expected} features, featurizer gives {n_features}")
    X = np.vstack([featurize(h, n_features, pad_value) for h in hypotheses])
    proba = np.asarray(classifier.predict_proba(X))[:, 1]
    return [h for h, p in zip(hypotheses, proba) if p >= decision_threshold]

"""Gradient-boosted decision trees for binary classification.

Second-order boosting on the logistic loss: every round fits a regression
tree to the per-sample gradients/hessians with exact greedy split search,
column subsampling per tree and per depth level, and Newton leaf values
``-G / (H + reg_lambda)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

_HESS_EPS = 1e-12
_MAGIC = "#polytrans-gbdt v1"


@dataclass
class GbdtParams:
    n_estimators: int = 100
    max_depth: int = 6
    colsample_bytree: float = 1.0
    colsample_bylevel: float = 1.0
    learning_rate: float = 0.3
    min_samples_leaf: int = 1
    reg_lambda: float = 0.0

    def __post_init__(self):
        if self.n_estimators < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_estimators >= 0, max_depth >= 1, min_samples_leaf >= 1 required")
        for name in ("colsample_bytree", "colsample_bylevel"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.learning_rate <= 0 or self.reg_lambda < 0:
            raise ValueError("learning_rate must be positive and reg_lambda non-negative")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y, margin) -> float:
    """Mean negative log-likelihood for labels in {0, 1} given raw margins."""
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass
class Tree:
    """Preorder arrays; ``feature == -1`` marks a leaf."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    value: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)

    def _add(self, feature, threshold, value):
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.value.append(value)
        self.left.append(-1)
        self.right.append(-1)
        return len(self.feature) - 1

    def predict(self, X):
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold, dtype=np.float64)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] < thr[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return np.asarray(self.value, dtype=np.float64)[node]

    def depth(self):
        def d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(self.left[i]), d(self.right[i]))

        return d(0)

    def split_features(self):
        return {f for f in self.feature if f >= 0}


def _n_cols(frac, n):
    return max(1, int(math.floor(frac * n + 1e-9)))


def _best_split(X, g, h, idx, cols, min_leaf, lam):
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + lam + _HESS_EPS)
    best = (0.0, None, None)
    n = idx.size
    if n < 2 * min_leaf:
        return best
    for f in cols:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        gl = np.cumsum(g[idx][order])[:-1]
        hl = np.cumsum(h[idx][order])[:-1]
        pos = np.arange(1, n)  # left count
        ok = (xs[:-1] < xs[1:]) & (pos >= min_leaf) & (n - pos >= min_leaf)
        if not ok.any():
            continue
        gr, hr = G - gl, H - hl
        gain = gl * gl / (hl + lam + _HESS_EPS) + gr * gr / (hr + lam + _HESS_EPS) - parent
        gain = np.where(ok, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0] + 1e-12:
            best = (float(gain[i]), int(f), 0.5 * (xs[i] + xs[i + 1]))
    return best


class GbdtClassifier(BaseEstimator, ClassifierMixin):
    """Binary gradient-boosted tree classifier (labels 0/1).

    Parameters mirror :class:`GbdtParams`; ``random_state`` seeds the column
    subsampling. After ``fit``: ``base_score_`` (prior log-odds), ``trees_``,
    ``train_loss_`` (training log-loss after 0..n rounds) and ``degenerate_``
    (True when only one class was seen).
    """

    def __init__(self, n_estimators=100, max_depth=6, colsample_bytree=1.0,
                 colsample_bylevel=1.0, learning_rate=0.3, min_samples_leaf=1,
                 reg_lambda=0.0, random_state=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.colsample_bytree = colsample_bytree
        self.colsample_bylevel = colsample_bylevel
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.reg_lambda = reg_lambda
        self.random_state = random_state

    @classmethod
    def from_params(cls, params: GbdtParams, random_state=0):
        return cls(**asdict(params), random_state=random_state)

    def to_params(self) -> GbdtParams:
        return GbdtParams(**{f.name: getattr(self, f.name) for f in fields(GbdtParams)})

    def fit(self, X, y):
        params = self.to_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        labels = np.unique(y)
        if not set(labels.tolist()) <= {0, 1}:
            raise ValueError(f"labels must be 0/1, got {labels}")
        y = y.astype(np.float64)
        n, F = X.shape
        if n < 2:
            raise ValueError("need at least 2 samples")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = F
        prior = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self.base_score_ = math.log(prior / (1 - prior))
        self.trees_ = []
        self.degenerate_ = labels.size < 2
        margin = np.full(n, self.base_score_)
        self.train_loss_ = [logistic_loss(y, margin)]
        if self.degenerate_:
            warnings.warn("single-class labels: fitted a prior-only model", RuntimeWarning)
            return self
        rng = np.random.default_rng(self.random_state)
        for _ in range(params.n_estimators):
            p = _sigmoid(margin)
            g = p - y
            h = p * (1 - p)
            tree = self._grow(X, g, h, rng, params)
            margin = margin + params.learning_rate * tree.predict(X)
            self.trees_.append(tree)
            self.train_loss_.append(logistic_loss(y, margin))
        return self

    def _grow(self, X, g, h, rng, params):
        F = X.shape[1]
        tree_cols = np.sort(rng.choice(F, _n_cols(params.colsample_bytree, F), replace=False))
        level_cols = [
            np.sort(rng.choice(tree_cols, _n_cols(params.colsample_bylevel, tree_cols.size),
                               replace=False))
            for _ in range(params.max_depth)
        ]
        tree = Tree()
        lam = params.reg_lambda

        def build(idx, depth):
            G, H = g[idx].sum(), h[idx].sum()
            leaf_value = float(-G / (H + lam + _HESS_EPS))
            if depth >= params.max_depth:
                return tree._add(-1, 0.0, leaf_value)
            gain, f, thr = _best_split(X, g, h, idx, level_cols[depth],
                                       params.min_samples_leaf, lam)
            if f is None:
                return tree._add(-1, 0.0, leaf_value)
            node = tree._add(f, float(thr), leaf_value)
            mask = X[idx, f] < thr
            tree.left[node] = build(idx[mask], depth + 1)
            tree.right[node] = build(idx[~mask], depth + 1)
            return node

        build(np.arange(X.shape[0]), 0)
        return tree

    def decision_function(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        margin = np.full(X.shape[0], self.base_score_)
        for tree in self.trees_:
            margin += self.learning_rate * tree.predict(X)
        return margin

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)

    def staged_train_loss(self):
        return list(self.train_loss_)

    # -- persistence ---------------------------------------------------------
    def to_text(self):
        check_is_fitted(self, "trees_")
        lines = [_MAGIC]
        for f in fields(GbdtParams):
            lines.append(f"param {f.name} {getattr(self, f.name)!r}")
        lines.append(f"random_state {self.random_state!r}")
        lines.append(f"n_features {self.n_features_in_}")
        lines.append(f"base_score {self.base_score_!r}")
        lines.append(f"degenerate {int(self.degenerate_)}")
        lines.append(f"trees {len(self.trees_)}")
        for tree in self.trees_:
            lines.append(f"tree {len(tree.feature)}")

            def emit(i):
                if tree.feature[i] < 0:
                    lines.append(f"leaf {tree.value[i]!r}")
                else:
                    lines.append(f"split {tree.feature[i]} {tree.threshold[i]!r} {tree.value[i]!r}")
                    emit(tree.left[i])
                    emit(tree.right[i])

            emit(0)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = iter(text.splitlines())
        if next(lines, None) != _MAGIC:
            raise ValueError("not a gbdt model file")
        int_fields = {"n_estimators", "max_depth", "min_samples_leaf"}
        kwargs = {}
        line = next(lines)
        while line.startswith("param "):
            _, name, value = line.split(" ", 2)
            kwargs[name] = int(value) if name in int_fields else float(value)
            line = next(lines)
        model = cls(**kwargs, random_state=int(line.split()[1]))
        model.n_features_in_ = int(next(lines).split()[1])
        model.base_score_ = float(next(lines).split()[1])
        model.degenerate_ = bool(int(next(lines).split()[1]))
        model.classes_ = np.array([0, 1])
        n_trees = int(next(lines).split()[1])
        model.trees_ = []
        for _ in range(n_trees):
            n_nodes = int(next(lines).split()[1])
            tree = Tree()

            def parse():
                parts = next(lines).split()
                if parts[0] == "leaf":
                    return tree._add(-1, 0.0, float(parts[1]))
                node = tree._add(int(parts[1]), float(parts[2]), float(parts[3]))
                tree.left[node] = parse()
                tree.right[node] = parse()
                return node

            parse()
            if len(tree.feature) != n_nodes:
                raise ValueError("tree node count mismatch")
            model.trees_.append(tree)
        model.train_loss_ = []
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def fit(X, y, params: GbdtParams | None = None, seed=0) -> GbdtClassifier:
    return GbdtClassifier.from_params(params or GbdtParams(), random_state=seed).fit(X, y)


def predict_proba(model: GbdtClassifier, x) -> float:
    """Accept probability for a single feature vector."""
    return float(model.predict_proba(np.asarray(x, dtype=np.float64).reshape(1, -1))[0, 1])


# -- cross-validation and search ----------------------------------------------------------

@dataclass
class CvResult:
    accuracy: list
    f1_accept: list
    f1_reject: list

    @property
    def k(self):
        return len(self.accuracy)

    @property
    def mean_accuracy(self):
        return float(np.mean(self.accuracy))

    @property
    def std_accuracy(self):
        return float(np.std(self.accuracy))

    @property
    def mean_f1_accept(self):
        return float(np.mean(self.f1_accept))

    @property
    def std_f1_accept(self):
        return float(np.std(self.f1_accept))

    @property
    def mean_f1_reject(self):
        return float(np.mean(self.f1_reject))

    @property
    def std_f1_reject(self):
        return float(np.std(self.f1_reject))

    def summary(self):
        return (f"accuracy {self.mean_accuracy:.4f}±{self.std_accuracy:.4f} "
                f"f1_accept {self.mean_f1_accept:.4f}±{self.std_f1_accept:.4f} "
                f"f1_reject {self.mean_f1_reject:.4f}±{self.std_f1_reject:.4f}")


def _f1(y_true, y_pred, positive):
    tp = np.sum((y_pred == positive) & (y_true == positive))
    fp = np.sum((y_pred == positive) & (y_true != positive))
    fn = np.sum((y_pred != positive) & (y_true == positive))
    return 0.0 if tp == 0 else float(2 * tp / (2 * tp + fp + fn))


def stratified_folds(y, k=5, seed=0):
    """Fold id per sample; each class is dealt round-robin after shuffling."""
    y = np.asarray(y)
    if k < 2:
        raise ValueError("k must be >= 2")
    if y.size < k:
        raise ValueError(f"{y.size} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    return fold


def kfold_cv(X, y, params: GbdtParams | None = None, k=5, seed=0) -> CvResult:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    params = params or GbdtParams()
    fold = stratified_folds(y, k, seed)
    acc, f1a, f1r = [], [], []
    for j in range(k):
        test = fold == j
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model = GbdtClassifier.from_params(params, random_state=seed + j).fit(X[~test], y[~test])
        pred = model.predict(X[test])
        acc.append(float(np.mean(pred == y[test])))
        f1a.append(_f1(y[test], pred, 1))
        f1r.append(_f1(y[test], pred, 0))
    return CvResult(acc, f1a, f1r)


DEFAULT_SEARCH_SPACE = {
    "max_depth": [2, 3, 4, 6],
    "colsample_bytree": [0.5, 0.75, 1.0],
    "colsample_bylevel": [0.5, 0.75, 1.0],
    "n_estimators": [25, 50, 100, 200],
}


def sample_params(param_distributions, n_iter, seed=0, base: GbdtParams | None = None):
    """Draw ``n_iter`` GbdtParams; values are lists (uniform choice) or
    objects with ``rvs(random_state=...)``."""
    rng = np.random.default_rng(seed)
    base = asdict(base or GbdtParams())
    out = []
    for _ in range(n_iter):
        d = dict(base)
        for name in sorted(param_distributions):
            dist = param_distributions[name]
            if hasattr(dist, "rvs"):
                value = dist.rvs(random_state=rng)
            else:
                value = dist[int(rng.integers(len(dist)))]
            d[name] = value.item() if hasattr(value, "item") else value
        out.append(GbdtParams(**d))
    return out


def _evaluate(params, X, y, k, seed):
    try:
        return kfold_cv(X, y, params, k, seed)
    except Exception as exc:  # noqa: BLE001 - failed candidates are skipped
        warnings.warn(f"candidate {params} failed: {exc}", RuntimeWarning)
        return None


def randomized_search(X, y, param_distributions=None, n_iter=10, k=5, seed=0, n_jobs=1,
                      base: GbdtParams | None = None):
    """Sample candidates, score each by k-fold mean accuracy, return the best.

    Ties go to the earliest sampled candidate. Returns ``(params, CvResult)``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    candidates = sample_params(param_distributions or DEFAULT_SEARCH_SPACE, n_iter, seed, base)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate)(p, X, y, k, seed) for p in candidates
    )
    best = None
    for params, res in zip(candidates, results):
        if res is None:
            continue
        if best is None or res.mean_accuracy > best[1].mean_accuracy:
            best = (params, res)
    if best is None:
        raise RuntimeError("every candidate failed")
    return best

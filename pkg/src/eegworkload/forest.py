"""Decision-forest classifier and classification metrics.

Trees are grown to purity on bootstrap samples with Gini splits over a random
feature subset at each node. Candidate thresholds are midpoints between
consecutive distinct values; impurity ties go to the lowest feature index and
then the lowest threshold. Prediction is a hard majority vote, ties to the
smallest class label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

MODEL_FORMAT = "eegworkload.forest/1"


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    criterion: str = "gini"
    max_features: int | str | None = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise ForestError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        if self.criterion != "gini":
            raise ForestError("only the gini criterion is implemented")

    def n_split_features(self, n_features: int) -> int:
        mf = self.max_features
        if mf is None or mf == "all":
            return n_features
        if mf == "sqrt":
            return max(1, int(math.floor(math.sqrt(n_features))))
        return max(1, min(int(mf), n_features))


@numba.njit(cache=True)
def _best_split(X, y, idx, features, n_classes, min_leaf):
    """Best (feature, threshold, impurity) over ``features`` for rows ``idx``.

    ``impurity`` is the size-weighted child Gini, n_l*G_l + n_r*G_r.
    Returns feature -1 if no split is valid.
    """
    m = idx.shape[0]
    best_f = -1
    best_t = 0.0
    best_imp = np.inf
    total = np.zeros(n_classes)
    for i in range(m):
        total[y[idx[i]]] += 1.0
    left = np.zeros(n_classes)
    vals = np.empty(m)
    labs = np.empty(m, dtype=np.int64)
    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(m):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        for i in range(m):
            labs[i] = y[idx[order[i]]]
        sv = vals[order]
        left[:] = 0.0
        for i in range(m - 1):
            left[labs[i]] += 1.0
            if sv[i + 1] <= sv[i]:
                continue
            nl = i + 1
            nr = m - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = 0.0
            sr = 0.0
            for c in range(n_classes):
                sl += left[c] * left[c]
                r = total[c] - left[c]
                sr += r * r
            imp = (nl - sl / nl) + (nr - sr / nr)
            if imp < best_imp - 1e-9:
                best_imp = imp
                best_f = f
                t = 0.5 * (sv[i] + sv[i + 1])
                if t >= sv[i + 1]:
                    t = sv[i]
                best_t = t
    return best_f, best_t, best_imp


@numba.njit(cache=True)
def _has_spread(X, idx, f):
    v0 = X[idx[0], f]
    for i in range(1, idx.shape[0]):
        if X[idx[i], f] != v0:
            return True
    return False


@numba.njit(cache=True)
def _grow_tree(X, y, sample_idx, n_classes, n_sub, min_split, min_leaf, max_depth, seed):
    np.random.seed(seed)
    n_features = X.shape[1]
    cap = 2 * sample_idx.shape[0] + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, n_classes))
    # stack of (node, start, end, depth) over a shared index buffer
    buf = sample_idx.copy()
    st_node = np.empty(cap, dtype=np.int64)
    st_a = np.empty(cap, dtype=np.int64)
    st_b = np.empty(cap, dtype=np.int64)
    st_d = np.empty(cap, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_a[0] = 0
    st_b[0] = buf.shape[0]
    st_d[0] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        a = st_a[sp]
        b = st_b[sp]
        depth = st_d[sp]
        rows = buf[a:b]
        for i in range(rows.shape[0]):
            value[node, y[rows[i]]] += 1.0
        m = b - a
        pure = False
        for c in range(n_classes):
            if value[node, c] == m:
                pure = True
        if pure or m < min_split or (max_depth >= 0 and depth >= max_depth):
            continue
        perm = np.random.permutation(n_features)
        chosen = np.empty(n_features, dtype=np.int64)
        k = 0
        for j in range(n_features):
            if k >= n_sub:
                break
            f = perm[j]
            if _has_spread(X, rows, f):
                chosen[k] = f
                k += 1
        if k == 0:
            continue
        feats = np.sort(chosen[:k])
        f, t, imp = _best_split(X, y, rows, feats, n_classes, min_leaf)
        if f < 0:
            continue
        # partition rows in place: x <= t to the left
        go_left = np.empty(m, dtype=np.bool_)
        nl = 0
        for i in range(m):
            go_left[i] = X[rows[i], f] <= t
            if go_left[i]:
                nl += 1
        tmp = np.empty(m, dtype=np.int64)
        li = 0
        ri = nl
        for i in range(m):
            if go_left[i]:
                tmp[li] = rows[i]
                li += 1
            else:
                tmp[ri] = rows[i]
                ri += 1
        buf[a:b] = tmp
        feature[node] = f
        threshold[node] = t
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        st_node[sp] = r_node
        st_a[sp] = a + nl
        st_b[sp] = b
        st_d[sp] = depth + 1
        sp += 1
        st_node[sp] = l_node
        st_a[sp] = a
        st_b[sp] = a + nl
        st_d[sp] = depth + 1
        sp += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes])


@numba.njit(cache=True)
def _tree_leaf_class(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = np.argmax(value[node])
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # class counts per node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply_class(self, X) -> np.ndarray:
        return _tree_leaf_class(X, self.feature, self.threshold, self.left, self.right, self.value)

    def node_rows(self, X) -> list:
        """Training rows reaching each node when ``X`` is routed from the root."""
        rows = [None] * self.n_nodes
        rows[0] = np.arange(len(X))
        for node in range(self.n_nodes):
            f = self.feature[node]
            if f < 0 or rows[node] is None:
                continue
            r = rows[node]
            go = X[r, f] <= self.threshold[node]
            rows[self.left[node]] = r[go]
            rows[self.right[node]] = r[~go]
        return rows


@dataclass
class ForestModel:
    classes: np.ndarray
    trees: list
    params: ForestParams
    n_features: int

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "classes": self.classes.tolist(),
            "n_features": self.n_features,
            "params": asdict(self.params),
            "trees": [{"feature": t.feature.tolist(), "threshold": t.threshold.tolist(),
                       "left": t.left.tolist(), "right": t.right.tolist(),
                       "value": t.value.tolist()} for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "ForestModel":
        if d.get("format") != MODEL_FORMAT:
            raise ForestError(f"unsupported model format {d.get('format')!r}")
        trees = [Tree(np.asarray(t["feature"], dtype=np.int64), np.asarray(t["threshold"], dtype=float),
                      np.asarray(t["left"], dtype=np.int64), np.asarray(t["right"], dtype=np.int64),
                      np.asarray(t["value"], dtype=float).reshape(len(t["feature"]), -1))
                 for t in d["trees"]]
        return cls(np.asarray(d["classes"]), trees, ForestParams(**d["params"]), int(d["n_features"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_X(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ForestError("features must be a 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise ForestError("features must be finite")
    return X


def train(features, labels, params: ForestParams = ForestParams()) -> ForestModel:
    X = _check_X(features)
    labels = np.asarray(labels)
    if len(labels) != len(X) or len(X) < 2:
        raise ForestError("need at least two labelled samples")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ForestError("need at least two classes")
    y = y.astype(np.int64)
    n = len(X)
    rng = np.random.default_rng(params.seed)
    n_sub = params.n_split_features(X.shape[1])
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    trees = []
    for _ in range(params.n_trees):
        if params.bootstrap:
            idx = rng.integers(0, n, n).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        trees.append(Tree(*_grow_tree(X, y, idx, len(classes), n_sub, params.min_samples_split,
                                      params.min_samples_leaf, max_depth, tree_seed)))
    return ForestModel(classes, trees, params, X.shape[1])


def predict(model: ForestModel, features) -> np.ndarray:
    X = _check_X(features)
    if X.shape[1] != model.n_features:
        raise ForestError(f"expected {model.n_features} features, got {X.shape[1]}")
    votes = np.zeros((len(X), len(model.classes)), dtype=np.int64)
    rows = np.arange(len(X))
    for tree in model.trees:
        votes[rows, tree.apply_class(X)] += 1
    return model.classes[np.argmax(votes, axis=1)]


def best_split(features, labels, candidate_features=None, min_samples_leaf: int = 1):
    """Best Gini split of a node; thin wrapper around the tree kernel.

    Returns ``(feature, threshold, weighted_child_impurity)``; feature is
    ``None`` when no split exists.
    """
    X = _check_X(features)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    feats = np.arange(X.shape[1]) if candidate_features is None else np.sort(candidate_features)
    f, t, imp = _best_split(X, y.astype(np.int64), np.arange(len(X), dtype=np.int64),
                            np.asarray(feats, dtype=np.int64), len(classes), min_samples_leaf)
    return (None, None, None) if f < 0 else (int(f), float(t), float(imp))


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class ClassificationReport:
    classes: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def n_samples(self) -> int:
        return int(self.support.sum())

    def rows(self):
        """Table rows: one per class plus the macro average."""
        out = [{"class": str(c), "precision": float(p), "recall": float(r), "f1": float(f),
                "support": int(s)}
               for c, p, r, f, s in zip(self.classes, self.precision, self.recall, self.f1, self.support)]
        out.append({"class": "macro avg", "precision": self.macro_precision,
                    "recall": self.macro_recall, "f1": self.macro_f1, "support": self.n_samples})
        return out


def report(y_true, y_pred, labels=None) -> ClassificationReport:
    """Per-class precision, recall and F1; undefined ratios count as 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size == 0:
        raise ValueError("empty input")
    classes = np.unique(np.concatenate([y_true, y_pred])) if labels is None else np.asarray(labels)
    p = np.zeros(len(classes))
    r = np.zeros(len(classes))
    f = np.zeros(len(classes))
    s = np.zeros(len(classes), dtype=np.int64)
    for k, c in enumerate(classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        p[k] = tp / (tp + fp) if tp + fp else 0.0
        r[k] = tp / (tp + fn) if tp + fn else 0.0
        f[k] = 2 * p[k] * r[k] / (p[k] + r[k]) if p[k] + r[k] else 0.0
        s[k] = tp + fn
    return ClassificationReport(tuple(classes.tolist()), p, r, f, s)

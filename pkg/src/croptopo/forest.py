"""Bagged decision-forest classifier with NaN-aware splits.

Each tree is grown on a bootstrap sample: at every node the best gini split
is searched over sqrt(F) randomly drawn candidate features, thresholds sit
halfway between consecutive distinct finite values, and missing values
(NaN) always route left.  Nodes stop at purity or when a child would drop
below ``min_leaf`` samples.  Everything is deterministic given the seed.

Checkpoint layout (little-endian): a text header (key: value lines, blank
line terminated), then per tree a uint32 node count followed by the node
arrays ``feature`` (int32, -1 for leaves), ``threshold`` (float64),
``left``/``right`` (int32, -1 for leaves) and the per-node class-vote
histogram (int64, n_nodes * n_classes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_LEAF = -1


@dataclass
class ForestHyper:
    n_trees: int = 100
    min_leaf: int = 2
    max_depth: int | None = None
    n_candidates: int | None = None  # default: round(sqrt(n_features))

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "min_leaf": self.min_leaf,
                "max_depth": self.max_depth, "n_candidates": self.n_candidates}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestHyper":
        return cls(**d)


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    hist: np.ndarray       # int64 (n_nodes, n_classes)


@dataclass
class ForestModel:
    classes: np.ndarray          # class codes, sorted
    n_features: int
    trees: list[Tree]
    hyper: ForestHyper
    seed: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError("feature length mismatch")
        out = np.zeros((len(X), len(self.classes)), dtype=np.float64)
        for tree in self.trees:
            leaf = _descend(tree, X)
            h = tree.hist[leaf].astype(np.float64)
            out += h / h.sum(axis=1, keepdims=True)
        return out / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes[np.argmax(proba, axis=1)]


def _descend(tree: Tree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(len(X), dtype=np.int32)
    while True:
        feat = tree.feature[node]
        active = feat != _LEAF
        if not active.any():
            return node
        idx = np.nonzero(active)[0]
        f = feat[idx]
        v = X[idx, f]
        thr = tree.threshold[node[idx]]
        go_left = (v <= thr) | np.isnan(v)
        node[idx] = np.where(go_left, tree.left[node[idx]], tree.right[node[idx]])


def _split_feature(v: np.ndarray, onehot: np.ndarray, min_leaf: int):
    """Best gini split of one candidate feature; NaN sorts to the far left."""
    key = np.where(np.isnan(v), -np.inf, v)
    order = np.argsort(key, kind="stable")
    sv = key[order]
    m = len(sv)
    cum = np.cumsum(onehot[order], axis=0)
    total = cum[-1]
    n_left = np.arange(1, m, dtype=np.float64)
    n_right = m - n_left
    left = cum[:-1].astype(np.float64)
    right = total.astype(np.float64) - left
    impurity = (n_left - (left ** 2).sum(axis=1) / n_left
                + n_right - (right ** 2).sum(axis=1) / n_right)
    ok = (sv[:-1] > -np.inf) & (sv[:-1] < sv[1:])
    ok &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    scored = np.where(ok, impurity, np.inf)
    p = int(np.argmin(scored))
    thr = 0.5 * (float(sv[p]) + float(sv[p + 1]))
    return float(scored[p]), thr, order[: p + 1], order[p + 1:]


def _grow_tree(X, y_idx, n_classes, hyper: ForestHyper, rng) -> Tree:
    n, n_feat = X.shape
    k = hyper.n_candidates or max(1, int(round(np.sqrt(n_feat))))
    boot = rng.integers(0, n, n)

    feature, threshold, left, right, hist = [], [], [], [], []

    def new_node():
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(_LEAF)
        right.append(_LEAF)
        hist.append(None)
        return len(feature) - 1

    root = new_node()
    stack = [(root, boot, 0)]
    while stack:
        node, idx, depth = stack.pop()
        yc = y_idx[idx]
        counts = np.bincount(yc, minlength=n_classes).astype(np.int64)
        hist[node] = counts
        pure = (counts > 0).sum() <= 1
        if pure or len(idx) < 2 * hyper.min_leaf or \
                (hyper.max_depth is not None and depth >= hyper.max_depth):
            continue
        cand = np.sort(rng.choice(n_feat, size=min(k, n_feat), replace=False))
        onehot = np.zeros((len(idx), n_classes), dtype=np.int64)
        onehot[np.arange(len(idx)), yc] = 1
        best = None
        for f in cand:
            res = _split_feature(X[idx, f], onehot, hyper.min_leaf)
            if res is None:
                continue
            score, thr, li, ri = res
            if best is None or score < best[0]:
                best = (score, int(f), thr, li, ri)
        if best is None:
            continue
        _, f, thr, li, ri = best
        feature[node] = f
        threshold[node] = thr
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        # right pushed first so the left child is processed (and numbered) next
        stack.append((rnode, idx[ri], depth + 1))
        stack.append((lnode, idx[li], depth + 1))
    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        hist=np.stack(hist).astype(np.int64),
    )


def fit_forest(X: np.ndarray, y: np.ndarray, hyper: ForestHyper | None = None,
               seed: int = 0) -> ForestModel:
    """Train a forest on float32 features (NaN = missing) and integer labels."""
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, F) aligned with y")
    if len(X) == 0:
        raise ValueError("empty training set")
    hyper = hyper or ForestHyper()
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("degenerate single-class training pool")
    y_idx = np.searchsorted(classes, y).astype(np.int64)
    trees = []
    for t in range(hyper.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, t]))
        trees.append(_grow_tree(X, y_idx, len(classes), hyper, rng))
    return ForestModel(classes.astype(np.int64), X.shape[1], trees, hyper, seed)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_forest(model: ForestModel, path) -> None:
    lines = [
        "format: croptopo-forest",
        "version: 1",
        f"classes: {','.join(str(int(c)) for c in model.classes)}",
        f"n_features: {model.n_features}",
        f"n_trees: {len(model.trees)}",
        f"min_leaf: {model.hyper.min_leaf}",
        f"max_depth: {'' if model.hyper.max_depth is None else model.hyper.max_depth}",
        f"n_candidates: {'' if model.hyper.n_candidates is None else model.hyper.n_candidates}",
        f"seed: {model.seed}",
        "byteorder: little",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for tree in model.trees:
            n = len(tree.feature)
            fh.write(np.uint32(n).tobytes())
            fh.write(tree.feature.astype("<i4").tobytes())
            fh.write(tree.threshold.astype("<f8").tobytes())
            fh.write(tree.left.astype("<i4").tobytes())
            fh.write(tree.right.astype("<i4").tobytes())
            fh.write(tree.hist.astype("<i8").tobytes())


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, body = blob.partition(b"\n\n")
    if not sep:
        raise ValueError("malformed forest checkpoint header")
    fields = {}
    for line in head.decode("utf-8").split("\n"):
        k, _, v = line.partition(":")
        fields[k.strip()] = v.strip()
    if fields.get("format") != "croptopo-forest" or fields.get("version") != "1":
        raise ValueError("unknown forest checkpoint format")
    classes = np.array([int(c) for c in fields["classes"].split(",")], dtype=np.int64)
    n_features = int(fields["n_features"])
    n_trees = int(fields["n_trees"])
    hyper = ForestHyper(
        n_trees=n_trees,
        min_leaf=int(fields["min_leaf"]),
        max_depth=int(fields["max_depth"]) if fields["max_depth"] else None,
        n_candidates=int(fields["n_candidates"]) if fields["n_candidates"] else None,
    )
    k = len(classes)
    trees = []
    off = 0
    for _ in range(n_trees):
        n = int(np.frombuffer(body, dtype="<u4", count=1, offset=off)[0])
        off += 4
        feature = np.frombuffer(body, dtype="<i4", count=n, offset=off).copy(); off += 4 * n
        threshold = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy(); off += 8 * n
        left = np.frombuffer(body, dtype="<i4", count=n, offset=off).copy(); off += 4 * n
        right = np.frombuffer(body, dtype="<i4", count=n, offset=off).copy(); off += 4 * n
        hist = np.frombuffer(body, dtype="<i8", count=n * k, offset=off).reshape(n, k).copy()
        off += 8 * n * k
        trees.append(Tree(feature, threshold, left, right, hist))
    if off != len(body):
        raise ValueError("trailing bytes in forest checkpoint")
    return ForestModel(classes, n_features, trees, hyper, int(fields["seed"]))

"""Random forest classifier over the four BRATS classes.

Trees are stored as flat node arrays.  Internal nodes route ``x[feature] <=
threshold`` to ``left``; leaves have ``feature == -1`` and carry class counts
in BRATS order (0, 1, 2, 4).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FeatureLayoutError, TreeStructureError, VoxelIndexError
from .volume import BRATS_LABELS, LabelVolume, label_to_index

N_CLASSES = len(BRATS_LABELS)
LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    max_depth: int = 15
    min_samples_leaf: int = 1
    features_per_split: int = 7
    bootstrap: bool = True
    extra_trees: bool = False
    seed: int = 0

    def validate(self, n_features: int = 55) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 1 <= self.features_per_split <= n_features:
            raise ValueError(f"features_per_split must lie in [1, {n_features}]")


@dataclass(frozen=True, eq=False)
class DecisionTree:
    feature: np.ndarray     # int, LEAF for leaves
    threshold: np.ndarray   # float
    left: np.ndarray        # int, LEAF for leaves
    right: np.ndarray
    counts: np.ndarray      # (n_nodes, 4) class counts of the training samples reaching the node

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        try:
            feature = np.asarray(d["feature"], dtype=np.int64)
            threshold = np.asarray(d["threshold"], dtype=np.float64)
            left = np.asarray(d["left"], dtype=np.int64)
            right = np.asarray(d["right"], dtype=np.int64)
            counts = np.asarray(d["counts"], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            raise TreeStructureError(f"malformed tree node arrays: {exc}") from exc
        n = feature.size
        if feature.ndim != 1 or n == 0 or any(a.shape != (n,) for a in (threshold, left, right)) \
                or counts.shape != (n, N_CLASSES):
            raise TreeStructureError("tree node arrays have inconsistent shapes")
        return cls(feature, threshold, left, right, counts)


def validate_tree(tree: DecisionTree, n_features: int, max_depth: Optional[int] = None,
                  min_samples_leaf: int = 1) -> None:
    """Raise :class:`TreeStructureError` unless ``tree`` is a proper binary tree.

    Checks in-bounds children, a single parent per non-root node, that every
    node is reachable from the root (so no cycles), feature indices, the
    depth bound and the leaf population.
    """
    n = tree.n_nodes
    internal = tree.feature != LEAF
    if np.any(tree.feature[internal] < 0) or np.any(tree.feature[internal] >= n_features):
        raise TreeStructureError("feature index out of range")
    if np.any(internal & ~np.isfinite(tree.threshold)):
        raise TreeStructureError("non-finite threshold")
    kids = np.concatenate([tree.left[internal], tree.right[internal]])
    if np.any(kids < 1) or np.any(kids >= n):
        raise TreeStructureError("child index out of bounds")
    if np.any((tree.left[~internal] != LEAF) | (tree.right[~internal] != LEAF)):
        raise TreeStructureError("leaf with children")
    if np.bincount(kids, minlength=n)[1:].tolist() != [1] * (n - 1):
        raise TreeStructureError("every non-root node must have exactly one parent")
    seen = np.zeros(n, dtype=bool)
    depth = np.zeros(n, dtype=np.int64)
    stack = [0]
    while stack:
        i = stack.pop()
        if seen[i]:
            raise TreeStructureError("cycle detected")
        seen[i] = True
        if internal[i]:
            for c in (tree.left[i], tree.right[i]):
                depth[c] = depth[i] + 1
                stack.append(int(c))
    if not seen.all():
        raise TreeStructureError("unreachable nodes")
    if max_depth is not None and depth.max() > max_depth:
        raise TreeStructureError(f"depth {depth.max()} exceeds max_depth {max_depth}")
    if np.any(tree.counts < 0) or np.any(tree.counts[~internal].sum(1) < min_samples_leaf):
        raise TreeStructureError("leaf holds fewer samples than min_samples_leaf")


def _best_threshold_split(x: np.ndarray, onehot: np.ndarray, msl: int):
    """Best Gini split of one feature over midpoints of sorted unique values.

    Returns (score, threshold) where a higher score means lower weighted
    impurity, or None when the feature admits no valid split.
    """
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cl = np.cumsum(onehot[order], axis=0)[:-1]
    total = cl[-1] + onehot[order[-1]]
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    valid = xs[1:] > xs[:-1]
    if msl > 1:
        valid &= (nl >= msl) & (nr >= msl)
    if not valid.any():
        return None
    cr = total - cl
    # Maximizing sum(cl^2)/nl + sum(cr^2)/nr minimizes the weighted Gini impurity.
    score = (cl * cl).sum(1) / nl + (cr * cr).sum(1) / nr
    score = np.where(valid, score, -np.inf)
    i = int(np.argmax(score))
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(score[i]), float(thr)


def _random_threshold_split(x: np.ndarray, onehot: np.ndarray, msl: int, rng: np.random.Generator):
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        return None
    thr = float(rng.uniform(lo, hi))
    if thr >= hi:
        thr = lo
    go_left = x <= thr
    nl = int(go_left.sum())
    nr = x.size - nl
    if nl < msl or nr < msl:
        return None
    cl = onehot[go_left].sum(0)
    cr = onehot[~go_left].sum(0)
    return float((cl * cl).sum() / nl + (cr * cr).sum() / nr), thr


def _grow_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator) -> DecisionTree:
    n_features = X.shape[1]
    onehot_all = np.eye(N_CLASSES, dtype=np.float64)[y]
    msl = params.min_samples_leaf

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    counts: List[np.ndarray] = []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append(np.bincount(y[idx], minlength=N_CLASSES))
        return len(feature) - 1

    root = np.arange(X.shape[0])
    stack = [(new_node(root), root, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= params.max_depth or idx.size < 2 * msl or np.count_nonzero(c) <= 1:
            continue
        onehot = onehot_all[idx]
        best = None
        tried = 0
        for f in rng.permutation(n_features):
            if tried >= params.features_per_split:
                break
            x = X[idx, f]
            if x.min() == x.max():
                continue
            tried += 1
            if params.extra_trees:
                res = _random_threshold_split(x, onehot, msl, rng)
            else:
                res = _best_threshold_split(x, onehot, msl)
            if res is not None and (best is None or res[0] > best[0]):
                best = (res[0], int(f), res[1])
        if best is None:
            continue
        _, f, thr = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # Right pushed first so the left subtree is numbered first.
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(counts, dtype=np.int64).reshape(-1, N_CLASSES),
    )


def _train_one(X, y, params, seed_seq) -> DecisionTree:
    rng = np.random.default_rng(seed_seq)
    if params.bootstrap and not params.extra_trees:
        sample = rng.integers(0, X.shape[0], X.shape[0])
        sample.sort()
        return _grow_tree(X[sample], y[sample], params, rng)
    return _grow_tree(X, y, params, rng)


@dataclass(frozen=True, eq=False)
class ForestModel:
    params: ForestParams
    trees: Tuple[DecisionTree, ...]
    layout: Tuple[str, ...] = ()
    class_order: Tuple[int, ...] = BRATS_LABELS

    @property
    def n_features(self) -> int:
        return len(self.layout)

    def to_dict(self) -> dict:
        return {
            "params": asdict(self.params),
            "class_order": list(self.class_order),
            "trees": [t.to_dict() for t in self.trees],
        }


def _as_matrix(X) -> Tuple[np.ndarray, Optional[Tuple[str, ...]]]:
    layout = getattr(X, "layout", None)
    values = getattr(X, "values", X)
    return np.asarray(values, dtype=np.float64), (tuple(layout) if layout is not None else None)


def train_forest(X, labels=None, params: ForestParams = ForestParams(), layout: Optional[Sequence[str]] = None,
                 n_jobs: int = 1) -> ForestModel:
    """Train ``params.n_trees`` trees on bootstrap resamples (or the full set for extra-trees).

    ``X`` is an ``(N, F)`` matrix or a feature matrix object carrying
    ``values``, ``labels`` and ``layout``.  Per-tree random streams are spawned
    from ``params.seed``, so ``n_jobs`` never changes the result.
    """
    values, x_layout = _as_matrix(X)
    if labels is None:
        labels = getattr(X, "labels", None)
    if labels is None:
        raise DataError("training requires labels")
    layout = tuple(layout) if layout is not None else (x_layout or tuple(f"f{i}" for i in range(values.shape[1])))
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError("empty training set")
    if values.shape[0] < 2:
        raise DataError("training needs at least 2 samples")
    if len(layout) != values.shape[1]:
        raise FeatureLayoutError(f"layout has {len(layout)} names for {values.shape[1]} columns")
    if not np.all(np.isfinite(values)):
        raise DataError("training features contain non-finite values")
    y = label_to_index(np.asarray(labels))
    if y.shape != (values.shape[0],):
        raise DataError("labels must align with feature rows")
    params.validate(values.shape[1])

    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    if n_jobs == 1:
        trees = [_train_one(values, y, params, s) for s in seeds]
    else:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs)(delayed(_train_one)(values, y, params, s) for s in seeds)
    return ForestModel(params, tuple(trees), layout)


def predict(model: ForestModel, X) -> Tuple[np.ndarray, np.ndarray]:
    """Labels and per-class vote fractions for every row.

    Each tree contributes its leaf's class proportions; the label is the
    argmax of the averaged proportions, ties going to the earlier class.
    """
    values, x_layout = _as_matrix(X)
    if values.ndim != 2 or values.shape[1] != model.n_features:
        raise FeatureLayoutError(
            f"feature matrix has {values.shape[-1] if values.ndim == 2 else '?'} columns, model expects {model.n_features}"
        )
    if x_layout is not None and x_layout != tuple(model.layout):
        raise FeatureLayoutError("feature layout names differ from the model's layout")
    votes = np.zeros((values.shape[0], N_CLASSES), dtype=np.float64)
    for tree in model.trees:
        c = tree.counts.astype(np.float64)
        props = c / c.sum(1, keepdims=True).clip(min=1)
        votes += props[tree.apply(values)]
    votes /= len(model.trees)
    idx = np.argmax(votes, axis=1)
    return np.asarray(model.class_order, dtype=np.uint8)[idx], votes


def segmentation_from_predictions(coords, labels, dims, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Scatter predicted labels into an otherwise all-background volume.

    ``coords`` is ``(N, 3)`` in (x, y, z); duplicates and out-of-bounds
    positions are errors.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    labels = np.asarray(labels).reshape(-1)
    if coords.shape[0] != labels.shape[0]:
        raise DataError("coords and labels must align")
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims, dtype=np.uint8)
    if coords.shape[0] == 0:
        return LabelVolume(out, spacing)
    if np.any(coords < 0) or np.any(coords >= np.asarray(dims)):
        raise VoxelIndexError("prediction coordinate outside volume")
    flat = np.ravel_multi_index(coords.T, dims)
    if np.unique(flat).size != flat.size:
        raise DataError("duplicate prediction coordinates")
    out[coords[:, 0], coords[:, 1], coords[:, 2]] = labels
    return LabelVolume(out, spacing)

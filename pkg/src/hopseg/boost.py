"""Gradient-boosted decision trees for voxel-wise soft classification.

Multi-class boosting with a softmax cross-entropy objective: each round
fits one depth-limited regression tree per class to the current gradients
and hessians, with second-order leaf weights shrunk by the learning rate.
Split finding is exact (pre-sorted scan) up to a sample cap and switches
to 256-bin quantile histograms beyond it.  Everything is deterministic
under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from numba import njit, prange

from .errors import DegenerateLabelsError, InsufficientDataError, InvalidShapeError

_MIN_GAIN = 1e-12
_HESS_FLOOR = 1e-16


@dataclass(frozen=True)
class BoostParams:
    n_rounds: int = 64
    max_depth: int = 6
    learning_rate: float = 0.1
    subsample: float = 0.8
    colsample: float = 0.8
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    n_bins: int = 256
    exact_split_max_samples: int = 256_000

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """Flat node arrays; feature == -1 marks a leaf, `value` its weight."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max(initial=0))


@dataclass
class TreeEnsemble:
    n_classes: int
    n_features: int
    base_score: np.ndarray
    trees: list[list[Tree]]
    params: BoostParams
    train_loss: list[float] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _hist_best_splits(codes, cols, node_of, g, h, n_slots, n_bins,
                      min_child_weight, reg_lambda, node_g, node_h):
    n_cols = cols.shape[0]
    out_gain = np.full((n_cols, n_slots), -1.0)
    out_bin = np.full((n_cols, n_slots), -1, dtype=np.int32)
    n = node_of.shape[0]
    for ci in prange(n_cols):
        col = codes[cols[ci]]
        hist_g = np.zeros((n_slots, n_bins))
        hist_h = np.zeros((n_slots, n_bins))
        for i in range(n):
            s = node_of[i]
            if s >= 0:
                hist_g[s, col[i]] += g[i]
                hist_h[s, col[i]] += h[i]
        for s in range(n_slots):
            gt, ht = node_g[s], node_h[s]
            parent = gt * gt / (ht + reg_lambda)
            gl = 0.0
            hl = 0.0
            best_gain = -1.0
            best_bin = -1
            for b in range(n_bins - 1):
                gl += hist_g[s, b]
                hl += hist_h[s, b]
                hr = ht - hl
                if hl < min_child_weight or hr < min_child_weight:
                    continue
                gr = gt - gl
                gain = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_bin = b
            out_gain[ci, s] = best_gain
            out_bin[ci, s] = best_bin
    return out_gain, out_bin


@njit(cache=True, parallel=True)
def _exact_best_splits(vals, order, cols, node_of, g, h, n_slots,
                       min_child_weight, reg_lambda, node_g, node_h):
    n_cols = cols.shape[0]
    out_gain = np.full((n_cols, n_slots), -1.0)
    out_thr = np.zeros((n_cols, n_slots), dtype=np.float32)
    n = node_of.shape[0]
    for ci in prange(n_cols):
        f = cols[ci]
        col = vals[f]
        ordf = order[f]
        gl = np.zeros(n_slots)
        hl = np.zeros(n_slots)
        last = np.zeros(n_slots, dtype=np.float32)
        seen = np.zeros(n_slots, dtype=np.uint8)
        best_gain = np.full(n_slots, -1.0)
        best_thr = np.zeros(n_slots, dtype=np.float32)
        for pos in range(n):
            i = ordf[pos]
            s = node_of[i]
            if s < 0:
                continue
            v = col[i]
            if seen[s] == 1 and v > last[s]:
                hr = node_h[s] - hl[s]
                if hl[s] >= min_child_weight and hr >= min_child_weight:
                    gt, ht = node_g[s], node_h[s]
                    gr = gt - gl[s]
                    gain = (gl[s] * gl[s] / (hl[s] + reg_lambda)
                            + gr * gr / (hr + reg_lambda)
                            - gt * gt / (ht + reg_lambda))
                    if gain > best_gain[s]:
                        thr = np.float32(0.5) * (last[s] + v)
                        if thr <= last[s]:
                            thr = v  # adjacent floats: keep both children nonempty
                        best_gain[s] = gain
                        best_thr[s] = thr
            gl[s] += g[i]
            hl[s] += h[i]
            last[s] = v
            seen[s] = 1
        for s in range(n_slots):
            out_gain[ci, s] = best_gain[s]
            out_thr[ci, s] = best_thr[s]
    return out_gain, out_thr


@njit(cache=True)
def _route(vals, node_of, split_feature, split_threshold, child_base):
    for i in range(node_of.shape[0]):
        s = node_of[i]
        if s < 0:
            continue
        f = split_feature[s]
        if f < 0:
            node_of[i] = -1
        elif vals[f, i] < split_threshold[s]:
            node_of[i] = child_base[s]
        else:
            node_of[i] = child_base[s] + 1


@njit(cache=True, parallel=True)
def _predict_raw(x, feature, threshold, left, right, value, roots, tree_class, out):
    for i in prange(x.shape[0]):
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if x[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, tree_class[t]] += value[node]


# ---------------------------------------------------------------------------
# tree growth
# ---------------------------------------------------------------------------

def _bin_features(vals: np.ndarray, n_bins: int):
    """Quantile-bin each feature; code(x) counts edges <= x so that
    `code <= b` routes exactly like `x < edges[b]`."""
    d, n = vals.shape
    codes = np.empty((d, n), dtype=np.uint8)
    edges_per_feature = []
    q = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for f in range(d):
        edges = np.unique(np.quantile(vals[f], q).astype(np.float32))
        codes[f] = np.searchsorted(edges, vals[f], side="right").astype(np.uint8)
        edges_per_feature.append(edges)
    return codes, edges_per_feature


class _SplitFinder:
    """Chooses the best (feature, float threshold) per active node slot."""

    def __init__(self, vals: np.ndarray, n_bins: int, exact: bool):
        self.vals = vals
        self.exact = exact
        if exact:
            self.order = np.argsort(vals, axis=1, kind="stable").astype(np.int32)
        else:
            self.codes, self.edges = _bin_features(vals, n_bins)
            self.n_bins = n_bins

    def best(self, cols, node_of, g, h, n_slots, mcw, lam, node_g, node_h):
        if self.exact:
            gain, thr = _exact_best_splits(self.vals, self.order, cols, node_of,
                                           g, h, n_slots, mcw, lam, node_g, node_h)
            return gain, thr
        gain, bins = _hist_best_splits(self.codes, cols, node_of, g, h, n_slots,
                                       self.n_bins, mcw, lam, node_g, node_h)
        thr = np.zeros_like(gain, dtype=np.float32)
        for ci in range(cols.shape[0]):
            edges = self.edges[cols[ci]]
            for s in range(n_slots):
                b = bins[ci, s]
                if b >= 0:
                    thr[ci, s] = edges[b] if b < edges.shape[0] else edges[-1]
                else:
                    gain[ci, s] = -1.0
        return gain, thr


def _node_sums(node_of, g, h, n_slots):
    active = node_of >= 0
    idx = node_of[active]
    ng = np.bincount(idx, weights=g[active], minlength=n_slots)
    nh = np.bincount(idx, weights=h[active], minlength=n_slots)
    return ng, nh


def _grow_tree(finder: _SplitFinder, g, h, node_of, cols,
               params: BoostParams) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    slot_nodes = [new_node()]
    for depth in range(params.max_depth + 1):
        n_slots = len(slot_nodes)
        node_g, node_h = _node_sums(node_of, g, h, n_slots)
        do_split = depth < params.max_depth
        split_feature = np.full(n_slots, -1, dtype=np.int32)
        split_threshold = np.zeros(n_slots, dtype=np.float32)
        if do_split:
            gain, thr = finder.best(cols, node_of, g, h, n_slots,
                                    params.min_child_weight, params.reg_lambda,
                                    node_g, node_h)
            # sequential reduce over features: ties keep the lowest feature index
            for s in range(n_slots):
                best = _MIN_GAIN
                for ci in range(cols.shape[0]):
                    if gain[ci, s] > best:
                        best = gain[ci, s]
                        split_feature[s] = cols[ci]
                        split_threshold[s] = thr[ci, s]
        child_base = np.full(n_slots, -1, dtype=np.int32)
        next_nodes = []
        for s in range(n_slots):
            node = slot_nodes[s]
            if split_feature[s] >= 0:
                feature[node] = int(split_feature[s])
                threshold[node] = float(split_threshold[s])
                child_base[s] = len(next_nodes)
                left[node] = new_node()
                next_nodes.append(left[node])
                right[node] = new_node()
                next_nodes.append(right[node])
            else:
                w = -node_g[s] / (node_h[s] + params.reg_lambda)
                value[node] = float(np.float32(params.learning_rate * w))
        _route(finder.vals, node_of, split_feature, split_threshold, child_base)
        if not next_nodes:
            break
        slot_nodes = next_nodes
    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float32),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def ensemble_fit(features: np.ndarray, labels: np.ndarray,
                 params: BoostParams | None = None, seed: int = 0,
                 n_classes: int | None = None) -> TreeEnsemble:
    """Fit a multi-class boosted ensemble on (n_samples, d) features."""
    params = params or BoostParams()
    x = np.ascontiguousarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] == 0:
        raise InvalidShapeError(f"expected (n, d>=1) features, got shape {x.shape}")
    y = np.asarray(labels).astype(np.int64)
    n, d = x.shape
    if y.shape != (n,):
        raise InvalidShapeError(f"labels shape {y.shape} does not match {n} samples")
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    present = np.unique(y)
    if present.size < 2:
        raise DegenerateLabelsError(f"need at least 2 distinct labels, got {present.tolist()}")
    k = int(n_classes if n_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise InvalidShapeError(f"labels outside [0, {k})")

    counts = np.bincount(y, minlength=k).astype(np.float64)
    base = np.log(np.maximum(counts / n, 1e-8)).astype(np.float32)
    scores = np.tile(base.astype(np.float64), (n, 1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    vals = np.ascontiguousarray(x.T)
    finder = _SplitFinder(vals, params.n_bins, exact=n <= params.exact_split_max_samples)
    rng = np.random.Generator(np.random.PCG64(seed))
    all_cols = np.arange(d, dtype=np.int32)

    trees: list[list[Tree]] = []
    losses: list[float] = []
    for _ in range(params.n_rounds):
        probs = softmax(scores)
        grad = probs - onehot
        hess = np.maximum(probs * (1.0 - probs), _HESS_FLOOR)
        # row/column sampling is drawn once per round, shared across classes,
        # so class relabeling permutes trees without changing them
        if params.subsample < 1.0:
            take = max(1, int(round(params.subsample * n)))
            sampled = rng.permutation(n)[:take]
        else:
            sampled = None
        if params.colsample < 1.0:
            dc = max(1, int(round(params.colsample * d)))
            cols = np.sort(rng.permutation(d)[:dc]).astype(np.int32)
        else:
            cols = all_cols
        round_trees = []
        for cls in range(k):
            node_of = np.zeros(n, dtype=np.int32)
            if sampled is not None:
                node_of[:] = -1
                node_of[sampled] = 0
            tree = _grow_tree(finder, grad[:, cls], hess[:, cls], node_of, cols, params)
            round_trees.append(tree)
        for cls, tree in enumerate(round_trees):
            delta = np.zeros((n, 1))
            _predict_raw(x, tree.feature, tree.threshold, tree.left, tree.right,
                         tree.value, np.zeros(1, dtype=np.int32),
                         np.zeros(1, dtype=np.int32), delta)
            scores[:, cls] += delta[:, 0]
        trees.append(round_trees)
        probs = softmax(scores)
        losses.append(float(-np.log(np.maximum(probs[np.arange(n), y], 1e-300)).mean()))

    return TreeEnsemble(n_classes=k, n_features=d, base_score=base,
                        trees=trees, params=params, train_loss=losses)


def _flatten_trees(ensemble: TreeEnsemble):
    feature, threshold, left, right, value = [], [], [], [], []
    roots, tree_class = [], []
    offset = 0
    for round_trees in ensemble.trees:
        for cls, tree in enumerate(round_trees):
            roots.append(offset)
            tree_class.append(cls)
            feature.append(tree.feature)
            threshold.append(tree.threshold)
            left.append(tree.left + offset)
            right.append(tree.right + offset)
            value.append(tree.value)
            offset += tree.n_nodes
    if not roots:
        z = np.zeros(0, dtype=np.int32)
        return z, np.zeros(0, dtype=np.float32), z, z, np.zeros(0, dtype=np.float32), z, z
    return (np.concatenate(feature), np.concatenate(threshold),
            np.concatenate(left), np.concatenate(right), np.concatenate(value),
            np.array(roots, dtype=np.int32), np.array(tree_class, dtype=np.int32))


def predict_raw(ensemble: TreeEnsemble, features: np.ndarray) -> np.ndarray:
    """Summed tree outputs plus base score (pre-softmax), float64."""
    x = np.ascontiguousarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != ensemble.n_features:
        raise InvalidShapeError(
            f"expected (n, {ensemble.n_features}) features, got shape {x.shape}"
        )
    out = np.tile(ensemble.base_score.astype(np.float64), (x.shape[0], 1))
    feature, threshold, left, right, value, roots, tree_class = _flatten_trees(ensemble)
    if roots.size:
        _predict_raw(x, feature, threshold, left, right, value, roots, tree_class, out)
    return out


def predict_proba(ensemble: TreeEnsemble, features: np.ndarray) -> np.ndarray:
    """Per-row class probabilities on the simplex (softmax of raw scores)."""
    return softmax(predict_raw(ensemble, features))


def balanced_subsample(labels: np.ndarray, budget: int, majority_ratio: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Pick training indices capped per class at `majority_ratio` times the
    rarest class and `budget` overall; returns sorted indices."""
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    floor = counts.min()
    caps = np.minimum(counts, max(1, int(majority_ratio * floor)))
    total = caps.sum()
    if total > budget:
        caps = np.maximum(1, (caps * (budget / total)).astype(np.int64))
    picks = []
    for cls, cap in zip(classes, caps):
        idx = np.flatnonzero(y == cls)
        if idx.size > cap:
            idx = rng.permutation(idx)[:cap]
        picks.append(idx)
    return np.sort(np.concatenate(picks))

"""Random-forest regression.

Trees are grown greedily on squared error: at each node ``n_split`` features
are drawn without replacement, every midpoint between consecutive distinct
values is a threshold candidate, and the split with the smallest summed
child SSE wins. Growth stops when a node has fewer than ``2 * min_leaf``
samples, reaches ``max_depth``, has constant labels, or no candidate split
lowers the SSE. Leaves predict the mean label of their samples.

Each tree draws from its own SplitMix64 substream ``mix_seed(seed, tree)``,
so adding trees never changes the earlier ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._rng import mix_seed, new_state, next_below

__all__ = [
    "ForestConfig",
    "RegressionTree",
    "ForestModel",
    "train_tree",
    "train_forest",
    "predict",
]

_SPLIT_EPS = 1e-10


@dataclass(frozen=True)
class ForestConfig:
    n_tree: int = 200
    n_split: int = 20
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_tree < 1:
            raise ValueError("n_tree must be >= 1")
        if self.n_split < 1:
            raise ValueError("n_split must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")

    @property
    def depth_limit(self) -> int:
        return -1 if self.max_depth is None else int(self.max_depth)


# --- compiled kernels -------------------------------------------------------


@njit(cache=True)
def draw_rows(m, bootstrap, state):
    rows = np.empty(m, dtype=np.int64)
    if bootstrap:
        for i in range(m):
            rows[i] = next_below(state, m)
    else:
        for i in range(m):
            rows[i] = i
    return rows


@njit(cache=True)
def sort_pairs(keys, vals, n):
    """Sort ``keys[:n]`` ascending in place, permuting ``vals[:n]`` alongside."""
    stack = np.empty(128, dtype=np.int64)
    top = 0
    lo = 0
    hi = n - 1
    while True:
        if hi - lo < 16:
            for i in range(lo + 1, hi + 1):
                k = keys[i]
                v = vals[i]
                j = i - 1
                while j >= lo and keys[j] > k:
                    keys[j + 1] = keys[j]
                    vals[j + 1] = vals[j]
                    j -= 1
                keys[j + 1] = k
                vals[j + 1] = v
            if top == 0:
                return
            top -= 2
            lo = stack[top]
            hi = stack[top + 1]
            continue
        mid = (lo + hi) >> 1
        # median of three into keys[mid]
        if keys[mid] < keys[lo]:
            keys[mid], keys[lo] = keys[lo], keys[mid]
            vals[mid], vals[lo] = vals[lo], vals[mid]
        if keys[hi] < keys[lo]:
            keys[hi], keys[lo] = keys[lo], keys[hi]
            vals[hi], vals[lo] = vals[lo], vals[hi]
        if keys[hi] < keys[mid]:
            keys[hi], keys[mid] = keys[mid], keys[hi]
            vals[hi], vals[mid] = vals[mid], vals[hi]
        pivot = keys[mid]
        i = lo
        j = hi
        while i <= j:
            while keys[i] < pivot:
                i += 1
            while keys[j] > pivot:
                j -= 1
            if i <= j:
                keys[i], keys[j] = keys[j], keys[i]
                vals[i], vals[j] = vals[j], vals[i]
                i += 1
                j -= 1
        # recurse into the smaller side first; stack depth stays O(log n)
        if j - lo < hi - i:
            stack[top] = i
            stack[top + 1] = hi
            top += 2
            hi = j
        else:
            stack[top] = lo
            stack[top + 1] = j
            top += 2
            lo = i


@njit(cache=True)
def presort(X):
    """Feature-major copy of ``X`` plus, per feature, the row order by value,
    the sorted values and each row's position in that order."""
    m, n_feat = X.shape
    XT = np.ascontiguousarray(X.T)
    order = np.empty((n_feat, m), dtype=np.int32)
    sorted_vals = np.empty((n_feat, m))
    rank = np.empty((n_feat, m), dtype=np.int32)
    keys = np.empty(m)
    rows = np.empty(m)
    for f in range(n_feat):
        for r in range(m):
            keys[r] = XT[f, r]
            rows[r] = r
        sort_pairs(keys, rows, m)
        for q in range(m):
            r = np.int32(rows[q])
            order[f, q] = r
            sorted_vals[f, q] = keys[q]
            rank[f, r] = q
    return XT, order, sorted_vals, rank


@njit(cache=True)
def _sort_small(a, n):
    for i in range(1, n):
        k = a[i]
        j = i - 1
        while j >= 0 and a[j] > k:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = k


@njit(cache=True)
def grow_tree(XT, order, sorted_vals, rank, y, rows, n_split, min_leaf, max_depth, state):
    """Grow one tree on ``rows`` (indices into the presorted training set, repeats allowed).

    Each node owns a contiguous segment of the distinct rows, kept in
    ascending row order. A split search visits the node's rows in value
    order: large nodes filter the presorted order of the drawn feature,
    small ones sort their rows' positions in it.
    """
    n_feat, m = XT.shape
    n_rows = rows.shape[0]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)

    weight = np.zeros(m)
    for r in rows:
        weight[r] += 1.0
    wy = weight * y
    wyy = wy * y
    cq = np.empty(m, dtype=np.int32)
    node_of = np.full(m, -1, dtype=np.int32)
    seg = np.empty(m, dtype=np.int32)
    tmp_seg = np.empty(m, dtype=np.int32)
    n_unique = 0
    for r in range(m):
        if weight[r] > 0:
            node_of[r] = 0
            seg[n_unique] = r
            n_unique += 1
    perm = np.arange(n_feat)
    st_node = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    seg_lo = np.empty(cap, dtype=np.int64)
    seg_hi = np.empty(cap, dtype=np.int64)
    seg_lo[0] = 0
    seg_hi[0] = n_unique
    st_node[0] = 0
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        depth = st_depth[top]
        lo_i = seg_lo[node]
        hi_i = seg_hi[node]
        size = hi_i - lo_i

        n = 0.0
        s = 0.0
        ss = 0.0
        lo = np.inf
        hi = -np.inf
        for i in range(lo_i, hi_i):
            r = seg[i]
            v = y[r]
            n += weight[r]
            s += wy[r]
            ss += wyy[r]
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        value[node] = s / n
        if n < 2 * min_leaf or depth == max_depth or lo == hi:
            continue

        parent_sse = ss - s * s / n
        best = parent_sse - _SPLIT_EPS
        best_f = -1
        best_t = 0.0
        small = size * 16 < m
        for j in range(n_split):
            r = j + next_below(state, n_feat - j)
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
            f = perm[j]
            sv = sorted_vals[f]
            of = order[f]
            # positions of this node's rows in the feature's value order
            if small:
                rk = rank[f]
                for i in range(size):
                    cq[i] = rk[seg[lo_i + i]]
                _sort_small(cq, size)
                cnt = size
            else:
                cnt = 0
                for q in range(m):
                    cq[cnt] = q
                    cnt += node_of[of[q]] == node
            row = of[cq[0]]
            prev = sv[cq[0]]
            nl = weight[row]
            cl = wy[row]
            cl2 = wyy[row]
            for i in range(1, cnt):
                q = cq[i]
                v = sv[q]
                if v != prev and nl >= min_leaf:
                    nr = n - nl
                    if nr < min_leaf:
                        break
                    cr = s - cl
                    sse = (cl2 - cl * cl / nl) + ((ss - cl2) - cr * cr / nr)
                    if sse < best:
                        best = sse
                        best_f = f
                        t = 0.5 * (prev + v)
                        if t >= v:
                            t = prev
                        best_t = t
                row = of[q]
                nl += weight[row]
                cl += wy[row]
                cl2 += wyy[row]
                prev = v
        if best_f < 0:
            continue

        # stable partition of the segment keeps rows ascending in both children
        xf = XT[best_f]
        n_left = 0
        n_right = 0
        for i in range(lo_i, hi_i):
            r = seg[i]
            if xf[r] <= best_t:
                seg[lo_i + n_left] = r
                node_of[r] = n_nodes
                n_left += 1
            else:
                tmp_seg[n_right] = r
                node_of[r] = n_nodes + 1
                n_right += 1
        for i in range(n_right):
            seg[lo_i + n_left + i] = tmp_seg[i]
        seg_lo[n_nodes] = lo_i
        seg_hi[n_nodes] = lo_i + n_left
        seg_lo[n_nodes + 1] = lo_i + n_left
        seg_hi[n_nodes + 1] = hi_i
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree is expanded first
        st_node[top] = n_nodes + 1
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = n_nodes
        st_depth[top] = depth + 1
        top += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@njit(cache=True)
def tree_predict_one(feature, threshold, left, right, value, x):
    node = 0
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return value[node]


@njit(cache=True)
def tree_predict_many(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = tree_predict_one(feature, threshold, left, right, value, X[i])
    return out


@njit(cache=True)
def forest_fit_predict(X, y, xq, n_tree, n_split, min_leaf, max_depth, seed, bootstrap):
    """Grow ``n_tree`` trees and return their mean prediction at ``xq``.

    Same trees as :func:`train_forest` with the same arguments; nothing is kept.
    """
    XT, order, sorted_vals, rank = presort(X)
    total = 0.0
    state = np.empty(1, dtype=np.uint64)
    for t in range(n_tree):
        state[0] = mix_seed(seed, t)
        rows = draw_rows(X.shape[0], bootstrap, state)
        feature, threshold, left, right, value = grow_tree(
            XT, order, sorted_vals, rank, y, rows, n_split, min_leaf, max_depth, state
        )
        total += tree_predict_one(feature, threshold, left, right, value, xq)
    return total / n_tree


# --- python API -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-backed binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def _arrays(self):
        return self.feature, self.threshold, self.left, self.right, self.value

    def predict(self, x) -> float:
        return float(tree_predict_one(*self._arrays(), np.asarray(x, dtype=np.float64)))

    def predict_many(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return tree_predict_many(*self._arrays(), X)

    def same_as(self, other: "RegressionTree") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays()))


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: list = field(default_factory=list)
    n_features: int = 0

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    def predict(self, f_x) -> float:
        return predict(self, f_x)

    def predict_many(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) queries, got {X.shape}")
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict_many(X)
        return total / len(self.trees)

    def same_as(self, other: "ForestModel") -> bool:
        return len(self.trees) == len(other.trees) and all(
            a.same_as(b) for a, b in zip(self.trees, other.trees)
        )


def as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """``(X, y)`` from a list of samples with ``features``/``label`` or from an ``(X, y)`` pair."""
    if isinstance(samples, tuple) and len(samples) == 2:
        X, y = samples
    else:
        if len(samples) == 0:
            raise ValueError("need at least one training sample")
        X = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
        y = np.array([s.label for s in samples], dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ValueError(f"bad training arrays: X{X.shape}, y{y.shape}")
    return X, y


def _check_split(cfg: ForestConfig, n_features: int) -> None:
    if cfg.n_split > n_features:
        raise ValueError(f"n_split={cfg.n_split} exceeds feature length {n_features}")


def train_tree(samples, cfg: ForestConfig = ForestConfig(), rng=None) -> RegressionTree:
    """Grow one tree on exactly the given samples (no resampling).

    ``rng`` is an integer seed or a :class:`numpy.random.Generator` from which
    one 64-bit seed is drawn; ``None`` means ``cfg.seed``.
    """
    X, y = as_arrays(samples)
    _check_split(cfg, X.shape[1])
    if rng is None:
        seed = cfg.seed
    elif isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
    else:
        seed = int(rng)
    state = new_state(seed)
    rows = np.arange(X.shape[0], dtype=np.int64)
    XT, order, sorted_vals, rank = presort(X)
    return RegressionTree(*grow_tree(XT, order, sorted_vals, rank, y, rows, cfg.n_split, cfg.min_leaf, cfg.depth_limit, state))


def train_forest(samples, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    X, y = as_arrays(samples)
    _check_split(cfg, X.shape[1])
    XT, order, sorted_vals, rank = presort(X)
    trees = []
    state = np.empty(1, dtype=np.uint64)
    for t in range(cfg.n_tree):
        state[0] = mix_seed(np.uint64(cfg.seed & (2**64 - 1)), t)
        rows = draw_rows(X.shape[0], cfg.bootstrap, state)
        arrays = grow_tree(XT, order, sorted_vals, rank, y, rows, cfg.n_split, cfg.min_leaf, cfg.depth_limit, state)
        trees.append(RegressionTree(*arrays))
    return ForestModel(trees, X.shape[1])


def predict(model: ForestModel, f_x) -> float:
    """Mean of the tree outputs at ``f_x``."""
    x = np.ascontiguousarray(f_x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ValueError(f"feature length {x.shape} does not match model ({model.n_features})")
    total = 0.0
    for tree in model.trees:
        total += tree_predict_one(*tree._arrays(), x)
    return total / len(model.trees)

"""Exact greedy variance-reduction regression trees stored as flat arrays.

Shared by the boosting learner and the residual CART. Nodes are numbered in
depth-first preorder; ``feature == -1`` marks a leaf. Rows with
``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

LEAF = -1
# relative gain floor: keeps float noise on constant targets from splitting
_GAIN_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class FlatTree:
    feature: np.ndarray    # int64
    threshold: np.ndarray  # float64
    left: np.ndarray       # int64
    right: np.ndarray      # int64
    value: np.ndarray      # float64, meaningful on leaves

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] == LEAF:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.ones(X.shape[0], dtype=bool)
        while True:
            f = self.feature[node]
            active = f != LEAF
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            nf = node[rows]
            go_left = X[rows, self.feature[nf]] <= self.threshold[nf]
            node[rows] = np.where(go_left, self.left[nf], self.right[nf])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FlatTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


def best_split(X: np.ndarray, target: np.ndarray, rows: np.ndarray,
               min_leaf: int) -> tuple[int, float, float] | None:
    """Best (feature, threshold, gain) over all features, or None.

    Gain is the reduction in sum of squared deviations. Thresholds are
    midpoints between consecutive distinct values. Ties go to the lowest
    feature index, then the lowest threshold.
    """
    n = len(rows)
    if n < 2 * min_leaf or n < 2:
        return None
    v = target[rows]
    total = v.sum()
    base = total * total / n
    tol = _GAIN_RTOL * float(np.dot(v, v)) + 1e-300
    best = None
    best_gain = tol
    lo = max(min_leaf, 1)
    for j in range(X.shape[1]):
        xs = X[rows, j]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cs = np.cumsum(v[order])
        # split after position i (left = first i+1 rows)
        pos = np.arange(lo - 1, n - lo)
        if len(pos) == 0:
            continue
        pos = pos[xs[pos] < xs[pos + 1]]
        if len(pos) == 0:
            continue
        nl = pos + 1.0
        sl = cs[pos]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - base
        k = int(np.argmax(gain))
        g = float(gain[k])
        if g > best_gain * (1 + _GAIN_RTOL):
            # lowest threshold among near-equal maxima on this feature
            k = int(np.flatnonzero(gain >= g - abs(g) * _GAIN_RTOL)[0])
            a, b = xs[pos[k]], xs[pos[k] + 1]
            thr = 0.5 * (a + b)
            if not a <= thr < b:
                thr = a
            best, best_gain = (j, float(thr), float(gain[k])), g
    return best


def grow_tree(X: np.ndarray, target: np.ndarray, max_depth: int, min_leaf: int,
              leaf_value: Callable[[np.ndarray], float],
              rows: np.ndarray | None = None) -> tuple[FlatTree, list[np.ndarray]]:
    """Grow a tree; returns it with the training rows of every node."""
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rows is None:
        rows = np.arange(X.shape[0])
    feature, threshold, left, right, value, members = [], [], [], [], [], []

    def node(r: np.ndarray, depth: int) -> int:
        i = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(leaf_value(r))
        members.append(r)
        if depth >= max_depth:
            return i
        s = best_split(X, target, r, min_leaf)
        if s is None:
            return i
        j, thr, _ = s
        go_left = X[r, j] <= thr
        feature[i], threshold[i] = j, thr
        left[i] = node(r[go_left], depth + 1)
        right[i] = node(r[~go_left], depth + 1)
        return i

    node(np.asarray(rows), 0)
    tree = FlatTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )
    return tree, members

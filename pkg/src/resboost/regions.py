"""Residual computation and hard-region mining with a shallow CART."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import Dataset, FeatureStats
from .legacy import FrozenModel
from .tree import LEAF, FlatTree, grow_tree

INF = math.inf


class RegionError(ValueError):
    pass


def residuals(frozen: FrozenModel, data: Dataset) -> np.ndarray:
    """Probability-scale residuals ``y - sigmoid(base logit)``."""
    return data.y - expit(frozen.base_logit(data))


@dataclass(frozen=True, eq=False)
class CartTree:
    tree: FlatTree
    feature_names: tuple[str, ...]
    leaf_count: dict[int, int]
    leaf_mean: dict[int, float]
    leaf_cum: dict[int, float]
    n: int
    total_error: float

    def leaves(self) -> list[int]:
        return [int(i) for i in self.tree.leaves()]

    def path(self, leaf: int) -> list[tuple[int, float, bool]]:
        """(feature, threshold, went_left) steps from the root to ``leaf``."""
        parent = {}
        for i in range(self.tree.n_nodes):
            if self.tree.feature[i] != LEAF:
                parent[int(self.tree.left[i])] = (i, True)
                parent[int(self.tree.right[i])] = (i, False)
        steps = []
        node = leaf
        while node in parent:
            p, is_left = parent[node]
            steps.append((int(self.tree.feature[p]), float(self.tree.threshold[p]), is_left))
            node = p
        return steps[::-1]


def fit_cart(data: Dataset, abs_residuals: np.ndarray, max_depth: int = 3,
             min_leaf: int = 30, split_target: np.ndarray | None = None) -> CartTree:
    """Fit a regression tree to absolute residuals.

    ``split_target`` optionally replaces ``abs_residuals`` as the quantity
    whose variance the splits reduce (e.g. signed residuals); leaves are
    always annotated with |r| statistics.
    """
    a = np.asarray(abs_residuals, dtype=np.float64)
    if a.shape != (data.n,):
        raise RegionError("residual vector does not match the dataset")
    if (a < 0).any():
        raise RegionError("absolute residuals must be non-negative")
    if data.n < 2 * min_leaf:
        raise RegionError(f"need at least {2 * min_leaf} rows for min_leaf={min_leaf}, got {data.n}")
    target = a if split_target is None else np.asarray(split_target, dtype=np.float64)
    tree, members = grow_tree(data.X, target, max_depth, min_leaf,
                              lambda r: float(target[r].mean()))
    count, mean, cum = {}, {}, {}
    for i in tree.leaves():
        r = members[i]
        count[int(i)] = len(r)
        cum[int(i)] = float(a[r].sum())
        mean[int(i)] = cum[int(i)] / len(r)
    return CartTree(tree, data.feature_names, count, mean, cum, data.n, float(a.sum()))


@dataclass(frozen=True)
class Clause:
    feature: str
    index: int
    lower: float = -INF  # exclusive
    upper: float = INF   # inclusive

    def to_json(self) -> dict:
        return {"feature": self.feature,
                "lower": None if self.lower == -INF else self.lower,
                "upper": None if self.upper == INF else self.upper}


@dataclass(frozen=True)
class Region:
    id: int
    clauses: tuple[Clause, ...]
    priority: float
    coverage: int
    cum_error: float
    leaf: int = -1

    def contains(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        mask = np.ones(X.shape[0], dtype=bool)
        for c in self.clauses:
            col = X[:, c.index]
            mask &= (col > c.lower) & (col <= c.upper)
        return mask

    def bounds(self, feature: str) -> tuple[float, float]:
        for c in self.clauses:
            if c.feature == feature:
                return c.lower, c.upper
        return -INF, INF

    def describe(self) -> str:
        parts = []
        for c in self.clauses:
            if c.lower > -INF and c.upper < INF:
                parts.append(f"{c.lower:.6g} < {c.feature} <= {c.upper:.6g}")
            elif c.lower > -INF:
                parts.append(f"{c.feature} > {c.lower:.6g}")
            else:
                parts.append(f"{c.feature} <= {c.upper:.6g}")
        return " and ".join(parts) if parts else "(everywhere)"

    def to_json(self) -> dict:
        return {"id": self.id, "clauses": [c.to_json() for c in self.clauses],
                "priority": self.priority, "coverage": self.coverage,
                "cum_error": self.cum_error, "leaf": self.leaf}

    @classmethod
    def from_json(cls, d: Mapping, feature_names: Sequence[str]) -> "Region":
        names = list(feature_names)
        clauses = []
        for c in d["clauses"]:
            if c["feature"] not in names:
                raise RegionError(f"region references unknown feature {c['feature']!r}")
            lo = -INF if c["lower"] is None else float(c["lower"])
            up = INF if c["upper"] is None else float(c["upper"])
            clauses.append(Clause(c["feature"], names.index(c["feature"]), lo, up))
        return cls(int(d["id"]), tuple(clauses), float(d["priority"]), int(d["coverage"]),
                   float(d["cum_error"]), int(d.get("leaf", -1)))


def leaf_rule(tree: CartTree, leaf: int) -> tuple[Clause, ...]:
    lo: dict[int, float] = {}
    up: dict[int, float] = {}
    for f, thr, went_left in tree.path(leaf):
        if went_left:
            up[f] = min(up.get(f, INF), thr)
        else:
            lo[f] = max(lo.get(f, -INF), thr)
    feats = sorted(set(lo) | set(up))
    return tuple(Clause(tree.feature_names[f], f, lo.get(f, -INF), up.get(f, INF)) for f in feats)


def priority_scores(tree: CartTree, lam: float = 0.7) -> dict[int, float]:
    total = tree.total_error
    out = {}
    for leaf in tree.leaves():
        err_share = tree.leaf_cum[leaf] / total if total > 0 else 0.0
        cov_share = tree.leaf_count[leaf] / tree.n
        out[leaf] = lam * err_share + (1.0 - lam) * cov_share
    return out


def score_and_select(tree: CartTree, lam: float = 0.7, c_min: float = 0.15,
                     k_max: int = 5) -> list[Region]:
    """Rank leaves by priority and emit the top ones as disjoint regions.

    A root-only tree yields no regions: a rule with no clauses would cover
    the whole space, which is not a hard region.
    """
    if not 0.0 <= lam <= 1.0:
        raise RegionError("lambda must lie in [0, 1]")
    scores = priority_scores(tree, lam)
    kept = [leaf for leaf in tree.leaves() if scores[leaf] >= c_min]
    kept.sort(key=lambda leaf: (-scores[leaf], leaf))
    regions = []
    for leaf in kept:
        clauses = leaf_rule(tree, leaf)
        if not clauses:
            continue
        if len(regions) == k_max:
            break
        regions.append(Region(len(regions), clauses, float(scores[leaf]),
                              tree.leaf_count[leaf], tree.leaf_cum[leaf], leaf))
    return regions


def mine_regions(frozen: FrozenModel, train: Dataset, max_depth: int = 3, min_leaf: int = 30,
                 lam: float = 0.7, c_min: float = 0.15, k_max: int = 5,
                 target: str = "abs") -> tuple[list[Region], CartTree]:
    r = residuals(frozen, train)
    if target not in ("abs", "signed"):
        raise RegionError(f"unknown region target {target!r}")
    split_target = r if target == "signed" else None
    tree = fit_cart(train, np.abs(r), max_depth, min_leaf, split_target)
    return score_and_select(tree, lam, c_min, k_max), tree


@dataclass(frozen=True)
class BoundaryWindow:
    """Search window for one region bound during boundary refinement."""

    feature: str
    index: int
    side: str  # "lower" (feature > value) or "upper" (feature <= value)
    value: float
    low: float
    high: float

    def to_json(self) -> dict:
        return {"feature": self.feature, "side": self.side, "value": self.value,
                "low": self.low, "high": self.high}


@dataclass(frozen=True)
class RefinementPlan:
    windows: tuple[BoundaryWindow, ...]
    box: tuple[Clause, ...] = field(default=())  # region widened by the outward allowances

    def window(self, feature: str, side: str) -> BoundaryWindow | None:
        for w in self.windows:
            if w.feature == feature and w.side == side:
                return w
        return None

    def contains(self, X: np.ndarray) -> np.ndarray:
        return Region(-1, self.box, 0.0, 0, 0.0).contains(X)


def _box(clauses: Sequence[Clause]) -> dict[int, tuple[float, float]]:
    return {c.index: (c.lower, c.upper) for c in clauses}


def _separating(a: dict, b: dict) -> list[tuple[int, str]]:
    """Features on which half-open boxes a and b are disjoint, with the side of a facing b."""
    out = []
    for f in sorted(set(a) | set(b)):
        alo, aup = a.get(f, (-INF, INF))
        blo, bup = b.get(f, (-INF, INF))
        if aup <= blo:
            out.append((f, "upper"))
        elif bup <= alo:
            out.append((f, "lower"))
    return out


def refinement_plans(regions: Sequence[Region], stats: FeatureStats,
                     window: float = 0.1) -> dict[int, RefinementPlan]:
    """Boundary-refinement windows of +/- window * interdecile range per bound.

    Inward moves are capped at half the region's width on that feature.
    Outward moves are capped so that widened boxes never intersect another
    emitted region (processed in id order against already-widened boxes), so
    refined experts stay mutually exclusive.
    """
    boxes = {r.id: _box(r.clauses) for r in regions}
    widened: dict[int, dict] = {}
    plans = {}
    for r in sorted(regions, key=lambda r: r.id):
        own = boxes[r.id]
        out_allow: dict[tuple[int, str], float] = {}
        in_allow: dict[tuple[int, str], float] = {}
        for c in r.clauses:
            h = window * stats[c.feature].interdecile_range
            width = c.upper - c.lower
            cap = h if math.isinf(width) else min(h, width / 2)
            if c.lower > -INF:
                out_allow[(c.index, "lower")] = h
                in_allow[(c.index, "lower")] = cap
            if c.upper < INF:
                out_allow[(c.index, "upper")] = h
                in_allow[(c.index, "upper")] = cap
        for other in sorted(regions, key=lambda o: o.id):
            if other.id == r.id:
                continue
            obox = widened.get(other.id, boxes[other.id])
            for f, side in _separating(own, obox):
                key = (f, side)
                if key not in out_allow:
                    continue
                lo, up = own[f]
                olo, oup = obox.get(f, (-INF, INF))
                gap = (olo - up) if side == "upper" else (lo - oup)
                out_allow[key] = max(0.0, min(out_allow[key], gap))
        wins = []
        wbox = {}
        for c in r.clauses:
            lo, up = c.lower, c.upper
            if c.lower > -INF:
                o, i = out_allow[(c.index, "lower")], in_allow[(c.index, "lower")]
                lo = c.lower - o
                if o + i > 0:
                    wins.append(BoundaryWindow(c.feature, c.index, "lower", c.lower,
                                               c.lower - o, c.lower + i))
            if c.upper < INF:
                o, i = out_allow[(c.index, "upper")], in_allow[(c.index, "upper")]
                up = c.upper + o
                if o + i > 0:
                    wins.append(BoundaryWindow(c.feature, c.index, "upper", c.upper,
                                               c.upper - i, c.upper + o))
            wbox[c.index] = (lo, up)
        widened[r.id] = wbox
        box = tuple(replace(c, lower=wbox[c.index][0], upper=wbox[c.index][1]) for c in r.clauses)
        plans[r.id] = RefinementPlan(tuple(wins), box)
    return plans

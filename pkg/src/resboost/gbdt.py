"""Small logistic gradient-boosted trees.

Used both to train a desk-scale legacy scorer and as the gating model of the
aggregator. Trees are fit by exact greedy variance reduction on the negative
gradient ``y - p``; leaf values are one Newton step
``sum(y - p) / sum(p (1 - p))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .tree import FlatTree, grow_tree

P_CLIP = 1e-6
_HESS_EPS = 1e-12


class GbdtError(ValueError):
    pass


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise GbdtError(f"invalid boosting config {self}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise GbdtError("learning_rate must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class GbdtModel:
    initial_logit: float
    learning_rate: float
    max_depth: int
    n_trees: int
    n_features: int
    trees: tuple[FlatTree, ...] = ()
    feature_names: tuple[str, ...] | None = None
    min_leaf: int = 5
    seed: int = field(default=0)

    def to_json(self) -> dict:
        return {
            "initial_logit": self.initial_logit,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "n_trees": self.n_trees,
            "n_features": self.n_features,
            "min_leaf": self.min_leaf,
            "seed": self.seed,
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "trees": [t.to_json() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, d: dict) -> "GbdtModel":
        names = d.get("feature_names")
        return cls(
            initial_logit=float(d["initial_logit"]),
            learning_rate=float(d["learning_rate"]),
            max_depth=int(d["max_depth"]),
            n_trees=int(d["n_trees"]),
            n_features=int(d["n_features"]),
            trees=tuple(FlatTree.from_json(t) for t in d["trees"]),
            feature_names=tuple(names) if names else None,
            min_leaf=int(d.get("min_leaf", 5)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def loads(cls, text: str) -> "GbdtModel":
        return cls.from_json(json.loads(text))


def base_rate_logit(y: np.ndarray) -> float:
    p = min(max(float(np.mean(y)), P_CLIP), 1.0 - P_CLIP)
    return math.log(p / (1.0 - p))


def train(X, y, config: GbdtConfig | None = None,
          feature_names: tuple[str, ...] | None = None, offset=None) -> GbdtModel:
    """Boost logistic-loss trees.

    ``offset`` is an optional per-row starting margin; when given, the model
    learns a correction on top of it and its initial logit is 0.
    """
    config = config or GbdtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise GbdtError("training data is empty")
    if X.shape[1] == 0:
        raise GbdtError("training data has no features")
    if y.shape != (X.shape[0],):
        raise GbdtError("label length does not match rows")

    if offset is None:
        f0 = base_rate_logit(y)
        logits = np.full(len(y), f0)
    else:
        offset = np.asarray(offset, dtype=np.float64)
        if offset.shape != y.shape:
            raise GbdtError("offset length does not match rows")
        f0 = 0.0
        logits = offset.copy()
    trees = []
    for _ in range(config.n_trees):
        p = expit(logits)
        grad = y - p
        hess = p * (1.0 - p)

        def newton(rows, g=grad, h=hess):
            return float(g[rows].sum() / (h[rows].sum() + _HESS_EPS))

        tree, _ = grow_tree(X, grad, config.max_depth, config.min_leaf, newton)
        trees.append(tree)
        logits = logits + config.learning_rate * tree.predict(X)
    return GbdtModel(
        initial_logit=f0,
        learning_rate=config.learning_rate,
        max_depth=config.max_depth,
        n_trees=config.n_trees,
        n_features=X.shape[1],
        trees=tuple(trees),
        feature_names=tuple(feature_names) if feature_names else None,
        min_leaf=config.min_leaf,
        seed=config.seed,
    )


def predict_logits(model: GbdtModel, X, offset=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise GbdtError(f"expected {model.n_features} features, got shape {X.shape}")
    out = np.full(X.shape[0], model.initial_logit)
    if offset is not None:
        out = out + np.asarray(offset, dtype=np.float64)
    for t in model.trees:
        out += model.learning_rate * t.predict(X)
    return out


def staged_logits(model: GbdtModel, X, offset=None):
    """Yield the logits after 0, 1, .., len(trees) trees."""
    X = np.asarray(X, dtype=np.float64)
    out = np.full(X.shape[0], model.initial_logit)
    if offset is not None:
        out = out + np.asarray(offset, dtype=np.float64)
    yield out.copy()
    for t in model.trees:
        out += model.learning_rate * t.predict(X)
        yield out.copy()


def truncate(model: GbdtModel, n: int) -> GbdtModel:
    """Keep the first ``n`` trees."""
    return replace(model, trees=model.trees[:n], n_trees=n)


def predict_logit(model: GbdtModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise GbdtError("predict_logit takes a single feature row")
    return float(predict_logits(model, x[None, :])[0])


def predict_proba(model: GbdtModel, X, offset=None) -> np.ndarray:
    return expit(predict_logits(model, X, offset))

"""Gating layer that fuses expert interaction vectors with the frozen model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import gbdt, metrics
from .experts import ExpertArtifact
from .dataset import Dataset, split_indices
from .legacy import FrozenModel

EPS = 1e-6


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    gate_fit_fraction: float = 0.75
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    seed: int = 0
    # "additive": boost from z + sum of expert outputs; "base": from the training base rate
    margin: str = "additive"
    # pick the tree count (0 .. n_trees) on gate_val: "auc", "logloss" or "none"
    early_stop: str = "auc"

    def __post_init__(self):
        if self.margin not in ("additive", "base"):
            raise AggregationError(f"unknown gate margin {self.margin!r}")
        if self.early_stop not in ("auc", "logloss", "none"):
            raise AggregationError(f"unknown early-stop rule {self.early_stop!r}")

    def gbdt_config(self) -> gbdt.GbdtConfig:
        return gbdt.GbdtConfig(self.n_trees, self.max_depth, self.learning_rate,
                               self.min_leaf, self.seed)


def interaction_vector(f, p):
    """(score, score - p, score / (p + eps)); works on scalars and arrays."""
    f = np.asarray(f, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = np.stack([f, f - p, f / (p + EPS)], axis=-1)
    return tuple(float(v) for v in out) if out.ndim == 1 else out


def feature_layout(feature_names: Sequence[str], expert_ids: Sequence[int]) -> list[str]:
    names = list(feature_names) + ["p_base"]
    for k in expert_ids:
        names += [f"phi{k}_score", f"phi{k}_delta", f"phi{k}_ratio"]
    return names


def additive_margin(X: np.ndarray, base_logit: np.ndarray,
                    experts: Sequence[ExpertArtifact]) -> np.ndarray:
    """Frozen logit plus every expert's logit-delta (at most one is active per row)."""
    z = np.asarray(base_logit, dtype=np.float64).copy()
    for e in experts:
        z += e.outputs(X)
    return z


def _check_order(experts: Sequence[ExpertArtifact]) -> None:
    ids = [e.region_id for e in experts]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise AggregationError(f"experts must be ordered by region id, got {ids}")


def build_context(X: np.ndarray, base_proba: np.ndarray,
                  experts: Sequence[ExpertArtifact]) -> np.ndarray:
    """[x (d), p_base (1), phi_1 .. phi_K (3K)] per row."""
    _check_order(experts)
    X = np.asarray(X, dtype=np.float64)
    p = np.asarray(base_proba, dtype=np.float64)
    for e in experts:
        if e.expr is not None and e.expr.schema and len(e.expr.schema) != X.shape[1]:
            raise AggregationError(f"expert {e.region_id} expects {len(e.expr.schema)} "
                                   f"features, rows have {X.shape[1]}")
    n, d = X.shape
    out = np.empty((n, d + 1 + 3 * len(experts)))
    out[:, :d] = X
    out[:, d] = p
    for k, e in enumerate(experts):
        out[:, d + 1 + 3 * k: d + 4 + 3 * k] = interaction_vector(e.outputs(X), p)
    return out


def context_for(data: Dataset, frozen: FrozenModel, experts: Sequence[ExpertArtifact]) -> np.ndarray:
    return build_context(data.X, frozen.base_proba(data), experts)


@dataclass(frozen=True, eq=False)
class GateModel:
    model: gbdt.GbdtModel | None
    layout: tuple[str, ...]
    expert_ids: tuple[int, ...]
    fallback: bool
    gate_val: dict = field(default_factory=dict)
    margin: str = "additive"

    def to_json(self) -> dict:
        return {"expert_ids": list(self.expert_ids), "feature_layout": list(self.layout),
                "gate": None if self.model is None else self.model.to_json(),
                "margin": self.margin, "fallback_flag": self.fallback,
                "gate_val": dict(self.gate_val)}

    @classmethod
    def from_json(cls, d: Mapping) -> "GateModel":
        model = None if d["gate"] is None else gbdt.GbdtModel.from_json(d["gate"])
        return cls(model, tuple(d["feature_layout"]), tuple(d["expert_ids"]),
                   bool(d["fallback_flag"]), dict(d.get("gate_val", {})),
                   str(d.get("margin", "base")))

    def offset(self, X: np.ndarray, base_logit: np.ndarray,
               experts: Sequence[ExpertArtifact]) -> np.ndarray | None:
        if self.margin == "additive":
            return additive_margin(X, base_logit, experts)
        return None


def passthrough_gate(feature_names: Sequence[str], experts: Sequence[ExpertArtifact],
                     reason: str) -> GateModel:
    ids = tuple(e.region_id for e in experts)
    return GateModel(None, tuple(feature_layout(feature_names, ids)), ids, True,
                     {"reason": reason}, "base")


def train_gate(train: Dataset, frozen: FrozenModel, experts: Sequence[ExpertArtifact],
               config: GateConfig | None = None) -> GateModel:
    """Fit the gate on an inner fold and keep it only if it beats the legacy
    model on the held-out gate_val fold."""
    config = config or GateConfig()
    if not 0.0 < config.gate_fit_fraction < 1.0:
        raise AggregationError("gate_fit_fraction must lie strictly between 0 and 1")
    _check_order(experts)
    fit_idx, val_idx = split_indices(train.y, config.gate_fit_fraction, config.seed)
    for name, idx in (("gate_fit", fit_idx), ("gate_val", val_idx)):
        if np.unique(train.y[idx]).size < 2:
            raise AggregationError(f"{name} fold has a single class")
    z = frozen.base_logit(train)
    ctx = build_context(train.X, expit(z), experts)
    offset = additive_margin(train.X, z, experts) if config.margin == "additive" else None
    model = gbdt.train(ctx[fit_idx], train.y[fit_idx], config.gbdt_config(),
                       feature_layout(train.feature_names, [e.region_id for e in experts]),
                       offset=None if offset is None else offset[fit_idx])
    y_val = train.y[val_idx]
    stages = gbdt.staged_logits(model, ctx[val_idx],
                                None if offset is None else offset[val_idx])
    stages = list(stages)
    aucs = [metrics.auc(y_val, s) for s in stages]
    # first optimum, so ties keep the smaller model
    if config.early_stop == "auc":
        n_used = int(np.argmax(aucs))
    elif config.early_stop == "logloss":
        n_used = int(np.argmin([metrics.logloss(y_val, expit(s)) for s in stages]))
    else:
        n_used = len(model.trees)
    model = gbdt.truncate(model, n_used)
    auc_gate = aucs[n_used]
    auc_base = metrics.auc(y_val, ctx[val_idx, train.d])
    ids = tuple(e.region_id for e in experts)
    return GateModel(model, tuple(model.feature_names), ids, auc_gate < auc_base,
                     {"gate_auc": auc_gate, "legacy_auc": auc_base, "n": int(val_idx.size),
                      "trees_used": n_used}, config.margin)


def predict_final(X: np.ndarray, base_logit: np.ndarray, experts: Sequence[ExpertArtifact],
                  gate: GateModel) -> np.ndarray:
    if tuple(e.region_id for e in experts) != gate.expert_ids:
        raise AggregationError("gate layout does not match the expert list")
    z = np.asarray(base_logit, dtype=np.float64)
    if gate.fallback or gate.model is None:
        return expit(z)
    ctx = build_context(X, expit(z), experts)
    if ctx.shape[1] != len(gate.layout):
        raise AggregationError(f"context width {ctx.shape[1]} != gate layout {len(gate.layout)}")
    return gbdt.predict_proba(gate.model, ctx, gate.offset(X, z, experts))


def predict_dataset(data: Dataset, frozen: FrozenModel, experts: Sequence[ExpertArtifact],
                    gate: GateModel) -> np.ndarray:
    return predict_final(data.X, frozen.base_logit(data), experts, gate)

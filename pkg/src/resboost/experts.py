"""Serialized per-region experts; the only piece of a chain the predict path needs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import expr as E
from .regions import Region


@dataclass(frozen=True)
class HistoryEntry:
    t: int
    summary: str
    accepted: bool
    reason: str
    category: str = ""

    def to_json(self) -> dict:
        return {"t": self.t, "summary": self.summary, "accepted": self.accepted,
                "reason": self.reason, "category": self.category}

    @classmethod
    def from_json(cls, d: Mapping) -> "HistoryEntry":
        return cls(int(d["t"]), d["summary"], bool(d["accepted"]), d["reason"],
                   d.get("category", ""))


@dataclass(frozen=True)
class ExpertArtifact:
    region: Region
    expr: E.ExpertExpr | None  # None for the null (identity) expert
    history: tuple[HistoryEntry, ...] = ()
    a_series: tuple[float, ...] = ()
    legacy_auc: float = math.nan
    boundary_refined: bool = False

    @property
    def region_id(self) -> int:
        return self.region.id

    @property
    def is_null(self) -> bool:
        return self.expr is None

    def outputs(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.expr is None:
            return np.zeros(X.shape[0])
        return E.evaluate_batch(self.expr, X)

    def to_json(self) -> dict:
        return {
            "region_id": self.region.id,
            "region": self.region.to_json(),
            "null": self.is_null,
            "dsl_text": None if self.expr is None else E.serialize(self.expr),
            "params": [] if self.expr is None else [p.to_json() for p in self.expr.params],
            "history": [h.to_json() for h in self.history],
            "metrics": {"A": list(self.a_series),
                        "legacy_auc": None if math.isnan(self.legacy_auc) else self.legacy_auc},
            "boundary_refined": self.boundary_refined,
        }

    @classmethod
    def from_json(cls, d: Mapping, feature_names: Sequence[str]) -> "ExpertArtifact":
        expr = None if d["dsl_text"] is None else E.parse(d["dsl_text"], feature_names)
        return cls(Region.from_json(d["region"], feature_names), expr,
                   tuple(HistoryEntry.from_json(h) for h in d["history"]),
                   tuple(d["metrics"]["A"]),
                   math.nan if d["metrics"]["legacy_auc"] is None else d["metrics"]["legacy_auc"],
                   bool(d.get("boundary_refined", False)))


def null_expert(region: Region, history=(), a_series=(), legacy_auc=math.nan) -> ExpertArtifact:
    return ExpertArtifact(region, None, tuple(history), tuple(a_series), legacy_auc)

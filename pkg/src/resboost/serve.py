"""Batch scoring from a saved bundle.

This module is the whole inference path. It reads artifacts and evaluates
trees and expressions; it never imports the optimizer or any provider.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .aggregator import GateModel, predict_final
from .dataset import DataError, Schema, load_features
from .experts import ExpertArtifact
from .legacy import FrozenModel


class BundleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ScoringBundle:
    schema: Schema
    frozen: FrozenModel
    experts: tuple[ExpertArtifact, ...]
    gate: GateModel

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.schema.feature_names

    def score(self, X: np.ndarray, row_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """(legacy_proba, final_proba) for a feature matrix in schema order."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise DataError(f"expected {len(self.feature_names)} feature columns, got {X.shape}")
        z = self.frozen.logits(X, row_ids, self.feature_names)
        return expit(z), predict_final(X, z, self.experts, self.gate)


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise BundleError(f"bundle is missing {path.name} ({path})")
    return json.loads(path.read_text(encoding="utf-8"))


def load_experts(bundle: Path, feature_names: Sequence[str], ids: Sequence[int]) -> list[ExpertArtifact]:
    return [ExpertArtifact.from_json(read_json(bundle / "experts" / f"expert_{k}.json")["expert"],
                                     feature_names) for k in ids]


def load_bundle(path: str | Path) -> ScoringBundle:
    bundle = Path(path)
    if not bundle.is_dir():
        raise BundleError(f"no bundle directory at {bundle}")
    schema = Schema.from_json(read_json(bundle / "schema.json")["schema"])
    frozen = FrozenModel.from_json(read_json(bundle / "legacy.json")["legacy"])
    gate = GateModel.from_json(read_json(bundle / "aggregate.json")["aggregate"])
    experts = load_experts(bundle, schema.feature_names, gate.expert_ids)
    return ScoringBundle(schema, frozen, tuple(experts), gate)


def write_scores(path: str | Path, row_ids: Sequence[str], legacy: np.ndarray,
                 final: np.ndarray, extra: dict[str, Sequence] | None = None) -> None:
    """CSV with repr-formatted floats so values survive a round trip exactly."""
    extra = extra or {}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", *extra, "legacy_proba", "final_proba"])
        cols = list(extra.values())
        for i, rid in enumerate(row_ids):
            w.writerow([rid, *(c[i] for c in cols), repr(float(legacy[i])), repr(float(final[i]))])


def predict(bundle: str | Path, input_csv: str | Path, output_csv: str | Path) -> int:
    """Score ``input_csv`` with a saved bundle; returns the row count."""
    b = load_bundle(bundle)
    X, ids = load_features(input_csv, b.schema)
    legacy, final = b.score(X, ids)
    write_scores(output_csv, ids, legacy, final)
    return len(ids)

"""Read-only wrapper around the frozen scorer being boosted."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import gbdt
from .dataset import Dataset

P_CLIP = 1e-6


class LegacyError(ValueError):
    pass


def _clipped_logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    return np.log(p / (1.0 - p))


class FrozenModel:
    """Base logits/probabilities from either an internal GBDT or a score table.

    There is no mutating method; the fingerprint is a content hash of the
    source and is fixed at construction.
    """

    __slots__ = ("_model", "_columns", "_table", "_fingerprint", "_kind")

    def __init__(self, *, model=None, columns=None, table=None, fingerprint: str, kind: str):
        object.__setattr__(self, "_model", model)
        object.__setattr__(self, "_columns", columns)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_fingerprint", fingerprint)
        object.__setattr__(self, "_kind", kind)

    def __setattr__(self, name, value):
        raise AttributeError("FrozenModel is immutable")

    def __reduce__(self):
        table = None if self._table is None else dict(self._table)
        return (_restore, (self._model, self._columns, table, self._fingerprint, self._kind))

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def model(self) -> "gbdt.GbdtModel | None":
        return self._model

    @property
    def feature_names(self) -> tuple[str, ...] | None:
        return self._columns

    @classmethod
    def from_gbdt(cls, model: gbdt.GbdtModel,
                  feature_names: Sequence[str] | None = None) -> "FrozenModel":
        """Wrap a trained model.

        ``feature_names`` (or the model's own stored names) selects the input
        columns by name when scoring a Dataset; without names the dataset's
        full matrix is passed through.
        """
        names = tuple(feature_names) if feature_names is not None else model.feature_names
        if names is not None and len(names) != model.n_features:
            raise LegacyError("feature_names length does not match the model")
        text = model.dumps() + json.dumps(names)
        fp = hashlib.sha256(text.encode()).hexdigest()
        return cls(model=model, columns=names, fingerprint=fp, kind="gbdt")

    @classmethod
    def from_scores(cls, scores: Mapping[str, float]) -> "FrozenModel":
        table = {}
        for rid, p in scores.items():
            p = float(p)
            if not 0.0 <= p <= 1.0 or math.isnan(p):
                raise LegacyError(f"probability {p} for row {rid!r} outside [0, 1]")
            table[str(rid)] = p
        canon = "\n".join(f"{k},{table[k]!r}" for k in sorted(table))
        fp = hashlib.sha256(canon.encode()).hexdigest()
        return cls(table=MappingProxyType(table), fingerprint=fp, kind="score_file")

    @classmethod
    def from_score_file(cls, path: str | Path) -> "FrozenModel":
        path = Path(path)
        if not path.is_file():
            raise LegacyError(f"no such score file: {path}")
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"row_id", "probability"} <= set(reader.fieldnames):
                raise LegacyError(f"{path}: header must contain row_id,probability")
            scores = {}
            for line, row in enumerate(reader, start=2):
                try:
                    scores[row["row_id"].strip()] = float(row["probability"])
                except ValueError:
                    raise LegacyError(f"{path}: bad probability on line {line}") from None
        return cls.from_scores(scores)

    def _matrix(self, X: np.ndarray, feature_names: Sequence[str] | None) -> np.ndarray:
        if self._columns is None or feature_names is None:
            return X
        pos = {n: j for j, n in enumerate(feature_names)}
        missing = [c for c in self._columns if c not in pos]
        if missing:
            raise LegacyError(f"legacy model needs missing feature(s): {missing}")
        return X[:, [pos[c] for c in self._columns]]

    def logits(self, X=None, row_ids: Sequence[str] | None = None,
               feature_names: Sequence[str] | None = None) -> np.ndarray:
        if self._kind == "gbdt":
            if X is None:
                raise LegacyError("internal legacy model needs feature rows")
            X = np.atleast_2d(np.asarray(X, dtype=np.float64))
            return gbdt.predict_logits(self._model, self._matrix(X, feature_names))
        if row_ids is None:
            raise LegacyError("score-file legacy model needs row ids")
        try:
            p = np.array([self._table[str(r)] for r in row_ids], dtype=np.float64)
        except KeyError as e:
            raise LegacyError(f"row_id {e.args[0]!r} not in score file") from None
        return _clipped_logit(p)

    def base_logit(self, data: Dataset) -> np.ndarray:
        return self.logits(data.X, data.row_ids, data.feature_names)

    def base_proba(self, data: Dataset) -> np.ndarray:
        return expit(self.base_logit(data))

    def logit_row(self, x=None, row_id: str | None = None,
                  feature_names: Sequence[str] | None = None) -> float:
        ids = None if row_id is None else [row_id]
        X = None if x is None else np.asarray(x, dtype=np.float64)[None, :]
        return float(self.logits(X, ids, feature_names)[0])

    def to_json(self) -> dict:
        if self._kind == "gbdt":
            return {"kind": "gbdt", "fingerprint": self._fingerprint,
                    "feature_names": list(self._columns) if self._columns else None,
                    "model": self._model.to_json()}
        return {"kind": "score_file", "fingerprint": self._fingerprint,
                "scores": {k: self._table[k] for k in sorted(self._table)}}

    @classmethod
    def from_json(cls, d: Mapping) -> "FrozenModel":
        if d["kind"] == "gbdt":
            fm = cls.from_gbdt(gbdt.GbdtModel.from_json(d["model"]), d.get("feature_names"))
        else:
            fm = cls.from_scores(d["scores"])
        if fm.fingerprint != d["fingerprint"]:
            raise LegacyError("legacy artifact fingerprint mismatch")
        return fm


def _restore(model, columns, table, fingerprint, kind) -> FrozenModel:
    table = None if table is None else MappingProxyType(table)
    return FrozenModel(model=model, columns=columns, table=table,
                       fingerprint=fingerprint, kind=kind)

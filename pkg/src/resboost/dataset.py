"""CSV ingestion, stratified splitting and per-feature IV/PSI statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?"})


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "numeric" | "categorical"
    median: float = 0.0
    categories: tuple[str, ...] = ()

    def expanded_names(self) -> list[str]:
        if self.kind == "numeric":
            return [self.name]
        return [f"{self.name}={c}" for c in self.categories]

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "median": self.median,
                "categories": list(self.categories)}

    @classmethod
    def from_json(cls, d: Mapping) -> "ColumnSpec":
        return cls(d["name"], d["kind"], float(d["median"]), tuple(d["categories"]))


@dataclass(frozen=True)
class Schema:
    """Preprocessing recipe; replaying it on new files yields the same feature layout."""

    columns: tuple[ColumnSpec, ...]
    target_column: str | None
    id_column: str | None

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(n for c in self.columns for n in c.expanded_names())

    def to_json(self) -> dict:
        return {"columns": [c.to_json() for c in self.columns],
                "target_column": self.target_column, "id_column": self.id_column}

    @classmethod
    def from_json(cls, d: Mapping) -> "Schema":
        return cls(tuple(ColumnSpec.from_json(c) for c in d["columns"]),
                   d.get("target_column"), d.get("id_column"))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    row_ids: tuple[str, ...]
    feature_descriptions: tuple[str, ...] | None = None
    schema: Schema | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        n, d = X.shape
        if n < 1 or d < 1:
            raise DataError(f"dataset needs n >= 1 and d >= 1, got {X.shape}")
        if y.shape != (n,):
            raise DataError("target length does not match row count")
        if not np.isin(y, (0, 1)).all():
            raise DataError("target values must be 0 or 1")
        if not np.isfinite(X).all():
            raise DataError("non-finite feature values")
        if len(self.feature_names) != d or len(set(self.feature_names)) != d:
            raise DataError("feature names must be unique, one per column")
        if len(self.row_ids) != n:
            raise DataError("row_ids length does not match row count")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "row_ids", tuple(str(r) for r in self.row_ids))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}") from None

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.feature_names,
                       tuple(self.row_ids[i] for i in idx),
                       self.feature_descriptions, self.schema)


def _parse_float(s: str) -> float | None:
    s = s.strip()
    if s.lower() in MISSING_TOKENS:
        return None
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _parse_target(raw: str, line: int) -> int:
    v = _parse_float(raw)
    if v is None or v not in (0.0, 1.0):
        raise DataError(f"target value {raw!r} on line {line} is not 0/1")
    return int(v)


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: line {i + 2} has {len(r)} fields, expected {len(header)}")
    return header, rows


def _infer_schema(header, rows, target_column, id_column) -> Schema:
    cols = []
    for j, name in enumerate(header):
        if name in (target_column, id_column):
            continue
        raw = [r[j].strip() for r in rows]
        present = [s for s in raw if s.lower() not in MISSING_TOKENS]
        values = [_parse_float(s) for s in present]
        if present and all(v is not None for v in values):
            cols.append(ColumnSpec(name, "numeric", float(np.median(values))))
        elif present:
            cols.append(ColumnSpec(name, "categorical", categories=tuple(sorted(set(present)))))
        else:
            raise DataError(f"column {name!r} has no parseable values")
    return Schema(tuple(cols), target_column, id_column)


def _apply_schema(schema: Schema, header, rows) -> np.ndarray:
    pos = {h: j for j, h in enumerate(header)}
    missing = [c.name for c in schema.columns if c.name not in pos]
    if missing:
        raise DataError(f"input is missing feature column(s): {', '.join(missing)}")
    blocks = []
    for c in schema.columns:
        raw = [r[pos[c.name]].strip() for r in rows]
        if c.kind == "numeric":
            vals = [_parse_float(s) for s in raw]
            for s, v in zip(raw, vals):
                if v is None and s.lower() not in MISSING_TOKENS:
                    raise DataError(f"column {c.name!r}: cannot parse {s!r} as a number")
            blocks.append(np.array([[c.median if v is None else v] for v in vals], dtype=np.float64))
        else:
            onehot = np.zeros((len(rows), len(c.categories)))
            lookup = {cat: k for k, cat in enumerate(c.categories)}
            for i, s in enumerate(raw):
                k = lookup.get(s)
                if k is not None:
                    onehot[i, k] = 1.0
            blocks.append(onehot)
    return np.hstack(blocks) if blocks else np.zeros((len(rows), 0))


def load_csv(path: str | Path, target_column: str,
             descriptions: Mapping[str, str] | None = None,
             id_column: str | None = "row_id") -> Dataset:
    """Read a labelled CSV.

    Numeric columns get median imputation; any column with a non-numeric
    value is one-hot expanded with categories in lexicographic order. If
    ``id_column`` is present in the header it supplies the row ids, otherwise
    ids are the 0-based row positions.
    """
    path = Path(path)
    header, rows = _read_rows(path)
    if target_column not in header:
        raise DataError(f"{path}: target column {target_column!r} not found")
    if not rows:
        raise DataError(f"{path}: no data rows")
    id_col = id_column if id_column in header else None
    schema = _infer_schema(header, rows, target_column, id_col)
    X = _apply_schema(schema, header, rows)
    t = header.index(target_column)
    y = np.array([_parse_target(r[t], i + 2) for i, r in enumerate(rows)])
    if id_col is not None:
        j = header.index(id_col)
        row_ids = tuple(r[j].strip() for r in rows)
        if len(set(row_ids)) != len(row_ids):
            raise DataError(f"{path}: duplicate values in id column {id_col!r}")
    else:
        row_ids = tuple(str(i) for i in range(len(rows)))
    names = schema.feature_names
    desc = None
    if descriptions is not None:
        desc = tuple(descriptions.get(n, descriptions.get(n.split("=")[0], "")) for n in names)
    return Dataset(X, y, names, row_ids, desc, schema)


def load_features(path: str | Path, schema: Schema) -> tuple[np.ndarray, tuple[str, ...]]:
    """Replay a stored schema on an (optionally unlabelled) CSV."""
    path = Path(path)
    header, rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = _apply_schema(schema, header, rows)
    if schema.id_column and schema.id_column in header:
        j = header.index(schema.id_column)
        ids = tuple(r[j].strip() for r in rows)
    else:
        ids = tuple(str(i) for i in range(len(rows)))
    return X, ids


def write_csv(data: Dataset, path: str | Path, target_column: str = "target",
              id_column: str = "row_id") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([id_column, *data.feature_names, target_column])
        for rid, row, y in zip(data.row_ids, data.X, data.y):
            w.writerow([rid, *(repr(float(v)) for v in row), int(y)])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _allocate(total: int, sizes: list[int]) -> list[int]:
    # largest-remainder apportionment of `total` across strata
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in order[: total - sum(alloc)]:
        alloc[k] += 1
    return alloc


def split_indices(y: np.ndarray, train_fraction: float, seed: int,
                  stratify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    n = len(y)
    if n < 2:
        raise DataError("split needs at least 2 rows")
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = min(max(_round_half_up(train_fraction * n), 1), n - 1)
    rng = np.random.default_rng(seed)
    counts = [int((y == c).sum()) for c in (0, 1)]
    if stratify and min(counts) >= 2:
        strata = [np.flatnonzero(y == c) for c in (0, 1)]
        alloc = _allocate(n_train, counts)
        picked = [rng.permutation(s)[:a] for s, a in zip(strata, alloc)]
        train = np.concatenate(picked)
    else:
        train = rng.permutation(n)[:n_train]
    mask = np.zeros(n, dtype=bool)
    mask[train] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def split(data: Dataset, train_fraction: float = 0.8, seed: int = 0,
          stratify: bool = True) -> tuple[Dataset, Dataset]:
    tr, va = split_indices(data.y, train_fraction, seed, stratify)
    return data.subset(tr), data.subset(va)


@dataclass(frozen=True)
class FeatureSummary:
    name: str
    min: float
    max: float
    mean: float
    deciles: tuple[float, ...]  # 10%, 20%, ..., 90%
    iv: float
    psi: float

    @property
    def interdecile_range(self) -> float:
        return self.deciles[-1] - self.deciles[0]

    def to_json(self) -> dict:
        return {"name": self.name, "min": self.min, "max": self.max, "mean": self.mean,
                "deciles": list(self.deciles), "iv": self.iv, "psi": self.psi}


@dataclass(frozen=True)
class FeatureStats:
    features: tuple[FeatureSummary, ...]

    def __getitem__(self, name: str) -> FeatureSummary:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def ranked_by_iv(self) -> list[FeatureSummary]:
        return sorted(self.features, key=lambda f: (-f.iv, f.name))

    def to_json(self) -> list[dict]:
        return [f.to_json() for f in self.features]


def quantile_edges(values: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Inner bin edges at train quantiles; edges are observed values so that
    binning commutes with strictly increasing transforms."""
    qs = np.arange(1, n_bins) / n_bins
    return np.unique(np.quantile(values, qs, method="inverted_cdf"))


def bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # x <= edge goes left, matching the tree split convention
    return np.searchsorted(edges, values, side="left")


def _shares(counts: np.ndarray, smoothing: float) -> np.ndarray:
    c = counts.astype(np.float64) + smoothing
    return c / c.sum()


def information_value(bins: np.ndarray, y: np.ndarray, n_bins: int,
                      smoothing: float = 0.5) -> float:
    y = np.asarray(y)
    if y.min() == y.max():
        raise DataError("information value needs both classes in the training set")
    pos = np.bincount(bins[y == 1], minlength=n_bins)
    neg = np.bincount(bins[y == 0], minlength=n_bins)
    g, b = _shares(pos, smoothing), _shares(neg, smoothing)
    return float(np.sum((g - b) * np.log(g / b)))


def population_stability(train_bins: np.ndarray, val_bins: np.ndarray, n_bins: int,
                         smoothing: float = 0.5) -> float:
    if len(val_bins) == 0:
        raise DataError("population stability needs a non-empty validation set")
    p = _shares(np.bincount(train_bins, minlength=n_bins), smoothing)
    q = _shares(np.bincount(val_bins, minlength=n_bins), smoothing)
    return float(np.sum((p - q) * np.log(p / q)))


def feature_stats(train: Dataset, val: Dataset, n_bins: int = 10,
                  smoothing: float = 0.5) -> FeatureStats:
    if train.feature_names != val.feature_names:
        raise DataError("train and validation schemas differ")
    if val.n == 0:
        raise DataError("empty validation set")
    out = []
    for j, name in enumerate(train.feature_names):
        col = train.X[:, j]
        edges = quantile_edges(col, n_bins)
        k = len(edges) + 1
        tb, vb = bin_index(col, edges), bin_index(val.X[:, j], edges)
        deciles = np.quantile(col, np.arange(1, 10) / 10)
        out.append(FeatureSummary(
            name=name, min=float(col.min()), max=float(col.max()), mean=float(col.mean()),
            deciles=tuple(float(v) for v in deciles),
            iv=information_value(tb, train.y, k, smoothing),
            psi=population_stability(tb, vb, k, smoothing),
        ))
    return FeatureStats(tuple(out))

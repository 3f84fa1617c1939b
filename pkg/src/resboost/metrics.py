"""Binary scoring metrics and comparison reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

LOGLOSS_CLIP = 1e-9


class MetricError(ValueError):
    pass


def _check(y, s) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    s = np.asarray(s, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise MetricError(f"length mismatch: {y.shape} vs {s.shape}")
    return y, s


def _both_classes(y: np.ndarray) -> tuple[int, int]:
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("metric needs both classes present")
    return n_pos, n_neg


def auc(y, s) -> float:
    """Mann-Whitney AUC; tied pos/neg pairs count one half."""
    y, s = _check(y, s)
    n_pos, n_neg = _both_classes(y)
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ks(y, s) -> float:
    """Max |TPR - FPR| over cutoffs ``s >= t``."""
    y, s = _check(y, s)
    n_pos, n_neg = _both_classes(y)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order] == 1)
    fp = np.cumsum(y[order] == 0)
    # evaluate only where the cutoff value changes
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    gap = np.abs(tp[last] / n_pos - fp[last] / n_neg)
    return float(gap.max())


def logloss(y, p) -> float:
    y, p = _check(y, p)
    p = np.clip(p, LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def accuracy(y, p, threshold: float = 0.5) -> float:
    y, p = _check(y, p)
    return float(np.mean((p >= threshold).astype(int) == y))


@dataclass
class EvalReport:
    auc: float
    ks: float
    accuracy: float
    logloss: float
    n: int
    deltas: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(y, p) -> EvalReport:
    return EvalReport(auc(y, p), ks(y, p), accuracy(y, p), logloss(y, p), len(y))


def compare(report: EvalReport, baseline: EvalReport) -> EvalReport:
    out = EvalReport(**{k: v for k, v in asdict(report).items() if k != "deltas"})
    out.deltas = {k: getattr(report, k) - getattr(baseline, k)
                  for k in ("auc", "ks", "accuracy", "logloss")}
    return out


def format_reports(rows: dict[str, EvalReport]) -> str:
    cols = ("auc", "ks", "accuracy", "logloss", "n")
    width = max(len(k) for k in rows) + 2
    lines = [" " * width + "".join(f"{c:>12}" for c in cols)]
    for name, r in rows.items():
        vals = "".join(f"{getattr(r, c):>12.6f}" if c != "n" else f"{r.n:>12d}" for c in cols)
        lines.append(f"{name:<{width}}{vals}")
        if r.deltas:
            d = "".join(f"{r.deltas[c]:>+12.6f}" for c in cols[:-1])
            lines.append(f"{'  delta':<{width}}{d}")
    return "\n".join(lines) + "\n"


def reports_json(rows: dict[str, EvalReport]) -> str:
    return json.dumps({k: v.to_json() for k, v in rows.items()}, indent=2, sort_keys=True)

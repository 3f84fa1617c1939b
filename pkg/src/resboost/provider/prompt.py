"""Prompt assembly for candidate generation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .. import expr as E
from ..dataset import Dataset, FeatureStats

TAGS = ("FALSE_NEG", "FALSE_POS", "HIGH_UNCERTAINTY", "CONFIDENT_OK")
UNCERTAIN_BAND = 0.1
PSI_WARN = 0.1
PSI_ALERT = 0.25

TASK_HEADER = """\
You improve a frozen binary scorer inside one region of feature space by \
writing a guarded correction expert. The expert adds a logit delta to the \
frozen model's logit for rows that satisfy its guard and returns 0 elsewhere.

Expert language:
  if <clause> and <clause> ... then <expr> else 0
  clause: `feature` (<|<=|>|>=) number-or-parameter
  expr: numbers, `feature`, parameters, + - * /, parentheses and the functions
        exp log1p tanh sigmoid abs sqrt min(a,b) max(a,b) gauss(u,mu,s) clip(x,lo,hi)
  parameter: p{name=value} (tunable) or p{name=value,frozen} (fixed)
Division, sqrt, log1p and gauss are protected; the body is capped to [-3, 3].

Rules:
  - Keep every frozen parameter exactly as written.
  - Keep the region guard; you may add clauses that narrow it.
  - Introduce new tunable parameters for anything that should be fitted.

Answer with:
  1. one fenced code block holding the full expert,
  2. a line `SEARCH_SPACE:` followed by a JSON list of
     {"name", "lower", "upper", "scale"} for every tunable parameter,
  3. a line `INTENT:` with a one-line summary of the modification."""


def error_tag(y: int, p: float) -> str:
    """Uncertainty band first, then misclassification at 0.5."""
    if abs(p - 0.5) <= UNCERTAIN_BAND:
        return "HIGH_UNCERTAINTY"
    if y == 1 and p < 0.5:
        return "FALSE_NEG"
    if y == 0 and p >= 0.5:
        return "FALSE_POS"
    return "CONFIDENT_OK"


@dataclass(frozen=True)
class PromptBundle:
    task_header: str
    region_rule: str
    seed_function: str
    stats_block: str
    samples_block: str
    constraints_block: str
    sample_rows: tuple[int, ...] = ()
    context: dict = field(default_factory=dict, compare=False)

    def user_text(self) -> str:
        parts = [("REGION", self.region_rule), ("CURRENT EXPERT", self.seed_function),
                 ("FEATURE STATISTICS", self.stats_block), ("SAMPLES", self.samples_block),
                 ("HISTORY", self.constraints_block)]
        return "\n\n".join(f"## {h}\n{b}" for h, b in parts)

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.task_header},
                {"role": "user", "content": self.user_text()}]

    def digest(self) -> str:
        return hashlib.sha256((self.task_header + self.user_text()).encode()).hexdigest()


def _stratified(groups: dict[str, np.ndarray], n: int, rng: np.random.Generator) -> list[int]:
    """Spread ``n`` picks as evenly as possible over the non-empty groups."""
    sizes = {t: len(g) for t, g in groups.items() if len(g)}
    alloc = dict.fromkeys(sizes, 0)
    left = n
    while left > 0:
        open_tags = [t for t in TAGS if t in sizes and alloc[t] < sizes[t]]
        if not open_tags:
            break
        for t in open_tags:
            if left == 0:
                break
            alloc[t] += 1
            left -= 1
    picked = []
    for t in TAGS:
        if alloc.get(t):
            picked.extend(int(i) for i in rng.choice(groups[t], alloc[t], replace=False))
    return picked


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def residual_association(X: np.ndarray, r: np.ndarray, names: Sequence[str],
                         feats: Sequence[str], n_pairs: int = 5):
    """Correlation of each feature, and of the strongest pairwise products,
    with the residual left inside the region."""
    col = {n: X[:, names.index(n)] for n in feats}
    single = {f: _corr(col[f], r) for f in feats}
    pairs = {}
    for i, a in enumerate(feats):
        for b in feats[i + 1:]:
            pairs[f"{a}*{b}"] = _corr(col[a] * col[b], r)
    top = sorted(pairs, key=lambda k: (-abs(pairs[k]), k))[:n_pairs]
    return single, {k: pairs[k] for k in top}


def build_prompt(state, data: Dataset, stats: FeatureStats, base_logit: np.ndarray,
                 N: int = 20, m_top: int = 8, seed: int = 0) -> PromptBundle:
    """Assemble the five prompt blocks from chain state and region rows of ``data``."""
    region = state.region
    members = np.flatnonzero(region.contains(data.X))
    if members.size == 0:
        raise ValueError(f"region {region.id} has no rows in the sampling split")
    z = np.asarray(base_logit, dtype=np.float64)
    p = expit(z)
    tags = np.array([error_tag(int(data.y[i]), float(p[i])) for i in members])
    groups = {t: members[tags == t] for t in TAGS}
    rng = np.random.default_rng([seed, region.id, state.t])
    rows = _stratified(groups, min(N, members.size), rng)

    seed_text = E.serialize(state.seed)
    free = [s.name for s in state.seed.params if not s.frozen]
    frozen = [s.name for s in state.seed.params if s.frozen]
    seed_block = "\n".join([
        "```", seed_text, "```",
        f"validation AUC of the current expert: {state.metric:.6f}",
        f"tunable: {', '.join(free) or 'none'}; frozen: {', '.join(frozen) or 'none'}",
    ])

    ranked = stats.ranked_by_iv()[:m_top]
    stat_lines = []
    for s in ranked:
        flag = "unstable" if s.psi > PSI_ALERT else "drifting" if s.psi > PSI_WARN else "stable"
        stat_lines.append(f"{s.name}: IV={s.iv:.4f} PSI={s.psi:.4f} ({flag}) "
                          f"min={_fmt(s.min)} p10={_fmt(s.deciles[0])} mean={_fmt(s.mean)} "
                          f"p90={_fmt(s.deciles[-1])} max={_fmt(s.max)}")

    names = data.feature_names
    fused = expit(z[members] + E.evaluate_batch(state.seed, data.X[members]))
    resid = data.y[members] - fused
    top_names = [s.name for s in ranked]
    single, pairs = residual_association(data.X[members], resid, list(names), top_names)
    stat_lines.append("residual association inside the region (corr with y - current fused p):")
    stat_lines.append("  " + ", ".join(f"{f}={single[f]:+.3f}" for f in top_names))
    stat_lines.append("  products: " + ", ".join(f"{k}={v:+.3f}" for k, v in pairs.items()))

    sample_lines = []
    for i in rows:
        vals = ", ".join(f"{n}={_fmt(data.X[i, j])}" for j, n in enumerate(names))
        sample_lines.append(f"[{error_tag(int(data.y[i]), float(p[i]))}] {vals}; "
                            f"y={int(data.y[i])}; p_base={p[i]:.4f}")

    positives = [h.summary for h in state.history if h.accepted]
    negatives = [h.summary for h in state.history if not h.accepted]
    cons = ["accepted (build on these):"] + [f"  + {s}" for s in positives or ["none"]]
    cons += ["rejected (do not repeat):"] + [f"  - {s}" for s in negatives or ["none"]]

    region_feats = sorted({c.feature for c in region.clauses},
                          key=lambda f: (-stats[f].iv, f))
    box = getattr(state, "box", region.clauses)
    context = {
        "seed_dsl": seed_text,
        "feature_names": list(names),
        "top_features": top_names,
        "association": single,
        "pair_association": pairs,
        "region_features": region_feats,
        "ranges": {s.name: (s.min, s.max) for s in stats.features},
        "deciles": {s.name: (s.deciles[0], s.deciles[-1]) for s in stats.features},
        "box": {c.feature: (c.lower, c.upper) for c in box},
        "positives": positives,
        "negatives": negatives,
        "t": state.t,
    }
    return PromptBundle(TASK_HEADER, region.describe(), seed_block, "\n".join(stat_lines),
                        "\n".join(sample_lines), "\n".join(cons), tuple(rows), context)


def repair_text(report, attempt: int, max_attempts: int) -> str:
    return (f"Your previous answer was rejected (attempt {attempt} of {max_attempts}).\n"
            f"Error: {report}\n"
            "Send a corrected answer in the same format: one fenced expert, "
            "SEARCH_SPACE: JSON, INTENT: line.")


def describe_space(entries: Sequence) -> str:
    return ", ".join(f"{s.name} in [{_fmt(s.lower)}, {_fmt(s.upper)}] ({s.scale})" for s in entries)

"""Per-region outer loop: propose, tune, fuse-evaluate, annealed accept."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import expr as E
from . import metrics, tpe
from .dataset import Dataset, FeatureStats
from .experts import ExpertArtifact, HistoryEntry, null_expert
from .legacy import FrozenModel
from .provider import (IterationFailed, ProviderError, ValidationError, build_prompt,
                       validate)
from .regions import INF, Clause, RefinementPlan, Region

log = logging.getLogger(__name__)


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    T: int = 12
    success_target: int = 5
    tau0: float = 0.002
    tau_decay: float = 0.5
    N: int = 20
    m_top: int = 8
    R: int = 3
    window: float = 0.1
    seed: int = 0


@dataclass
class ChainState:
    region: Region
    seed: E.ExpertExpr
    metric: float
    t: int = 0
    successes: int = 0
    history: list[HistoryEntry] = field(default_factory=list)
    tau0: float = 0.002
    tau_decay: float = 0.5
    boundary_refined: bool = False
    box: tuple[Clause, ...] = ()
    a_series: list[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ChainContext:
    """Read-only inputs shared by every iteration of one chain."""

    frozen: FrozenModel
    train: Dataset
    val: Dataset
    stats: FeatureStats
    base_train: np.ndarray  # legacy logits on train
    base_val: np.ndarray    # legacy logits on val
    legacy_val_auc: float
    plan: RefinementPlan | None = None

    @classmethod
    def build(cls, frozen: FrozenModel, train: Dataset, val: Dataset, stats: FeatureStats,
              plan: RefinementPlan | None = None) -> "ChainContext":
        zt, zv = frozen.base_logit(train), frozen.base_logit(val)
        return cls(frozen, train, val, stats, zt, zv, metrics.auc(val.y, zv), plan)


def tau(t: int, tau0: float = 0.002, decay: float = 0.5) -> float:
    return tau0 * decay ** (t - 1)


def accept(a_t: float, a_prev: float, tau_t: float) -> bool:
    return a_t > a_prev - tau_t


def round_theta(theta: Mapping[str, float]) -> dict[str, float]:
    """Round to the precision the DSL serializes, so artifacts replay exactly."""
    return {k: float(E.format_number(v)) for k, v in theta.items()}


def _guard_text(clauses: Sequence[Clause]) -> str:
    parts = []
    for c in clauses:
        if c.lower > -INF:
            parts.append(f"`{c.feature}` > {E.format_number(c.lower)}")
        if c.upper < INF:
            parts.append(f"`{c.feature}` <= {E.format_number(c.upper)}")
    return " and ".join(parts)


def init_seed(region: Region, feature_names: Sequence[str]) -> E.ExpertExpr:
    """Guarded constant ``c0 = 0``: fusion starts out identical to the legacy model."""
    if not region.clauses:
        raise ChainError("a region needs at least one clause")
    return E.parse(f"if {_guard_text(region.clauses)} then p{{c0=0}} else 0", feature_names)


def inner_objective(expr: E.ExpertExpr, frozen: FrozenModel | None, fit: Dataset,
                    base_logit: np.ndarray | None = None):
    """theta -> mean logloss of sigmoid(legacy logit + expert) over ``fit``."""
    if fit.n == 0:
        raise ChainError("empty fit set")
    z = frozen.base_logit(fit) if base_logit is None else np.asarray(base_logit, dtype=np.float64)
    X, y = fit.X, fit.y

    def loss(theta: Mapping[str, float]) -> float:
        return metrics.logloss(y, expit(z + E.evaluate_batch(expr, X, theta)))

    return loss


def fit_indices(ctx: ChainContext, region: Region) -> np.ndarray:
    inside = ctx.plan.contains(ctx.train.X) if ctx.plan is not None else region.contains(ctx.train.X)
    return np.flatnonzero(inside)


def _boundary_slots(e: E.ExpertExpr, plan: RefinementPlan | None):
    """Turn the region's literal thresholds into tunable boundary slots."""
    if plan is None or not plan.windows:
        return e, []

    def window_for(c: E.Comparison):
        side = "lower" if c.op in (">", ">=") else "upper"
        w = plan.window(c.feature.name, side)
        if w is None or float(E.format_number(w.value)) != c.rhs.value:
            return None
        return w

    e2, mapping = E.parameterize_guard(e, pick=lambda c: window_for(c) is not None)
    dims = []
    for name, clause in mapping.items():
        w = window_for(clause)
        dims.append(tpe.Dim(name, w.low, w.high))
    return e2, dims


def _category(report) -> str:
    kind = getattr(report, "kind", "")
    if kind in ("syntax", "lexical", "arity", "duplicate-parameter", "unknown-function",
                "extraction"):
        return "syntax"
    if kind == "unknown-feature":
        return "unknown-feature"
    return "validation"


def _seed_for(config: ChainConfig, region_id: int, t: int) -> int:
    return (config.seed * 1_000_003 + region_id * 10_007 + t) % (2 ** 31)


def run_iteration(state: ChainState, provider, ctx: ChainContext, config: ChainConfig,
                  tpe_config: tpe.TpeConfig) -> tuple[ChainState, dict]:
    """One outer step. Never raises for candidate problems; they become rejections."""
    t = state.t + 1
    names = ctx.train.feature_names
    record = {"t": t, "candidate_text": None, "search_space": None, "theta_star": None,
              "A_t": None, "accepted": False, "reason": ""}

    def finish(entry: HistoryEntry, **changes):
        record["reason"] = entry.reason
        new = replace(state, t=t, history=state.history + [entry], **changes)
        return new, record

    prompt = build_prompt(state, ctx.train, ctx.stats, ctx.base_train,
                          N=config.N, m_top=config.m_top, seed=config.seed)
    iter_seed = _seed_for(config, state.region.id, t)
    cand, valid, report, attempt = None, None, None, 0
    try:
        cand = provider.propose(prompt, iter_seed)
        while valid is None:
            try:
                valid = validate(cand, names, state.seed, state.box)
            except ValidationError as err:
                report = err.report
                attempt += 1
                cand = provider.repair(prompt, cand, report, attempt, config.R)
    except IterationFailed:
        record["candidate_text"] = cand.dsl_text if cand else None
        summary = (cand.intent if cand and cand.intent else "unparseable candidate")
        return finish(HistoryEntry(t, summary, False, f"repair failed: {report}",
                                   _category(report)))
    except ProviderError as err:
        return finish(HistoryEntry(t, "provider failure", False, str(err), "transport"))

    expr, space = valid.expr, valid.space
    refined_now = False
    if not state.boundary_refined:
        expr, extra = _boundary_slots(expr, ctx.plan)
        if extra:
            space = tpe.SearchSpace(tuple(extra) + space.dims, space.frozen)
            refined_now = True
    record["candidate_text"] = E.serialize(expr)
    record["search_space"] = [d.to_json() for d in space.dims]

    idx = fit_indices(ctx, state.region)
    fit = ctx.train.subset(idx)
    objective = inner_objective(expr, None, fit, ctx.base_train[idx])
    cfg = replace(tpe_config, seed=iter_seed)
    theta, _, trials = tpe.optimize(objective, space, cfg)
    theta = round_theta(theta)
    tuned = E.with_values(expr, theta)
    a_t = metrics.auc(ctx.val.y, ctx.base_val + E.evaluate_batch(tuned, ctx.val.X))
    tau_t = tau(t, state.tau0, state.tau_decay)
    record["theta_star"] = {k: theta[k] for k in sorted(theta)}
    record["A_t"] = a_t
    summary = valid.candidate.intent or "unnamed modification"
    if accept(a_t, state.metric, tau_t):
        record["accepted"] = True
        entry = HistoryEntry(t, summary, True,
                             f"A_t={a_t:.6f} > {state.metric:.6f} - {tau_t:.6g}", "accepted")
        return finish(entry, seed=E.with_values(expr, theta, freeze=True), metric=a_t,
                      successes=state.successes + 1, a_series=state.a_series + [a_t],
                      boundary_refined=state.boundary_refined or refined_now)
    entry = HistoryEntry(t, summary, False,
                         f"A_t={a_t:.6f} <= {state.metric:.6f} - {tau_t:.6g}", "no-gain")
    return finish(entry)


def write_transcript(records: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_chain(region: Region, ctx: ChainContext, provider, config: ChainConfig | None = None,
              tpe_config: tpe.TpeConfig | None = None) -> tuple[ExpertArtifact, list[dict]]:
    """Iterate until ``success_target`` acceptances or ``T`` iterations."""
    config = config or ChainConfig()
    tpe_config = tpe_config or tpe.TpeConfig()
    names = ctx.train.feature_names
    if not region.contains(ctx.train.X).any():
        raise ChainError(f"region {region.id} has no training rows")
    box = ctx.plan.box if ctx.plan is not None else region.clauses
    state = ChainState(region, init_seed(region, names), ctx.legacy_val_auc,
                       tau0=config.tau0, tau_decay=config.tau_decay, box=box,
                       a_series=[ctx.legacy_val_auc])
    records = []
    while state.successes < config.success_target and state.t < config.T:
        state, rec = run_iteration(state, provider, ctx, config, tpe_config)
        records.append(rec)
        log.info("region %d t=%d accepted=%s %s", region.id, state.t, rec["accepted"], rec["reason"])
    if state.successes == 0 or state.metric < ctx.legacy_val_auc:
        art = null_expert(region, state.history, state.a_series, ctx.legacy_val_auc)
    else:
        art = ExpertArtifact(region, state.seed, tuple(state.history), tuple(state.a_series),
                             ctx.legacy_val_auc, state.boundary_refined)
    return art, records

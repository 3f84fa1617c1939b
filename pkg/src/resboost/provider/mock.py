"""Deterministic offline providers.

``MockProvider`` applies one seeded structural mutation to the current expert.
Its output depends only on the prompt and the seed, which makes full runs
reproducible without any network access.
"""

from __future__ import annotations

import math
import re
from dataclasses import replace

import numpy as np

from .. import expr as E
from .base import CandidateExpert, ErrorReport, IterationFailed, SpaceEntry
from .prompt import PromptBundle

COEF_RANGE = (-3.0, 3.0)
SCALE_RANGE = (0.25, 4.0)
KINDS = ("term", "product", "tanh", "gauss", "guard", "rescale")
# prior weight per mutation kind; multiplied by the squared residual association
KIND_WEIGHT = {"term": 1.0, "product": 1.0, "tanh": 0.2, "gauss": 0.5, "guard": 0.25,
               "rescale": 0.2}
_UNKNOWN_FEATURE = re.compile(r"unknown feature `([^`]*)`")


def _coef(name: str) -> SpaceEntry:
    return SpaceEntry(name, *COEF_RANGE)


def _span(ctx: dict, f: str) -> tuple[float, float]:
    """Feature range clipped to the region box."""
    lo, hi = ctx["ranges"][f]
    blo, bhi = ctx["box"].get(f, (-math.inf, math.inf))
    lo, hi = max(lo, blo), min(hi, bhi)
    if not lo < hi:
        lo, hi = ctx["ranges"][f]
    return lo, hi


class MockProvider:
    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    # -- mutation catalogue -------------------------------------------------

    def menu(self, prompt: PromptBundle) -> list[tuple[str, str, tuple]]:
        """All (kind, summary, args) mutations applicable to this prompt."""
        ctx = prompt.context
        feats = list(ctx["top_features"])
        out = []
        for f in feats:
            out.append(("term", f"add term on {f}", (f,)))
        for i, a in enumerate(feats):
            for b in feats[i + 1:]:
                out.append(("product", f"add product term {a}*{b}", (a, b)))
        out.append(("tanh", "wrap body in tanh", ()))
        for f in feats:
            out.append(("gauss", f"add gauss bump on {f}", (f,)))
        for f in feats:
            for side in ("lower", "upper"):
                out.append(("guard", f"tighten guard on {f} ({side})", (f, side)))
        out.append(("rescale", "rescale body", ()))
        return out

    def _choose(self, prompt: PromptBundle, seed: int) -> tuple[str, str, tuple]:
        ctx = prompt.context
        menu = self.menu(prompt)
        used = set(ctx["negatives"]) | set(ctx["positives"])
        fresh = [m for m in menu if m[1] not in used]
        if not fresh:
            fresh = [m for m in menu if m[1] not in set(ctx["negatives"])] or menu
        key = int(prompt.digest()[:16], 16)
        rng = np.random.default_rng([self.seed, seed, key])
        w = np.array([self._weight(ctx, m) for m in fresh])
        return fresh[int(rng.choice(len(fresh), p=w / w.sum()))]

    @staticmethod
    def _weight(ctx: dict, m: tuple) -> float:
        """Prefer features (and products) that track the remaining residual."""
        kind, _, args = m
        assoc = ctx.get("association", {})
        if kind == "product":
            r = ctx.get("pair_association", {}).get(f"{args[0]}*{args[1]}", 0.0)
        elif args:
            r = assoc.get(args[0], 0.0)
        else:
            r = 0.0
        return KIND_WEIGHT[kind] * (0.01 + r * r)

    def _apply(self, prompt: PromptBundle, kind: str, args: tuple):
        ctx = prompt.context
        e = E.parse(ctx["seed_dsl"], ctx["feature_names"])
        names = list(e.param_names)
        schema = ctx["feature_names"]

        def feat(f):
            return E.Feature(f, schema.index(f))

        def new(prefix, value, kind_="coefficient"):
            n = E.fresh_name(names, prefix)
            names.append(n)
            params.append(E.ParamSlot(n, float(value), False, kind_))
            return n

        params = list(e.params)
        space = [_coef(p.name) for p in e.params if not p.frozen]
        body, guard = e.body, list(e.guard)
        if kind == "term":
            c = new("c", 0.0)
            body = E.BinOp("+", body, E.BinOp("*", E.ParamRef(c), feat(args[0])))
            space.append(_coef(c))
        elif kind == "product":
            c = new("c", 0.0)
            prod = E.BinOp("*", E.BinOp("*", E.ParamRef(c), feat(args[0])), feat(args[1]))
            body = E.BinOp("+", body, prod)
            space.append(_coef(c))
        elif kind == "tanh":
            c = new("c", 1.0)
            body = E.BinOp("*", E.ParamRef(c), E.Call("tanh", (body,)))
            space.append(_coef(c))
        elif kind == "gauss":
            f = args[0]
            lo, hi = _span(ctx, f)
            c, m, s = new("c", 0.0), new("m", (lo + hi) / 2), new("s", (hi - lo) / 4)
            bump = E.Call("gauss", (feat(f), E.ParamRef(m), E.ParamRef(s)))
            body = E.BinOp("+", body, E.BinOp("*", E.ParamRef(c), bump))
            space += [_coef(c), SpaceEntry(m, lo, hi), SpaceEntry(s, (hi - lo) / 50, hi - lo, "log")]
        elif kind == "guard":
            f, side = args
            lo, hi = _span(ctx, f)
            mid = (lo + hi) / 2
            if side == "lower":
                b = new("b", lo, "boundary")
                guard.append(E.Comparison(feat(f), ">", E.ParamRef(b)))
                space.append(SpaceEntry(b, lo, mid))
            else:
                b = new("b", hi, "boundary")
                guard.append(E.Comparison(feat(f), "<=", E.ParamRef(b)))
                space.append(SpaceEntry(b, mid, hi))
        elif kind == "rescale":
            c = new("c", 1.0)
            body = E.BinOp("*", E.ParamRef(c), body)
            space.append(SpaceEntry(c, *SCALE_RANGE, "log"))
        else:
            raise ValueError(f"unknown mutation {kind!r}")
        # guard slots first, then body slots, each in appearance order
        order = [c.rhs.name for c in guard if isinstance(c.rhs, E.ParamRef)]
        order += [p.name for p in params if p.name not in order]
        by_name = {p.name: p for p in params}
        out = replace(e, guard=tuple(guard), body=body,
                      params=tuple(by_name[n] for n in order))
        return E.serialize(out), tuple(space)

    # -- provider interface -------------------------------------------------

    def propose(self, prompt: PromptBundle, seed: int) -> CandidateExpert:
        kind, summary, args = self._choose(prompt, seed)
        text, space = self._apply(prompt, kind, args)
        return CandidateExpert(text, summary, space)

    def repair(self, prompt: PromptBundle, candidate: CandidateExpert, report: ErrorReport,
               attempt: int, max_attempts: int = 3) -> CandidateExpert:
        if attempt > max_attempts:
            raise IterationFailed(f"repair attempts exhausted ({max_attempts})")
        ctx = prompt.context
        if report.kind == "unknown-feature":
            m = _UNKNOWN_FEATURE.search(report.message)
            best = (ctx["region_features"] or ctx["top_features"])[0]
            if m:
                text = candidate.dsl_text.replace(f"`{m.group(1)}`", f"`{best}`")
                return replace(candidate, dsl_text=text)
        if report.kind in ("frozen-slot", "unknown-slot", "duplicate-space"):
            keep, seen = [], set()
            for s in candidate.search_space:
                if s.name in report.names and (report.kind != "duplicate-space" or s.name in seen):
                    continue
                seen.add(s.name)
                keep.append(s)
            return replace(candidate, search_space=tuple(keep))
        if report.kind == "missing-space":
            extra = tuple(_coef(n) for n in report.names)
            return replace(candidate, search_space=candidate.search_space + extra)
        if report.kind == "bad-bounds":
            fixed = []
            for s in candidate.search_space:
                if s.name in report.names:
                    lo, hi = sorted((s.lower, s.upper))
                    if not (math.isfinite(lo) and math.isfinite(hi)):
                        lo, hi = COEF_RANGE
                    if lo == hi:
                        lo, hi = lo - 1.0, hi + 1.0
                    s = SpaceEntry(s.name, lo, hi, "linear")
                fixed.append(s)
            return replace(candidate, search_space=tuple(fixed))
        return candidate


class BrokenProvider:
    """Always answers with text that does not parse; every iteration fails."""

    name = "broken"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def propose(self, prompt: PromptBundle, seed: int) -> CandidateExpert:
        return CandidateExpert("if then else", "emit garbage", ())

    def repair(self, prompt: PromptBundle, candidate: CandidateExpert, report: ErrorReport,
               attempt: int, max_attempts: int = 3) -> CandidateExpert:
        if attempt > max_attempts:
            raise IterationFailed(f"repair attempts exhausted ({max_attempts})")
        return candidate

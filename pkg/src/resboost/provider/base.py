"""Candidate experts, error reports and the validation applied before tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .. import expr as E
from ..regions import Clause
from ..tpe import Dim, SearchSpace

SCALES = ("linear", "log")


class ProviderError(RuntimeError):
    """Hard provider failure (transport, auth); the iteration is abandoned."""


class IterationFailed(RuntimeError):
    """Repair attempts exhausted for this iteration."""


@dataclass(frozen=True)
class SpaceEntry:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def to_json(self) -> dict:
        return {"name": self.name, "lower": self.lower, "upper": self.upper, "scale": self.scale}

    @classmethod
    def from_json(cls, d) -> "SpaceEntry":
        return cls(str(d["name"]), float(d["lower"]), float(d["upper"]), str(d.get("scale", "linear")))


@dataclass(frozen=True)
class CandidateExpert:
    dsl_text: str
    intent: str
    search_space: tuple[SpaceEntry, ...] = ()
    raw: str = field(default="", compare=False)
    error: str | None = None  # extraction failure, reported by validate()

    def to_json(self) -> dict:
        return {"dsl_text": self.dsl_text, "intent": self.intent,
                "search_space": [s.to_json() for s in self.search_space]}


@dataclass(frozen=True)
class ErrorReport:
    kind: str
    message: str
    line: int = 0
    col: int = 0
    names: tuple[str, ...] = ()

    def __str__(self) -> str:
        return self.message


class ValidationError(ValueError):
    def __init__(self, report: ErrorReport):
        self.report = report
        super().__init__(report.message)


@dataclass(frozen=True)
class ValidCandidate:
    candidate: CandidateExpert
    expr: E.ExpertExpr
    space: SearchSpace


def _fail(kind: str, message: str, names: Sequence[str] = ()) -> ValidationError:
    return ValidationError(ErrorReport(kind, message, names=tuple(names)))


def pin_inherited(e: E.ExpertExpr, seed: E.ExpertExpr) -> E.ExpertExpr:
    """Force slots inherited from a frozen seed slot back to the seed's value."""
    frozen = {p.name: p.value for p in seed.params if p.frozen}
    params = tuple(replace(p, value=frozen[p.name], frozen=True) if p.name in frozen else p
                   for p in e.params)
    return replace(e, params=params)


def _bound_ok(c: E.Comparison, e: E.ExpertExpr, dims: dict[str, SpaceEntry],
              side: str, limit: float) -> bool:
    if side == "lower" and c.op not in (">", ">="):
        return False
    if side == "upper" and c.op not in ("<", "<="):
        return False
    if isinstance(c.rhs, E.Num) or e.slot(c.rhs.name).frozen:
        lo = hi = c.rhs.value if isinstance(c.rhs, E.Num) else e.slot(c.rhs.name).value
    else:
        d = dims[c.rhs.name]
        lo, hi = d.lower, d.upper
    # literals carry 9 significant digits, so accept the rendered bound too
    shown = float(E.format_number(limit))
    if side == "lower":
        limit = min(limit, shown)
        return lo > limit if c.op == ">=" else lo >= limit
    return hi <= max(limit, shown)


def check_containment(e: E.ExpertExpr, box: Sequence[Clause],
                      dims: dict[str, SpaceEntry]) -> None:
    """Every finite bound of ``box`` must be implied by some guard clause."""
    for b in box:
        for side, limit in (("lower", b.lower), ("upper", b.upper)):
            if math.isinf(limit):
                continue
            if not any(c.feature.name == b.feature and _bound_ok(c, e, dims, side, limit)
                       for c in e.guard):
                rel = f"> {limit:.9g}" if side == "lower" else f"<= {limit:.9g}"
                raise _fail("guard-widening",
                            f"guard must keep the region bound `{b.feature}` {rel} "
                            f"(for every value in the search space)", [b.feature])


def validate(cand: CandidateExpert, feature_names: Sequence[str], seed: E.ExpertExpr,
             box: Sequence[Clause] = ()) -> ValidCandidate:
    """Parse and check a candidate; raises ValidationError with a repair report."""
    if cand.error is not None:
        raise _fail("extraction", cand.error)
    try:
        e = E.parse(cand.dsl_text, feature_names)
    except E.DslError as err:
        raise ValidationError(ErrorReport(err.kind, str(err), err.line, err.col)) from None
    e = pin_inherited(e, seed)
    free = [p.name for p in e.params if not p.frozen]
    frozen = {p.name for p in e.params if p.frozen}
    declared = [s.name for s in cand.search_space]
    dup = sorted({n for n in declared if declared.count(n) > 1})
    if dup:
        raise _fail("duplicate-space", f"search space lists {dup} more than once", dup)
    bad = sorted(set(declared) & frozen)
    if bad:
        raise _fail("frozen-slot", f"search space names frozen slot(s) {bad}", bad)
    unknown = sorted(set(declared) - set(e.param_names))
    if unknown:
        raise _fail("unknown-slot", f"search space names unknown slot(s) {unknown}", unknown)
    missing = [n for n in free if n not in declared]
    if missing:
        raise _fail("missing-space", f"no search space for free slot(s) {missing}", missing)
    dims = {}
    for s in cand.search_space:
        if not (math.isfinite(s.lower) and math.isfinite(s.upper)) or not s.lower < s.upper:
            raise _fail("bad-bounds", f"slot {s.name!r}: need finite lower < upper, "
                        f"got [{s.lower}, {s.upper}]", [s.name])
        if s.scale not in SCALES:
            raise _fail("bad-bounds", f"slot {s.name!r}: scale must be linear or log", [s.name])
        if s.scale == "log" and s.lower <= 0:
            raise _fail("bad-bounds", f"slot {s.name!r}: log scale needs lower > 0", [s.name])
        dims[s.name] = s
    check_containment(e, box, dims)
    ordered = tuple(Dim(n, dims[n].lower, dims[n].upper, dims[n].scale) for n in free)
    space = SearchSpace(ordered, {p.name: p.value for p in e.params if p.frozen})
    return ValidCandidate(cand, e, space)

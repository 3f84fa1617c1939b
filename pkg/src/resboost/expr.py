"""Guarded symbolic expert expressions.

Grammar::

    expert := "if" pred "then" expr "else" "0"
    pred   := clause ("and" clause)*
    clause := feature cmp atom            cmp  := "<" | "<=" | ">" | ">="
    atom   := ["-"] number | param
    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := number | param | feature | fn "(" expr ("," expr)* ")"
            | "(" expr ")" | "-" factor
    param  := "p{" name "=" number [",frozen"] "}"
    feature:= `backquoted name`

Evaluation is total: division, sqrt, log1p and gauss are protected, every
intermediate value is clamped to +/-1e12 and the body result to +/-3.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

DIV_EPS = 1e-9
BIG = 1e12
OUTPUT_CAP = 3.0
_EXP_MAX = math.log(BIG)

FUNCTIONS = {
    "exp": 1, "log1p": 1, "tanh": 1, "sigmoid": 1, "abs": 1, "sqrt": 1,
    "min": 2, "max": 2, "gauss": 3, "clip": 3,
}
COMPARATORS = ("<=", ">=", "<", ">")


class DslError(ValueError):
    """Parse/validation failure with a 1-based source position."""

    kind = "syntax"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"{self.kind} error at line {line}, column {col}: {message}")


class LexError(DslError):
    kind = "lexical"


class DslSyntaxError(DslError):
    kind = "syntax"


class UnknownFeatureError(DslError):
    kind = "unknown-feature"


class UnknownFunctionError(DslError):
    kind = "unknown-function"


class ArityError(DslError):
    kind = "arity"


class DuplicateParamError(DslError):
    kind = "duplicate-parameter"


class EvalError(ValueError):
    pass


# --- AST ---------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Feature:
    name: str
    index: int


@dataclass(frozen=True)
class ParamRef:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Node", ...]


Node = Union[Num, Feature, ParamRef, Neg, BinOp, Call]


@dataclass(frozen=True)
class Comparison:
    feature: Feature
    op: str
    rhs: Union[Num, ParamRef]


@dataclass(frozen=True)
class ParamSlot:
    name: str
    value: float
    frozen: bool = False
    kind: str = "coefficient"  # or "boundary"

    def to_json(self) -> dict:
        return {"name": self.name, "value": self.value, "frozen": self.frozen, "kind": self.kind}


@dataclass(frozen=True)
class ExpertExpr:
    guard: tuple[Comparison, ...]
    body: Node
    params: tuple[ParamSlot, ...]
    schema: tuple[str, ...] = field(repr=False, default=())

    def slot(self, name: str) -> ParamSlot:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def defaults(self) -> dict[str, float]:
        return {p.name: p.value for p in self.params}

    def free_params(self) -> list[ParamSlot]:
        return [p for p in self.params if not p.frozen]

    def guard_features(self) -> set[str]:
        return {c.feature.name for c in self.guard}


# --- lexer ---------------------------------------------------------------

_NUMBER = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TOKEN_RE = re.compile(
    rf"""
    (?P<ws>\s+)
  | (?P<param>p\{{\s*(?P<pname>[A-Za-z_]\w*)\s*=\s*(?P<pval>[-+]?{_NUMBER})\s*(?P<pfrozen>,\s*frozen\s*)?\}})
  | (?P<feature>`(?P<fname>[^`]*)`)
  | (?P<number>{_NUMBER})
  | (?P<ident>[A-Za-z_]\w*)
  | (?P<op><=|>=|[<>+\-*/(),])
    """,
    re.VERBOSE,
)
KEYWORDS = {"if", "then", "else", "and"}


@dataclass(frozen=True)
class Token:
    kind: str  # param|feature|number|ident|keyword|op|eof
    text: str
    pos: int
    value: object = None


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def tokenize(text: str) -> list[Token]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            line, col = _line_col(text, pos)
            if text.startswith("p{", pos):
                raise LexError("malformed parameter slot, expected p{name=number[,frozen]}", line, col)
            if text[pos] == "`":
                raise LexError("unterminated feature name", line, col)
            raise LexError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if m.group("ident") and text.startswith("p{", pos):
            line, col = _line_col(text, pos)
            raise LexError("malformed parameter slot, expected p{name=number[,frozen]}", line, col)
        if m.group("ws"):
            pass
        elif m.group("param"):
            toks.append(Token("param", m.group(0), pos,
                              (m.group("pname"), float(m.group("pval")), bool(m.group("pfrozen")))))
        elif m.group("feature"):
            toks.append(Token("feature", m.group(0), pos, m.group("fname")))
        elif m.group("number"):
            toks.append(Token("number", m.group(0), pos, float(m.group(0))))
        elif m.group("ident"):
            word = m.group(0)
            toks.append(Token("keyword" if word in KEYWORDS else "ident", word, pos, word))
        else:
            assert kind == "op"
            toks.append(Token("op", m.group(0), pos, m.group(0)))
        pos = m.end()
    toks.append(Token("eof", "", len(text)))
    return toks


# --- parser --------------------------------------------------------------

class _Parser:
    def __init__(self, text: str, feature_names: Sequence[str]):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0
        self.features = {n: k for k, n in enumerate(feature_names)}
        self.schema = tuple(feature_names)
        self.params: list[ParamSlot] = []
        self.in_guard = False

    def _err(self, cls, msg, tok=None):
        tok = tok or self.peek()
        line, col = _line_col(self.text, tok.pos)
        return cls(msg, line, col)

    def peek(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, kind: str, text: str | None = None) -> bool:
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def expect(self, kind: str, text: str | None = None) -> Token:
        if not self.at(kind, text):
            t = self.peek()
            want = repr(text) if text else kind
            got = "end of input" if t.kind == "eof" else repr(t.text)
            raise self._err(DslSyntaxError, f"expected {want}, found {got}")
        return self.advance()

    def parse(self) -> ExpertExpr:
        self.expect("keyword", "if")
        self.in_guard = True
        guard = [self.clause()]
        while self.at("keyword", "and"):
            self.advance()
            guard.append(self.clause())
        self.in_guard = False
        self.expect("keyword", "then")
        body = self.expr()
        self.expect("keyword", "else")
        t = self.peek()
        if not (t.kind == "number" and t.value == 0.0):
            raise self._err(DslSyntaxError, "the else branch must be the literal 0")
        self.advance()
        self.expect("eof")
        return ExpertExpr(tuple(guard), body, tuple(self.params), self.schema)

    def feature(self) -> Feature:
        t = self.expect("feature")
        if t.value not in self.features:
            raise self._err(UnknownFeatureError, f"unknown feature `{t.value}`", t)
        return Feature(t.value, self.features[t.value])

    def param(self) -> ParamRef:
        t = self.advance()
        name, value, frozen = t.value
        if any(p.name == name for p in self.params):
            raise self._err(DuplicateParamError, f"duplicate parameter name {name!r}", t)
        kind = "boundary" if self.in_guard else "coefficient"
        self.params.append(ParamSlot(name, value, frozen, kind))
        return ParamRef(name)

    def clause(self) -> Comparison:
        feat = self.feature()
        t = self.peek()
        if not (t.kind == "op" and t.text in COMPARATORS):
            raise self._err(DslSyntaxError, "expected a comparison operator (<, <=, >, >=)")
        op = self.advance().text
        if self.at("param"):
            rhs = self.param()
        elif self.at("op", "-"):
            self.advance()
            rhs = Num(-self.expect("number").value)
        elif self.at("number"):
            rhs = Num(self.advance().value)
        else:
            raise self._err(DslSyntaxError, "a guard threshold must be a number or a parameter")
        return Comparison(feat, op, rhs)

    def expr(self) -> Node:
        node = self.term()
        while self.at("op", "+") or self.at("op", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.at("op", "*") or self.at("op", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        t = self.peek()
        if t.kind == "number":
            self.advance()
            return Num(t.value)
        if t.kind == "param":
            return self.param()
        if t.kind == "feature":
            return self.feature()
        if t.kind == "op" and t.text == "-":
            self.advance()
            if self.at("number"):
                return Num(-self.advance().value)
            return Neg(self.factor())
        if t.kind == "op" and t.text == "(":
            self.advance()
            node = self.expr()
            self.expect("op", ")")
            return node
        if t.kind == "ident":
            return self.call()
        got = "end of input" if t.kind == "eof" else repr(t.text)
        raise self._err(DslSyntaxError, f"expected an operand, found {got}")

    def call(self) -> Call:
        t = self.advance()
        if t.text not in FUNCTIONS:
            raise self._err(UnknownFunctionError, f"unknown function {t.text!r}", t)
        self.expect("op", "(")
        args = [self.expr()]
        while self.at("op", ","):
            self.advance()
            args.append(self.expr())
        self.expect("op", ")")
        if len(args) != FUNCTIONS[t.text]:
            raise self._err(ArityError, f"{t.text} takes {FUNCTIONS[t.text]} argument(s), got {len(args)}", t)
        return Call(t.text, tuple(args))


def parse(text: str, feature_names: Sequence[str]) -> ExpertExpr:
    return _Parser(text, feature_names).parse()


def parameters(e: ExpertExpr) -> list[ParamSlot]:
    return list(e.params)


# --- serialization -------------------------------------------------------

def format_number(v: float) -> str:
    s = format(float(v), ".9g")
    return "0" if s == "-0" else s


def _param_text(slot: ParamSlot) -> str:
    return f"p{{{slot.name}={format_number(slot.value)}{',frozen' if slot.frozen else ''}}}"


def _node_text(node: Node, slots: Mapping[str, ParamSlot]) -> str:
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Feature):
        return f"`{node.name}`"
    if isinstance(node, ParamRef):
        return _param_text(slots[node.name])
    if isinstance(node, Neg):
        inner = _node_text(node.operand, slots)
        return f"-({inner})" if isinstance(node.operand, Num) else f"-{inner}"
    if isinstance(node, BinOp):
        return f"({_node_text(node.left, slots)} {node.op} {_node_text(node.right, slots)})"
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(_node_text(a, slots) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def serialize(e: ExpertExpr) -> str:
    slots = {p.name: p for p in e.params}
    guard = " and ".join(
        f"`{c.feature.name}` {c.op} {_node_text(c.rhs, slots)}" for c in e.guard)
    return f"if {guard} then {_node_text(e.body, slots)} else 0"


# --- evaluation ----------------------------------------------------------

def _resolve(e: ExpertExpr, theta: Mapping[str, float] | None) -> dict[str, float]:
    values = e.defaults()
    if theta:
        unknown = set(theta) - set(values)
        if unknown:
            raise EvalError(f"unknown parameter(s) in theta: {sorted(unknown)}")
        values.update({k: float(v) for k, v in theta.items()})
    return values


def _clamp(v):
    return np.clip(v, -BIG, BIG)


def _eval(node: Node, X: np.ndarray, values: Mapping[str, float]):
    if isinstance(node, Num):
        return _clamp(node.value)
    if isinstance(node, Feature):
        return _clamp(X[:, node.index])
    if isinstance(node, ParamRef):
        return _clamp(values[node.name])
    if isinstance(node, Neg):
        return -_eval(node.operand, X, values)
    if isinstance(node, BinOp):
        a = _eval(node.left, X, values)
        b = _eval(node.right, X, values)
        if node.op == "+":
            return _clamp(a + b)
        if node.op == "-":
            return _clamp(a - b)
        if node.op == "*":
            return _clamp(a * b)
        safe = np.where(b >= 0, 1.0, -1.0) * np.maximum(np.abs(b), DIV_EPS)
        return _clamp(a / safe)
    args = [_eval(a, X, values) for a in node.args]
    fn = node.fn
    if fn == "exp":
        return np.exp(np.minimum(args[0], _EXP_MAX))
    if fn == "log1p":
        return np.log1p(np.abs(args[0]))
    if fn == "tanh":
        return np.tanh(args[0])
    if fn == "sigmoid":
        return expit(args[0])
    if fn == "abs":
        return np.abs(args[0])
    if fn == "sqrt":
        return np.sqrt(np.abs(args[0]))
    if fn == "min":
        return np.minimum(args[0], args[1])
    if fn == "max":
        return np.maximum(args[0], args[1])
    if fn == "gauss":
        u, mu, s = args
        z = (u - mu) / np.maximum(np.abs(s), DIV_EPS)
        return np.exp(-(z * z))
    if fn == "clip":
        return np.minimum(np.maximum(args[0], args[1]), args[2])
    raise TypeError(f"unknown function {fn!r}")


def guard_mask(e: ExpertExpr, X: np.ndarray, theta: Mapping[str, float] | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    values = _resolve(e, theta)
    mask = np.ones(X.shape[0], dtype=bool)
    for c in e.guard:
        col = X[:, c.feature.index]
        thr = c.rhs.value if isinstance(c.rhs, Num) else values[c.rhs.name]
        if c.op == "<":
            mask &= col < thr
        elif c.op == "<=":
            mask &= col <= thr
        elif c.op == ">":
            mask &= col > thr
        else:
            mask &= col >= thr
    return mask


def evaluate_batch(e: ExpertExpr, X, theta: Mapping[str, float] | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or (e.schema and X.shape[1] != len(e.schema)):
        raise EvalError(f"rows have shape {X.shape}, expression expects {len(e.schema)} features")
    values = _resolve(e, theta)
    mask = guard_mask(e, X, values)
    out = np.zeros(X.shape[0])
    if mask.any():
        body = np.broadcast_to(_eval(e.body, X[mask], values), (int(mask.sum()),))
        out[mask] = np.clip(body, -OUTPUT_CAP, OUTPUT_CAP)
    return out


def evaluate(e: ExpertExpr, row, theta: Mapping[str, float] | None = None) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise EvalError("evaluate takes a single feature row")
    return float(evaluate_batch(e, row[None, :], theta)[0])


# --- rewriting helpers ---------------------------------------------------

def with_values(e: ExpertExpr, theta: Mapping[str, float], freeze: bool = False) -> ExpertExpr:
    """Copy with new default values; ``freeze`` pins every slot."""
    params = tuple(
        replace(p, value=float(theta.get(p.name, p.value)), frozen=p.frozen or freeze)
        for p in e.params)
    return replace(e, params=params)


def fresh_name(taken: Iterable[str], prefix: str) -> str:
    taken = set(taken)
    k = 0
    while f"{prefix}{k}" in taken:
        k += 1
    return f"{prefix}{k}"


def parameterize_guard(e: ExpertExpr, pick=None) -> tuple[ExpertExpr, dict[str, Comparison]]:
    """Turn literal guard thresholds into boundary slots.

    Returns the rewritten expression and a map from new slot name to the
    original literal clause. ``pick(clause)`` can veto individual clauses.
    """
    names = list(e.param_names)
    guard, new_slots, mapping = [], [], {}
    for c in e.guard:
        if isinstance(c.rhs, Num) and (pick is None or pick(c)):
            name = fresh_name(names, "b")
            names.append(name)
            new_slots.append(ParamSlot(name, c.rhs.value, False, "boundary"))
            mapping[name] = c
            guard.append(Comparison(c.feature, c.op, ParamRef(name)))
        else:
            guard.append(c)
    # keep appearance order: guard slots come before body slots
    boundary = [p for p in e.params if p.kind == "boundary"]
    coeff = [p for p in e.params if p.kind != "boundary"]
    ordered = []
    for c in guard:
        if isinstance(c.rhs, ParamRef):
            ordered.append(next(p for p in boundary + new_slots if p.name == c.rhs.name))
    return replace(e, guard=tuple(guard), params=tuple(ordered + coeff)), mapping


def node_size(node: Node) -> int:
    if isinstance(node, Neg):
        return 1 + node_size(node.operand)
    if isinstance(node, BinOp):
        return 1 + node_size(node.left) + node_size(node.right)
    if isinstance(node, Call):
        return 1 + sum(node_size(a) for a in node.args)
    return 1

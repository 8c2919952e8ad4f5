"""Weight-distribution features and the IF-THEN rule language.

Grammar (one rule per line, ``#`` starts a comment)::

    rule := "RULE" name ":" "IF" expr "THEN" label "CONF" number "PRI" integer
    expr := or
    or   := and ("OR" and)*
    and  := not ("AND" not)*
    not  := ["NOT"] cmp
    cmp  := sum (("<" | "<=" | ">" | ">=" | "==") sum)?
    sum  := prod (("+" | "-") prod)*
    prod := atom (("*" | "/") atom)*
    atom := number | feature | "(" expr ")"
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import astuple, dataclass, field, fields
from typing import Union

import numpy as np

from dali import kernels
from dali.data import Label

FEATURE_NAMES = (
    "max_weight",
    "mean_rest",
    "std_dev",
    "entropy",
    "gini",
    "top2_gap",
    "group_size",
    "dominance",
)
KEYWORDS = {"RULE", "IF", "THEN", "CONF", "PRI", "AND", "OR", "NOT"}
LABEL_WORDS = {"Leadership": Label.LEADERSHIP, "Collaborative": Label.COLLABORATIVE}
DEFAULT_CONFIDENCE = 0.6


@dataclass(frozen=True)
class FeatureVector:
    max_weight: float
    mean_rest: float
    std_dev: float
    entropy: float
    gini: float
    top2_gap: float
    group_size: float
    dominance: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_array(cls, row) -> "FeatureVector":
        return cls(*(float(v) for v in row))


def neural_inputs(raw: np.ndarray) -> np.ndarray:
    """Rows of raw features mapped to the discriminator's input space.

    Dominance is heavy-tailed (capped at 1e6), so it enters as ``log1p``.
    """
    out = np.array(raw, dtype=np.float64, copy=True)
    out[..., 7] = np.log1p(out[..., 7])
    return out


def _check_weights(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weight vector must be a non-empty 1-D sequence")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    return w


def extract_features(weights) -> FeatureVector:
    w = _check_weights(weights)
    row = kernels.segment_features(w, np.array([0, w.size]))[0]
    return FeatureVector.from_array(row)


def extract_features_many(weight_rows) -> np.ndarray:
    """Raw feature matrix (G x 8) for a list of weight vectors; no validation."""
    sizes = [len(w) for w in weight_rows]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    flat = np.concatenate([np.asarray(w, dtype=np.float64) for w in weight_rows]) if weight_rows else np.zeros(0)
    return kernels.segment_features(flat, offsets)


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Feat:
    name: str


@dataclass(frozen=True)
class Arith:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class And:
    items: tuple["Expr", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["Expr", ...]


@dataclass(frozen=True)
class Not:
    operand: "Expr"


Expr = Union[Num, Feat, Arith, Compare, And, Or, Not]


@dataclass(frozen=True)
class Rule:
    name: str
    condition: Expr
    label: Label
    confidence: float
    priority: int

    def __post_init__(self):
        if not 0.5 < self.confidence <= 1.0:
            raise ValueError(f"rule {self.name}: confidence must be in (0.5, 1], got {self.confidence}")

    def format(self) -> str:
        return format_rule(self)


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, pos: int, text: str = ""):
        super().__init__(f"{message} at position {pos}")
        self.message = message
        self.pos = pos
        self.text = text


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|==|[<>+\-*/():])"
    r")"
)


@dataclass
class _Tok:
    kind: str  # num | name | op | end
    text: str
    pos: int


def _lex(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _lex(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def error(self, message: str, tok: _Tok | None = None):
        tok = tok or self.cur
        return RuleSyntaxError(message, tok.pos, self.text)

    def take(self) -> _Tok:
        tok = self.cur
        if tok.kind != "end":
            self.i += 1
        return tok

    def accept(self, text: str) -> bool:
        if self.cur.kind in ("op", "name") and self.cur.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> _Tok:
        tok = self.cur
        if not self.accept(text):
            shown = tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {shown!r}")
        return tok

    # rule-level

    def rule(self) -> Rule:
        self.expect("RULE")
        name_tok = self.take()
        if name_tok.kind != "name" or name_tok.text in KEYWORDS or name_tok.text in LABEL_WORDS:
            raise self.error("expected rule name", name_tok)
        self.expect(":")
        self.expect("IF")
        cond_tok = self.cur
        cond, kind = self.expr()
        if kind != "bool":
            raise self.error("type error: rule condition must be boolean", cond_tok)
        self.expect("THEN")
        label_tok = self.take()
        if label_tok.text not in LABEL_WORDS:
            raise self.error("expected label Leadership or Collaborative", label_tok)
        self.expect("CONF")
        conf_tok = self.take()
        if conf_tok.kind != "num":
            raise self.error("expected confidence number", conf_tok)
        conf = float(conf_tok.text)
        if not 0.5 < conf <= 1.0:
            raise self.error("confidence must be in (0.5, 1]", conf_tok)
        self.expect("PRI")
        pri_tok = self.take()
        if pri_tok.kind != "num" or not pri_tok.text.isdigit():
            raise self.error("expected integer priority", pri_tok)
        if self.cur.kind != "end":
            raise self.error(f"unexpected trailing input {self.cur.text!r}")
        return Rule(name_tok.text, cond, LABEL_WORDS[label_tok.text], conf, int(pri_tok.text))

    # expressions: each returns (node, "bool" | "num")

    def expr(self):
        return self.or_()

    def _bool_chain(self, word, sub, ctor):
        first_tok = self.cur
        node, kind = sub()
        items = [(node, kind, first_tok)]
        while self.cur.kind == "name" and self.cur.text == word:
            self.take()
            tok = self.cur
            n, k = sub()
            items.append((n, k, tok))
        if len(items) == 1:
            return node, kind
        for n, k, tok in items:
            if k != "bool":
                raise self.error(f"type error: {word} operand must be boolean", tok)
        return ctor(tuple(n for n, _, _ in items)), "bool"

    def or_(self):
        return self._bool_chain("OR", self.and_, Or)

    def and_(self):
        return self._bool_chain("AND", self.not_, And)

    def not_(self):
        if self.cur.kind == "name" and self.cur.text == "NOT":
            self.take()
            tok = self.cur
            node, kind = self.cmp()
            if kind != "bool":
                raise self.error("type error: NOT operand must be boolean", tok)
            return Not(node), "bool"
        return self.cmp()

    def cmp(self):
        left_tok = self.cur
        left, lk = self.sum_()
        if self.cur.kind == "op" and self.cur.text in ("<", "<=", ">", ">=", "=="):
            op = self.take().text
            right_tok = self.cur
            right, rk = self.sum_()
            if lk != "num":
                raise self.error("type error: comparison operand must be numeric", left_tok)
            if rk != "num":
                raise self.error("type error: comparison operand must be numeric", right_tok)
            return Compare(op, left, right), "bool"
        return left, lk

    def _arith_chain(self, ops, sub):
        left_tok = self.cur
        node, kind = sub()
        while self.cur.kind == "op" and self.cur.text in ops:
            op = self.take().text
            right_tok = self.cur
            right, rk = sub()
            if kind != "num":
                raise self.error(f"type error: {op!r} operand must be numeric", left_tok)
            if rk != "num":
                raise self.error(f"type error: {op!r} operand must be numeric", right_tok)
            node, kind = Arith(op, node, right), "num"
        return node, kind

    def sum_(self):
        return self._arith_chain(("+", "-"), self.prod)

    def prod(self):
        return self._arith_chain(("*", "/"), self.atom)

    def atom(self):
        tok = self.cur
        if tok.kind == "num":
            self.take()
            return Num(float(tok.text)), "num"
        if tok.kind == "op" and tok.text == "(":
            self.take()
            node, kind = self.expr()
            self.expect(")")
            return node, kind
        if tok.kind == "name" and tok.text not in KEYWORDS:
            self.take()
            if tok.text not in FEATURE_NAMES:
                raise self.error(f"unknown feature {tok.text!r}", tok)
            return Feat(tok.text), "num"
        shown = tok.text or "end of input"
        raise self.error(f"unexpected {shown!r}", tok)


def parse_rule(text: str) -> Rule:
    return _Parser(text.split("#", 1)[0].strip()).rule()


def condition_kind(node: Expr) -> str:
    return "bool" if isinstance(node, (Compare, And, Or, Not)) else "num"


# ---------------------------------------------------------------------------
# formatting

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    return repr(float(v))


def format_expr(node: Expr) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Feat):
        return node.name
    if isinstance(node, Arith):
        prec = _PREC[node.op]
        left = format_expr(node.left)
        right = format_expr(node.right)
        if isinstance(node.left, Arith) and _PREC[node.left.op] < prec or condition_kind(node.left) == "bool":
            left = f"({left})"
        if isinstance(node.right, Arith) and _PREC[node.right.op] <= prec or condition_kind(node.right) == "bool":
            right = f"({right})"
        return f"{left} {node.op} {right}"
    if isinstance(node, Compare):
        left, right = format_expr(node.left), format_expr(node.right)
        if isinstance(node.left, (Compare, And, Or, Not)):
            left = f"({left})"
        if isinstance(node.right, (Compare, And, Or, Not)):
            right = f"({right})"
        return f"{left} {node.op} {right}"
    if isinstance(node, And):
        return " AND ".join(f"({format_expr(c)})" if isinstance(c, (And, Or)) else format_expr(c) for c in node.items)
    if isinstance(node, Or):
        return " OR ".join(f"({format_expr(c)})" if isinstance(c, Or) else format_expr(c) for c in node.items)
    if isinstance(node, Not):
        inner = format_expr(node.operand)
        if isinstance(node.operand, (And, Or, Not)):
            inner = f"({inner})"
        return f"NOT {inner}"
    raise TypeError(f"not an expression node: {node!r}")


def format_rule(rule: Rule) -> str:
    return (
        f"RULE {rule.name}: IF {format_expr(rule.condition)} THEN {rule.label.display} "
        f"CONF {_fmt_num(rule.confidence)} PRI {rule.priority}"
    )


# ---------------------------------------------------------------------------
# evaluation


class _DivideByZero(ArithmeticError):
    pass


def _eval(node: Expr, env: dict[str, float]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Feat):
        return env[node.name]
    if isinstance(node, Arith):
        a, b = _eval(node.left, env), _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if b == 0:
            raise _DivideByZero
        return a / b
    if isinstance(node, Compare):
        a, b = _eval(node.left, env), _eval(node.right, env)
        return {
            "<": a < b,
            "<=": a <= b,
            ">": a > b,
            ">=": a >= b,
            "==": a == b,
        }[node.op]
    if isinstance(node, And):
        return all(_eval(c, env) for c in node.items)
    if isinstance(node, Or):
        return any(_eval(c, env) for c in node.items)
    if isinstance(node, Not):
        return not _eval(node.operand, env)
    raise TypeError(f"not an expression node: {node!r}")


@dataclass(frozen=True)
class RuleCheck:
    rule: str
    matched: bool
    note: str = ""


def check_rule(rule: Rule, f: FeatureVector) -> RuleCheck:
    """Evaluate a rule's condition; never raises on arithmetic faults."""
    try:
        ok = bool(_eval(rule.condition, f.as_dict()))
    except _DivideByZero:
        return RuleCheck(rule.name, False, "division by zero")
    return RuleCheck(rule.name, ok)


def evaluate_rule(rule: Rule, f: FeatureVector) -> tuple[Label, float] | None:
    return (rule.label, rule.confidence) if check_rule(rule, f).matched else None


# ---------------------------------------------------------------------------
# rule sets and the symbolic classifier


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...]

    def __post_init__(self):
        names = [r.name for r in self.rules]
        if len(set(names)) != len(names):
            raise ValueError("duplicate rule names in rule set")

    def ordered(self) -> list[Rule]:
        return sorted(self.rules, key=lambda r: (-r.priority, r.name))

    def canonical_text(self) -> str:
        return "".join(format_rule(r) + "\n" for r in self.ordered())

    def fingerprint(self) -> str:
        return fingerprint_text(self.canonical_text())

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.ordered())

    def get(self, name: str) -> Rule | None:
        return next((r for r in self.rules if r.name == name), None)


def fingerprint_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_rules(text: str) -> RuleSet:
    """Parse a multi-line rule file; error messages carry the line number."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            rules.append(parse_rule(body))
        except RuleSyntaxError as exc:
            raise RuleSyntaxError(f"line {lineno}: {exc.message}", exc.pos, body) from None
    return RuleSet(tuple(rules))


@dataclass(frozen=True)
class SymbolicDecision:
    label: Label
    probs: tuple[float, float]  # (P_leadership, P_collaborative)
    matched_rule: str | None
    trace: tuple[RuleCheck, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "label": self.label.display,
            "probs": list(self.probs),
            "matched_rule": self.matched_rule,
            "trace": [{"rule": c.rule, "matched": c.matched, **({"note": c.note} if c.note else {})} for c in self.trace],
        }


def _probs_for(label: Label, conf: float) -> tuple[float, float]:
    return (conf, 1.0 - conf) if label is Label.LEADERSHIP else (1.0 - conf, conf)


def classify_features(rules: RuleSet, f: FeatureVector, default_conf: float = DEFAULT_CONFIDENCE) -> SymbolicDecision:
    if len(rules) == 0:
        raise ValueError("rule set is empty")
    if f.group_size <= 1:
        return SymbolicDecision(Label.LEADERSHIP, (1.0, 0.0), None, ())
    trace = []
    winner = None
    for rule in rules.ordered():
        check = check_rule(rule, f)
        trace.append(check)
        if winner is None and check.matched:
            winner = rule
    if winner is None:
        return SymbolicDecision(Label.COLLABORATIVE, _probs_for(Label.COLLABORATIVE, default_conf), None, tuple(trace))
    return SymbolicDecision(winner.label, _probs_for(winner.label, winner.confidence), winner.name, tuple(trace))


def classify_symbolic(rules: RuleSet, weights, default_conf: float = DEFAULT_CONFIDENCE) -> SymbolicDecision:
    """First matching rule by descending priority (name breaks ties) decides the label."""
    return classify_features(rules, extract_features(weights), default_conf)


SEED_RULES_TEXT = (
    "RULE seed_concentration: IF max_weight > 0.5 THEN Leadership CONF 0.9 PRI 100\n"
    "RULE seed_dominance: IF dominance > 3.0 THEN Leadership CONF 0.8 PRI 50\n"
)


def seed_rules() -> RuleSet:
    return parse_rules(SEED_RULES_TEXT)


def threshold_of(node: Expr) -> tuple[Compare, str] | None:
    """First ``feature OP number`` comparison in a condition, in source order."""
    if isinstance(node, Compare):
        if isinstance(node.left, Feat) and isinstance(node.right, Num):
            return node, "left"
        if isinstance(node.right, Feat) and isinstance(node.left, Num):
            return node, "right"
        return None
    children = ()
    if isinstance(node, (And, Or)):
        children = node.items
    elif isinstance(node, Not):
        children = (node.operand,)
    for c in children:
        hit = threshold_of(c)
        if hit is not None:
            return hit
    return None


def replace_node(node: Expr, old: Expr, new: Expr) -> Expr:
    if node is old:
        return new
    if isinstance(node, And):
        return And(tuple(replace_node(c, old, new) for c in node.items))
    if isinstance(node, Or):
        return Or(tuple(replace_node(c, old, new) for c in node.items))
    if isinstance(node, Not):
        return Not(replace_node(node.operand, old, new))
    return node


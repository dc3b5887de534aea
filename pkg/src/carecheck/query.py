"""Predicate, expression and query language shared by the checker and SMC.

Grammar (informal)::

    query  := "A[]" pred | "E<>" pred | "E[]" pred | "A<>" pred | pred "-->" pred
            | "Pr[<=" T "]" "(" "<>" pred ")" | "E[<=" T ";" K "]" "(" "max:" expr ")"
    pred   := pred ("->" | "imply") pred | pred "||" pred | pred "&&" pred | "!" pred
            | ("forall" | "exists") var ":" pred
            | "true" | "false" | "deadlock" | "allEmpty()" | "isFull(" expr ")"
            | "allTerminated" | "anyTimeout"
            | proc "." Location | "svc(" expr ")" ".d1" ("=="|"!=") CONST
            | "steps[" expr "]" "==" owner ":" MARKER
            | expr cmp expr
    proc   := "orc" | "svc(" expr ")" | "st(" expr ")"
    expr   := sums, products, integers, "N", bound variables, orc.i / orc.offerer /
              orc.requester, "queueSize", "len(" buffer ")", buffer "[" i "][" j "]"
              (message code, NIL past the end), "nil" and message constants,
              "[" pred "]" (0/1 indicator), "sum" var ":" expr

Binders are ``j:``, ``(j)``, ``(j:id_t)`` (all services) or ``(j:int[lo,hi])``.
Quantifier and ``sum`` bodies extend as far to the right as possible.
Predicates compile to closures ``f(state) -> bool``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

from .protocol import MessageConst, StepMarker, SystemParams
from .semantics import (
    ORC_LOCATIONS, SVC_LOCATIONS, SystemState, all_empty, all_terminated, enabled,
)


class MalformedPredicate(ValueError):
    pass


class QuerySyntaxError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<op>-->|->|&&|\|\||==|!=|<=|>=|A\[\]|E<>|E\[\]|A<>|[()\[\]<>!:;.,+\-*])
  | (?P<num>\d+(?:\.\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
""", re.X)


def tokenize(text: str) -> list[str]:
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r} at {pos}")
        pos = m.end()
        if m.lastgroup != "ws":
            out.append(m.group())
    return out


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Const(Node):
    value: object  # bool or int


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class NSvc(Node):
    pass


@dataclass(frozen=True)
class OrcVar(Node):
    name: str  # i | offerer | requester


@dataclass(frozen=True)
class Arith(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Cmp(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Not(Node):
    arg: Node


@dataclass(frozen=True)
class BoolOp(Node):
    op: str  # and | or | imply
    left: Node
    right: Node


@dataclass(frozen=True)
class Quant(Node):
    kind: str  # forall | exists | sum
    var: str
    body: Node
    lo: Node | None = None  # explicit int[lo,hi] range; None means 0..N-1
    hi: Node | None = None


@dataclass(frozen=True)
class Loc(Node):
    kind: str  # orc | svc | st
    index: Node | None
    location: str


@dataclass(frozen=True)
class D1(Node):
    index: Node
    const: MessageConst
    negate: bool = False


@dataclass(frozen=True)
class StepsEq(Node):
    index: Node
    owner: Node | None  # None means the orchestrator
    marker: StepMarker


@dataclass(frozen=True)
class Special(Node):
    name: str  # allEmpty | allTerminated | anyTimeout | deadlock


@dataclass(frozen=True)
class IsFull(Node):
    index: Node


@dataclass(frozen=True)
class BufLen(Node):
    buffer: str  # o2s | s2o | r2o | o2r
    index: Node | None


@dataclass(frozen=True)
class Indicator(Node):
    pred: Node


@dataclass(frozen=True)
class QueueSize(Node):
    pass


@dataclass(frozen=True)
class Cell(Node):
    """``orc2services[i][j]``: the j-th oldest message, NIL past the end."""
    buffer: str
    index: Node
    pos: Node


# ---------------------------------------------------------------------------
# Parser

_BUFFER_NAMES = {"orc2services": "o2s", "services2orc": "s2o",
                 "requester2offerer": "r2o", "offerer2requester": "o2r"}
_ORC_VARS = {"i", "offerer", "requester"}
_PROC_ALIASES = {"orc": "orc", "ror": "orc", "svc": "svc", "ROC": "svc",
                 "st": "st", "SocketTimeout": "st"}
_CMP = {"==", "!=", "<", "<=", ">", ">="}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.pos = 0

    # -- helpers
    def peek(self, k: int = 0) -> str | None:
        i = self.pos + k
        return self.toks[i] if i < len(self.toks) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise QuerySyntaxError(f"unexpected end of input in {self.text!r}")
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.take()
        if got != tok:
            raise QuerySyntaxError(f"expected {tok!r}, got {got!r} in {self.text!r}")

    def accept(self, tok: str) -> bool:
        if self.peek() == tok:
            self.pos += 1
            return True
        return False

    def done(self) -> None:
        if self.pos != len(self.toks):
            raise QuerySyntaxError(f"trailing input {' '.join(self.toks[self.pos:])!r}")

    # -- predicates
    def pred(self) -> Node:
        left = self.or_()
        if self.peek() in ("->", "imply"):
            self.take()
            return BoolOp("imply", left, self.pred())
        return left

    def or_(self) -> Node:
        left = self.and_()
        while self.peek() in ("||", "or"):
            self.take()
            left = BoolOp("or", left, self.and_())
        return left

    def and_(self) -> Node:
        left = self.unary()
        while self.peek() in ("&&", "and"):
            self.take()
            left = BoolOp("and", left, self.unary())
        return left

    def unary(self) -> Node:
        tok = self.peek()
        if tok in ("!", "not"):
            self.take()
            return Not(self.unary())
        if tok in ("forall", "exists"):
            self.take()
            var, lo, hi = self._binder()
            return Quant(tok, var, self.pred(), lo, hi)
        return self.atom()

    def _binder(self) -> tuple:
        # forall j: body | forall (j) body | forall (j:id_t) body | sum (j:int[a,b]) body
        lo = hi = None
        if self.accept("("):
            var = self.take()
            if self.accept(":"):
                if self.take() == "int":
                    self.expect("[")
                    lo = self.expr()
                    self.expect(",")
                    hi = self.expr()
                    self.expect("]")
            self.expect(")")
            self.accept(":")
            return var, lo, hi
        var = self.take()
        self.expect(":")
        return var, lo, hi

    def atom(self) -> Node:
        start = self.pos
        try:
            left = self.expr()
            op = self.peek()
            if op in _CMP:
                self.take()
                return Cmp(op, left, self.expr())
        except QuerySyntaxError:
            pass
        self.pos = start
        return self.bool_atom()

    def bool_atom(self) -> Node:
        tok = self.take()
        if tok == "(":
            p = self.pred()
            self.expect(")")
            return p
        if tok in ("true", "false"):
            return Const(tok == "true")
        if tok == "deadlock":
            return Special("deadlock")
        if tok in ("allTerminated", "anyTimeout"):
            return Special(tok)
        if tok == "allEmpty":
            self.expect("(")
            self.expect(")")
            return Special("allEmpty")
        if tok == "isFull":
            return IsFull(self._paren_expr())
        if tok == "steps":
            self.expect("[")
            k = self.expr()
            self.expect("]")
            self.expect("==")
            owner = self._owner()
            self.expect(":")
            name = self.take()
            try:
                marker = StepMarker[name]
            except KeyError:
                raise QuerySyntaxError(f"unknown step marker {name!r}") from None
            return StepsEq(k, owner, marker)
        if tok in _PROC_ALIASES:
            kind = _PROC_ALIASES[tok]
            index = None if kind == "orc" else self._paren_expr()
            self.expect(".")
            name = self.take()
            if kind == "orc" and name == "isFull":
                return IsFull(self._paren_expr())
            if kind == "svc" and name == "d1":
                op = self.take()
                if op not in ("==", "!="):
                    raise QuerySyntaxError("d1 only supports == and !=")
                const = self.take()
                try:
                    mc = MessageConst[const]
                except KeyError:
                    raise QuerySyntaxError(f"unknown message constant {const!r}") from None
                return D1(index, mc, op == "!=")
            locs = {"orc": ORC_LOCATIONS, "svc": SVC_LOCATIONS, "st": ("Running", "Timeout")}[kind]
            if name not in locs:
                raise QuerySyntaxError(f"unknown {kind} location {name!r}")
            return Loc(kind, index, name)
        raise QuerySyntaxError(f"unexpected token {tok!r} in {self.text!r}")

    def _owner(self) -> Node | None:
        tok = self.peek()
        if tok in ("orc", "ror"):
            self.take()
            return None
        if tok in ("svc", "ROC"):
            self.take()
            return self._paren_expr()
        return self.factor()

    def _paren_expr(self) -> Node:
        self.expect("(")
        e = self.expr()
        self.expect(")")
        return e

    # -- integer expressions
    def expr(self) -> Node:
        left = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            left = Arith(op, left, self.term())
        return left

    def term(self) -> Node:
        left = self.factor()
        while self.peek() == "*":
            self.take()
            left = Arith("*", left, self.factor())
        return left

    def factor(self) -> Node:
        tok = self.take()
        if tok == "-":
            return Arith("-", Const(0), self.factor())
        if tok.isdigit():
            return Const(int(tok))
        if tok == "N":
            return NSvc()
        if tok == "(":
            start = self.pos
            try:
                e = self.expr()
                self.expect(")")
                return e
            except QuerySyntaxError:
                # a parenthesised predicate counts as 0/1
                self.pos = start
                p = self.pred()
                self.expect(")")
                return Indicator(p)
        if tok == "[":
            p = self.pred()
            self.expect("]")
            return Indicator(p)
        if tok == "sum":
            var, lo, hi = self._binder()
            return Quant("sum", var, self.expr(), lo, hi)
        if tok == "queueSize":
            return QueueSize()
        if tok == "nil":
            return Const(int(MessageConst.NIL))
        if tok in MessageConst.__members__:
            return Const(int(MessageConst[tok]))
        if tok in ("orc2services", "services2orc") and self.peek() == "[":
            self.expect("[")
            index = self.expr()
            self.expect("]")
            self.expect("[")
            pos = self.expr()
            self.expect("]")
            return Cell(_BUFFER_NAMES[tok], index, pos)
        if tok == "len":
            self.expect("(")
            name = self.take()
            if name not in _BUFFER_NAMES:
                raise QuerySyntaxError(f"unknown buffer {name!r}")
            short = _BUFFER_NAMES[name]
            index = None
            if short in ("o2s", "s2o"):
                self.expect("[")
                index = self.expr()
                self.expect("]")
            self.expect(")")
            return BufLen(short, index)
        if tok in ("orc", "ror") and self.peek() == "." and self.peek(1) in _ORC_VARS:
            self.take()
            return OrcVar(self.take())
        if re.fullmatch(r"[a-z_][A-Za-z_0-9]*", tok) and tok not in (
                "true", "false", "deadlock", "steps", "svc", "st", "orc", "not", "and", "or",
                "imply", "forall", "exists"):
            return Var(tok)
        raise QuerySyntaxError(f"unexpected token {tok!r} in expression")


def parse_predicate(text: str) -> Node:
    p = _Parser(text)
    node = p.pred()
    p.done()
    return node


def parse_expression(text: str) -> Node:
    p = _Parser(text)
    node = p.expr()
    p.done()
    return node


# ---------------------------------------------------------------------------
# Queries

INVARIANT, REACH, LEADS_TO, EXISTS_GLOBALLY, ALWAYS_EVENTUALLY = (
    "invariant", "reach", "leads_to", "exists_globally", "always_eventually")
PROBABILITY, EXPECTED_MAX = "probability", "expected_max"


@dataclass(frozen=True)
class Query:
    kind: str
    p: Node | None = None
    q: Node | None = None
    expr: Node | None = None
    horizon: float | None = None
    runs: int | None = None
    text: str = field(default="", compare=False)

    def nodes(self) -> list[Node]:
        return [x for x in (self.p, self.q, self.expr) if x is not None]

    def max_step_index(self) -> int | None:
        """Largest constant steps index referenced, -1 for a non-constant one."""
        best = None
        for n in self.nodes():
            for sub in walk(n):
                if isinstance(sub, StepsEq):
                    k = sub.index.value if isinstance(sub.index, Const) else -1
                    if k == -1:
                        return -1
                    best = k if best is None else max(best, k)
        return best


def parse_query(text: str) -> Query:
    text = text.strip()
    for prefix, kind in (("A[]", INVARIANT), ("E<>", REACH), ("E[]", EXISTS_GLOBALLY),
                         ("A<>", ALWAYS_EVENTUALLY)):
        if text.startswith(prefix):
            return Query(kind, p=parse_predicate(text[len(prefix):]), text=text)
    m = re.fullmatch(r"Pr\s*\[\s*<=\s*([\d.]+)\s*\]\s*\(\s*<>\s*(.*)\)", text, re.S)
    if m:
        return Query(PROBABILITY, p=parse_predicate(m.group(2)), horizon=float(m.group(1)),
                     text=text)
    m = re.fullmatch(r"E\s*\[\s*<=\s*([\d.]+)\s*;\s*(\d+)\s*\]\s*\(\s*max\s*:\s*(.*)\)", text, re.S)
    if m:
        return Query(EXPECTED_MAX, expr=parse_expression(m.group(3)),
                     horizon=float(m.group(1)), runs=int(m.group(2)), text=text)
    parts = _split_top(text, "-->")
    if parts:
        return Query(LEADS_TO, p=parse_predicate(parts[0]), q=parse_predicate(parts[1]),
                     text=text)
    raise QuerySyntaxError(f"unrecognised query {text!r}")


def _split_top(text: str, sep: str) -> tuple[str, str] | None:
    depth = 0
    i = 0
    while i < len(text):
        c = text[i]
        if c in "([":
            depth += 1
        elif c in ")]":
            depth -= 1
        elif depth == 0 and text.startswith(sep, i):
            return text[:i], text[i + len(sep):]
        i += 1
    return None


def walk(node: Node):
    yield node
    for name in getattr(node, "__dataclass_fields__", {}):
        child = getattr(node, name)
        if isinstance(child, Node):
            yield from walk(child)


def uses_deadlock(node: Node) -> bool:
    return any(isinstance(n, Special) and n.name == "deadlock" for n in walk(node))


# ---------------------------------------------------------------------------
# Compilation to closures

def compile_node(node: Node, params: SystemParams,
                 deadlock: Callable[[SystemState], bool] | None = None) -> Callable:
    """Compile to ``f(state, env)``; ``env`` maps bound variable names to ints.

    ``deadlock`` overrides how the ``deadlock`` atom is decided, so callers that
    already hold the enabled set can share it.
    """
    if deadlock is None:
        def deadlock(s):
            return not enabled(s, params)
    n = params.n_services
    q = params.queue_size

    def idx(f, what):
        def g(s, env):
            j = f(s, env)
            if not 0 <= j < n:
                raise MalformedPredicate(f"{what} index {j} out of range [0, {n - 1}]")
            return j
        return g

    def c(nd: Node):
        if isinstance(nd, Const):
            v = nd.value
            return lambda s, env: v
        if isinstance(nd, Var):
            name = nd.name

            def var(s, env):
                try:
                    return env[name]
                except KeyError:
                    raise MalformedPredicate(f"unbound variable {name!r}") from None
            return var
        if isinstance(nd, NSvc):
            return lambda s, env: n
        if isinstance(nd, QueueSize):
            return lambda s, env: q
        if isinstance(nd, Cell):
            f = idx(c(nd.index), nd.buffer)
            g = c(nd.pos)
            attr = nd.buffer

            def cell(s, env):
                b = getattr(s, attr)[f(s, env)]
                k = g(s, env)
                if not 0 <= k < q:
                    raise MalformedPredicate(f"cell {k} out of range [0, {q - 1}]")
                return int(b[k]) if k < len(b) else int(MessageConst.NIL)
            return cell
        if isinstance(nd, OrcVar):
            attr = {"i": "oi", "offerer": "offerer", "requester": "requester"}[nd.name]
            return lambda s, env: getattr(s, attr)
        if isinstance(nd, Arith):
            a, b = c(nd.left), c(nd.right)
            if nd.op == "+":
                return lambda s, env: a(s, env) + b(s, env)
            if nd.op == "-":
                return lambda s, env: a(s, env) - b(s, env)
            return lambda s, env: a(s, env) * b(s, env)
        if isinstance(nd, Cmp):
            a, b = c(nd.left), c(nd.right)
            op = nd.op
            return {
                "==": lambda s, env: a(s, env) == b(s, env),
                "!=": lambda s, env: a(s, env) != b(s, env),
                "<": lambda s, env: a(s, env) < b(s, env),
                "<=": lambda s, env: a(s, env) <= b(s, env),
                ">": lambda s, env: a(s, env) > b(s, env),
                ">=": lambda s, env: a(s, env) >= b(s, env),
            }[op]
        if isinstance(nd, Not):
            a = c(nd.arg)
            return lambda s, env: not a(s, env)
        if isinstance(nd, BoolOp):
            a, b = c(nd.left), c(nd.right)
            if nd.op == "and":
                return lambda s, env: a(s, env) and b(s, env)
            if nd.op == "or":
                return lambda s, env: a(s, env) or b(s, env)
            return lambda s, env: (not a(s, env)) or b(s, env)
        if isinstance(nd, Quant):
            if nd.lo is None:
                fast = _direct_quantifier(nd, n, q)
                if fast is not None:
                    return fast
                lo = hi = None
            else:
                lo, hi = c(nd.lo), c(nd.hi)
            body = c(nd.body)
            var = nd.var
            kind = nd.kind

            def quant(s, env):
                saved = env.get(var, _UNBOUND)
                acc = 0
                span = range(n) if lo is None else range(lo(s, env), hi(s, env) + 1)
                try:
                    for j in span:
                        env[var] = j
                        v = body(s, env)
                        if kind == "exists":
                            if v:
                                return True
                        elif kind == "forall":
                            if not v:
                                return False
                        else:
                            acc += int(v)
                finally:
                    if saved is _UNBOUND:
                        env.pop(var, None)
                    else:
                        env[var] = saved
                return {"exists": False, "forall": True}.get(kind, acc)
            return quant
        if isinstance(nd, Loc):
            name = nd.location
            if nd.kind == "orc":
                return lambda s, env: s.orc == name
            f = idx(c(nd.index), nd.kind)
            if nd.kind == "svc":
                return lambda s, env: s.svc[f(s, env)] == name
            fired = name == "Timeout"
            return lambda s, env: s.st[f(s, env)] == fired
        if isinstance(nd, D1):
            f = idx(c(nd.index), "svc")
            const, neg = nd.const, nd.negate
            return lambda s, env: (s.d1[f(s, env)] == const) != neg
        if isinstance(nd, StepsEq):
            k = c(nd.index)
            owner = None if nd.owner is None else idx(c(nd.owner), "steps owner")
            marker = nd.marker

            def steps_eq(s, env):
                pos = k(s, env)
                if pos < 0:
                    raise MalformedPredicate(f"negative steps index {pos}")
                who, mk = s.steps_entry(pos)
                if marker == StepMarker.UNSET:
                    return mk == StepMarker.UNSET
                # only services write the log
                return mk == marker and owner is not None and who == owner(s, env)
            return steps_eq
        if isinstance(nd, Special):
            if nd.name == "allEmpty":
                return lambda s, env: all_empty(s)
            if nd.name == "allTerminated":
                return lambda s, env: all_terminated(s)
            if nd.name == "anyTimeout":
                return lambda s, env: any(s.st)
            return lambda s, env: deadlock(s)
        if isinstance(nd, IsFull):
            f = idx(c(nd.index), "isFull")
            return lambda s, env: len(s.o2s[f(s, env)]) >= q
        if isinstance(nd, BufLen):
            if nd.index is None:
                attr = nd.buffer
                return lambda s, env: len(getattr(s, attr))
            f = idx(c(nd.index), nd.buffer)
            attr = nd.buffer
            return lambda s, env: len(getattr(s, attr)[f(s, env)])
        if isinstance(nd, Indicator):
            p = c(nd.pred)
            return lambda s, env: int(bool(p(s, env)))
        raise MalformedPredicate(f"cannot compile {nd!r}")

    return c(node)


def _direct_quantifier(nd: Quant, n: int, q: int) -> Callable | None:
    """Closed forms for quantifiers whose body is one atom indexed by the bound variable."""
    body, kind = nd.body, nd.kind
    if kind == "sum" and isinstance(body, Indicator):
        body = body.pred
    own = Var(nd.var)
    if isinstance(body, Loc) and body.kind == "svc" and body.index == own:
        name = body.location
        if kind == "exists":
            return lambda s, env: name in s.svc
        if kind == "forall":
            return lambda s, env: s.svc.count(name) == n
        return lambda s, env: s.svc.count(name)
    if isinstance(body, Loc) and body.kind == "st" and body.index == own:
        fired = body.location == "Timeout"
        if kind == "exists":
            return lambda s, env: fired in s.st
        if kind == "forall":
            return lambda s, env: s.st.count(fired) == n
        return lambda s, env: s.st.count(fired)
    if isinstance(body, D1) and body.index == own and not body.negate:
        const = body.const
        if kind == "exists":
            return lambda s, env: const in s.d1
        if kind == "forall":
            return lambda s, env: s.d1.count(const) == n
        return lambda s, env: s.d1.count(const)
    if isinstance(body, IsFull) and body.index == own:
        if kind == "exists":
            return lambda s, env: max(map(len, s.o2s)) >= q
        if kind == "forall":
            return lambda s, env: all(len(b) >= q for b in s.o2s)
        return lambda s, env: sum(len(b) >= q for b in s.o2s)
    if kind == "sum" and isinstance(nd.body, BufLen) and nd.body.index == own:
        attr = nd.body.buffer
        return lambda s, env: sum(map(len, getattr(s, attr)))
    return None


_UNBOUND = object()
_EMPTY_ENV: dict = {}


def compile_predicate(node: Node | str, params: SystemParams) -> Callable[[SystemState], bool]:
    if isinstance(node, str):
        node = parse_predicate(node)
    check_indices(node, params)
    f = compile_node(node, params)
    return lambda s: bool(f(s, _EMPTY_ENV))


def compile_expression(node: Node | str, params: SystemParams) -> Callable[[SystemState], int]:
    if isinstance(node, str):
        node = parse_expression(node)
    check_indices(node, params)
    f = compile_node(node, params)
    return lambda s: f(s, _EMPTY_ENV)


def check_indices(node: Node, params: SystemParams) -> None:
    """Reject constant process indices outside ``[0, N-1]`` before evaluation."""
    n = params.n_services
    for sub in walk(node):
        index = getattr(sub, "index", None) if isinstance(sub, (Loc, D1, IsFull, BufLen, Cell)) else None
        if isinstance(sub, StepsEq):
            index = sub.owner
        if isinstance(index, Const) and not 0 <= index.value < n:
            raise MalformedPredicate(f"index {index.value} out of range [0, {n - 1}]")


def eval_predicate(state: SystemState, pred: Node | str, params: SystemParams) -> bool:
    if isinstance(pred, str):
        pred = parse_predicate(pred)
    check_indices(pred, params)
    return compile_predicate(pred, params)(state)

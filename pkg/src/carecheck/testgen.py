"""Model-based test generation driven by steps-log queries.

A steps query pins the first ``k`` entries of the write-once steps log.  The
witness search explores the instrumented model and drops every state whose
written prefix already disagrees with the query; the first state whose log
holds the whole query ends the search.  Annotations attached to template edges
are then replayed along the witness into an abstract test, and bindings turn
its placeholders into literals.
"""

from __future__ import annotations

import json
import random
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .protocol import StepMarker, SystemParams
from .query import MalformedPredicate, QuerySyntaxError, compile_expression
from .semantics import (
    TEMPLATE_OF, Proc, SystemState, Trace, apply, declared_edges, enabled, initial_state,
)


class NoWitness(Exception):
    pass


class DepthExceeded(NoWitness):
    pass


class UnresolvedInterpolation(Exception):
    pass


class UnboundPlaceholder(Exception):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(set(missing))
        super().__init__("unbound placeholders: " + ", ".join(self.missing))


class TableSyntaxError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Steps queries

class StepConstraint(NamedTuple):
    index: int
    owner: int  # service index
    marker: StepMarker

    def __str__(self) -> str:
        return f"steps[{self.index}] == svc({self.owner}):{self.marker.name}"


_STEP_RE = re.compile(
    r"steps\s*\[\s*(\d+)\s*\]\s*==\s*(?:svc\s*\(\s*(\d+)\s*\)|(\d+))\s*:\s*([A-Z_]+)")


def parse_steps_query(text: str) -> list[StepConstraint]:
    """Lines (or ``&&``-joined atoms) of the form ``steps[k] == svc(j):MARKER``."""
    out = []
    for raw in re.split(r"\n|&&", text):
        line = raw.split("#", 1)[0].strip().strip("()").strip()
        if not line or line in ("E<>", "E<>("):
            continue
        line = line.removeprefix("E<>").strip().strip("()").strip()
        m = _STEP_RE.fullmatch(line)
        if not m:
            raise QuerySyntaxError(f"bad steps constraint {raw.strip()!r}")
        owner = int(m.group(2) if m.group(2) is not None else m.group(3))
        try:
            marker = StepMarker[m.group(4)]
        except KeyError:
            raise QuerySyntaxError(f"unknown step marker {m.group(4)!r}") from None
        if marker is StepMarker.UNSET:
            raise QuerySyntaxError("a steps query cannot demand UNSET")
        out.append(StepConstraint(int(m.group(1)), owner, marker))
    out.sort()
    for pos, c in enumerate(out):
        if c.index != pos:
            raise QuerySyntaxError("steps indices must run 0, 1, 2, ... without gaps")
    return out


def _consistent(steps: tuple, want: list) -> bool:
    for k, (owner, marker) in enumerate(steps):
        c = want[k]
        if owner != c.owner or marker != c.marker:
            return False
    return True


def find_witness(params: SystemParams, query: list[StepConstraint], *, search: str = "bfs",
                 depth_cap: int = 10_000, seed: int = 0, state_cap: int = 5_000_000) -> Trace:
    """Shortest (bfs) or first-found (dfs, rdfs) trace satisfying ``query``."""
    if depth_cap <= 0:
        raise ValueError("depth_cap must be positive")
    for pos, c in enumerate(query):
        if c.index != pos:
            raise ValueError("steps indices must run 0, 1, 2, ... without gaps")
        if not 0 <= c.owner < params.n_services:
            raise MalformedPredicate(f"owner svc({c.owner}) out of range")
    params = params.with_(steps_capacity=len(query))
    goal = len(query)
    s0 = initial_state(params)
    if goal == 0:
        return Trace((), (s0,))
    rng = random.Random(seed)
    parent: dict = {s0: None}
    depth = {s0: 0}
    frontier = deque([s0])
    cut = False
    while frontier:
        s = frontier.popleft() if search == "bfs" else frontier.pop()
        d = depth[s]
        succ = []
        for t in enabled(s, params):
            n = apply(s, t, params)
            if n in parent or not _consistent(n.steps, query):
                continue
            succ.append((t, n))
        if search == "rdfs":
            rng.shuffle(succ)
        elif search == "dfs":
            succ.reverse()  # pop() then visits in enabled order
        for t, n in succ:
            if n in parent:
                continue
            if d + 1 > depth_cap:
                cut = True
                continue
            parent[n] = (s, t)
            depth[n] = d + 1
            if len(n.steps) == goal:
                return _unwind(parent, n)
            if len(parent) >= state_cap:
                raise NoWitness(f"state cap {state_cap} reached")
            frontier.append(n)
    if cut:
        raise DepthExceeded(f"no witness within depth {depth_cap}")
    raise NoWitness("the steps query is unreachable")


def _unwind(parent: dict, s: SystemState) -> Trace:
    states, fired = [s], []
    while parent[s] is not None:
        s, t = parent[s]
        states.append(s)
        fired.append(t)
    states.reverse()
    fired.reverse()
    return Trace(tuple(fired), tuple(states))


# ---------------------------------------------------------------------------
# Annotation tables

@dataclass
class AnnotationTable:
    entries: dict = field(default_factory=dict)   # (template, edge_id) -> text
    preludes: dict = field(default_factory=dict)  # template -> text emitted before first use

    @classmethod
    def parse(cls, text: str) -> AnnotationTable:
        """``Template.edge_id ::= text`` lines; ``\\n`` in text separates commands.

        ``Template.@start`` gives commands placed once at the head of each
        process's part of the test.
        """
        table = cls()
        known = declared_edges()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "::=" not in line:
                raise TableSyntaxError(f"line {lineno}: expected Template.edge ::= text")
            key, body = (x.strip() for x in line.split("::=", 1))
            if "." not in key:
                raise TableSyntaxError(f"line {lineno}: expected Template.edge")
            template, edge = key.split(".", 1)
            if template not in known:
                raise TableSyntaxError(f"line {lineno}: unknown template {template!r}")
            body = body.replace("\\n", "\n")
            if edge == "@start":
                table.preludes[template] = body
                continue
            if edge not in {e for _, e in known[template]}:
                raise TableSyntaxError(f"line {lineno}: {template} has no edge {edge!r}")
            table.entries[(template, edge)] = body
        return table

    @classmethod
    def load(cls, path: str | Path) -> AnnotationTable:
        return cls.parse(Path(path).read_text())


class Emission(NamedTuple):
    owner: str      # process name, e.g. svc(0)
    position: int   # index of the fired transition in the trace
    edge: str       # Template.edge_id
    commands: tuple  # command lines


@dataclass
class AbstractTest:
    emissions: list = field(default_factory=list)
    preludes: dict = field(default_factory=dict)  # owner -> tuple of commands

    def lines(self) -> list[tuple[str, str]]:
        """(owner, command) pairs in emission order, each owner's prelude first."""
        out = []
        started = set()
        for e in self.emissions:
            if e.owner not in started:
                started.add(e.owner)
                out.extend((e.owner, c) for c in self.preludes.get(e.owner, ()))
            out.extend((e.owner, c) for c in e.commands)
        return out

    def placeholders(self) -> set[str]:
        found = set()
        for owner, cmd in self.lines():
            found.update(f"{owner}.{name}" for name in _PLACEHOLDER.findall(cmd))
        return found

    def to_text(self) -> str:
        return "".join(f"{o} {c}\n" for o, c in self.lines())

    @classmethod
    def parse(cls, text: str) -> AbstractTest:
        t = cls()
        for pos, raw in enumerate(text.splitlines()):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            owner, _, cmd = line.partition(" ")
            t.emissions.append(Emission(owner, pos, "", (cmd.strip(),)))
        return t


_INTERP = re.compile(r"\$\(([^)]*)\)")
_PLACEHOLDER = re.compile(r"%\{([^}]*)\}")


def _interpolate(text: str, state: SystemState, proc: Proc, params: SystemParams) -> str:
    def repl(m):
        expr = m.group(1).strip()
        if expr == "id":
            return str(proc.index if proc.kind != "orc" else 0)
        try:
            return str(compile_expression(expr, params)(state))
        except (QuerySyntaxError, MalformedPredicate) as exc:
            raise UnresolvedInterpolation(f"$({expr}): {exc}") from None
    return _INTERP.sub(repl, text)


def emit_abstract_test(trace: Trace, table: AnnotationTable, params: SystemParams,
                       scope: Iterable[str] | None = None) -> AbstractTest:
    """Dump the annotations of the in-scope edges fired along ``trace``.

    ``scope`` holds process names (``orc``, ``svc(0)``, ...) or template-wide
    selectors ``services`` / ``orchestrator``; ``None`` means every process.
    ``$()`` is evaluated on the source state of each step; ``%{x}`` becomes
    ``%{x[k]}`` where ``k`` counts earlier uses of ``x`` by the same process.
    """
    wanted = None if scope is None else set(scope)
    test = AbstractTest()
    counters: dict = {}
    for pos, t in enumerate(trace.transitions):
        owner = str(t.process)
        if wanted is not None and not (
                owner in wanted or "all" in wanted
                or (t.process.kind == "svc" and "services" in wanted)
                or (t.process.kind == "orc" and "orchestrator" in wanted)):
            continue
        template = TEMPLATE_OF[t.process.kind]
        text = table.entries.get((template, t.edge_id))
        if text is None:
            continue
        if owner not in test.preludes and template in table.preludes:
            test.preludes[owner] = tuple(table.preludes[template].split("\n"))
        text = _interpolate(text, trace.states[pos], t.process, params)

        def index(m):
            name = m.group(1).strip()
            if "[" in name:
                return m.group(0)
            key = (owner, name)
            k = counters.get(key, 0)
            counters[key] = k + 1
            return "%{" + f"{name}[{k}]" + "}"
        text = _PLACEHOLDER.sub(index, text)
        test.emissions.append(Emission(owner, pos, f"{template}.{t.edge_id}",
                                       tuple(text.split("\n"))))
    return test


# ---------------------------------------------------------------------------
# Bindings and concretisation

NULL = None


def parse_bindings(text: str) -> dict:
    """``symbol = "literal"`` or ``symbol = NULL`` per line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TableSyntaxError(f"bindings line {lineno}: expected symbol = value")
        key, val = (x.strip() for x in line.split("=", 1))
        if val == "NULL":
            out[key] = NULL
        else:
            try:
                v = json.loads(val)
            except json.JSONDecodeError:
                raise TableSyntaxError(f"bindings line {lineno}: bad literal {val!r}") from None
            if not isinstance(v, str):
                raise TableSyntaxError(f"bindings line {lineno}: literal must be a string")
            out[key] = v
    return out


def load_bindings(path: str | Path) -> dict:
    return parse_bindings(Path(path).read_text())


def _lookup(bindings: dict, owner: str, name: str):
    base = name.split("[", 1)[0]
    for key in (f"{owner}.{name}", f"{owner}.{base}", name, base):
        if key in bindings:
            return True, bindings[key]
    return False, None


def render_literal(value: str | None) -> str:
    return "NULL" if value is None else json.dumps(value, ensure_ascii=False)


def concretize(test: AbstractTest, bindings: dict) -> str:
    """Replace every placeholder; returns the conformance script text."""
    missing = []
    out = []
    for owner, cmd in test.lines():
        def repl(m):
            found, value = _lookup(bindings, owner, m.group(1).strip())
            if not found:
                missing.append(f"{owner}.{m.group(1).strip()}")
                return m.group(0)
            return render_literal(value)
        out.append(f"{owner} {_PLACEHOLDER.sub(repl, cmd)}\n")
    if missing:
        raise UnboundPlaceholder(missing)
    return "".join(out)


# ---------------------------------------------------------------------------
# Coverage

def edge_coverage(traces: Iterable[Trace]) -> dict[str, tuple[int, int]]:
    """Per template: (distinct fired (location, edge) pairs, declared pairs)."""
    declared = declared_edges()
    fired: dict = {k: set() for k in declared}
    for tr in traces:
        for s, t in zip(tr.states, tr.transitions):
            template = TEMPLATE_OF[t.process.kind]
            fired[template].add((s.location(t.process), t.edge_id))
    return {k: (len(fired[k] & declared[k]), len(declared[k])) for k in declared}


def random_witnesses(params: SystemParams, budget: int, seed: int = 0,
                     depth_cap: int = 400) -> list[Trace]:
    """Random maximal walks kept while they add edge coverage."""
    rng = random.Random(seed)
    kept: list[Trace] = []
    best = 0
    for _ in range(budget):
        s = initial_state(params)
        states, fired = [s], []
        for _ in range(depth_cap):
            ts = enabled(s, params)
            if not ts:
                break
            t = rng.choice(ts)
            s = apply(s, t, params)
            fired.append(t)
            states.append(s)
        tr = Trace(tuple(fired), tuple(states))
        total = sum(a for a, _ in edge_coverage(kept + [tr]).values())
        if total > best:
            best = total
            kept.append(tr)
    return kept

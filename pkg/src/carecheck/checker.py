"""Explicit-state verification of A[], E<>, -->, E[] and A<> queries.

States are hashed whole.  Invariant and reachability queries are decided on
the fly; leads-to builds the reachable graph and computes the states from
which every maximal path meets ``q`` (least fixpoint by successor counting);
E[] and A<> run a depth-first search restricted to the states satisfying the
path formula, succeeding on a dead end or a back edge.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .protocol import SystemParams
from .query import (
    ALWAYS_EVENTUALLY, EXISTS_GLOBALLY, INVARIANT, LEADS_TO, REACH, Node, Query,
    check_indices, compile_node, parse_predicate, parse_query,
)
from .semantics import SystemState, Trace, apply, enabled, format_trace, initial_state

DEFAULT_STATE_CAP = 50_000_000


class ResourceExhausted(Exception):
    """The state cap was hit before a verdict was reached."""


@dataclass
class Verdict:
    holds: bool | None  # None: unknown (resource cap)
    evidence: Trace | None = None
    states_explored: int = 0
    duration: float = 0.0
    query: str = ""
    note: str = ""

    @property
    def status(self) -> str:
        return {True: "holds", False: "fails", None: "unknown"}[self.holds]

    def to_record(self) -> str:
        lines = [f"query: {self.query}", f"verdict: {self.status}",
                 f"states_explored: {self.states_explored}",
                 f"duration_s: {self.duration:.3f}"]
        if self.note:
            lines.append(f"note: {self.note}")
        if self.evidence is not None:
            lines.append(f"evidence_steps: {len(self.evidence)}")
            if self.evidence.loop_start is not None:
                lines.append(f"evidence_loop_start: {self.evidence.loop_start}")
        return "\n".join(lines) + "\n"


Pred = Callable[[SystemState], bool]


class _Ctx:
    """Caches ``enabled`` for the state under inspection so ``deadlock`` is free."""

    def __init__(self, params: SystemParams):
        self.params = params
        self._state = None
        self._ts = None

    def enabled(self, s: SystemState):
        if s is not self._state:
            self._state = s
            self._ts = enabled(s, self.params)
        return self._ts

    def pred(self, node: Node | str | Callable | None) -> Pred:
        if node is None:
            return lambda s: True
        if callable(node) and not isinstance(node, Node):
            return node
        if isinstance(node, str):
            node = parse_predicate(node)
        check_indices(node, self.params)
        f = compile_node(node, self.params, deadlock=lambda s: not self.enabled(s))
        env: dict = {}
        return lambda s: bool(f(s, env))


def effective_params(params: SystemParams, nodes) -> SystemParams:
    """Size the steps log to what the query can observe.

    Steps never influence guards, so exploring with a shorter log only merges
    states the query cannot tell apart.
    """
    q = Query("invariant", *list(nodes)[:2]) if nodes else None
    k = q.max_step_index() if q is not None else None
    if k == -1:
        return params
    cap = 0 if k is None else k + 1
    return params.with_(steps_capacity=min(cap, params.steps_capacity))


def _path_to(parents: dict, target: SystemState, params: SystemParams) -> Trace:
    states = [target]
    while parents[states[-1]] is not None:
        states.append(parents[states[-1]])
    states.reverse()
    return _trace_from_states(states, params)


def _trace_from_states(states: list, params: SystemParams, loop_start: int | None = None) -> Trace:
    fired = []
    for a, b in zip(states, states[1:]):
        for t in enabled(a, params):
            if apply(a, t, params) == b:
                fired.append(t)
                break
        else:  # pragma: no cover - would mean the explorer and engine disagree
            raise RuntimeError("no transition links consecutive evidence states")
    return Trace(tuple(fired), tuple(states), loop_start)


# ---------------------------------------------------------------------------
# on-the-fly search for a state satisfying ``target``

def _search(params: SystemParams, ctx: _Ctx, target: Pred, search: str, state_cap: int):
    s0 = initial_state(params)
    parents = {s0: None}
    if target(s0):
        return s0, parents
    frontier = deque([s0])
    pop = frontier.popleft if search == "bfs" else frontier.pop
    while frontier:
        s = pop()
        for t in ctx.enabled(s):
            n = apply(s, t, params)
            if n in parents:
                continue
            parents[n] = s
            if target(n):
                return n, parents
            if len(parents) >= state_cap:
                raise ResourceExhausted(len(parents))
            frontier.append(n)
    return None, parents


def check_invariant(params: SystemParams, phi, *, search: str = "bfs",
                    state_cap: int = DEFAULT_STATE_CAP, query: str = "") -> Verdict:
    t0 = time.perf_counter()
    params = effective_params(params, [phi] if isinstance(phi, Node) else [])
    ctx = _Ctx(params)
    f = ctx.pred(phi)
    try:
        bad, parents = _search(params, ctx, lambda s: not f(s), search, state_cap)
    except ResourceExhausted as exc:
        return Verdict(None, None, exc.args[0], time.perf_counter() - t0, query, "state cap reached")
    if bad is None:
        return Verdict(True, None, len(parents), time.perf_counter() - t0, query)
    return Verdict(False, _path_to(parents, bad, params), len(parents),
                   time.perf_counter() - t0, query)


def check_reachability(params: SystemParams, phi, *, search: str = "bfs",
                       state_cap: int = DEFAULT_STATE_CAP, query: str = "") -> Verdict:
    t0 = time.perf_counter()
    params = effective_params(params, [phi] if isinstance(phi, Node) else [])
    ctx = _Ctx(params)
    f = ctx.pred(phi)
    try:
        hit, parents = _search(params, ctx, f, search, state_cap)
    except ResourceExhausted as exc:
        return Verdict(None, None, exc.args[0], time.perf_counter() - t0, query, "state cap reached")
    if hit is None:
        return Verdict(False, None, len(parents), time.perf_counter() - t0, query)
    return Verdict(True, _path_to(parents, hit, params), len(parents),
                   time.perf_counter() - t0, query)


# ---------------------------------------------------------------------------
# E[] / A<>: restricted depth-first search for a maximal path inside ``phi``

def _find_globally(params: SystemParams, ctx: _Ctx, phi: Pred, state_cap: int):
    s0 = initial_state(params)
    if not phi(s0):
        return None, 1
    visited = {s0}
    on_stack = {s0: 0}
    path = [s0]
    iters = [iter(ctx.enabled(s0))]
    if not ctx.enabled(s0):
        return Trace((), (s0,)), 1
    while iters:
        s = path[-1]
        advanced = False
        for t in iters[-1]:
            n = apply(s, t, params)
            if not phi(n):
                continue
            if n in on_stack:
                states = path + [n]
                return _trace_from_states(states, params, on_stack[n]), len(visited)
            if n in visited:
                continue
            visited.add(n)
            if len(visited) >= state_cap:
                raise ResourceExhausted(len(visited))
            ts = ctx.enabled(n)
            path.append(n)
            if not ts:
                return _trace_from_states(path, params), len(visited)
            on_stack[n] = len(path) - 1
            iters.append(iter(ts))
            advanced = True
            break
        if not advanced:
            iters.pop()
            del on_stack[path.pop()]
    return None, len(visited)


def check_exists_globally(params: SystemParams, phi, *, state_cap: int = DEFAULT_STATE_CAP,
                          query: str = "") -> Verdict:
    t0 = time.perf_counter()
    params = effective_params(params, [phi] if isinstance(phi, Node) else [])
    ctx = _Ctx(params)
    f = ctx.pred(phi)
    try:
        witness, n = _find_globally(params, ctx, f, state_cap)
    except ResourceExhausted as exc:
        return Verdict(None, None, exc.args[0], time.perf_counter() - t0, query, "state cap reached")
    return Verdict(witness is not None, witness, n, time.perf_counter() - t0, query)


def check_always_eventually(params: SystemParams, phi, *, state_cap: int = DEFAULT_STATE_CAP,
                            query: str = "") -> Verdict:
    """A<> phi, decided as the absence of a maximal path avoiding phi."""
    t0 = time.perf_counter()
    params = effective_params(params, [phi] if isinstance(phi, Node) else [])
    ctx = _Ctx(params)
    f = ctx.pred(phi)
    try:
        witness, n = _find_globally(params, ctx, lambda s: not f(s), state_cap)
    except ResourceExhausted as exc:
        return Verdict(None, None, exc.args[0], time.perf_counter() - t0, query, "state cap reached")
    return Verdict(witness is None, witness, n, time.perf_counter() - t0, query)


# ---------------------------------------------------------------------------
# leads-to over the full reachable graph

@dataclass
class StateGraph:
    states: list
    index: dict
    offsets: np.ndarray  # CSR row pointers
    targets: np.ndarray  # successor ids, deduplicated per state
    parent: np.ndarray   # BFS tree parent (-1 for the root)

    def successors(self, i: int) -> np.ndarray:
        return self.targets[self.offsets[i]:self.offsets[i + 1]]

    def __len__(self) -> int:
        return len(self.states)


def build_graph(params: SystemParams, state_cap: int = DEFAULT_STATE_CAP) -> StateGraph:
    s0 = initial_state(params)
    index = {s0: 0}
    states = [s0]
    parent = [-1]
    offsets = [0]
    flat: list[int] = []
    i = 0
    while i < len(states):
        s = states[i]
        succ = set()
        for t in enabled(s, params):
            n = apply(s, t, params)
            j = index.get(n)
            if j is None:
                j = len(states)
                if j >= state_cap:
                    raise ResourceExhausted(j)
                index[n] = j
                states.append(n)
                parent.append(i)
            succ.add(j)
        flat.extend(sorted(succ))
        offsets.append(len(flat))
        i += 1
    return StateGraph(states, index, np.asarray(offsets, dtype=np.int64),
                      np.asarray(flat, dtype=np.int64), np.asarray(parent, dtype=np.int64))


def always_eventually_set(graph: StateGraph, q_mask: np.ndarray) -> np.ndarray:
    """Boolean mask of states from which every maximal path reaches a q-state."""
    n = len(graph)
    outdeg = np.diff(graph.offsets)
    remaining = outdeg.copy()
    af = q_mask.copy()
    # predecessor CSR
    src = np.repeat(np.arange(n, dtype=np.int64), outdeg)
    order = np.argsort(graph.targets, kind="stable")
    pred_src = src[order]
    pred_off = np.searchsorted(graph.targets[order], np.arange(n + 1))
    work = list(np.flatnonzero(af))
    pred_src_l = pred_src.tolist()
    pred_off_l = pred_off.tolist()
    rem = remaining.tolist()
    afl = af.tolist()
    while work:
        j = work.pop()
        for k in range(pred_off_l[j], pred_off_l[j + 1]):
            p = pred_src_l[k]
            if afl[p]:
                continue
            rem[p] -= 1
            if rem[p] == 0:
                afl[p] = True
                work.append(p)
    return np.asarray(afl, dtype=bool)


def _graph_path(graph: StateGraph, i: int) -> list[int]:
    path = [i]
    while graph.parent[path[-1]] >= 0:
        path.append(int(graph.parent[path[-1]]))
    path.reverse()
    return path


def check_leads_to(params: SystemParams, p, q, *, state_cap: int = DEFAULT_STATE_CAP,
                   query: str = "") -> Verdict:
    t0 = time.perf_counter()
    nodes = [x for x in (p, q) if isinstance(x, Node)]
    params = effective_params(params, nodes)
    ctx = _Ctx(params)
    fp, fq = ctx.pred(p), ctx.pred(q)
    try:
        graph = build_graph(params, state_cap)
    except ResourceExhausted as exc:
        return Verdict(None, None, exc.args[0], time.perf_counter() - t0, query, "state cap reached")
    q_mask = np.fromiter((fq(s) for s in graph.states), dtype=bool, count=len(graph))
    af = always_eventually_set(graph, q_mask)
    bad = None
    for i, s in enumerate(graph.states):
        if not af[i] and fp(s):
            bad = i
            break
    elapsed = time.perf_counter() - t0
    if bad is None:
        return Verdict(True, None, len(graph), elapsed, query)
    # from a state outside the fixpoint some successor is also outside it
    path = _graph_path(graph, bad)
    seen = {bad: len(path) - 1}
    loop = None
    cur = bad
    while True:
        nxt = [int(j) for j in graph.successors(cur) if not af[j]]
        if not nxt:
            break
        cur = nxt[0]
        if cur in seen:
            loop = seen[cur]
            path.append(cur)
            break
        seen[cur] = len(path)
        path.append(cur)
    trace = _trace_from_states([graph.states[i] for i in path], params, loop)
    return Verdict(False, trace, len(graph), time.perf_counter() - t0, query)


# ---------------------------------------------------------------------------

def check_query(params: SystemParams, query: Query | str, *, search: str = "bfs",
                state_cap: int = DEFAULT_STATE_CAP) -> Verdict:
    if isinstance(query, str):
        query = parse_query(query)
    text = query.text
    if query.kind == INVARIANT:
        return check_invariant(params, query.p, search=search, state_cap=state_cap, query=text)
    if query.kind == REACH:
        return check_reachability(params, query.p, search=search, state_cap=state_cap, query=text)
    if query.kind == LEADS_TO:
        return check_leads_to(params, query.p, query.q, state_cap=state_cap, query=text)
    if query.kind == EXISTS_GLOBALLY:
        return check_exists_globally(params, query.p, state_cap=state_cap, query=text)
    if query.kind == ALWAYS_EVENTUALLY:
        return check_always_eventually(params, query.p, state_cap=state_cap, query=text)
    raise ValueError(f"{query.kind} queries are answered by simulation, not by the checker")


def evidence_text(v: Verdict) -> str:
    return format_trace(v.evidence) if v.evidence is not None else ""

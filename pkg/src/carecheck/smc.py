"""Monte Carlo simulation of the stochastic semantics.

Delayed edges race with exponential delays (``write_rate`` for sends,
``read_rate`` for receives); socket clocks advance with global time and fire
``TimeoutFire(j)`` once they reach ``timeout``.  Committed steps take no time.

Racing one exponential per enabled delayed instance is implemented as a single
draw from the superposed rate followed by a rate-proportional pick of the
winner, which has the same joint law.

Each run ``r`` draws from ``numpy.random.PCG64(SeedSequence(seed, spawn_key=(r,)))``
so any run can be reproduced on its own.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats

from .protocol import SystemParams, TimeoutMode
from .query import (
    EXPECTED_MAX, PROBABILITY, Node, Query, check_indices, compile_node, parse_expression,
    parse_predicate, parse_query,
)
from .semantics import (
    COMMITTED, ORC, READ, TIMEOUT_FIRE, Proc, SystemState, Trace, TransitionInstance, apply,
    _orc_edges, _svc_edges, committed_sets, initial_state,
)

RNG_ALGORITHM = "numpy PCG64, SeedSequence(seed, spawn_key=(run,))"


class DomainError(ValueError):
    pass


def chernoff_runs(alpha: float, epsilon: float) -> int:
    """Runs needed so that P(|p' - p| > epsilon) <= alpha."""
    if not (0 < alpha < 1 and 0 < epsilon < 1):
        raise DomainError("alpha and epsilon must lie in (0, 1)")
    return math.ceil((math.log(2) - math.log(alpha)) / (2 * epsilon * epsilon))


class Interval(NamedTuple):
    lo: float
    hi: float
    p_hat: float
    confidence: float
    runs: int
    epsilon: float


@dataclass
class StochasticRun:
    events: list            # (time, TransitionInstance), empty unless recorded
    states: list | None     # visited states when recorded
    horizon: float
    end_time: float
    final: SystemState
    reached: bool = False   # the monitored event held at some visited state
    maximum: float | None = None

    def trace(self) -> Trace:
        return Trace(tuple(t for _, t in self.events),
                     tuple(self.states) if self.states is not None else ())


class _Uniforms:
    """Batched uniforms in (0, 1] from one PCG64 stream."""

    __slots__ = ("gen", "buf", "pos")

    def __init__(self, seed: int, run: int):
        ss = np.random.SeedSequence(seed, spawn_key=(run,))
        self.gen = np.random.Generator(np.random.PCG64(ss))
        self.buf: list = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = (1.0 - self.gen.random(512)).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


_PEER_PARTNER = {
    "recv_peer_request": -1, "send_peer_offer": -1, "recv_peer_ack": -1,
    "send_peer_request": 1, "recv_peer_offer": 1, "send_acks": 1,
}


class Simulator:
    """Reusable simulator for one parameter set."""

    def __init__(self, params: SystemParams):
        self.params = params
        self.n = params.n_services
        orc_c, svc_c = committed_sets(params)
        self.orc_committed = orc_c
        self.svc_committed = svc_c
        self.procs = [ORC] + [Proc("svc", j) for j in range(self.n)]
        self.rate = {"write": params.write_rate, "read": params.read_rate}
        self.timeouts = params.timeout_mode is TimeoutMode.NONDET
        self.s0 = initial_state(params)
        self._instances: list[dict] = [{} for _ in self.procs]
        self._shared: dict = {}

    def _entry(self, ts: list) -> tuple:
        rate = self.rate
        d = [(rate.get(t.delay_class, 0.0), t) for t in ts]  # unused when committed
        total = 0.0 if not d else d[0][0] if len(d) == 1 else sum(r for r, _ in d)
        return ts, d, total

    def _refresh(self, k: int, s: SystemState, inst, delayed, rates, committed: set) -> None:
        if k == 0:
            is_c = s.orc in self.orc_committed
            edges = _orc_edges(s, self.params)
        else:
            is_c = s.svc[k - 1] in self.svc_committed
            edges = _svc_edges(s, self.params, k - 1)
        if type(edges) is tuple:
            # shared selection tuples: instances and branch groups built once
            entry = self._shared.get(id(edges))
            if entry is None:
                entry = self._shared[id(edges)] = self._entry(_Choices(
                    [TransitionInstance(self.procs[k], *e) for e in edges]))
        else:
            cache = self._instances[k]
            key = tuple(edges)
            entry = cache.get(key)
            if entry is None:
                entry = cache[key] = self._entry(
                    [TransitionInstance(self.procs[k], *e) for e in edges])
        ts, d, total = entry
        inst[k] = ts
        if is_c:
            committed.add(k)
            delayed[k] = ()
            rates[k] = 0.0
        else:
            committed.discard(k)
            delayed[k] = d if d else ()
            rates[k] = total

    def run(self, horizon: float, seed: int, run_index: int = 0, *,
            event: Callable[[SystemState], bool] | None = None,
            observe: Callable[[SystemState], float] | None = None,
            record: bool = False) -> StochasticRun:
        """One run until the horizon, a deadlock, global termination or a timeout.

        ``event`` stops the run as soon as it holds (unless ``observe`` is
        also given); ``observe`` is maximised over every visited state.
        """
        if horizon <= 0:
            raise DomainError("horizon must be positive")
        p = self.params
        n = self.n
        u = _Uniforms(seed, run_index)
        s = self.s0
        timeout = p.timeout
        inf = math.inf
        # last clock reset per service; inf once the service can no longer time out
        last_reset = [0.0] * n
        now = 0.0
        events: list = []
        states = [s] if record else None
        reached = bool(event(s)) if event is not None else False
        best = observe(s) if observe is not None else None
        inst: list = [None] * (n + 1)
        delayed: list = [None] * (n + 1)
        rates = [0.0] * (n + 1)
        committed: set = set()
        refresh = self._refresh
        dirty = range(n + 1)
        timeouts = self.timeouts
        log = math.log
        while not reached or observe is not None:
            for k in dirty:
                refresh(k, s, inst, delayed, rates, committed)
            if committed:
                cands = [k for k in committed if inst[k]]
                if not cands:
                    break  # a committed process is blocked
                k = cands[int(u() * len(cands)) % len(cands)] if len(cands) > 1 else cands[0]
                t = _pick_weighted(inst[k], u)
            else:
                total = sum(rates)
                oldest = min(last_reset) if timeouts else inf
                deadline = oldest + timeout
                delay = -log(u()) / total if total > 0 else inf
                if delay == inf and deadline == inf:
                    break  # nothing can ever fire again
                if now + delay >= deadline:
                    if deadline > horizon:
                        now = horizon
                        break
                    now = deadline
                    t = TransitionInstance(Proc("st", last_reset.index(oldest)),
                                           "fire", (), 1, TIMEOUT_FIRE)
                elif delay == inf or now + delay > horizon:
                    if delay != inf:
                        now = horizon
                    break
                else:
                    now += delay
                    x = u() * total
                    k = 0
                    for k in range(n + 1):
                        x -= rates[k]
                        if x < 0:
                            break
                    d = delayed[k]
                    while not d:  # rounding pushed past the last nonzero rate
                        k -= 1
                        d = delayed[k]
                    t = d[-1][1]
                    if len(d) > 1:
                        x = u() * rates[k]
                        for r, i in d:
                            x -= r
                            if x < 0:
                                t = i
                                break
            before = s
            s = apply(s, t, p)
            if record:
                states.append(s)
                events.append((now, t))
            proc = t.process
            if proc.kind == "st":
                break  # the fail broadcast is absorbing
            bo, ao, bs, as_ = before.o2s, s.o2s, before.s2o, s.s2o
            if proc.kind == "svc":
                # a service only moves its own buffers; its guards never read
                # orchestrator variables, so the orchestrator is refreshed
                # only when a buffer changed
                j = proc.index
                orc_dirty = bo[j] is not ao[j] or bs[j] is not as_[j]
                touched = [j]
                partner = _PEER_PARTNER.get(t.edge_id)
                if partner is not None:
                    touched.append(j + partner)
                if s.svc[j] == "Terminated":
                    last_reset[j] = inf
            else:
                orc_dirty = True
                touched = [j for j in range(n) if bo[j] is not ao[j] or bs[j] is not as_[j]]
            for j in touched:
                if last_reset[j] != inf:
                    last_reset[j] = now
            if before.r2o is not s.r2o or before.o2r is not s.o2r:
                dirty = range(n + 1)
            else:
                dirty = [j + 1 for j in touched]
                if orc_dirty:
                    dirty.insert(0, 0)
            if event is not None and not reached and event(s):
                reached = True
            if observe is not None:
                v = observe(s)
                if v > best:
                    best = v
        return StochasticRun(events, states, horizon, now, s, reached, best)


def _branch_groups(instances) -> tuple[list, list, float]:
    groups: dict = {}
    for t in instances:
        groups.setdefault(t.edge_id, []).append(t)
    lists = list(groups.values())
    weights = [g[0].weight for g in lists]
    return lists, weights, float(sum(weights))


class _Choices(list):
    """Instance list whose branch grouping is computed once."""

    def __init__(self, items):
        super().__init__(items)
        self.groups = _branch_groups(items)


def _pick_weighted(instances: list, u) -> TransitionInstance:
    """Branch groups by weight, then uniformly within the chosen group."""
    if len(instances) == 1:
        return instances[0]
    lists, weights, total = (instances.groups if isinstance(instances, _Choices)
                             else _branch_groups(instances))
    g = lists[-1]
    if len(lists) > 1:
        x = u() * total
        for gi, w in zip(lists, weights):
            x -= w
            if x < 0:
                g = gi
                break
    return g[int(u() * len(g)) % len(g)]


def simulate_run(params: SystemParams, horizon: float, seed: int, run_index: int = 0,
                 record: bool = True) -> StochasticRun:
    return Simulator(params).run(horizon, seed, run_index, record=record)


# ---------------------------------------------------------------------------
# Estimation

@dataclass
class ProbabilityResult:
    interval: Interval
    verdicts: np.ndarray  # per-run booleans
    seed: int
    horizon: float
    duration: float
    query: str = ""

    def to_record(self) -> str:
        iv = self.interval
        return (f"query: {self.query}\nhorizon: {self.horizon:g}\nruns: {iv.runs}\n"
                f"p_hat: {iv.p_hat:.6f}\n"
                f"interval: [{iv.lo:.6f}, {iv.hi:.6f}]\nconfidence: {iv.confidence}\n"
                f"epsilon: {iv.epsilon}\nseed: {self.seed}\nrng: {RNG_ALGORITHM}\n"
                f"duration_s: {self.duration:.3f}\n")


@dataclass
class ExpectedMaxResult:
    mean: float
    ci95: tuple
    maxima: np.ndarray
    seed: int
    horizon: float
    duration: float
    query: str = ""

    def to_record(self) -> str:
        return (f"query: {self.query}\nhorizon: {self.horizon:g}\nruns: {len(self.maxima)}\n"
                f"mean: {self.mean:.6f}\n"
                f"ci95: [{self.ci95[0]:.6f}, {self.ci95[1]:.6f}]\nseed: {self.seed}\n"
                f"rng: {RNG_ALGORITHM}\nduration_s: {self.duration:.3f}\n")


def _as_pred(node, params: SystemParams) -> Callable[[SystemState], bool]:
    if isinstance(node, str):
        node = parse_predicate(node)
    check_indices(node, params)
    f = compile_node(node, params)
    env: dict = {}
    return lambda s: bool(f(s, env))


def interval_from_verdicts(verdicts: np.ndarray, alpha: float, epsilon: float) -> Interval:
    runs = len(verdicts)
    p_hat = float(np.count_nonzero(verdicts)) / runs
    return Interval(max(0.0, p_hat - epsilon), min(1.0, p_hat + epsilon), p_hat,
                    1 - alpha, runs, epsilon)


def estimate_probability(params: SystemParams, event, horizon: float, alpha: float,
                         epsilon: float, seed: int, *, runs: int | None = None,
                         query: str = "") -> ProbabilityResult:
    """Estimate P(<> event within horizon) with the Chernoff-Hoeffding run count."""
    needed = chernoff_runs(alpha, epsilon)
    runs = needed if runs is None else runs
    t0 = time.perf_counter()
    f = _as_pred(event, params)
    sim = Simulator(params)
    verdicts = np.zeros(runs, dtype=bool)
    for r in range(runs):
        verdicts[r] = sim.run(horizon, seed, r, event=f).reached
    iv = interval_from_verdicts(verdicts, alpha, epsilon)
    return ProbabilityResult(iv, verdicts, seed, horizon, time.perf_counter() - t0, query)


def estimate_expected_max(params: SystemParams, expr, horizon: float, runs: int, seed: int,
                          *, query: str = "") -> ExpectedMaxResult:
    if runs < 2:
        raise DomainError("need at least two runs for a confidence interval")
    if isinstance(expr, str):
        expr = parse_expression(expr)
    check_indices(expr, params)
    g = compile_node(expr, params)
    env: dict = {}
    observe = lambda s: g(s, env)  # noqa: E731
    t0 = time.perf_counter()
    sim = Simulator(params)
    maxima = np.empty(runs, dtype=float)
    for r in range(runs):
        maxima[r] = sim.run(horizon, seed, r, observe=observe).maximum
    mean = float(maxima.mean())
    sd = float(maxima.std(ddof=1))
    if sd == 0.0:
        ci = (mean, mean)
    else:
        half = float(stats.t.ppf(0.975, runs - 1)) * sd / math.sqrt(runs)
        ci = (mean - half, mean + half)
    return ExpectedMaxResult(mean, ci, maxima, seed, horizon, time.perf_counter() - t0, query)


def run_query(params: SystemParams, query: Query | str, *, alpha: float = 0.05,
              epsilon: float = 0.01, seed: int = 0, runs: int | None = None):
    if isinstance(query, str):
        query = parse_query(query)
    if query.kind == PROBABILITY:
        return estimate_probability(params, query.p, query.horizon, alpha, epsilon, seed,
                                    runs=runs, query=query.text)
    if query.kind == EXPECTED_MAX:
        return estimate_expected_max(params, query.expr, query.horizon,
                                     runs if runs is not None else query.runs, seed,
                                     query=query.text)
    raise ValueError(f"{query.kind} queries need the exhaustive checker")

"""Reference orchestrator: walks a contract automaton and drives live services."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..protocol import Action, Choice, Configuration
from .contract import MATCH, OFFER, ContractAutomaton, Label
from .errors import HandshakeMismatch, ProtocolViolation
from .framing import DEFAULT_DEADLINE, Channel, connect

STOP = "STOP"


class ChoicePolicy:
    """Dictatorial decision rule; ``choose`` gets candidate label texts plus ``STOP``."""

    def choose(self, state: str, candidates: list[str]) -> str:
        raise NotImplementedError


class StopAtFinal(ChoicePolicy):
    def choose(self, state, candidates):
        return STOP if STOP in candidates else candidates[0]


class Scripted(ChoicePolicy):
    """Replays fixed decisions; once they run out it behaves like :class:`StopAtFinal`."""

    def __init__(self, decisions):
        self.decisions = list(decisions)

    def choose(self, state, candidates):
        if not self.decisions:
            return StopAtFinal().choose(state, candidates)
        pick = self.decisions.pop(0)
        if pick not in candidates:
            raise ProtocolViolation(f"scripted choice {pick!r} not among {candidates} at {state}")
        return pick


class SeededUniform(ChoicePolicy):
    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def choose(self, state, candidates):
        return self.rng.choice(candidates)


def make_policy(text: str, seed: int = 0) -> ChoicePolicy:
    """``stop-at-final``, ``seeded`` or ``scripted:<label>;<label>;...``."""
    if text == "stop-at-final":
        return StopAtFinal()
    if text in ("seeded", "uniform", "seeded-uniform"):
        return SeededUniform(seed)
    if text.startswith("scripted:"):
        return Scripted(x.strip() for x in text[len("scripted:"):].split(";") if x.strip())
    raise ValueError(f"unknown choice policy {text!r}")


def majority(votes: list[str]) -> str:
    """Most voted label; ties go to the lexicographically least one."""
    counts: dict = {}
    for v in votes:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


@dataclass
class OrchestrationReport:
    labels: list = field(default_factory=list)          # executed label texts
    choices: list = field(default_factory=list)         # (state, candidates, chosen)
    peer_sessions: list = field(default_factory=list)   # (requester, offerer, "host:port")
    final_acks: int = 0
    stopped: bool = False
    final_state: str = ""
    unread: dict = field(default_factory=dict)          # service index -> bytes left unread
    logs: dict = field(default_factory=dict)            # service index -> channel log


def run_orchestrator(contract: ContractAutomaton, endpoints, config: Configuration,
                     policy: ChoicePolicy | None = None, seed: int = 0,
                     deadline: float = DEFAULT_DEADLINE, max_steps: int = 10_000) -> OrchestrationReport:
    if contract.rank != len(endpoints):
        raise ValueError(f"contract rank {contract.rank} but {len(endpoints)} endpoints")
    policy = policy or SeededUniform(seed)
    report = OrchestrationReport()
    chans: list[Channel] = []
    try:
        for i, (host, port) in enumerate(endpoints):
            chans.append(connect(host, port, deadline, name=f"svc({i})"))
        _check(chans, config)
        state = contract.initial
        for _ in range(max_steps):
            moves = contract.moves(state)
            final = contract.is_final(state)
            if not moves:
                if not final:
                    raise ProtocolViolation(f"stuck in non-final state {state}")
                break
            if len(moves) > 1 or final:
                chosen = _choose(chans, config, policy, state, moves, final, report)
                if chosen == STOP:
                    break
                move = next(t for t in moves if str(t.label) == chosen)
            else:
                move = moves[0]
            _execute(chans, config, move.label, endpoints, report)
            report.labels.append(str(move.label))
            state = move.target
        else:
            raise ProtocolViolation(f"no stop after {max_steps} steps")
        for ch in chans:
            ch.send("ORC_STOP")
        report.stopped = True
        report.final_state = state
        for i, ch in enumerate(chans):
            report.unread[i] = ch.finish()
    finally:
        for i, ch in enumerate(chans):
            report.logs[i] = ch.log
            ch.close()
    return report


def _check(chans: list[Channel], config: Configuration) -> None:
    choice_tag, action_tag = (t.name for t in config.tags())
    for i, ch in enumerate(chans):
        ch.send("ORC_CHECK")
        ch.send(choice_tag)
        ch.send(action_tag)
        reply = ch.recv()
        if reply == "ERROR":
            raise HandshakeMismatch(f"svc({i}) rejected configuration {config}")
        if reply != "ACK":
            raise ProtocolViolation(f"svc({i}) answered the check with {reply!r}")


def _choose(chans, config, policy, state, moves, final, report) -> str:
    candidates = [str(t.label) for t in moves] + ([STOP] if final else [])
    for ch in chans:
        ch.send("ORC_CHOICE")
    if config.choice is Choice.DICTATORIAL:
        chosen = policy.choose(state, list(candidates))
    else:
        involved = sorted({i for t in moves for i in t.label.involved()})
        for i, ch in enumerate(chans):
            ch.send(";".join(candidates) if i in involved else "SKIP")
        votes = []
        for i in involved:
            v = chans[i].recv()
            if v not in candidates:
                raise ProtocolViolation(f"svc({i}) voted {v!r}, not among {candidates}")
            votes.append(v)
        chosen = majority(votes)
    report.choices.append((state, candidates, chosen))
    return chosen


def _expect(ch: Channel, want: str) -> None:
    got = ch.recv()
    if got != want:
        raise ProtocolViolation(f"{ch.name}: expected {want!r}, got {got!r}")


def _execute(chans, config, label: Label, endpoints, report) -> None:
    a = label.action
    if label.kind == OFFER:
        off = chans[label.offerer]
        off.send(a)
        if config.action is Action.DISTRIBUTED:
            off.send("TYPEOFFER")
        off.send(None)
        off.recv()
        return
    if label.kind != MATCH:
        raise ProtocolViolation(f"request label {label} has no partner")
    req, off = chans[label.requester], chans[label.offerer]
    if config.action is Action.CENTRALISED:
        req.send(a)
        req.send(None)
        request = req.recv()
        off.send(a)
        off.send(request)
        offer = off.recv()
        req.send(offer)
        return
    off.send(a)
    off.send("TYPEMATCH")
    req.send(a)
    port = off.recv()
    if port is None or not port.isdigit():
        raise ProtocolViolation(f"{off.name}: expected a port number, got {port!r}")
    host = endpoints[label.offerer][0]
    address = f"{host}:{port}"
    req.send(address)
    req.send(port)
    _expect(req, "ACK")
    report.peer_sessions.append((label.requester, label.offerer, address))
    report.final_acks += 1

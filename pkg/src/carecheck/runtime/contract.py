"""Orchestration contract automata.

File format, one declaration per line (``#`` starts a comment)::

    rank 2
    initial S0
    final S2 S3
    S0 (!euro, -) S1
    S1 [?coffee, !coffee] S2

Labels hold one entry per service: ``?a`` (request), ``!a`` (offer) or ``-``
(idle).  Only three shapes are legal: a lone request, a lone offer, or a
request matched by an offer of the same action.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IllegalLabel, ParseError

IDLE = "-"
REQUEST, OFFER, MATCH = "request", "offer", "match"
_ENTRY = re.compile(r"[?!][A-Za-z_][A-Za-z0-9_]*|-")


@dataclass(frozen=True)
class Label:
    entries: tuple[str, ...]

    @property
    def kind(self) -> str:
        busy = [e for e in self.entries if e != IDLE]
        return MATCH if len(busy) == 2 else (REQUEST if busy[0][0] == "?" else OFFER)

    @property
    def action(self) -> str:
        return next(e[1:] for e in self.entries if e != IDLE)

    def index_of(self, sign: str) -> int | None:
        for i, e in enumerate(self.entries):
            if e != IDLE and e[0] == sign:
                return i
        return None

    @property
    def offerer(self) -> int | None:
        return self.index_of("!")

    @property
    def requester(self) -> int | None:
        return self.index_of("?")

    def involved(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e != IDLE]

    def __str__(self) -> str:
        return "(" + ",".join(self.entries) + ")"


def parse_label(text: str) -> Label:
    body = text.strip()
    if len(body) < 2 or body[0] not in "[(" or body[-1] not in "])":
        raise ParseError(f"label must be bracketed: {text!r}")
    entries = tuple(e.strip() for e in body[1:-1].split(","))
    for e in entries:
        if not _ENTRY.fullmatch(e):
            raise ParseError(f"bad label entry {e!r} in {text!r}")
    busy = [e for e in entries if e != IDLE]
    reqs = [e for e in busy if e[0] == "?"]
    offs = [e for e in busy if e[0] == "!"]
    ok = (len(busy) == 1 or
          (len(reqs) == 1 and len(offs) == 1 and reqs[0][1:] == offs[0][1:]))
    if not ok:
        raise IllegalLabel(f"{text!r} is not a request, offer or match label")
    return Label(entries)


@dataclass(frozen=True)
class Transition:
    source: str
    label: Label
    target: str


@dataclass
class ContractAutomaton:
    rank: int
    initial: str
    finals: frozenset
    transitions: tuple = ()
    _out: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ParseError("rank must be positive")
        for t in self.transitions:
            if len(t.label.entries) != self.rank:
                raise ParseError(f"label {t.label} has {len(t.label.entries)} entries, rank is {self.rank}")
            self._out.setdefault(t.source, []).append(t)

    @property
    def states(self) -> set[str]:
        out = {self.initial} | set(self.finals)
        for t in self.transitions:
            out.update((t.source, t.target))
        return out

    def moves(self, state: str) -> list[Transition]:
        return list(self._out.get(state, ()))

    def is_final(self, state: str) -> bool:
        return state in self.finals

    def accepts(self, labels) -> bool:
        """Whether the label sequence is a run ending in a final state (deterministic walk)."""
        current = {self.initial}
        for lab in labels:
            text = str(lab)
            current = {t.target for s in current for t in self.moves(s) if str(t.label) == text}
            if not current:
                return False
        return any(s in self.finals for s in current)

    def to_text(self) -> str:
        lines = [f"rank {self.rank}", f"initial {self.initial}",
                 "final " + " ".join(sorted(self.finals))]
        lines += [f"{t.source} {t.label} {t.target}" for t in self.transitions]
        return "\n".join(lines) + "\n"


_TRANS = re.compile(r"(\S+)\s+([\[(].*[\])])\s+(\S+)")


def parse_contract(text: str) -> ContractAutomaton:
    rank = initial = None
    finals: set = set()
    trans = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "rank":
            try:
                rank = int(rest)
            except ValueError:
                raise ParseError(f"line {lineno}: bad rank {rest!r}") from None
        elif head == "initial":
            if not rest or " " in rest:
                raise ParseError(f"line {lineno}: expected one initial state")
            initial = rest
        elif head == "final":
            finals.update(rest.split())
        else:
            m = _TRANS.fullmatch(line)
            if not m:
                raise ParseError(f"line {lineno}: expected 'source (label) target'")
            trans.append(Transition(m.group(1), parse_label(m.group(2)), m.group(3)))
    if rank is None:
        raise ParseError("missing rank")
    if initial is None:
        raise ParseError("missing initial state")
    return ContractAutomaton(rank, initial, frozenset(finals), tuple(trans))


def load_contract(path: str | Path) -> ContractAutomaton:
    return parse_contract(Path(path).read_text())

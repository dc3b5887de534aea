"""Reference service endpoint serving one orchestration session."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..protocol import Action, Choice, Configuration
from .errors import ProtocolViolation
from .framing import DEFAULT_DEADLINE, Channel, accept, connect, listen


@dataclass
class Behaviour:
    """Scripted replies: ``offers[a]`` answers an invocation of offer ``a``,
    ``requests[a]`` is the payload sent when requesting ``a``.  ``votes`` are
    cast in order at majoritarian choices; afterwards the service votes ``STOP``
    when allowed and the first candidate otherwise."""

    offers: dict = field(default_factory=dict)
    requests: dict = field(default_factory=dict)
    votes: list = field(default_factory=list)

    def vote(self, candidates: list[str]) -> str:
        if self.votes:
            return self.votes.pop(0)
        return "STOP" if "STOP" in candidates else candidates[0]

    @classmethod
    def from_mapping(cls, data: dict) -> Behaviour:
        unknown = set(data) - {"offers", "requests", "votes"}
        if unknown:
            raise ValueError(f"unknown behaviour keys {sorted(unknown)}")
        return cls(dict(data.get("offers", {})), dict(data.get("requests", {})),
                   list(data.get("votes", [])))


def load_behaviour(path: str | Path) -> Behaviour:
    return Behaviour.from_mapping(json.loads(Path(path).read_text()))


@dataclass
class ServiceReport:
    accepted_config: bool = False
    terminated: bool = False
    handled: list = field(default_factory=list)     # (role, action)
    log: list = field(default_factory=list)         # orchestrator connection frames
    peer_logs: list = field(default_factory=list)   # one frame log per peer session
    unread: int = 0
    peer_unread: int = 0


class ServiceEndpoint:
    """Listening socket bound at construction so the port is known before serving."""

    def __init__(self, behaviour: Behaviour, config: Configuration, port: int = 0,
                 host: str = "127.0.0.1", deadline: float = DEFAULT_DEADLINE):
        self.behaviour = behaviour
        self.config = config
        self.host = host
        self.deadline = deadline
        self.server = listen(port, host)
        self.port = self.server.getsockname()[1]

    def serve(self) -> ServiceReport:
        report = ServiceReport()
        try:
            ch = accept(self.server, self.deadline, name="orc")
        finally:
            self.server.close()
        report.log = ch.log
        try:
            self._session(ch, report)
        finally:
            ch.close()
        return report

    def _session(self, ch: Channel, report: ServiceReport) -> None:
        first = ch.recv()
        if first != "ORC_CHECK":
            raise ProtocolViolation(f"expected ORC_CHECK, got {first!r}")
        choice_tag, action_tag = ch.recv(), ch.recv()
        mine = tuple(t.name for t in self.config.tags())
        if (choice_tag, action_tag) != mine:
            ch.send("ERROR")
            report.unread = ch.finish()
            return
        ch.send("ACK")
        report.accepted_config = True
        while True:
            msg = ch.recv()
            if msg == "ORC_STOP":
                report.terminated = True
                report.unread = ch.finish()
                return
            if msg == "ORC_CHOICE":
                if self.config.choice is Choice.MAJORITARIAN:
                    listing = ch.recv()
                    if listing != "SKIP":
                        ch.send(self.behaviour.vote(listing.split(";")))
                continue
            if msg is None:
                raise ProtocolViolation("null frame where a command was expected")
            if self.config.action is Action.CENTRALISED:
                self._centralised(ch, msg, report)
            else:
                self._distributed(ch, msg, report)

    def _offer_reply(self, action: str):
        if action not in self.behaviour.offers:
            raise ProtocolViolation(f"no offer behaviour for {action!r}")
        return self.behaviour.offers[action]

    def _centralised(self, ch: Channel, action: str, report: ServiceReport) -> None:
        payload = ch.recv()
        if action in self.behaviour.requests and payload is None:
            ch.send(self.behaviour.requests[action])
            ch.recv()  # the forwarded offer
            report.handled.append(("request", action))
        else:
            ch.send(self._offer_reply(action))
            report.handled.append(("offer", action))

    def _distributed(self, ch: Channel, action: str, report: ServiceReport) -> None:
        kind = ch.recv()
        if kind == "TYPEOFFER":
            if ch.recv() is not None:
                raise ProtocolViolation("distributed offer carries a payload")
            ch.send(self._offer_reply(action))
            report.handled.append(("offer", action))
        elif kind == "TYPEMATCH":
            srv = listen(0, self.host)
            try:
                ch.send(str(srv.getsockname()[1]))
                peer = accept(srv, self.deadline, name="peer")
            finally:
                srv.close()
            report.peer_logs.append(peer.log)
            peer.recv()
            peer.send(self._offer_reply(action))
            ack = peer.recv()
            if ack != "ACK":
                raise ProtocolViolation(f"peer acknowledged with {ack!r}")
            report.peer_unread += peer.finish()
            report.handled.append(("match-offer", action))
        elif isinstance(kind, str) and ":" in kind:
            host, _, port = kind.rpartition(":")
            announced = ch.recv()
            if announced != port:
                raise ProtocolViolation(f"address port {port} but announced {announced!r}")
            if action not in self.behaviour.requests:
                raise ProtocolViolation(f"no request behaviour for {action!r}")
            peer = connect(host, int(port), self.deadline, name="peer")
            report.peer_logs.append(peer.log)
            peer.send(self.behaviour.requests[action])
            peer.recv()
            peer.send("ACK")
            report.peer_unread += peer.finish()
            ch.send("ACK")
            report.handled.append(("match-request", action))
        else:
            raise ProtocolViolation(f"unexpected action kind {kind!r}")


def run_service(port: int, behaviour: Behaviour, config: Configuration,
                deadline: float = DEFAULT_DEADLINE, host: str = "127.0.0.1") -> ServiceReport:
    return ServiceEndpoint(behaviour, config, port, host, deadline).serve()

"""Map frames seen on a service's orchestrator connection to message constants."""

from __future__ import annotations

from ..protocol import Action, Choice, Configuration, MessageConst as M
from .errors import ProtocolViolation

_COMMANDS = {"ORC_CHECK": M.ORC_CHECK, "ORC_CHOICE": M.ORC_CHOICE, "ORC_STOP": M.ORC_STOP}


def classify_service_log(log: list, config: Configuration, requests=()) -> list[tuple[str, M]]:
    """``log`` holds ``("<", payload)`` for received and ``(">", payload)`` for sent
    frames, from the service side.  ``requests`` names the actions the service
    requests, which tells a null requester invocation (SKIP) apart from a null
    offer payload (NOPAYLOAD).  Only centralised sessions are covered."""
    if config.action is not Action.CENTRALISED:
        raise ValueError("only centralised sessions are classified")
    requests = set(requests)
    out = []
    expect = "command"
    action = None
    for direction, payload in log:
        kind = "in" if direction == "<" else "out"
        if kind == "out":
            if expect == "check-reply" and payload in ("ACK", "ERROR"):
                out.append((kind, M[payload]))
                expect = "command"
            elif expect == "vote":
                out.append((kind, M.SERVICE_CHOICE))
                expect = "command"
            elif expect == "offer-reply":
                out.append((kind, M.OFFER))
                expect = "command"
            elif expect == "request-reply":
                out.append((kind, M.REQUEST))
                expect = "forwarded-offer"
            else:
                raise ProtocolViolation(f"unexpected outgoing frame {payload!r}")
            continue
        if expect == "command":
            if payload in _COMMANDS:
                out.append((kind, _COMMANDS[payload]))
                expect = {"ORC_CHECK": "tags2", "ORC_CHOICE": "choice", "ORC_STOP": "done"}[payload]
                if payload == "ORC_CHOICE" and config.choice is Choice.DICTATORIAL:
                    expect = "command"
            elif payload is None:
                raise ProtocolViolation("null frame in command position")
            else:
                out.append((kind, M.ACTION))
                action = payload
                expect = "payload"
        elif expect in ("tags2", "tags1"):
            out.append((kind, M[payload]))
            expect = "tags1" if expect == "tags2" else "check-reply"
        elif expect == "choice":
            out.append((kind, M.SKIP if payload == "SKIP" else M.CHOICES))
            expect = "command" if payload == "SKIP" else "vote"
        elif expect == "payload":
            if payload is None and action in requests:
                out.append((kind, M.SKIP))
                expect = "request-reply"
            else:
                out.append((kind, M.NOPAYLOAD if payload is None else M.REQUEST))
                expect = "offer-reply"
        elif expect == "forwarded-offer":
            out.append((kind, M.OFFER))
            expect = "command"
        else:
            raise ProtocolViolation(f"frame {payload!r} after the session ended")
    return out

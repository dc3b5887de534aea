"""The composed transition system of the orchestration protocol.

One orchestrator, ``N`` services and ``N`` socket-timeout watchdogs share the
``orc2services`` / ``services2orc`` buffer arrays plus two one-slot buffers used
by the two peers of a distributed match.  States are immutable tuples so they
can be hashed during exploration; :func:`enabled` and :func:`fire` are pure.

Edge structure follows the walk-through of the protocol phases: every edge that
reads or writes a buffer leaves a delayed location, while bookkeeping edges
(configuration pick, probabilistic branches, participant selection, branching
on the message just read) leave committed locations.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

from .protocol import (
    ALL_CONFIGURATIONS,
    Action,
    Buffer,
    Choice,
    Configuration,
    MessageConst as M,
    StepMarker,
    SystemParams,
    TimeoutMode,
    Variant,
    config_compatible,
)


class NotEnabled(Exception):
    """Raised when firing an instance that is not enabled in the given state."""


# ---------------------------------------------------------------------------
# Locations

ORC_LOCATIONS: dict[str, bool] = {
    # name: committed
    "Initial": True,
    "CheckCompatibility": False,
    "AwaitCheckReply": False,
    "Start": True,
    "NoChoice": True,
    "AfterChoice": True,
    "BroadcastChoice": False,
    "SelectInvolved": True,
    "SendChoices": False,
    "AwaitVotes": False,
    "SelectAction": True,
    "CentralisedOffer": False,
    "AwaitOffer": False,
    "CentralisedMatch": False,
    "CentralisedMatchAwaitRequest": False,
    "CentralisedMatchForward": False,
    "CentralisedMatchAwaitOffer": False,
    "CentralisedMatchForwardOffer": False,
    "DistributedOffer": False,
    "DistributedSetup": False,
    "AwaitPort": False,
    "ForwardAddress": False,
    "AwaitAck": False,
    "Stop": False,
    "Terminated": False,
    "Error": False,
    "Timeout": False,
}

SVC_LOCATIONS: dict[str, bool] = {
    "Ready": False,
    "Received": True,
    "CheckingConfig": False,
    "ReplyAck": False,
    "ReplyError": False,
    "AwaitChoicePayload": False,
    "ChoiceReceived": True,
    "SendVote": False,
    "AwaitActionKind": False,
    "ActionKindReceived": True,
    "SendOffer": False,
    "SendRequest": False,
    "CentralisedRequesterAwaitOffer": False,
    "DistOffererAwaitNoPayload": False,
    "DistSendOffer": False,
    "DistOffererSendPort": False,
    "DistOffererAwaitRequest": False,
    "DistOffererSendOffer": False,
    "Done": False,
    "DistRequesterAwaitPort": False,
    "DistRequesterSendRequest": False,
    "DistRequesterAwaitOffer": False,
    "DistRequesterSendAck": False,
    "Terminated": False,
    "Error": False,
    "Timeout": False,
}

ST_LOCATIONS = ("Running", "Timeout")

ORC_SEND_LOCATIONS = frozenset({
    "CheckCompatibility", "BroadcastChoice", "SendChoices", "CentralisedOffer",
    "CentralisedMatch", "CentralisedMatchForward", "CentralisedMatchForwardOffer",
    "DistributedOffer", "DistributedSetup", "ForwardAddress", "Stop",
})
SVC_SEND_LOCATIONS = frozenset({
    "ReplyAck", "ReplyError", "SendVote", "SendOffer", "SendRequest", "DistSendOffer",
    "DistOffererSendPort", "DistOffererSendOffer", "DistRequesterSendRequest",
    "DistRequesterSendAck",
})

FINAL_LOCATIONS = frozenset({"Terminated", "Error", "Timeout"})


def committed_sets(params: SystemParams) -> tuple[frozenset, frozenset]:
    orc = {loc for loc, c in ORC_LOCATIONS.items() if c}
    svc = {loc for loc, c in SVC_LOCATIONS.items() if c}
    if params.variant is Variant.COMMITTED_SENDS:
        orc |= ORC_SEND_LOCATIONS
        svc |= SVC_SEND_LOCATIONS
    return frozenset(orc), frozenset(svc)


# ---------------------------------------------------------------------------
# Processes, states, transitions

class Proc(NamedTuple):
    kind: str  # "orc" | "svc" | "st"
    index: int = -1

    def __str__(self) -> str:
        return "orc" if self.kind == "orc" else f"{self.kind}({self.index})"

    @classmethod
    def parse(cls, text: str) -> Proc:
        text = text.strip()
        if text == "orc":
            return ORC
        for kind in ("svc", "st"):
            if text.startswith(kind + "(") and text.endswith(")"):
                return cls(kind, int(text[len(kind) + 1:-1]))
        raise ValueError(f"bad process name {text!r}")


ORC = Proc("orc")

COMMITTED, WRITE, READ, TIMEOUT_FIRE = "committed", "write", "read", "timeout"


class TransitionInstance(NamedTuple):
    process: Proc
    edge_id: str
    nondet_params: tuple = ()
    weight: int = 1
    delay_class: str = COMMITTED

    @property
    def key(self) -> tuple:
        return (self.process, self.edge_id, self.nondet_params)

    def __str__(self) -> str:
        s = f"{self.process} {self.edge_id}"
        if self.nondet_params:
            s += " params=" + ",".join(f"{k}={_fmt_param(v)}" for k, v in self.nondet_params)
        return s


def _fmt_param(v) -> str:
    if isinstance(v, Configuration):
        return f"{v.choice.name}/{v.action.name}"
    return str(v)


class SystemState(NamedTuple):
    orc: str
    conf: Configuration | None
    oi: int            # loop index over services
    offerer: int
    requester: int
    involved: int      # bitmask of services involved in a majoritarian choice
    pending: int       # bitmask of votes still to be collected
    svc: tuple         # service locations
    d1: tuple          # last message dequeued by each service
    cfg: tuple         # configuration of each service
    o2s: tuple         # orc2services[N]
    s2o: tuple         # services2orc[N]
    r2o: tuple         # requester2offerer (one slot)
    o2r: tuple         # offerer2requester (one slot)
    st: tuple          # per-service SocketTimeout fired flag
    clocks: tuple      # per-service socket clocks (only advanced by simulation)
    steps: tuple       # written prefix of the steps log: (owner, marker) pairs

    @property
    def step(self) -> int:
        return len(self.steps)

    def steps_entry(self, k: int) -> tuple[int, StepMarker]:
        if k < len(self.steps):
            return self.steps[k]
        return (-1, StepMarker.UNSET)

    @property
    def n(self) -> int:
        return len(self.svc)

    def buffer(self, name: str, i: int | None = None, capacity: int | None = None) -> Buffer:
        cells = getattr(self, name) if i is None else getattr(self, name)[i]
        return Buffer(cells, capacity if capacity is not None else max(1, len(cells)))

    def location(self, proc: Proc) -> str:
        if proc.kind == "orc":
            return self.orc
        if proc.kind == "svc":
            return self.svc[proc.index]
        return "Timeout" if self.st[proc.index] else "Running"


def initial_state(params: SystemParams) -> SystemState:
    params.validate()
    n = params.n_services
    empty = tuple(() for _ in range(n))
    cfg = params.service_configs if params.fixed_configs else (None,) * n
    return SystemState(
        orc="Initial", conf=None, oi=0, offerer=0, requester=0, involved=0, pending=0,
        svc=("Ready",) * n, d1=(M.NIL,) * n, cfg=tuple(cfg),
        o2s=empty, s2o=empty, r2o=(), o2r=(),
        st=(False,) * n, clocks=(0,) * n, steps=(),
    )


# ---------------------------------------------------------------------------
# helpers on buffer arrays

def _put(bufs: tuple, j: int, *msgs) -> tuple:
    return bufs[:j] + (bufs[j] + msgs,) + bufs[j + 1:]


def _take(bufs: tuple, j: int, k: int = 1) -> tuple:
    return bufs[:j] + (bufs[j][k:],) + bufs[j + 1:]


def _set(seq: tuple, j: int, value) -> tuple:
    return seq[:j] + (value,) + seq[j + 1:]


def _reset(clocks: tuple, *js: int) -> tuple:
    for j in js:
        if clocks[j]:
            clocks = _set(clocks, j, 0)
    return clocks


def _mark(state: SystemState, params: SystemParams, owner: int, marker: StepMarker) -> tuple:
    if len(state.steps) < params.steps_capacity:
        return state.steps + ((owner, marker),)
    return state.steps


# ---------------------------------------------------------------------------
# Orchestrator edges.  Each guard function yields (edge_id, nondet_params, weight, class).

def _orc_edges(s: SystemState, p: SystemParams) -> list:
    loc = s.orc
    q = p.queue_size
    n = p.n_services
    out = []
    if loc == "Initial":
        if p.fixed_configs:
            out.append(("initialize", (), 1, COMMITTED))
        else:
            for conf in ALL_CONFIGURATIONS:
                out.append(("initialize", (("conf", conf),), 1, COMMITTED))
    elif loc == "CheckCompatibility":
        if q - len(s.o2s[s.oi]) >= 3:
            out.append(("send_check", (), 1, WRITE))
    elif loc == "AwaitCheckReply":
        b = s.s2o[s.oi]
        if b:
            if b[0] == M.ACK:
                out.append(("recv_check_ack", (), 1, READ))
            elif b[0] == M.ERROR:
                out.append(("recv_check_error", (), 1, READ))
    elif loc == "Start":
        if p.p_choice:
            out.append(("choose_choice", (), p.p_choice, COMMITTED))
        if p.p_nochoice:
            out.append(("choose_nochoice", (), p.p_nochoice, COMMITTED))
    elif loc == "NoChoice" or loc == "AfterChoice":
        if p.p_action:
            out.append(("choose_action", (), p.p_action, COMMITTED))
        if p.p_stop:
            out.append(("choose_stop", (), p.p_stop, COMMITTED))
    elif loc == "SelectAction":
        return _action_edges(n, p.p_offer, p.p_match)
    elif loc == "BroadcastChoice":
        if len(s.o2s[s.oi]) < q:
            out.append(("send_choice", (), 1, WRITE))
    elif loc == "SelectInvolved":
        return _involved_edges(n)
    elif loc == "SendChoices":
        if len(s.o2s[s.oi]) < q:
            if s.involved >> s.oi & 1:
                out.append(("send_choices", (), 1, WRITE))
            else:
                out.append(("send_skip", (), 1, WRITE))
    elif loc == "AwaitVotes":
        j = _lowest_bit(s.pending)
        b = s.s2o[j]
        if b and b[0] == M.SERVICE_CHOICE:
            out.append(("recv_vote", (), 1, READ))
    elif loc == "CentralisedOffer":
        if q - len(s.o2s[s.offerer]) >= 2:
            out.append(("send_offer_invocation", (), 1, WRITE))
    elif loc == "AwaitOffer":
        b = s.s2o[s.offerer]
        if b and b[0] == M.OFFER:
            out.append(("recv_offer", (), 1, READ))
    elif loc == "CentralisedMatch":
        if q - len(s.o2s[s.requester]) >= 2:
            out.append(("send_request_invocation", (), 1, WRITE))
    elif loc == "CentralisedMatchAwaitRequest":
        b = s.s2o[s.requester]
        if b and b[0] == M.REQUEST:
            out.append(("recv_request", (), 1, READ))
    elif loc == "CentralisedMatchForward":
        if q - len(s.o2s[s.offerer]) >= 2:
            out.append(("forward_request", (), 1, WRITE))
    elif loc == "CentralisedMatchAwaitOffer":
        b = s.s2o[s.offerer]
        if b and b[0] == M.OFFER:
            out.append(("recv_match_offer", (), 1, READ))
    elif loc == "CentralisedMatchForwardOffer":
        if len(s.o2s[s.requester]) < q:
            out.append(("forward_offer", (), 1, WRITE))
    elif loc == "DistributedOffer":
        if q - len(s.o2s[s.offerer]) >= 3:
            out.append(("send_typed_offer", (), 1, WRITE))
    elif loc == "DistributedSetup":
        if q - len(s.o2s[s.offerer]) >= 2 and len(s.o2s[s.requester]) < q:
            out.append(("send_match_setup", (), 1, WRITE))
    elif loc == "AwaitPort":
        b = s.s2o[s.offerer]
        if b and b[0] == M.PORT:
            out.append(("recv_port", (), 1, READ))
    elif loc == "ForwardAddress":
        if q - len(s.o2s[s.requester]) >= 2:
            out.append(("send_address", (), 1, WRITE))
    elif loc == "AwaitAck":
        b = s.s2o[s.requester]
        if b and b[0] == M.ACK:
            out.append(("recv_match_ack", (), 1, READ))
    elif loc == "Stop":
        if len(s.o2s[s.oi]) < q:
            out.append(("send_stop", (), 1, WRITE))
    return out


# Selection edges depend only on the parameters; shared tuples keep them cheap.

@lru_cache(maxsize=None)
def _action_edges(n: int, p_offer: int, p_match: int) -> tuple:
    out = []
    if p_offer:
        out.extend(("select_offer", (("offerer", k),), p_offer, COMMITTED) for k in range(n))
    if p_match:
        out.extend(("select_match", (("requester", i), ("offerer", i + 1)), p_match, COMMITTED)
                   for i in range(n - 1))
    return tuple(out)


@lru_cache(maxsize=None)
def _involved_edges(n: int) -> tuple:
    return tuple(("select_involved", (("involved", m),), 1, COMMITTED) for m in range(1, 1 << n))


def _lowest_bit(mask: int) -> int:
    return (mask & -mask).bit_length() - 1


def _orc_fire(s: SystemState, p: SystemParams, edge: str, args: tuple) -> SystemState:
    n = p.n_services
    if edge == "initialize":
        if args:
            conf = args[0][1]
            return s._replace(orc="CheckCompatibility", conf=conf, oi=0, cfg=(conf,) * n)
        return s._replace(orc="CheckCompatibility", conf=p.orc_config, oi=0)
    if edge == "send_check":
        i = s.oi
        tc, ta = s.conf.tags()
        return s._replace(orc="AwaitCheckReply", o2s=_put(s.o2s, i, M.ORC_CHECK, tc, ta),
                          clocks=_reset(s.clocks, i))
    if edge == "recv_check_ack":
        i = s.oi
        s = s._replace(s2o=_take(s.s2o, i), clocks=_reset(s.clocks, i))
        if i + 1 < n:
            return s._replace(orc="CheckCompatibility", oi=i + 1)
        return s._replace(orc="Start", oi=0)
    if edge == "recv_check_error":
        i = s.oi
        return s._replace(orc="Error", s2o=_take(s.s2o, i), clocks=_reset(s.clocks, i))
    if edge == "choose_choice":
        return s._replace(orc="BroadcastChoice", oi=0)
    if edge == "choose_nochoice":
        return s._replace(orc="NoChoice")
    if edge == "choose_action":
        return s._replace(orc="SelectAction")
    if edge == "choose_stop":
        return s._replace(orc="Stop", oi=0)
    if edge == "select_offer":
        off = args[0][1]
        nxt = "CentralisedOffer" if s.conf.action == Action.CENTRALISED else "DistributedOffer"
        return s._replace(orc=nxt, offerer=off)
    if edge == "select_match":
        req, off = args[0][1], args[1][1]
        nxt = "CentralisedMatch" if s.conf.action == Action.CENTRALISED else "DistributedSetup"
        return s._replace(orc=nxt, requester=req, offerer=off)
    if edge == "send_choice":
        i = s.oi
        s = s._replace(o2s=_put(s.o2s, i, M.ORC_CHOICE), clocks=_reset(s.clocks, i))
        if i + 1 < n:
            return s._replace(oi=i + 1)
        if s.conf.choice == Choice.DICTATORIAL:
            return s._replace(orc="AfterChoice", oi=0)
        return s._replace(orc="SelectInvolved", oi=0)
    if edge == "select_involved":
        return s._replace(orc="SendChoices", oi=0, involved=args[0][1])
    if edge == "send_choices" or edge == "send_skip":
        i = s.oi
        msg = M.CHOICES if edge == "send_choices" else M.SKIP
        s = s._replace(o2s=_put(s.o2s, i, msg), clocks=_reset(s.clocks, i))
        if i + 1 < n:
            return s._replace(oi=i + 1)
        pending = (1 << n) - 1 if p.variant is Variant.WAIT_ALL_CHOICES else s.involved
        return s._replace(orc="AwaitVotes", oi=0, pending=pending)
    if edge == "recv_vote":
        j = _lowest_bit(s.pending)
        pending = s.pending & ~(1 << j)
        s = s._replace(s2o=_take(s.s2o, j), clocks=_reset(s.clocks, j), pending=pending)
        if pending:
            return s
        return s._replace(orc="AfterChoice", involved=0)
    if edge == "send_offer_invocation":
        k = s.offerer
        return s._replace(orc="AwaitOffer", o2s=_put(s.o2s, k, M.ACTION, M.NOPAYLOAD),
                          clocks=_reset(s.clocks, k))
    if edge == "recv_offer":
        k = s.offerer
        return s._replace(orc="Start", s2o=_take(s.s2o, k), clocks=_reset(s.clocks, k))
    if edge == "send_request_invocation":
        r = s.requester
        return s._replace(orc="CentralisedMatchAwaitRequest",
                          o2s=_put(s.o2s, r, M.ACTION, M.SKIP), clocks=_reset(s.clocks, r))
    if edge == "recv_request":
        r = s.requester
        return s._replace(orc="CentralisedMatchForward", s2o=_take(s.s2o, r),
                          clocks=_reset(s.clocks, r))
    if edge == "forward_request":
        k = s.offerer
        return s._replace(orc="CentralisedMatchAwaitOffer",
                          o2s=_put(s.o2s, k, M.ACTION, M.REQUEST), clocks=_reset(s.clocks, k))
    if edge == "recv_match_offer":
        k = s.offerer
        return s._replace(orc="CentralisedMatchForwardOffer", s2o=_take(s.s2o, k),
                          clocks=_reset(s.clocks, k))
    if edge == "forward_offer":
        r = s.requester
        return s._replace(orc="Start", o2s=_put(s.o2s, r, M.OFFER), clocks=_reset(s.clocks, r))
    if edge == "send_typed_offer":
        k = s.offerer
        return s._replace(orc="AwaitOffer", o2s=_put(s.o2s, k, M.ACTION, M.TYPEOFFER, M.NOPAYLOAD),
                          clocks=_reset(s.clocks, k))
    if edge == "send_match_setup":
        k, r = s.offerer, s.requester
        o2s = _put(_put(s.o2s, k, M.ACTION, M.TYPEMATCH), r, M.ACTION)
        return s._replace(orc="AwaitPort", o2s=o2s, clocks=_reset(s.clocks, k, r))
    if edge == "recv_port":
        k = s.offerer
        return s._replace(orc="ForwardAddress", s2o=_take(s.s2o, k), clocks=_reset(s.clocks, k))
    if edge == "send_address":
        r = s.requester
        return s._replace(orc="AwaitAck", o2s=_put(s.o2s, r, M.ADDRESS, M.PORT),
                          clocks=_reset(s.clocks, r))
    if edge == "recv_match_ack":
        r = s.requester
        return s._replace(orc="Start", s2o=_take(s.s2o, r), clocks=_reset(s.clocks, r))
    if edge == "send_stop":
        i = s.oi
        s = s._replace(o2s=_put(s.o2s, i, M.ORC_STOP), clocks=_reset(s.clocks, i))
        if i + 1 < n:
            return s._replace(oi=i + 1)
        return s._replace(orc="Terminated", oi=0)
    raise NotEnabled(f"unknown orchestrator edge {edge!r}")


# ---------------------------------------------------------------------------
# Service edges

_RECEIVED_BRANCH = {
    M.ORC_CHECK: ("is_check", "CheckingConfig"),
    M.ORC_STOP: ("is_stop", "Terminated"),
    M.ACTION: ("is_action", "AwaitActionKind"),
}

_KIND_BRANCH = {
    M.NOPAYLOAD: ("kind_nopayload", "SendOffer"),
    M.REQUEST: ("kind_request", "SendOffer"),
    M.SKIP: ("kind_skip", "SendRequest"),
    M.TYPEOFFER: ("kind_typeoffer", "DistOffererAwaitNoPayload"),
    M.TYPEMATCH: ("kind_typematch", "DistOffererSendPort"),
    M.ADDRESS: ("kind_address", "DistRequesterAwaitPort"),
}

_SVC_TARGETS = {
    "is_check": "CheckingConfig", "is_stop": "Terminated", "is_action": "AwaitActionKind",
    "is_choice": "Ready", "is_choice_maj": "AwaitChoicePayload",
    "is_skip": "Ready", "is_choices": "SendVote",
    **{e: loc for e, loc in _KIND_BRANCH.values()},
}


def _svc_edges(s: SystemState, p: SystemParams, j: int) -> list:
    loc = s.svc[j]
    q = p.queue_size
    if loc == "Ready":
        if s.o2s[j]:
            return [("recv", (), 1, READ)]
    elif loc == "Received":
        d = s.d1[j]
        if d == M.ORC_CHOICE:
            if s.cfg[j].choice == Choice.DICTATORIAL:
                return [("is_choice", (), 1, COMMITTED)]
            return [("is_choice_maj", (), 1, COMMITTED)]
        br = _RECEIVED_BRANCH.get(d)
        if br:
            return [(br[0], (), 1, COMMITTED)]
    elif loc == "CheckingConfig":
        b = s.o2s[j]
        if len(b) >= 2:
            if (b[0], b[1]) == s.cfg[j].tags():
                return [("recv_config_ok", (), 1, READ)]
            return [("recv_config_bad", (), 1, READ)]
    elif loc == "ReplyAck":
        if len(s.s2o[j]) < q:
            return [("send_ack", (), 1, WRITE)]
    elif loc == "ReplyError":
        if len(s.s2o[j]) < q:
            return [("send_error", (), 1, WRITE)]
    elif loc == "AwaitChoicePayload" or loc == "AwaitActionKind":
        if s.o2s[j]:
            return [("recv_choice_payload" if loc == "AwaitChoicePayload" else "recv_kind",
                     (), 1, READ)]
    elif loc == "ChoiceReceived":
        d = s.d1[j]
        if d == M.SKIP:
            return [("is_skip", (), 1, COMMITTED)]
        if d == M.CHOICES:
            return [("is_choices", (), 1, COMMITTED)]
    elif loc == "ActionKindReceived":
        br = _KIND_BRANCH.get(s.d1[j])
        if br:
            return [(br[0], (), 1, COMMITTED)]
    elif loc in ("SendVote", "SendOffer", "SendRequest", "DistSendOffer", "DistOffererSendPort"):
        if len(s.s2o[j]) < q:
            return [(_SEND_EDGE[loc], (), 1, WRITE)]
    elif loc == "CentralisedRequesterAwaitOffer":
        b = s.o2s[j]
        if b and b[0] == M.OFFER:
            return [("recv_offer", (), 1, READ)]
    elif loc == "DistOffererAwaitNoPayload":
        b = s.o2s[j]
        if b and b[0] == M.NOPAYLOAD:
            return [("recv_nopayload", (), 1, READ)]
    elif loc == "DistOffererAwaitRequest":
        if s.r2o and s.r2o[0] == M.REQUEST:
            return [("recv_peer_request", (), 1, READ)]
    elif loc == "DistOffererSendOffer":
        if not s.o2r:
            return [("send_peer_offer", (), 1, WRITE)]
    elif loc == "Done":
        if s.r2o and s.r2o[0] == M.ACK:
            return [("recv_peer_ack", (), 1, READ)]
    elif loc == "DistRequesterAwaitPort":
        b = s.o2s[j]
        if b and b[0] == M.PORT:
            return [("recv_port", (), 1, READ)]
    elif loc == "DistRequesterSendRequest":
        if not s.r2o:
            return [("send_peer_request", (), 1, WRITE)]
    elif loc == "DistRequesterAwaitOffer":
        if s.o2r and s.o2r[0] == M.OFFER:
            return [("recv_peer_offer", (), 1, READ)]
    elif loc == "DistRequesterSendAck":
        if not s.r2o and len(s.s2o[j]) < q:
            return [("send_acks", (), 1, WRITE)]
    return []


_SEND_EDGE = {
    "SendVote": "send_vote", "SendOffer": "send_offer", "SendRequest": "send_request",
    "DistSendOffer": "send_dist_offer", "DistOffererSendPort": "send_port",
}

# edge -> (message to services2orc, marker, target)
_SVC_SENDS = {
    "send_ack": (M.ACK, StepMarker.ORC_CHECK, "Ready"),
    "send_error": (M.ERROR, None, "Error"),
    "send_vote": (M.SERVICE_CHOICE, StepMarker.MAJORITARIAN_CHOICE, "Ready"),
    "send_offer": (M.OFFER, StepMarker.CENTRALISED_OFFER, "Ready"),
    "send_request": (M.REQUEST, StepMarker.CENTRALISED_MATCH, "CentralisedRequesterAwaitOffer"),
    "send_dist_offer": (M.OFFER, StepMarker.DISTRIBUTED_OFFER, "Ready"),
    "send_port": (M.PORT, None, "DistOffererAwaitRequest"),
}

# edge -> target for single-message reads from orc2services[j]
_SVC_READS = {
    "recv": "Received",
    "recv_choice_payload": "ChoiceReceived",
    "recv_kind": "ActionKindReceived",
    "recv_offer": "Ready",
    "recv_nopayload": "DistSendOffer",
    "recv_port": "DistRequesterSendRequest",
}


def _svc_fire(s: SystemState, p: SystemParams, j: int, edge: str) -> SystemState:
    svc = s.svc
    if edge in _SVC_READS:
        msg = s.o2s[j][0]
        return s._replace(svc=_set(svc, j, _SVC_READS[edge]), d1=_set(s.d1, j, msg),
                          o2s=_take(s.o2s, j), clocks=_reset(s.clocks, j))
    if edge in _SVC_SENDS:
        msg, marker, target = _SVC_SENDS[edge]
        s = s._replace(svc=_set(svc, j, target), s2o=_put(s.s2o, j, msg),
                       clocks=_reset(s.clocks, j))
        if marker is not None:
            s = s._replace(steps=_mark(s, p, j, marker))
        return s
    if edge == "is_stop":
        return s._replace(svc=_set(svc, j, "Terminated"),
                          steps=_mark(s, p, j, StepMarker.ORC_STOP))
    if edge == "is_choice":
        return s._replace(svc=_set(svc, j, "Ready"),
                          steps=_mark(s, p, j, StepMarker.DICTATORIAL_CHOICE))
    if edge in _SVC_TARGETS:
        return s._replace(svc=_set(svc, j, _SVC_TARGETS[edge]))
    if edge == "recv_config_ok" or edge == "recv_config_bad":
        msg = s.o2s[j][1]
        target = "ReplyAck" if edge == "recv_config_ok" else "ReplyError"
        return s._replace(svc=_set(svc, j, target), d1=_set(s.d1, j, msg),
                          o2s=_take(s.o2s, j, 2), clocks=_reset(s.clocks, j))
    # distributed match: requester = offerer - 1
    if edge == "recv_peer_request":
        return s._replace(svc=_set(svc, j, "DistOffererSendOffer"), d1=_set(s.d1, j, M.REQUEST),
                          r2o=s.r2o[1:], clocks=_reset(s.clocks, j, j - 1))
    if edge == "send_peer_offer":
        return s._replace(svc=_set(svc, j, "Done"), o2r=s.o2r + (M.OFFER,),
                          clocks=_reset(s.clocks, j, j - 1),
                          steps=_mark(s, p, j, StepMarker.DISTRIBUTED_OFFER))
    if edge == "recv_peer_ack":
        return s._replace(svc=_set(svc, j, "Ready"), d1=_set(s.d1, j, M.ACK),
                          r2o=s.r2o[1:], clocks=_reset(s.clocks, j, j - 1))
    if edge == "send_peer_request":
        return s._replace(svc=_set(svc, j, "DistRequesterAwaitOffer"), r2o=s.r2o + (M.REQUEST,),
                          clocks=_reset(s.clocks, j, j + 1),
                          steps=_mark(s, p, j, StepMarker.DISTRIBUTED_MATCH))
    if edge == "recv_peer_offer":
        return s._replace(svc=_set(svc, j, "DistRequesterSendAck"), d1=_set(s.d1, j, M.OFFER),
                          o2r=s.o2r[1:], clocks=_reset(s.clocks, j, j + 1))
    if edge == "send_acks":
        return s._replace(svc=_set(svc, j, "Ready"), r2o=s.r2o + (M.ACK,),
                          s2o=_put(s.s2o, j, M.ACK), clocks=_reset(s.clocks, j, j + 1))
    raise NotEnabled(f"unknown service edge {edge!r}")


def _timeout_fire(s: SystemState, j: int) -> SystemState:
    orc = s.orc if s.orc == "Terminated" else "Timeout"
    svc = tuple(loc if loc == "Terminated" else "Timeout" for loc in s.svc)
    return s._replace(orc=orc, svc=svc, st=_set(s.st, j, True))


# ---------------------------------------------------------------------------
# Public engine API

def process_instances(state: SystemState, params: SystemParams, proc: Proc) -> list:
    """Instances of one process, ignoring the committed-location priority."""
    if proc.kind == "orc":
        edges = _orc_edges(state, params)
    elif proc.kind == "svc":
        edges = _svc_edges(state, params, proc.index)
    else:
        return [TransitionInstance(proc, "fire", (), 1, TIMEOUT_FIRE)] if _timeout_ok(
            state, params, proc.index) else []
    return [TransitionInstance(proc, e, a, w, c) for e, a, w, c in edges]


def _timeout_ok(state: SystemState, params: SystemParams, j: int) -> bool:
    return (params.timeout_mode is TimeoutMode.NONDET and not any(state.st)
            and state.svc[j] != "Terminated")


def committed_processes(state: SystemState, params: SystemParams) -> list[Proc]:
    orc_c, svc_c = committed_sets(params)
    procs = [ORC] if state.orc in orc_c else []
    procs.extend(Proc("svc", j) for j, loc in enumerate(state.svc) if loc in svc_c)
    return procs


def enabled(state: SystemState, params: SystemParams) -> list[TransitionInstance]:
    committed = committed_processes(state, params)
    if committed:
        out = []
        for proc in committed:
            out.extend(process_instances(state, params, proc))
        return out
    out = process_instances(state, params, ORC)
    for j in range(params.n_services):
        out.extend(process_instances(state, params, Proc("svc", j)))
    if params.timeout_mode is TimeoutMode.NONDET and not any(state.st):
        for j in range(params.n_services):
            if state.svc[j] != "Terminated":
                out.append(TransitionInstance(Proc("st", j), "fire", (), 1, TIMEOUT_FIRE))
    return out


def apply(state: SystemState, t: TransitionInstance, params: SystemParams) -> SystemState:
    """Fire ``t`` without checking that it is enabled."""
    proc = t.process
    if proc.kind == "orc":
        return _orc_fire(state, params, t.edge_id, t.nondet_params)
    if proc.kind == "svc":
        return _svc_fire(state, params, proc.index, t.edge_id)
    return _timeout_fire(state, proc.index)


def fire(state: SystemState, t: TransitionInstance, params: SystemParams) -> SystemState:
    if t not in enabled(state, params):
        raise NotEnabled(f"{t} is not enabled")
    return apply(state, t, params)


def successors(state: SystemState, params: SystemParams) -> list[tuple[TransitionInstance, SystemState]]:
    return [(t, apply(state, t, params)) for t in enabled(state, params)]


def is_deadlock(state: SystemState, params: SystemParams) -> bool:
    return not enabled(state, params)


def all_empty(state: SystemState) -> bool:
    return (not any(state.o2s) and not any(state.s2o) and not state.r2o and not state.o2r)


def all_terminated(state: SystemState) -> bool:
    return state.orc == "Terminated" and all(loc == "Terminated" for loc in state.svc)


def any_timeout(state: SystemState) -> bool:
    return any(state.st)


def touched_services(before: SystemState, after: SystemState) -> list[int]:
    """Services whose buffers changed between two states."""
    n = len(before.svc)
    out = [j for j in range(n)
           if before.o2s[j] is not after.o2s[j] or before.s2o[j] is not after.s2o[j]]
    return out


# ---------------------------------------------------------------------------
# Traces

class Trace(NamedTuple):
    """A fired sequence from the initial state.

    ``loop_start`` is set for lasso-shaped evidence: the final state equals
    ``states[loop_start]``.
    """

    transitions: tuple
    states: tuple
    loop_start: int | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def final(self) -> SystemState:
        return self.states[-1]


def run_keys(params: SystemParams, keys: Iterable[tuple],
             start: SystemState | None = None) -> Trace:
    """Replay a sequence of ``(process, edge_id, nondet_params)`` keys.

    Every step must be enabled in its source state, otherwise
    :class:`NotEnabled` is raised with the offending position.
    """
    s = start if start is not None else initial_state(params)
    states = [s]
    fired = []
    for pos, key in enumerate(keys):
        match = None
        for t in enabled(s, params):
            if t.key == tuple(key):
                match = t
                break
        if match is None:
            raise NotEnabled(f"step {pos}: {key[0]} {key[1]} {key[2]} not enabled")
        s = apply(s, match, params)
        fired.append(match)
        states.append(s)
    return Trace(tuple(fired), tuple(states))


def replay(params: SystemParams, trace: Trace) -> Trace:
    """Re-fire ``trace`` through :func:`enabled`/:func:`fire` and check the states agree."""
    again = run_keys(params, [t.key for t in trace.transitions])
    if trace.states and again.states != tuple(trace.states):
        raise NotEnabled("replayed states differ from the recorded ones")
    if trace.loop_start is not None and again.states[-1] != again.states[trace.loop_start]:
        raise NotEnabled("lasso does not close")
    return Trace(again.transitions, again.states, trace.loop_start)


def _marker_of(before: SystemState, after: SystemState) -> str | None:
    if len(after.steps) > len(before.steps):
        owner, marker = after.steps[-1]
        return f"svc({owner}):{marker.name}"
    return None


def format_trace(trace: Trace) -> str:
    """One line per fired instance: ``<seq> <process> <edge_id> [params=..] [marker=..]``."""
    lines = []
    for k, t in enumerate(trace.transitions):
        line = f"{k} {t}"
        marker = _marker_of(trace.states[k], trace.states[k + 1]) if trace.states else None
        if marker:
            line += f" marker={marker}"
        lines.append(line)
    if trace.loop_start is not None:
        lines.append(f"# loop back to state {trace.loop_start}")
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_param_value(name: str, text: str):
    if name == "conf":
        from .protocol import parse_configuration
        return parse_configuration(text)
    return int(text)


def parse_trace(text: str) -> tuple[list[tuple], int | None]:
    """Parse the trace text format back into replayable keys."""
    keys = []
    loop = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# loop back to state"):
                loop = int(line.rsplit(" ", 1)[1])
            continue
        parts = line.split()
        proc, edge = Proc.parse(parts[1]), parts[2]
        args: tuple = ()
        for extra in parts[3:]:
            if extra.startswith("params="):
                args = tuple((k, _parse_param_value(k, v)) for k, v in
                             (kv.split("=", 1) for kv in extra[len("params="):].split(",")))
        keys.append((proc, edge, args))
    return keys, loop


# ---------------------------------------------------------------------------
# Template introspection (used for edge coverage and annotation tables)

def declared_edges() -> dict[str, set[tuple[str, str]]]:
    """Declared (location, edge_id) pairs per template."""
    orc = {
        ("Initial", "initialize"), ("CheckCompatibility", "send_check"),
        ("AwaitCheckReply", "recv_check_ack"), ("AwaitCheckReply", "recv_check_error"),
        ("Start", "choose_choice"), ("Start", "choose_nochoice"),
        ("NoChoice", "choose_action"), ("NoChoice", "choose_stop"),
        ("AfterChoice", "choose_action"), ("AfterChoice", "choose_stop"),
        ("SelectAction", "select_offer"), ("SelectAction", "select_match"),
        ("BroadcastChoice", "send_choice"), ("SelectInvolved", "select_involved"),
        ("SendChoices", "send_choices"), ("SendChoices", "send_skip"),
        ("AwaitVotes", "recv_vote"), ("CentralisedOffer", "send_offer_invocation"),
        ("AwaitOffer", "recv_offer"), ("CentralisedMatch", "send_request_invocation"),
        ("CentralisedMatchAwaitRequest", "recv_request"),
        ("CentralisedMatchForward", "forward_request"),
        ("CentralisedMatchAwaitOffer", "recv_match_offer"),
        ("CentralisedMatchForwardOffer", "forward_offer"),
        ("DistributedOffer", "send_typed_offer"), ("DistributedSetup", "send_match_setup"),
        ("AwaitPort", "recv_port"), ("ForwardAddress", "send_address"),
        ("AwaitAck", "recv_match_ack"), ("Stop", "send_stop"),
    }
    svc = {
        ("Ready", "recv"), ("Received", "is_check"), ("Received", "is_stop"),
        ("Received", "is_choice"), ("Received", "is_choice_maj"), ("Received", "is_action"),
        ("CheckingConfig", "recv_config_ok"), ("CheckingConfig", "recv_config_bad"),
        ("ReplyAck", "send_ack"), ("ReplyError", "send_error"),
        ("AwaitChoicePayload", "recv_choice_payload"), ("ChoiceReceived", "is_skip"),
        ("ChoiceReceived", "is_choices"), ("SendVote", "send_vote"),
        ("AwaitActionKind", "recv_kind"),
        *(("ActionKindReceived", e) for e, _ in _KIND_BRANCH.values()),
        ("SendOffer", "send_offer"), ("SendRequest", "send_request"),
        ("CentralisedRequesterAwaitOffer", "recv_offer"),
        ("DistOffererAwaitNoPayload", "recv_nopayload"), ("DistSendOffer", "send_dist_offer"),
        ("DistOffererSendPort", "send_port"), ("DistOffererAwaitRequest", "recv_peer_request"),
        ("DistOffererSendOffer", "send_peer_offer"), ("Done", "recv_peer_ack"),
        ("DistRequesterAwaitPort", "recv_port"),
        ("DistRequesterSendRequest", "send_peer_request"),
        ("DistRequesterAwaitOffer", "recv_peer_offer"), ("DistRequesterSendAck", "send_acks"),
    }
    return {"Orchestrator": orc, "Service": svc, "SocketTimeout": {("Running", "fire")}}


TEMPLATE_OF = {"orc": "Orchestrator", "svc": "Service", "st": "SocketTimeout"}


# ---------------------------------------------------------------------------
# Service projection: run one service automaton against an observed message log

def service_projection_accepts(cfg: Configuration, events: Sequence[tuple[str, M]],
                               require_terminated: bool = True) -> bool:
    """Check that a single service automaton can produce the observed exchange.

    ``events`` are ``("in", const)`` for messages received from the orchestrator
    and ``("out", const)`` for messages sent to it, in wire order.  Inputs are
    queued as they arrive; each output must be the next send the automaton makes
    once it has consumed what it can.  Only the orchestrator connection is
    modelled, which covers centralised sessions.
    """
    params = SystemParams(n_services=1, queue_size=max(4, len(events) + 4),
                          orc_config=cfg, service_configs=(cfg,), steps_capacity=0)
    s = initial_state(params)._replace(orc="Terminated", conf=cfg)
    svc = Proc("svc", 0)
    for kind, msg in events:
        if kind == "in":
            s = s._replace(o2s=_put(s.o2s, 0, M(msg)))
            continue
        while True:
            ts = process_instances(s, params, svc)
            if not ts:
                return False
            t = ts[0]
            s2 = apply(s, t, params)
            if len(s2.s2o[0]) > len(s.s2o[0]):
                if s2.s2o[0][-1] != msg:
                    return False
                s = s2._replace(s2o=((),))
                break
            s = s2
    # drain remaining inputs
    while True:
        ts = process_instances(s, params, svc)
        if not ts:
            break
        s2 = apply(s, ts[0], params)
        if len(s2.s2o[0]) > len(s.s2o[0]):
            return False  # an unobserved send
        s = s2
    if s.o2s[0]:
        return False
    return s.svc[0] == "Terminated" or not require_terminated

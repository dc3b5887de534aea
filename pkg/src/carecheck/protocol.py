"""Protocol vocabulary: message constants, configurations, bounded FIFO buffers
and the tunable parameters of the orchestration model."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple


class ProtocolError(Exception):
    """Base class for errors raised by the protocol vocabulary."""


class BufferFull(ProtocolError):
    pass


class BufferEmpty(ProtocolError):
    pass


class IllegalMessage(ProtocolError):
    pass


class InvalidParams(ProtocolError, ValueError):
    pass


class MessageConst(enum.IntEnum):
    NIL = 0
    ORC_CHECK = 1
    ACK = 2
    ERROR = 3
    ORC_CHOICE = 4
    CHOICES = 5
    SERVICE_CHOICE = 6
    SKIP = 7
    ORC_STOP = 8
    ACTION = 9
    NOPAYLOAD = 10
    REQUEST = 11
    OFFER = 12
    TYPEOFFER = 13
    TYPEMATCH = 14
    ADDRESS = 15
    PORT = 16
    # configuration tags carried by the compatibility check
    DICTATORIAL = 17
    MAJORITARIAN = 18
    CENTRALISED = 19
    DISTRIBUTED = 20

    def __str__(self) -> str:
        return self.name


class Choice(enum.IntEnum):
    DICTATORIAL = 0
    MAJORITARIAN = 1

    def __str__(self) -> str:
        return self.name


class Action(enum.IntEnum):
    CENTRALISED = 0
    DISTRIBUTED = 1

    def __str__(self) -> str:
        return self.name


class Configuration(NamedTuple):
    choice: Choice
    action: Action

    def tags(self) -> tuple[MessageConst, MessageConst]:
        """The (choice, action) tags sent during the compatibility check."""
        return MessageConst[self.choice.name], MessageConst[self.action.name]

    def __str__(self) -> str:
        return f"{self.choice.name}/{self.action.name}"


ALL_CONFIGURATIONS: tuple[Configuration, ...] = tuple(
    Configuration(c, a) for c in Choice for a in Action
)

_CHOICE_ALIASES = {"DICT": Choice.DICTATORIAL, "DICTATORIAL": Choice.DICTATORIAL,
                   "DICTATORIAL_CHOICE": Choice.DICTATORIAL,
                   "MAJ": Choice.MAJORITARIAN, "MAJORITARIAN": Choice.MAJORITARIAN,
                   "MAJORITARIAN_CHOICE": Choice.MAJORITARIAN}
_ACTION_ALIASES = {"CENT": Action.CENTRALISED, "CENTRALISED": Action.CENTRALISED,
                   "CENTRALISED_ACTION": Action.CENTRALISED,
                   "DIST": Action.DISTRIBUTED, "DISTRIBUTED": Action.DISTRIBUTED,
                   "DISTRIBUTED_ACTION": Action.DISTRIBUTED}


def parse_configuration(text: str) -> Configuration:
    """Parse ``MAJ/DIST``, ``DICTATORIAL,CENTRALISED`` and similar spellings."""
    parts = [p for p in re.split(r"[\s/,\-]+", text.strip().upper()) if p]
    if len(parts) != 2:
        raise InvalidParams(f"bad configuration {text!r}")
    try:
        return Configuration(_CHOICE_ALIASES[parts[0]], _ACTION_ALIASES[parts[1]])
    except KeyError:
        raise InvalidParams(f"bad configuration {text!r}") from None


def config_compatible(s: Configuration, o: Configuration) -> bool:
    return s.choice == o.choice and s.action == o.action


class StepMarker(enum.IntEnum):
    UNSET = 0
    ORC_CHECK = 1
    CENTRALISED_OFFER = 2
    CENTRALISED_MATCH = 3
    DISTRIBUTED_OFFER = 4
    DISTRIBUTED_MATCH = 5
    DICTATORIAL_CHOICE = 6
    MAJORITARIAN_CHOICE = 7
    ORC_STOP = 8

    def __str__(self) -> str:
        return self.name


# ---------------------------------------------------------------------------
# Bounded FIFO buffers

class Buffer(NamedTuple):
    """Immutable bounded FIFO; ``cells[0]`` is the oldest element."""

    cells: tuple = ()
    capacity: int = 1


class Occupancy(NamedTuple):
    len: int
    available: int
    is_full: bool
    is_empty: bool


def enqueue(b: Buffer, m: MessageConst) -> Buffer:
    if m == MessageConst.NIL:
        raise IllegalMessage("NIL denotes an empty cell and cannot be sent")
    if len(b.cells) >= b.capacity:
        raise BufferFull(f"buffer of capacity {b.capacity} is full")
    return Buffer(b.cells + (MessageConst(m),), b.capacity)


def dequeue(b: Buffer) -> tuple[MessageConst, Buffer]:
    if not b.cells:
        raise BufferEmpty("dequeue from an empty buffer")
    return b.cells[0], Buffer(b.cells[1:], b.capacity)


def occupancy(b: Buffer) -> Occupancy:
    n = len(b.cells)
    avail = b.capacity - n
    return Occupancy(n, avail, avail == 0, n == 0)


def cells_with_nil(b: Buffer) -> tuple[MessageConst, ...]:
    """Fixed-width view padded with NIL, as in ``buf[i][j] != nil`` sums."""
    return tuple(b.cells) + (MessageConst.NIL,) * (b.capacity - len(b.cells))


# ---------------------------------------------------------------------------
# Parameters

class Variant(str, enum.Enum):
    FIXED = "fixed"
    COMMITTED_SENDS = "committed_sends"
    WAIT_ALL_CHOICES = "wait_all_choices"


class TimeoutMode(str, enum.Enum):
    OFF = "off"
    NONDET = "nondet"


@dataclass(frozen=True)
class SystemParams:
    n_services: int = 3
    queue_size: int = 3
    timeout: int = 15
    write_rate: float = 5.0
    read_rate: float = 5.0
    p_stop: int = 1
    p_choice: int = 1
    p_nochoice: int = 1
    p_action: int = 1
    p_offer: int = 1
    p_match: int = 1
    # None means the orchestrator picks one configuration for everybody
    orc_config: Configuration | None = None
    service_configs: tuple[Configuration, ...] | None = None
    variant: Variant = Variant.FIXED
    timeout_mode: TimeoutMode = TimeoutMode.OFF
    steps_capacity: int = 32

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "timeout_mode", TimeoutMode(self.timeout_mode))
        if self.service_configs is not None:
            object.__setattr__(self, "service_configs", tuple(self.service_configs))
        self.validate()

    @property
    def fixed_configs(self) -> bool:
        return self.orc_config is not None

    def validate(self) -> None:
        if self.n_services < 1:
            raise InvalidParams("n_services must be positive")
        if self.queue_size < 1:
            raise InvalidParams("queue_size must be positive")
        if self.timeout < 1:
            raise InvalidParams("timeout must be positive")
        if self.write_rate <= 0 or self.read_rate <= 0:
            raise InvalidParams("rates must be positive")
        for name in ("p_stop", "p_choice", "p_nochoice", "p_action", "p_offer", "p_match"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be non-negative")
        if self.p_choice + self.p_nochoice <= 0:
            raise InvalidParams("p_choice + p_nochoice must be positive")
        if self.p_action + self.p_stop <= 0:
            raise InvalidParams("p_action + p_stop must be positive")
        if self.p_offer + self.p_match <= 0:
            raise InvalidParams("p_offer + p_match must be positive")
        if (self.orc_config is None) != (self.service_configs is None):
            raise InvalidParams("fixed mode needs both orchestrator and service configurations")
        if self.service_configs is not None and len(self.service_configs) != self.n_services:
            raise InvalidParams(
                f"fixed mode needs exactly {self.n_services} service configurations, "
                f"got {len(self.service_configs)}")
        if self.steps_capacity < 0:
            raise InvalidParams("steps_capacity must be non-negative")

    def with_(self, **changes) -> SystemParams:
        return replace(self, **changes)

    # -- key=value serialisation -------------------------------------------

    def config_mode_text(self) -> str:
        if self.orc_config is None:
            return "nondet"
        svc = ", ".join(str(c) for c in self.service_configs)
        return f"fixed {self.orc_config} | {svc}"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("orc_config", "service_configs"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            lines.append(f"{f.name} = {v}")
        lines.insert(11, f"config_mode = {self.config_mode_text()}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


_INT_KEYS = {"n_services", "queue_size", "timeout", "p_stop", "p_choice", "p_nochoice",
             "p_action", "p_offer", "p_match", "steps_capacity"}
_FLOAT_KEYS = {"write_rate", "read_rate"}
PARAM_KEYS = _INT_KEYS | _FLOAT_KEYS | {"config_mode", "variant", "timeout_mode"}


def _parse_config_mode(text: str) -> dict:
    text = text.strip()
    if text.lower() in ("nondet", "nondeterministic"):
        return {"orc_config": None, "service_configs": None}
    m = re.fullmatch(r"(?i)fixed\s*\(?\s*([^|;]+?)\s*[|;]\s*(.+?)\s*\)?", text)
    if not m:
        raise InvalidParams(f"bad config_mode {text!r}")
    orc = parse_configuration(m.group(1))
    svc = tuple(parse_configuration(p) for p in m.group(2).split(","))
    return {"orc_config": orc, "service_configs": svc}


def params_from_mapping(values: dict[str, str], base: SystemParams | None = None) -> SystemParams:
    kwargs: dict = {}
    for key, raw in values.items():
        raw = raw.strip()
        if key not in PARAM_KEYS:
            raise InvalidParams(f"unknown parameter {key!r}")
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            elif key == "config_mode":
                kwargs.update(_parse_config_mode(raw))
            elif key == "variant":
                kwargs[key] = Variant(raw.lower())
            elif key == "timeout_mode":
                kwargs[key] = TimeoutMode(raw.lower())
        except ValueError as exc:
            if isinstance(exc, InvalidParams):
                raise
            raise InvalidParams(f"bad value for {key}: {raw!r}") from None
    if base is None:
        return SystemParams(**kwargs)
    return replace(base, **kwargs)


def parse_params(text: str, base: SystemParams | None = None) -> SystemParams:
    """Parse the flat ``key = value`` parameter format (``#`` starts a comment)."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParams(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        values[key.strip()] = val
    return params_from_mapping(values, base)


def load_params(path: str | Path) -> SystemParams:
    return parse_params(Path(path).read_text())

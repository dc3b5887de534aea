"""Conformance scripts: mocked endpoints exchanging frames with a live peer.

Each line is ``<endpoint> <command>``.  Commands::

    LISTEN <port> [as <name>] [-> <var>]   bind; the bound port lands in <var>
    ACCEPT [<name>]                       accept on listener <name> (default main)
    CONNECT <host> <port> [as <name>]     or CONNECT $var with var = host:port
    USE <name>                            switch the current connection
    RECV -> <var>                         read one frame
    ASSERT <var> == "literal" | NULL
    SEND "literal" | NULL | $var
    CLOSE [<name>]                        half-close, read to EOF, fail on unread bytes
    COMMENT <text>

Lines owned by ``orc`` may only be comments: the orchestrator is the system
under test.  Literals are JSON strings.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import RuntimeProtocolError, ScriptError
from .framing import DEFAULT_DEADLINE, Channel, accept, connect, listen

_OPS = {"LISTEN", "ACCEPT", "CONNECT", "USE", "RECV", "ASSERT", "SEND", "CLOSE", "COMMENT"}
_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_LITERAL = r'(?:NULL|"(?:[^"\\]|\\.)*")'
_FORMS = {
    "LISTEN": re.compile(rf"(\d+)(?:\s+as\s+({_NAME}))?(?:\s*->\s*({_NAME}))?"),
    "ACCEPT": re.compile(rf"({_NAME})?"),
    "CONNECT": re.compile(rf"(?:\$({_NAME})|(\S+)\s+(\d+))(?:\s+as\s+({_NAME}))?"),
    "USE": re.compile(rf"({_NAME})"),
    "RECV": re.compile(rf"->\s*({_NAME})"),
    "ASSERT": re.compile(rf"({_NAME})\s*==\s*({_LITERAL})"),
    "SEND": re.compile(rf"({_LITERAL}|\${_NAME})"),
    "CLOSE": re.compile(rf"({_NAME})?"),
}


@dataclass(frozen=True)
class Command:
    endpoint: str
    op: str
    args: tuple
    lineno: int
    text: str


def parse_literal(text: str):
    return None if text == "NULL" else json.loads(text)


def _show(value) -> str:
    return "NULL" if value is None else json.dumps(value, ensure_ascii=False)


@dataclass
class ConformanceScript:
    commands: dict = field(default_factory=dict)  # endpoint -> list[Command]

    @property
    def endpoints(self) -> list[str]:
        return [e for e in self.commands if e != "orc"]

    def __len__(self) -> int:
        return sum(len(v) for v in self.commands.values())


def parse_script(text: str) -> ConformanceScript:
    script = ConformanceScript()
    bound: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) < 2:
            raise ScriptError(f"line {lineno}: expected '<endpoint> <command>'")
        endpoint, op = parts[0], parts[1]
        rest = parts[2].strip() if len(parts) > 2 else ""
        if op not in _OPS:
            raise ScriptError(f"line {lineno}: unknown command {op!r}")
        if op == "COMMENT":
            args: tuple = (rest,)
        else:
            if endpoint == "orc":
                raise ScriptError(f"line {lineno}: orchestrator lines may only be comments")
            m = _FORMS[op].fullmatch(rest)
            if not m:
                raise ScriptError(f"line {lineno}: malformed {op} {rest!r}")
            args = m.groups()
        names = bound.setdefault(endpoint, set())
        if op == "RECV":
            names.add(args[0])
        elif op == "LISTEN" and args[2]:
            names.add(args[2])
        elif op == "ASSERT" and args[0] not in names:
            raise ScriptError(f"line {lineno}: {args[0]!r} asserted before any RECV binds it")
        elif op == "SEND" and args[0].startswith("$") and args[0][1:] not in names:
            raise ScriptError(f"line {lineno}: {args[0]} is unbound")
        elif op == "CONNECT" and args[0] and args[0] not in names:
            raise ScriptError(f"line {lineno}: ${args[0]} is unbound")
        script.commands.setdefault(endpoint, []).append(Command(endpoint, op, args, lineno, line))
    return script


def load_script(path: str | Path) -> ConformanceScript:
    return parse_script(Path(path).read_text())


@dataclass
class Failure:
    endpoint: str
    lineno: int
    command: str
    expected: str
    observed: str
    at: float = 0.0

    def __str__(self) -> str:
        return (f"line {self.lineno} [{self.endpoint}] {self.command}: "
                f"expected {self.expected}, observed {self.observed}")


@dataclass
class TestResult:
    passed: bool
    failure: Failure | None = None
    failures: list = field(default_factory=list)
    sut_result: object = None
    sut_error: BaseException | None = None
    duration: float = 0.0

    __test__ = False  # not a pytest class

    def summary(self) -> str:
        if self.passed:
            return "pass"
        if self.failure is not None:
            return f"fail: {self.failure}"
        return f"fail: system under test raised {self.sut_error!r}"


class _Stop(Exception):
    pass


class _Endpoint:
    def __init__(self, name: str, commands: list, host: str, end: float):
        self.name = name
        self.commands = commands
        self.host = host
        self.end = end
        self.listeners: dict = {}
        self.channels: dict = {}
        self.current: str | None = None
        self.vars: dict = {}
        self.failure: Failure | None = None
        self.pc = 0

    def remaining(self) -> float:
        return max(0.01, self.end - time.monotonic())

    def bind_leading(self) -> None:
        while self.pc < len(self.commands) and self.commands[self.pc].op in ("LISTEN", "COMMENT"):
            self.step(self.commands[self.pc])
            self.pc += 1

    def first_port(self) -> int | None:
        return next(iter(self.listeners.values())).getsockname()[1] if self.listeners else None

    def fail(self, cmd: Command, expected: str, observed: str) -> None:
        self.failure = Failure(self.name, cmd.lineno, cmd.text, expected, observed, time.monotonic())
        raise _Stop

    def chan(self, cmd: Command) -> Channel:
        if self.current is None or self.current not in self.channels:
            self.fail(cmd, "an open connection", "none")
        ch = self.channels[self.current]
        ch.deadline = self.remaining()
        ch.sock.settimeout(ch.deadline)
        return ch

    def run(self) -> None:
        try:
            for cmd in self.commands[self.pc:]:
                self.step(cmd)
            for name in list(self.channels):
                self._close(None, name)
        except _Stop:
            pass
        finally:
            for ch in self.channels.values():
                ch.close()
            for srv in self.listeners.values():
                srv.close()

    def _close(self, cmd: Command | None, name: str) -> None:
        ch = self.channels.pop(name)
        ch.deadline = self.remaining()
        ch.sock.settimeout(ch.deadline)
        try:
            unread = ch.finish()
        except RuntimeProtocolError as exc:
            self.fail(cmd or _closing(self.name, name), "peer to close", str(exc))
        if unread:
            self.fail(cmd or _closing(self.name, name), "no unread bytes", f"{unread} bytes")
        if self.current == name:
            self.current = None

    def step(self, cmd: Command) -> None:
        op, a = cmd.op, cmd.args
        try:
            if op == "COMMENT":
                return
            if op == "LISTEN":
                name = a[1] or "main"
                srv = listen(int(a[0]), self.host)
                self.listeners[name] = srv
                if a[2]:
                    self.vars[a[2]] = str(srv.getsockname()[1])
            elif op == "ACCEPT":
                name = a[0] or "main"
                if name not in self.listeners:
                    self.fail(cmd, f"a listener named {name}", "none")
                srv = self.listeners.pop(name)
                try:
                    self.channels[name] = accept(srv, self.remaining(), name=f"{self.name}/{name}")
                finally:
                    srv.close()
                self.current = self.current or name
            elif op == "CONNECT":
                if a[0]:
                    host, _, port = str(self.vars[a[0]]).rpartition(":")
                else:
                    host, port = a[1], a[2]
                name = a[3] or "main"
                self.channels[name] = connect(host, int(port), self.remaining(),
                                              name=f"{self.name}/{name}")
                self.current = self.current or name
            elif op == "USE":
                if a[0] not in self.channels:
                    self.fail(cmd, f"an open connection named {a[0]}", "none")
                self.current = a[0]
            elif op == "RECV":
                self.vars[a[0]] = self.chan(cmd).recv()
            elif op == "ASSERT":
                want = parse_literal(a[1])
                got = self.vars[a[0]]
                if got != want:
                    self.fail(cmd, _show(want), _show(got))
            elif op == "SEND":
                value = self.vars[a[0][1:]] if a[0].startswith("$") else parse_literal(a[0])
                self.chan(cmd).send(value)
            elif op == "CLOSE":
                name = a[0] or self.current
                if name not in self.channels:
                    self.fail(cmd, f"an open connection named {name}", "none")
                self._close(cmd, name)
        except RuntimeProtocolError as exc:
            self.fail(cmd, "the peer to cooperate", f"{type(exc).__name__}: {exc}")
        except OSError as exc:
            self.fail(cmd, "a working socket", str(exc))


def _closing(endpoint: str, name: str) -> Command:
    return Command(endpoint, "CLOSE", (name,), 0, f"(implicit close of {name})")


def _endpoint_key(name: str):
    m = re.fullmatch(r"svc\((\d+)\)", name)
    return (0, int(m.group(1)), "") if m else (1, 0, name)


def run_conformance(script: ConformanceScript | str, deadline: float = DEFAULT_DEADLINE,
                    sut: Callable[[list], object] | None = None,
                    host: str = "127.0.0.1") -> TestResult:
    """Run every endpoint concurrently; ``sut`` receives the ``(host, port)`` list
    bound by the leading LISTENs (in endpoint order) and runs in its own thread."""
    if isinstance(script, str):
        script = parse_script(script)
    start = time.monotonic()
    end = start + deadline
    names = sorted(script.endpoints, key=_endpoint_key)
    eps = [_Endpoint(n, script.commands[n], host, end) for n in names]
    result = TestResult(passed=False)
    for ep in eps:
        try:
            ep.bind_leading()
        except _Stop:
            pass
    sut_thread = None
    if sut is not None:
        addresses = [(host, ep.first_port()) for ep in eps if ep.first_port() is not None]

        def drive():
            try:
                result.sut_result = sut(addresses)
            except BaseException as exc:  # reported, not raised
                result.sut_error = exc
        sut_thread = threading.Thread(target=drive, daemon=True)
        sut_thread.start()
    threads = [threading.Thread(target=ep.run, daemon=True) for ep in eps if ep.failure is None]
    for t in threads:
        t.start()
    for t in threads:
        t.join(max(0.0, end - time.monotonic()) + 1.0)
    if sut_thread is not None:
        sut_thread.join(max(0.0, end - time.monotonic()) + 1.0)
        if sut_thread.is_alive() and result.sut_error is None:
            result.sut_error = TimeoutError("system under test still running at the deadline")
    result.failures = sorted((ep.failure for ep in eps if ep.failure), key=lambda f: f.at)
    result.failure = result.failures[0] if result.failures else None
    result.passed = not result.failures and result.sut_error is None
    result.duration = time.monotonic() - start
    return result

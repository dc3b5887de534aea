"""Exceptions raised by the networked runtime."""


class RuntimeProtocolError(Exception):
    pass


class MalformedFrame(RuntimeProtocolError):
    pass


class ProtocolViolation(RuntimeProtocolError):
    pass


class HandshakeMismatch(ProtocolViolation):
    pass


class PeerTimeout(RuntimeProtocolError):
    pass


class PeerClosed(ProtocolViolation):
    pass


class ParseError(ValueError):
    pass


class IllegalLabel(ParseError):
    pass


class ScriptError(ValueError):
    pass

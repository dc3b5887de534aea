"""Reference runtime over loopback sockets: framing, contract automata,
orchestrator, service endpoints and conformance scripts."""

from .conformance import ConformanceScript, TestResult, load_script, parse_script, run_conformance
from .contract import ContractAutomaton, Label, load_contract, parse_contract, parse_label
from .errors import (
    HandshakeMismatch, IllegalLabel, MalformedFrame, ParseError, PeerClosed, PeerTimeout,
    ProtocolViolation, RuntimeProtocolError, ScriptError,
)
from .framing import decode_frame, encode_frame
from .orchestrator import (
    ChoicePolicy, OrchestrationReport, Scripted, SeededUniform, StopAtFinal, make_policy,
    majority, run_orchestrator,
)
from .service import Behaviour, ServiceEndpoint, ServiceReport, load_behaviour, run_service

__all__ = [
    "Behaviour", "ChoicePolicy", "ConformanceScript", "ContractAutomaton", "HandshakeMismatch",
    "IllegalLabel", "Label", "MalformedFrame", "OrchestrationReport", "ParseError", "PeerClosed",
    "PeerTimeout", "ProtocolViolation", "RuntimeProtocolError", "ScriptError", "Scripted",
    "SeededUniform", "ServiceEndpoint", "ServiceReport", "StopAtFinal", "TestResult",
    "decode_frame", "encode_frame", "load_behaviour", "load_contract", "load_script",
    "make_policy", "majority", "parse_contract", "parse_label", "parse_script",
    "run_conformance", "run_orchestrator", "run_service",
]

import socket

import pytest

from carecheck.protocol import parse_configuration
from carecheck.runtime import (
    Behaviour, HandshakeMismatch, IllegalLabel, MalformedFrame, ParseError, PeerTimeout,
    ScriptError, ServiceEndpoint, decode_frame, encode_frame, majority, parse_contract,
    parse_label, parse_script, run_conformance,
)
from carecheck.runtime.framing import connect
from carecheck.runtime.wire import classify_service_log
from carecheck.semantics import service_projection_accepts

from selfplay import coffee, serve_in_thread

CONFIGS = ["DICT/CENT", "DICT/DIST", "MAJ/CENT", "MAJ/DIST"]


# -- framing

def test_frame_layout():
    assert encode_frame("ACK") == bytes.fromhex("01 00 00 00 03 41 43 4B")
    assert encode_frame(None) == b"\x00"
    assert decode_frame(bytes.fromhex("01 00 00 00 00")) == ("", b"")
    assert decode_frame(b"\x00rest") == (None, b"rest")
    assert decode_frame(encode_frame("caffè") + b"\x00") == ("caffè", b"\x00")


@pytest.mark.parametrize("bad", [b"\x02", b"\x01\x00\x00", b"\x01\x00\x00\x00\x05abc", b"",
                                 b"\x01\x00\x00\x00\x02\xff\xfe"])
def test_malformed_frames(bad):
    with pytest.raises(MalformedFrame):
        decode_frame(bad)


# -- contracts

def test_coffee_contract_language(data):
    from carecheck.runtime import load_contract
    c = load_contract(data / "coffee.contract")
    assert c.rank == 2 and c.initial == "S0" and c.finals == {"S2"}
    e, m = "(!euro,-)", "(?coffee,!coffee)"
    assert c.accepts([e, m]) and c.accepts([e, m, e, e])
    assert not c.accepts([e]) and not c.accepts([m, e]) and not c.accepts([e, m, m])
    assert parse_contract(c.to_text()).accepts([e, m, e])


def test_label_shapes():
    assert parse_label("(?coffee,!coffee)").kind == "match"
    lab = parse_label("[!euro, -]")
    assert (lab.kind, lab.action, lab.offerer, lab.involved()) == ("offer", "euro", 0, [0])
    for bad in ("(?a,?b)", "(!a,!a)", "(?a,!b)", "(-,-)", "(!a,-,?a,?a)"):
        with pytest.raises(IllegalLabel):
            parse_label(bad)


def test_single_state_contract():
    c = parse_contract("rank 1\ninitial S\nfinal S\n")
    assert c.moves("S") == [] and c.accepts([])


def test_contract_errors():
    with pytest.raises(ParseError):
        parse_contract("initial S0\nfinal S0\n")
    with pytest.raises(ParseError):
        parse_contract("rank 2\ninitial S0\nfinal S1\nS0 (!a,-,-) S1\n")


# -- self-play

@pytest.mark.parametrize("config", CONFIGS)
def test_self_play_completes_and_drains(config):
    report, boxes = coffee(config)
    assert not isinstance(report, Exception), report
    # majoritarian: alice's first vote repeats the euro offer before stopping
    extra = ["(!euro,-)"] if config.startswith("MAJ") else []
    assert report.labels == ["(!euro,-)", "(?coffee,!coffee)"] + extra
    assert report.stopped and report.final_state == "S2"
    assert all(v == 0 for v in report.unread.values())
    for box in boxes:
        assert "error" not in box, box.get("error")
        r = box["report"]
        assert r.terminated and r.unread == 0 and r.peer_unread == 0
    if config.endswith("DIST"):
        assert report.peer_sessions and report.final_acks == 1


def test_dictatorial_stop_at_final_sequence():
    report, _ = coffee("DICT/CENT")
    assert report.labels == ["(!euro,-)", "(?coffee,!coffee)"]
    assert report.choices == [("S2", ["(!euro,-)", "STOP"], "STOP")]


def test_majoritarian_votes_follow_alice():
    report, boxes = coffee("MAJ/CENT")
    # alice votes (!euro,-) once, then STOP; bob is never involved at S2
    assert report.labels == ["(!euro,-)", "(?coffee,!coffee)", "(!euro,-)"]
    assert [c[2] for c in report.choices] == ["(!euro,-)", "STOP"]
    assert boxes[1]["report"].log.count(("<", "SKIP")) == 2


def test_scripted_policy():
    report, _ = coffee("DICT/DIST", policy="scripted:(!euro,-);(!euro,-);STOP")
    assert report.labels == ["(!euro,-)", "(?coffee,!coffee)", "(!euro,-)", "(!euro,-)"]


def test_wire_matches_service_projection():
    report, boxes = coffee("DICT/CENT", policy="scripted:(!euro,-);STOP")
    cfg = parse_configuration("DICT/CENT")
    for box, requests in zip(boxes, (["coffee"], [])):
        events = classify_service_log(box["report"].log, cfg, requests)
        assert service_projection_accepts(cfg, events)
    # a reordered exchange is rejected
    events = classify_service_log(boxes[1]["report"].log, cfg, [])
    assert not service_projection_accepts(cfg, events[1:])


def test_tie_break_is_deterministic():
    assert majority(["(!b,-)", "(!a,-)"]) == "(!a,-)"
    assert majority(["STOP", "(!a,-)", "STOP"]) == "STOP"
    assert {majority(["x", "y", "z"]) for _ in range(20)} == {"x"}
    runs = {tuple(coffee("MAJ/DIST")[0].labels) for _ in range(3)}
    assert len(runs) == 1


def test_handshake_mismatch_never_starts():
    report, boxes = coffee("MAJ/CENT", service_configs=["DICT/CENT", "MAJ/CENT"], deadline=2.0)
    assert isinstance(report, HandshakeMismatch)
    alice = boxes[0]["report"]
    assert not alice.accepted_config and alice.handled == []
    assert ("<", "MAJORITARIAN") in alice.log and (">", "ERROR") in alice.log


def test_silent_orchestrator_times_out():
    ep = ServiceEndpoint(Behaviour(), parse_configuration("DICT/CENT"), deadline=0.3)
    t, box = serve_in_thread(ep)
    ch = connect("127.0.0.1", ep.port, 2.0)
    t.join(3)
    ch.close()
    assert isinstance(box.get("error"), PeerTimeout)


# -- conformance harness

def test_empty_script_passes():
    assert run_conformance("").passed


def test_negative_control_reports_both_values():
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    srv.close()
    script = (f'svc(0) LISTEN {port}\nsvc(0) ACCEPT\nsvc(0) RECV -> msg\n'
              'svc(0) ASSERT msg == "tea"\n')

    def sut(addresses):
        ch = connect(*addresses[0], 2.0)
        ch.send("coffee")
        ch.finish()
    result = run_conformance(script, deadline=3.0, sut=sut)
    assert not result.passed
    f = result.failure
    assert (f.lineno, f.expected, f.observed) == (4, '"tea"', '"coffee"')
    assert "expected" in result.summary()


@pytest.mark.parametrize("bad", ['svc(0) ASSERT msg == "x"', "svc(0) JUMP", 'orc SEND "x"',
                                 "svc(0) SEND $port", "svc(0)"])
def test_script_errors(bad):
    with pytest.raises(ScriptError):
        parse_script(bad)

import pytest

from carecheck.checker import check_query, evidence_text
from carecheck.protocol import SystemParams, parse_configuration
from carecheck.query import compile_predicate
from carecheck.semantics import parse_trace, replay, run_keys

from conftest import fixed

SMALL = SystemParams(n_services=2, queue_size=3, steps_capacity=0)


def replays(params, verdict):
    keys, loop = parse_trace(evidence_text(verdict))
    trace = run_keys(params, keys)
    if loop is not None:
        assert trace.states[-1] == trace.states[loop]
    replay(params, verdict.evidence)
    return trace


@pytest.mark.parametrize("text,holds", [
    ("A[] true", True), ("E<> false", False), ("E[] true", True), ("A<> true", True),
    ("false --> orc.Stop", True), ("E[] orc.Initial", False),
    ("A[] (allTerminated -> allEmpty())", True), ("E<> allTerminated", True),
])
def test_basic_verdicts(text, holds):
    assert check_query(SMALL, text).holds is holds


def test_reachability_witness_replays():
    v = check_query(SMALL, "E<> allTerminated")
    end = replays(SMALL, v).final
    assert compile_predicate("allTerminated", SMALL)(end)


def test_minimal_buffer_deadlock_counterexample():
    p = SMALL.with_(queue_size=2)
    v = check_query(p, "A[] (!deadlock || allTerminated)")
    assert v.holds is False
    end = replays(p, v).final
    assert end.orc == "CheckCompatibility"
    assert len(v.evidence) == 1  # the blocked send is right after initialize


def test_matching_configurations_never_error():
    p = fixed("MAJ/DIST", 3, 3)
    assert check_query(p, "E<> svc(0).Error").holds is False


def test_mismatch_reaches_error():
    maj, dic = parse_configuration("MAJ/DIST"), parse_configuration("DICT/DIST")
    p = SystemParams(n_services=3, queue_size=3, orc_config=maj, service_configs=(maj, maj, dic))
    v = check_query(p, "A<> ((orc.Error && svc(2).Error) || anyTimeout)")
    assert v.holds is True
    assert check_query(p, "A[] !orc.Start").holds is True


def test_exists_globally_lasso_and_leads_to_counterexample():
    v = check_query(SMALL, "E[] !allTerminated")
    assert v.holds and v.evidence.loop_start is not None
    replays(SMALL, v)
    w = check_query(SMALL, "orc.Start --> allTerminated")
    assert w.holds is False
    replays(SMALL, w)


def test_state_cap_gives_unknown():
    v = check_query(SMALL, "A[] true", state_cap=50)
    assert v.holds is None and v.status == "unknown"
    assert "verdict: unknown" in v.to_record()


def test_search_orders_agree():
    for text in ("A[] (!deadlock || allTerminated)", "E<> exists i: isFull(i)"):
        assert check_query(SMALL, text, search="bfs").holds == check_query(
            SMALL, text, search="dfs").holds

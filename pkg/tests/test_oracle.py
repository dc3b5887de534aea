"""Checker verdicts against reference verdicts computed without the checker."""

import pytest

from carecheck.checker import check_query
from carecheck.cli import data_dir
from carecheck.semantics import apply, enabled, initial_state

import narrative_model as nm
from conftest import fixed, offers_only
from oracle import FixpointOracle, WalkOracle, verdict
from suite_predicates import suite

DEPTH = 40
SUITE = suite(3)


def engine_successors(params):
    return lambda s: [apply(s, t, params) for t in enabled(s, params)]


def lifted(preds):
    return [(lambda f: lambda s, d: f(nm.project(s), d))(f) for f in preds]


def test_shipped_suite_matches_predicate_table():
    lines = [ln.strip() for ln in (data_dir() / "suite.q").read_text().splitlines() if ln.strip()]
    assert lines == [text for text, _, _ in SUITE]


@pytest.fixture(scope="module")
def walks_n1():
    p = offers_only()
    return p, WalkOracle(engine_successors(p), initial_state(p), DEPTH)


@pytest.fixture(scope="module")
def narrative_n2():
    return FixpointOracle(lambda s: nm.successors(s, 2, 3), nm.start(2))


@pytest.mark.parametrize("text,kind,preds", SUITE, ids=[t for t, _, _ in SUITE])
@pytest.mark.parametrize("search", ["bfs", "dfs"])
def test_offers_only_agrees_with_walks(walks_n1, text, kind, preds, search):
    params, oracle = walks_n1
    expected = verdict(oracle, kind, *lifted(preds))
    assert expected is not None, "walk enumeration left the verdict open"
    assert check_query(params, text, search=search).holds is expected


@pytest.mark.parametrize("text,kind,preds", SUITE, ids=[t for t, _, _ in SUITE])
def test_dict_cent_agrees_with_narrative_model(narrative_n2, text, kind, preds):
    expected = verdict(narrative_n2, kind, *preds)
    assert check_query(fixed("DICT/CENT", 2, 3, steps_capacity=0), text).holds is expected


@pytest.mark.parametrize("text,kind,preds", SUITE, ids=[t for t, _, _ in SUITE])
def test_dict_cent_walks_never_contradict(text, kind, preds):
    params = fixed("DICT/CENT", 2, 3, steps_capacity=0)
    oracle = _walks_n2(params)
    expected = verdict(oracle, kind, *lifted(preds))
    if expected is not None:
        assert check_query(params, text).holds is expected


_cache = {}


def _walks_n2(params):
    if "w" not in _cache:
        _cache["w"] = WalkOracle(engine_successors(params), initial_state(params), DEPTH)
    return _cache["w"]


def test_engine_graph_equals_narrative_graph(narrative_n2):
    params = fixed("DICT/CENT", 2, 3, steps_capacity=0)
    engine = FixpointOracle(engine_successors(params), initial_state(params))
    projected = {nm.project(s) for s in engine.graph}
    assert len(projected) == len(engine.graph)  # projection loses nothing
    assert projected == set(narrative_n2.graph)
    edges = {(nm.project(s), nm.project(t)) for s, ts in engine.graph.items() for t in ts}
    assert edges == {(s, t) for s, ts in narrative_n2.graph.items() for t in ts}
    assert len(engine.graph) == 1825


def test_walk_oracle_on_toy_graphs():
    # s0 -> s1 -> s2 -> s0 plus s0 -> s3 -> s3: the lasso through s1 is q-free after p
    g = {0: [1, 3], 1: [2], 2: [0], 3: [3]}
    w = WalkOracle(lambda s: g[s], 0, depth=10)
    assert w.closed
    p = lambda s, d: s == 1  # noqa: E731
    q = lambda s, d: s == 2  # noqa: E731
    assert w.leads_to(p, q) is True
    assert w.leads_to(lambda s, d: s == 2, lambda s, d: s == 1) is False
    assert w.exists_globally(lambda s, d: s != 3) is True
    assert w.always_eventually(lambda s, d: s == 3) is False
    f = FixpointOracle(lambda s: g[s], 0)
    assert f.leads_to(lambda s, d: s == 2, lambda s, d: s == 1) is False
    assert f.always_eventually(lambda s, d: s in (1, 3)) is True

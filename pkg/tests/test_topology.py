import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from stockcascade import reference_scenario
from stockcascade.topology import (NetworkGraph, NodeParams, Scenario, ScenarioConfig, Service,
                                   TopologyError, TrafficMatrix, parse_topology, render_scenario,
                                   validate_topology)


def test_single_node_with_service():
    sc = parse_topology("node 6 cap=30 delay=1 utility=5 max_delay=10\nservice 6")
    assert sc.graph.ids == [6]
    assert sc.graph.node(6) == NodeParams(6, 30, 1, 5, 10)
    assert sc.graph.service_ids == [6]
    assert sc.graph.edges == frozenset()
    assert sc.config.destinations == (6,)


def test_traffic_lines_fill_matrix():
    text = "\n".join(f"node {v} cap=25 delay=1 utility=5 max_delay=10" for v in range(7))
    text += "\nservice 6\n" + "\n".join(f"traffic {v} 6 3" for v in range(6))
    sc = parse_topology(text)
    assert sc.traffic.demands == {(v, 6): 3 for v in range(6)}
    assert all(sc.traffic.demand(v, 6) == 3 for v in range(6))


def test_comments_blank_lines_and_optional_fields():
    sc = parse_topology(
        "# header\n\nnode 0 cap=4 delay=2 utility=3 max_delay=9 margin=2  # trailing\n"
        "node 1 cap=4 delay=1 utility=3 max_delay=9\nedge 1 0\nservice 0 blocks=3 start=7\n"
    )
    assert sc.graph.node(0).initial_margin == 2
    assert sc.graph.edges == frozenset({(0, 1)})
    assert sc.graph.service(0) == Service(0, 3, 7)


def test_traffic_stage_override():
    sc = parse_topology(
        "node 0 cap=5 delay=1 utility=5 max_delay=9\nnode 1 cap=5 delay=1 utility=5 max_delay=9\n"
        "service 0\ntraffic 1 0 2\ntraffic 1 0 4 stage=3\n"
    )
    assert sc.traffic.demand(1, 0, stage=2) == 2
    assert sc.traffic.demand(1, 0, stage=3) == 4
    assert sc.traffic.demand(1, 0, stage=9) == 4


def test_config_directive():
    sc = parse_topology(
        "node 0 cap=5 delay=1 utility=5 max_delay=9\nservice 0\n"
        "config max_stages=7 margin_mode=adaptive choice_model=penalty penalty_rate=3\n"
    )
    assert sc.config.max_stages == 7
    assert sc.config.margin_mode == "adaptive"
    assert sc.config.choice_model == "penalty"
    assert sc.config.penalty_rate == 3


@pytest.mark.parametrize("text, line, fragment", [
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\nbogus 1 2", 2, "unknown directive"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\nnode 0 cap=1 delay=1 utility=1 max_delay=1", 2, "duplicate node"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\nedge 0 5", 2, "undeclared node 5"),
    ("node 0 cap=x delay=1 utility=1 max_delay=1", 1, "integer"),
    ("node 0 cap=1 delay=1 utility=1", 1, "missing max_delay"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1 colour=3", 1, "unknown key"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\nservice 3", 2, "undeclared node 3"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\ntraffic 0 9 1", 2, "undeclared node 9"),
    ("node 0 cap=1 delay=1 utility=1 max_delay=1\nedge 0", 2, "exactly two"),
])
def test_syntax_errors_report_line(text, line, fragment):
    with pytest.raises(TopologyError) as err:
        parse_topology(text)
    assert err.value.line == line
    assert fragment in str(err.value)


def test_bad_config_value_rejected():
    with pytest.raises(TopologyError, match="max_stages"):
        parse_topology("node 0 cap=1 delay=1 utility=1 max_delay=1\nconfig max_stages=0")


def _graph(nodes, edges=(), services=()):
    return NetworkGraph(tuple(nodes), frozenset(edges), tuple(Service(s) for s in services))


def test_own_traffic_over_cap_is_flagged():
    g = _graph([NodeParams(0, 2, 1, 5, 9), NodeParams(1, 9, 1, 5, 9)], {(0, 1)}, [1])
    problems = validate_topology(g, TrafficMatrix({(0, 1): 3}))
    assert len(problems) == 1
    assert "own traffic exceeds cap" in problems[0]
    assert "node 0" in problems[0]


def test_self_loop_is_flagged():
    sc = parse_topology("node 4 cap=1 delay=1 utility=1 max_delay=1\nedge 4 4\n")
    problems = validate_topology(sc.graph, sc.traffic)
    assert any("self-loop" in p and "(4,4)" in p for p in problems)


def test_reference_scenario_is_valid():
    sc = reference_scenario()
    assert validate_topology(sc.graph, sc.traffic, sc.config) == []
    assert sc.graph.ids == list(range(7))
    assert sc.config.destinations == (6,)
    assert sc.graph.node(1).cap == sc.graph.node(3).cap == 25
    assert {0, 6} <= set(sc.graph.neighbors(1)) and {0, 6} <= set(sc.graph.neighbors(3))


def test_destination_must_be_a_service():
    sc = parse_topology("node 0 cap=1 delay=1 utility=1 max_delay=1\nnode 1 cap=1 delay=1 utility=1 max_delay=1\n"
                        "edge 0 1\nservice 0\nconfig destinations=1\n")
    assert any("not a declared service" in p for p in validate_topology(sc.graph, sc.traffic, sc.config))


# -- generated structures -------------------------------------------------------

small = st.integers(min_value=0, max_value=40)


@st.composite
def scenarios(draw):
    ids = sorted(draw(st.sets(st.integers(0, 30), min_size=1, max_size=8)))
    nodes = []
    for i in ids:
        nodes.append(NodeParams(i, draw(st.integers(0, 60)), draw(small), draw(small), draw(small),
                                draw(st.integers(1, 5))))
    pairs = [(a, b) for a in ids for b in ids if a < b]
    edges = frozenset(draw(st.lists(st.sampled_from(pairs), unique=True))) if pairs else frozenset()
    service_ids = sorted(draw(st.sets(st.sampled_from(ids), max_size=3)))
    services = tuple(Service(s, draw(st.none() | small), draw(st.none() | small)) for s in service_ids)
    graph = NetworkGraph(tuple(nodes), edges, services)
    caps = {n.id: n.cap for n in nodes}
    demands = {}
    for src in ids:
        room = caps[src]
        for dst in service_ids:
            if dst != src and room:
                amount = draw(st.integers(0, min(room, 5)))
                room -= amount
                demands[(src, dst)] = amount
    overrides = {}
    if demands and draw(st.booleans()):
        key = draw(st.sampled_from(sorted(demands)))
        overrides[draw(st.integers(1, 9))] = {key: min(demands[key], 1)}
    cfg = ScenarioConfig(
        destinations=tuple(service_ids),
        max_stages=draw(st.integers(1, 200)),
        stability_window=draw(st.integers(1, 4)),
        margin_mode=draw(st.sampled_from(["fixed", "adaptive"])),
        selection_strategy=draw(st.sampled_from(["min_fill", "benefit_rank"])),
        choice_model=draw(st.sampled_from(["open", "blocked", "penalty"])),
        penalty_rate=draw(small),
        block_count=draw(small),
        start_time=draw(small),
        event_cap=draw(st.none() | st.integers(1, 10_000)),
    )
    return Scenario(graph, TrafficMatrix(demands, overrides), cfg)


@settings(max_examples=150, deadline=None)
@given(scenarios())
def test_render_parse_round_trip(sc):
    assert parse_topology(render_scenario(sc)) == sc


@settings(max_examples=150, deadline=None)
@given(scenarios())
def test_generated_scenarios_validate_clean(sc):
    assert validate_topology(sc.graph, sc.traffic, sc.config) == []


_MUTATIONS = [
    ("cap", -1), ("delay", -1), ("utility", -1), ("max_delay", -1), ("initial_margin", 0),
]


@settings(max_examples=150, deadline=None)
@given(scenarios(), st.data())
def test_any_broken_bound_is_reported(sc, data):
    kind = data.draw(st.sampled_from(["node", "self_loop", "traffic", "overload"]))
    g = sc.graph
    victim = data.draw(st.sampled_from(g.nodes))
    traffic = sc.traffic
    if kind == "node":
        attr, value = data.draw(st.sampled_from(_MUTATIONS))
        nodes = tuple(dataclasses.replace(n, **{attr: value}) if n is victim else n for n in g.nodes)
        g = NetworkGraph(nodes, g.edges, g.services)
    elif kind == "self_loop":
        g = NetworkGraph(g.nodes, g.edges | {(victim.id, victim.id)}, g.services)
    elif kind == "traffic":
        traffic = TrafficMatrix({**traffic.demands, (victim.id, victim.id): -1}, traffic.overrides)
    else:
        traffic = TrafficMatrix({**traffic.demands, (victim.id, victim.id): victim.cap + 1},
                                traffic.overrides)
    problems = validate_topology(g, traffic, sc.config)
    assert problems
    if kind == "overload":
        assert any("own traffic exceeds cap" in p for p in problems)

"""Scenario builders shared by the test modules."""
import random

import networkx as nx

from stockcascade.topology import parse_topology


def scenario_text(caps, edges, dest, demand, utility=5, max_delay=10, delay=1, margins=None, config=""):
    """Scenario file text; ``caps``/``demand``/``margins`` are per-node lists or dicts."""
    lines = []
    for v in range(len(caps)):
        m = f" margin={margins[v]}" if margins else ""
        u = utility[v] if isinstance(utility, (list, tuple)) else utility
        lines.append(f"node {v} cap={caps[v]} delay={delay} utility={u} max_delay={max_delay}{m}")
    lines += [f"edge {a} {b}" for a, b in edges]
    lines.append(f"service {dest}")
    for v in range(len(caps)):
        if v != dest and demand[v]:
            lines.append(f"traffic {v} {dest} {demand[v]}")
    if config:
        lines.append(f"config {config}")
    return "\n".join(lines) + "\n"


def build(caps, edges, dest, demand, **kw):
    return parse_topology(scenario_text(caps, edges, dest, demand, **kw))


def random_scenario(seed, max_nodes=12, margin_mode="fixed", choice="open", selection="min_fill"):
    """Connected random network with one destination and uniform hop delay 1."""
    rng = random.Random(seed)
    n = rng.randint(2, max_nodes)
    g = nx.gnp_random_graph(n, rng.uniform(0.2, 0.6), seed=rng.randrange(1 << 30))
    comps = [sorted(c) for c in nx.connected_components(g)]
    for a, b in zip(comps, comps[1:]):
        g.add_edge(rng.choice(a), rng.choice(b))
    dest = rng.randrange(n)
    caps = [rng.randint(2, 30) for _ in range(n)]
    demand = [rng.randint(0, min(4, c)) for c in caps]
    config = (f"margin_mode={margin_mode} choice_model={choice} "
              f"selection_strategy={selection} max_stages=40")
    return build(caps, sorted(g.edges), dest, demand, utility=rng.randint(2, 8),
                 max_delay=rng.randint(2, 10), config=config)

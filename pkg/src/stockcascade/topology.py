"""Scenario files: network graph, traffic matrix and run configuration.

The format is line based::

    # comment
    node 6 cap=60 delay=1 utility=5 max_delay=10 [margin=1]
    edge 1 6
    service 6 [blocks=1] [start=1000]
    traffic 0 6 3 [stage=4]
    config max_stages=100 margin_mode=fixed ...

``traffic ... stage=S`` overrides the demand from stage S onwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict, FrozenSet, List, Optional, Tuple

from .policies import ADAPTIVE, BENEFIT_RANK, FIXED, MIN_FILL

CHOICE_MODELS = ("open", "blocked", "penalty")
MARGIN_MODES = (FIXED, ADAPTIVE)
SELECTION_STRATEGIES = (MIN_FILL, BENEFIT_RANK)


class TopologyError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class NodeParams:
    id: int
    cap: int
    delay: int
    utility: int
    max_delay: int
    initial_margin: int = 1


@dataclass(frozen=True)
class Service:
    node: int
    blocks: Optional[int] = None
    start: Optional[int] = None


@dataclass(frozen=True)
class NetworkGraph:
    nodes: Tuple[NodeParams, ...]
    edges: FrozenSet[Tuple[int, int]]
    services: Tuple[Service, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})
        adj: Dict[int, List[int]] = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            if a in adj and b in adj and a != b:
                adj[a].append(b)
                adj[b].append(a)
        object.__setattr__(self, "_adj", {k: tuple(sorted(v)) for k, v in adj.items()})

    def node(self, node_id: int) -> NodeParams:
        return self._by_id[node_id]

    def neighbors(self, node_id: int) -> Tuple[int, ...]:
        return self._adj[node_id]

    @property
    def ids(self) -> List[int]:
        return sorted(self._by_id)

    @property
    def service_ids(self) -> List[int]:
        return [s.node for s in self.services]

    def service(self, node_id: int) -> Service:
        for s in self.services:
            if s.node == node_id:
                return s
        raise KeyError(node_id)


@dataclass(frozen=True)
class TrafficMatrix:
    demands: Dict[Tuple[int, int], int] = field(default_factory=dict)
    # stage -> {(src, dst): demand}, applied from that stage on
    overrides: Dict[int, Dict[Tuple[int, int], int]] = field(default_factory=dict)

    def at(self, stage: int) -> Dict[Tuple[int, int], int]:
        merged = dict(self.demands)
        for s in sorted(self.overrides):
            if s <= stage:
                merged.update(self.overrides[s])
        return merged

    def demand(self, src: int, dst: int, stage: int = 0) -> int:
        return self.at(stage).get((src, dst), 0)


@dataclass(frozen=True)
class ScenarioConfig:
    destinations: Tuple[int, ...] = ()
    max_stages: int = 100
    stability_window: int = 2
    margin_mode: str = FIXED
    selection_strategy: str = MIN_FILL
    choice_model: str = "open"
    penalty_rate: int = 1
    block_count: int = 1
    start_time: int = 1000
    event_cap: Optional[int] = None  # None -> 10 * |V|^2 per destination and stage

    def validate(self) -> List[str]:
        problems = []
        if self.max_stages < 1:
            problems.append("max_stages must be >= 1")
        if self.stability_window < 1:
            problems.append("stability_window must be >= 1")
        if self.penalty_rate < 0:
            problems.append("penalty_rate must be >= 0")
        if self.margin_mode not in MARGIN_MODES:
            problems.append(f"unknown margin_mode {self.margin_mode!r}")
        if self.selection_strategy not in SELECTION_STRATEGIES:
            problems.append(f"unknown selection_strategy {self.selection_strategy!r}")
        if self.choice_model not in CHOICE_MODELS:
            problems.append(f"unknown choice_model {self.choice_model!r}")
        if self.block_count < 0 or self.start_time < 0:
            problems.append("block_count and start_time must be >= 0")
        if self.event_cap is not None and self.event_cap < 1:
            problems.append("event_cap must be >= 1")
        return problems


@dataclass(frozen=True)
class Scenario:
    graph: NetworkGraph
    traffic: TrafficMatrix
    config: ScenarioConfig

    def with_config(self, **changes) -> "Scenario":
        return replace(self, config=replace(self.config, **changes))


_NODE_KEYS = {"cap": "cap", "delay": "delay", "utility": "utility",
              "max_delay": "max_delay", "margin": "initial_margin"}
_INT_CONFIG = {"max_stages", "stability_window", "penalty_rate", "block_count",
               "start_time", "event_cap"}
_STR_CONFIG = {"margin_mode", "selection_strategy", "choice_model"}


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TopologyError(f"expected an integer, got {tok!r}", lineno) from None


def _kv(tokens: List[str], allowed, lineno: int) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not value:
            raise TopologyError(f"expected key=value, got {tok!r}", lineno)
        if key not in allowed:
            raise TopologyError(f"unknown key {key!r}", lineno)
        if key in out:
            raise TopologyError(f"duplicate key {key!r}", lineno)
        out[key] = value
    return out


def parse_topology(text: str) -> Scenario:
    nodes: Dict[int, NodeParams] = {}
    edges: List[Tuple[Tuple[int, int], int]] = []
    services: Dict[int, Tuple[Service, int]] = {}
    traffic: List[Tuple[int, int, int, Optional[int], int]] = []
    config: Dict[str, object] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        if word == "node":
            if not rest:
                raise TopologyError("node needs an id", lineno)
            nid = _int(rest[0], lineno)
            if nid < 0:
                raise TopologyError("node ids must be nonnegative", lineno)
            if nid in nodes:
                raise TopologyError(f"duplicate node id {nid}", lineno)
            kv = _kv(rest[1:], _NODE_KEYS, lineno)
            missing = {"cap", "delay", "utility", "max_delay"} - kv.keys()
            if missing:
                raise TopologyError(f"node {nid} missing {', '.join(sorted(missing))}", lineno)
            params = {_NODE_KEYS[k]: _int(v, lineno) for k, v in kv.items()}
            nodes[nid] = NodeParams(id=nid, **params)
        elif word == "edge":
            if len(rest) != 2:
                raise TopologyError("edge takes exactly two node ids", lineno)
            a, b = (_int(t, lineno) for t in rest)
            edges.append(((a, b), lineno))
        elif word == "service":
            if not rest:
                raise TopologyError("service needs a node id", lineno)
            sid = _int(rest[0], lineno)
            kv = _kv(rest[1:], {"blocks", "start"}, lineno)
            if sid in services:
                raise TopologyError(f"duplicate service {sid}", lineno)
            services[sid] = (Service(sid, *(
                _int(kv[k], lineno) if k in kv else None for k in ("blocks", "start")
            )), lineno)
        elif word == "traffic":
            if len(rest) not in (3, 4):
                raise TopologyError("traffic takes <src> <dst> <amount> [stage=<int>]", lineno)
            src, dst, amount = (_int(t, lineno) for t in rest[:3])
            stage = None
            if len(rest) == 4:
                stage = _int(_kv(rest[3:], {"stage"}, lineno)["stage"], lineno)
            traffic.append((src, dst, amount, stage, lineno))
        elif word == "config":
            kv = _kv(rest, _INT_CONFIG | _STR_CONFIG | {"destinations"}, lineno)
            for k, v in kv.items():
                if k in _INT_CONFIG:
                    config[k] = _int(v, lineno)
                elif k == "destinations":
                    config[k] = tuple(_int(t, lineno) for t in v.split(","))
                else:
                    config[k] = v
        else:
            raise TopologyError(f"unknown directive {word!r}", lineno)

    edge_set = set()
    for (a, b), lineno in edges:
        for end in (a, b):
            if end not in nodes:
                raise TopologyError(f"edge references undeclared node {end}", lineno)
        edge_set.add((min(a, b), max(a, b)))
    for sid, (_, lineno) in services.items():
        if sid not in nodes:
            raise TopologyError(f"service on undeclared node {sid}", lineno)

    demands: Dict[Tuple[int, int], int] = {}
    overrides: Dict[int, Dict[Tuple[int, int], int]] = {}
    for src, dst, amount, stage, lineno in traffic:
        for end in (src, dst):
            if end not in nodes:
                raise TopologyError(f"traffic references undeclared node {end}", lineno)
        target = demands if stage is None else overrides.setdefault(stage, {})
        target[(src, dst)] = amount

    graph = NetworkGraph(
        nodes=tuple(nodes[k] for k in sorted(nodes)),
        edges=frozenset(edge_set),
        services=tuple(services[k][0] for k in sorted(services)),
    )
    config.setdefault("destinations", tuple(sorted(services)))
    try:
        cfg = ScenarioConfig(**config)
    except TypeError as exc:  # pragma: no cover - keys are filtered above
        raise TopologyError(str(exc)) from None
    problems = cfg.validate()
    if problems:
        raise TopologyError("; ".join(problems))
    return Scenario(graph, TrafficMatrix(demands, overrides), cfg)


def render_scenario(scenario: Scenario) -> str:
    """Inverse of :func:`parse_topology`."""
    g, tm, cfg = scenario.graph, scenario.traffic, scenario.config
    lines = []
    for n in g.nodes:
        lines.append(
            f"node {n.id} cap={n.cap} delay={n.delay} utility={n.utility} "
            f"max_delay={n.max_delay} margin={n.initial_margin}"
        )
    for a, b in sorted(g.edges):
        lines.append(f"edge {a} {b}")
    for s in g.services:
        extra = "".join(
            f" {k}={v}" for k, v in (("blocks", s.blocks), ("start", s.start)) if v is not None
        )
        lines.append(f"service {s.node}{extra}")
    for (src, dst), amount in sorted(tm.demands.items()):
        lines.append(f"traffic {src} {dst} {amount}")
    for stage in sorted(tm.overrides):
        for (src, dst), amount in sorted(tm.overrides[stage].items()):
            lines.append(f"traffic {src} {dst} {amount} stage={stage}")
    parts = []
    for f in fields(ScenarioConfig):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if f.name == "destinations":
            if not value:
                continue
            value = ",".join(str(d) for d in value)
        parts.append(f"{f.name}={value}")
    lines.append("config " + " ".join(parts))
    return "\n".join(lines) + "\n"


def validate_topology(graph: NetworkGraph, traffic: TrafficMatrix,
                      config: Optional[ScenarioConfig] = None) -> List[str]:
    """Every broken structural or budget rule, one message each; empty when valid."""
    violations = []
    seen = set()
    for n in graph.nodes:
        if n.id in seen:
            violations.append(f"node {n.id}: duplicate id")
        seen.add(n.id)
        for attr in ("cap", "delay", "utility", "max_delay"):
            if getattr(n, attr) < 0:
                violations.append(f"node {n.id}: {attr} must be >= 0")
        if n.initial_margin < 1:
            violations.append(f"node {n.id}: margin must be >= 1")
    for a, b in sorted(graph.edges):
        if a == b:
            violations.append(f"edge ({a},{b}): self-loop")
        for end in (a, b):
            if end not in seen:
                violations.append(f"edge ({a},{b}): unknown node {end}")
    for s in graph.services:
        if s.node not in seen:
            violations.append(f"service {s.node}: unknown node")
        if s.blocks is not None and s.blocks < 0:
            violations.append(f"service {s.node}: blocks must be >= 0")
        if s.start is not None and s.start < 0:
            violations.append(f"service {s.node}: start must be >= 0")

    stages = [0] + sorted(traffic.overrides)
    for stage in stages:
        matrix = traffic.at(stage)
        label = "" if stage == 0 else f" (from stage {stage})"
        totals: Dict[int, int] = {}
        for (src, dst), amount in sorted(matrix.items()):
            if amount < 0:
                violations.append(f"traffic {src}->{dst}{label}: negative demand")
            for end in (src, dst):
                if end not in seen:
                    violations.append(f"traffic {src}->{dst}{label}: unknown node {end}")
            totals[src] = totals.get(src, 0) + amount
        for src, total in sorted(totals.items()):
            if src in seen and total > graph.node(src).cap:
                violations.append(f"node {src}{label}: own traffic exceeds cap ({total} > {graph.node(src).cap})")

    if config is not None:
        services = set(graph.service_ids)
        for d in config.destinations:
            if d not in services:
                violations.append(f"destination {d}: not a declared service")
        violations.extend(f"config: {p}" for p in config.validate())
    return violations


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh.read())

"""Stage driver: strategies in, cascade, accounting, stability detection."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import policies
from .contracts import AvailabilityWindow, CapacityLedger
from .protocol import CascadeOutcome, StageContext, run_cascade
from .topology import Scenario

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("stage", "node", "dest", "cap_min", "cap_max", "poss", "local_cap",
               "free_cap", "margin", "provider", "benefit", "satisfied")


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class NodeStageRow:
    node: int
    dest: int
    cap_min: int
    cap_max: int
    poss: int
    local_cap: int
    free_cap: int
    margin: int
    provider: Optional[int]
    benefit: int
    satisfied: bool
    sold: int = 0
    cost: int = 0
    delay: int = 0
    asked_provider_max: bool = False
    reset: bool = False
    demands: int = 0

    def strategy(self) -> policies.StrategyState:
        return policies.StrategyState(
            margin=self.margin,
            cap_min=self.cap_min,
            cap_max=max(self.cap_min, self.cap_max),
            outcome=policies.StageOutcome(self.poss, self.sold, self.benefit, self.asked_provider_max),
        )


@dataclass(frozen=True)
class MetricsSnapshot:
    node: int
    cap_in: int
    cap_out: int
    cap_in_out: int
    slack: int


@dataclass
class StageRecord:
    stage: int
    rows: Dict[Tuple[int, int], NodeStageRow]
    outcomes: Dict[int, CascadeOutcome]
    metrics: Dict[int, MetricsSnapshot]

    def fingerprint(self):
        return tuple(sorted(self.rows.items()))

    def ledger(self, node: int, dest: int) -> CapacityLedger:
        return self.outcomes[dest].ledgers[node]

    def benefit(self, node: int) -> int:
        return sum(r.benefit for (v, _), r in self.rows.items() if v == node)


@dataclass
class SimulationReport:
    records: List[StageRecord]
    stable_at: Optional[int]
    satisfaction: float
    trees: Dict[int, Dict[int, int]] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.stable_at is not None

    @property
    def final(self) -> StageRecord:
        return self.records[-1]


def stage_benefit(ledger: CapacityLedger, utility: int) -> int:
    """Resale revenue plus value of own traffic minus purchase cost, net of penalties."""
    up = ledger.upstream
    total = ledger.penalty_received - ledger.penalty_paid
    if up is None:
        return total
    revenue = sum(c.window.blocks * c.poss * c.cost for c in ledger.sold.values())
    own = up.window.blocks * ledger.local_cap * utility
    return total + revenue + own - up.window.blocks * up.poss * up.cost


def _is_satisfied(demand: int, row_local: int, cost: int, delay: int, utility: int, max_delay: int,
                  has_route: bool) -> bool:
    if demand <= 0:
        return True
    return has_route and row_local == demand and cost < utility and delay <= max_delay


def satisfaction_rate(record: StageRecord, traffic: Dict[Tuple[int, int], int], scenario: Scenario) -> float:
    """Share of nodes with own demand whose every demand is fully carried within budget."""
    g = scenario.graph
    wanting: Dict[int, bool] = {}
    for (src, dst), amount in sorted(traffic.items()):
        if amount <= 0 or src == dst:
            continue
        row = record.rows.get((src, dst))
        node = g.node(src)
        ok = row is not None and _is_satisfied(
            amount, row.local_cap, row.cost, row.delay, node.utility, node.max_delay,
            row.provider is not None,
        )
        wanting[src] = wanting.get(src, True) and ok
    if not wanting:
        return 1.0
    return sum(wanting.values()) / len(wanting)


def _metrics(scenario: Scenario, outcomes: Dict[int, CascadeOutcome]) -> Dict[int, MetricsSnapshot]:
    g = scenario.graph
    out = {}
    for v in g.ids:
        cap_in = sum(l.local_cap for w, l in outcomes[v].ledgers.items() if w != v) if v in outcomes else 0
        cap_out = sum(o.ledgers[v].local_cap for u, o in outcomes.items() if u != v)
        cap_in_out = sum(o.ledgers[v].sold_total for u, o in outcomes.items() if u != v)
        out[v] = MetricsSnapshot(v, cap_in, cap_out, cap_in_out,
                                 g.node(v).cap - cap_in - cap_out - cap_in_out)
    return out


def audit_stage(record: StageRecord, scenario: Scenario) -> List[str]:
    """Cheap self-checks run after every stage."""
    problems = []
    g = scenario.graph
    revenue = purchases = 0
    for u, outcome in record.outcomes.items():
        for v, l in outcome.ledgers.items():
            if l.free_cap < 0 or l.local_cap + l.sold_total + l.free_cap != l.poss:
                problems.append(f"ledger ({v},{u}) does not balance")
            for c in l.sold.values():
                revenue += c.window.blocks * c.poss * c.cost
            if l.upstream is not None and not l.upstream.is_self_rooted:
                purchases += l.upstream.window.blocks * l.upstream.poss * l.upstream.cost
    if revenue != purchases:
        problems.append(f"money not conserved: revenue {revenue} != purchases {purchases}")
    for v in g.ids:
        used = sum(o.ledgers[v].poss for u, o in record.outcomes.items() if u != v)
        if used > g.node(v).cap:
            problems.append(f"node {v} buys {used} > cap {g.node(v).cap}")
        m = record.metrics[v]
        if m.slack < 0:
            problems.append(f"node {v} capacity categories exceed cap")
    return problems


def _stage_window(scenario: Scenario, u: int) -> AvailabilityWindow:
    cfg = scenario.config
    service = scenario.graph.service(u)
    blocks = service.blocks if service.blocks is not None else cfg.block_count
    start = service.start if service.start is not None else cfg.start_time
    return AvailabilityWindow(start, blocks)


def run_stage(scenario: Scenario, stage: int, prev: Optional[StageRecord]) -> StageRecord:
    g, cfg = scenario.graph, scenario.config
    traffic = scenario.traffic.at(stage)
    budget_used: Dict[int, int] = {}
    rows: Dict[Tuple[int, int], NodeStageRow] = {}
    outcomes: Dict[int, CascadeOutcome] = {}

    for u in cfg.destinations:
        prev_rows = {v: prev.rows.get((v, u)) for v in g.ids} if prev is not None else {}
        margins = {}
        for v in g.ids:
            row = prev_rows.get(v)
            margins[v] = policies.update_margin(
                row.strategy() if row is not None else None, cfg.margin_mode,
                g.node(v).initial_margin,
            )
        own = {v: traffic.get((v, u), 0) for v in g.ids if v != u}

        def cap_min_rule(v, price, prev_rows=prev_rows, own=own):
            row = prev_rows.get(v)
            had_route = row is not None and row.provider is not None
            return policies.fix_cap_min(
                row.strategy() if had_route else None, own.get(v, 0), price,
                g.node(v).utility, not had_route,
            )

        ctx = StageContext(
            graph=g, destination=u, margins=margins, own_demand=own,
            cap_min_rule=cap_min_rule, budget_used=dict(budget_used),
            choice_model=cfg.choice_model, selection_strategy=cfg.selection_strategy,
            penalty_rate=cfg.penalty_rate, window=_stage_window(scenario, u),
            event_cap=cfg.event_cap,
        )
        outcome = run_cascade(ctx)
        outcomes[u] = outcome

        for v in g.ids:
            ledger = outcome.ledgers[v]
            budget_used[v] = budget_used.get(v, 0) + ledger.poss
            node = g.node(v)
            rec = outcome.demands.get(v)
            up = ledger.upstream
            prow = prev_rows.get(v)
            reset = (rec is not None and prow is not None and prow.provider is not None
                     and policies.is_cap_min_reset(prow.strategy()))
            rows[(v, u)] = NodeStageRow(
                node=v, dest=u,
                cap_min=rec.cap_min if rec else 0,
                cap_max=rec.cap_max if rec else 0,
                poss=ledger.poss, local_cap=ledger.local_cap, free_cap=ledger.free_cap,
                margin=margins[v],
                provider=up.provider if up is not None else None,
                benefit=stage_benefit(ledger, node.utility),
                satisfied=(v == u) or _is_satisfied(
                    own.get(v, 0), ledger.local_cap, up.cost if up else 0,
                    up.delay if up else 0, node.utility, node.max_delay, up is not None),
                sold=ledger.sold_total,
                cost=up.cost if up else 0,
                delay=up.delay if up else 0,
                asked_provider_max=rec.asked_provider_max if rec else False,
                reset=reset,
                demands=outcome.demand_counts.get(v, 0),
            )

    record = StageRecord(stage, rows, outcomes, _metrics(scenario, outcomes))
    problems = audit_stage(record, scenario)
    if problems:
        raise InvariantViolation(f"stage {stage}: " + "; ".join(problems))
    return record


def detect_stable(records: Sequence[StageRecord], window: int) -> Optional[int]:
    """Earliest stage from which ``window`` consecutive records coincide."""
    if window < 1 or len(records) < window:
        return None
    prints = [r.fingerprint() for r in records]
    for i in range(len(records) - window + 1):
        if all(prints[j] == prints[i] for j in range(i + 1, i + window)):
            return records[i].stage
    return None


def route_trees(record: StageRecord) -> Dict[int, Dict[int, int]]:
    return {u: o.provider_map() for u, o in record.outcomes.items()}


def run(scenario: Scenario) -> SimulationReport:
    cfg = scenario.config
    records: List[StageRecord] = []
    prev = None
    stable_at = None
    w = cfg.stability_window
    for stage in range(cfg.max_stages):
        prev = run_stage(scenario, stage, prev)
        records.append(prev)
        if len(records) >= w:
            tail = records[-w:]
            if all(r.fingerprint() == tail[0].fingerprint() for r in tail[1:]):
                stable_at = tail[0].stage
                break
    final = records[-1]
    rate = satisfaction_rate(final, scenario.traffic.at(final.stage), scenario)
    logger.info("ran %d stages, stable_at=%s, satisfaction=%.3f", len(records), stable_at, rate)
    return SimulationReport(records, stable_at, rate, route_trees(final))


def csv_rows(report: SimulationReport):
    for rec in report.records:
        for (v, u) in sorted(rec.rows):
            r = rec.rows[(v, u)]
            yield (rec.stage, v, u, r.cap_min, r.cap_max, r.poss, r.local_cap, r.free_cap,
                   r.margin, "" if r.provider is None else r.provider, r.benefit, int(r.satisfied))


def export_csv(report: SimulationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(csv_rows(report))
    return buf.getvalue()


def export_events(report: SimulationReport) -> str:
    lines = []
    for rec in report.records:
        for u in sorted(rec.outcomes):
            lines.append(f"# stage {rec.stage} dest {u}")
            lines.extend(rec.outcomes[u].format_log())
    return "\n".join(lines) + "\n"


_SPARKS = "▁▂▃▄▅▆▇█"


def sparkline(values: Sequence[int]) -> str:
    if not values:
        return ""
    lo, hi = min(values), max(values)
    if hi == lo:
        return _SPARKS[0] * len(values)
    span = hi - lo
    return "".join(_SPARKS[(v - lo) * (len(_SPARKS) - 1) // span] for v in values)


def summary_text(report: SimulationReport, scenario: Scenario) -> str:
    cfg = scenario.config
    out = []
    status = f"stable at stage {report.stable_at}" if report.converged else "not converged"
    out.append(f"stages run: {len(report.records)}  ({status})")
    out.append(f"satisfaction rate: {report.satisfaction:.3f}")
    out.append(f"margin={cfg.margin_mode} selection={cfg.selection_strategy} "
               f"choice={cfg.choice_model} window={cfg.stability_window}")
    for u, tree in sorted(report.trees.items()):
        out.append(f"routes to {u}: " + ", ".join(f"{v}<-{p}" for v, p in sorted(tree.items())))
    out.append("benefit per node (first..last stage):")
    for v in scenario.graph.ids:
        series = [rec.benefit(v) for rec in report.records]
        out.append(f"  node {v:>3} {sparkline(series)}  [{min(series)}..{max(series)}] final={series[-1]}")
    out.append("cap_min per node and destination:")
    for u in cfg.destinations:
        for v in scenario.graph.ids:
            if v == u:
                continue
            series = [rec.rows[(v, u)].cap_min for rec in report.records]
            out.append(f"  {v:>3}->{u:<3} {sparkline(series)}  final={series[-1]}")
    return "\n".join(out) + "\n"

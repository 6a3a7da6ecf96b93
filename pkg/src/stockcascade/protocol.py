"""Offer / demand / selection / choice exchange and the reverse cascade.

One call to :func:`run_cascade` plays out a full stage for one destination.
Messages carry integer timestamps; every handler schedules its replies one
time unit later, and messages sharing a timestamp are processed in the
total order ``(time, sender, receiver, kind rank, sequence)``.  After each
time step, nodes that received offers or refusals decide on a demand, and
sellers answer the demands collected during that step in a single batch.

When the queue drains, every buyer hands back the capacity it neither kept
nor resold (never going below its own ``cap_min``), providers that got stock
back offer it again, and the exchange resumes until nothing moves.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from . import policies
from .contracts import (
    AvailabilityWindow,
    CapacityLedger,
    Contract,
    amend_contract,
    check_window_nesting,
    derive_local_capacity,
    self_contract,
)
from .topology import NetworkGraph

logger = logging.getLogger(__name__)

OFFER = "offer"
DEMAND = "demand"
SELECT_OK = "select_ok"
SELECT_NO = "select_no"
CONFIRM_OK = "confirm_ok"
CONFIRM_NO = "confirm_no"
AMEND = "amend"

KIND_RANK = {OFFER: 0, DEMAND: 1, SELECT_OK: 2, SELECT_NO: 2, CONFIRM_OK: 3, CONFIRM_NO: 3, AMEND: 4}


class CascadeAbort(RuntimeError):
    """The per-stage event budget ran out before the cascade settled."""


@dataclass(frozen=True)
class RouteOffer:
    seller: int
    destination: int
    free_cap: int
    delay: int
    price: int
    window: AvailabilityWindow
    serial: int = 0

    def preference(self):
        return policies.route_preference(self.price, self.delay, self.free_cap, self.seller)


@dataclass(frozen=True)
class DemandQuery:
    buyer: int
    destination: int
    cap_min: int
    cap_max: int
    window: AvailabilityWindow
    offer_serial: int = 0


@dataclass(frozen=True)
class Message:
    kind: str
    sender: int
    receiver: int
    time: int
    destination: int
    offer: Optional[RouteOffer] = None
    demand: Optional[DemandQuery] = None
    contract: Optional[Contract] = None
    release: Optional[int] = None

    def sort_key(self):
        return (self.time, self.sender, self.receiver, KIND_RANK[self.kind])

    def format(self) -> str:
        head = f"t={self.time} {self.kind} {self.sender}->{self.receiver} dest={self.destination}"
        if self.kind == OFFER:
            o = self.offer
            tail = (f" free={o.free_cap} delay={o.delay} price={o.price}"
                    f" blocks={o.window.blocks} start={o.window.start}")
        elif self.kind == DEMAND:
            d = self.demand
            tail = (f" min={d.cap_min} max={d.cap_max}"
                    f" blocks={d.window.blocks} start={d.window.start}")
        elif self.kind == SELECT_OK:
            c = self.contract
            tail = f" poss={c.poss} blocks={c.window.blocks} start={c.window.start}"
        elif self.kind == CONFIRM_OK and self.release is not None:
            tail = f" release={self.release}"
        elif self.kind == AMEND:
            tail = f" poss={self.contract.poss}"
        else:
            tail = ""
        return head + tail


@dataclass(frozen=True)
class DemandRecord:
    """What a buyer asked for in the demand that produced its current contract."""
    seller: int
    cap_min: int
    cap_max: int
    cost: int
    asked_provider_max: bool


# Called as rule(node, offer_price) -> cap_min before clamping.
CapMinRule = Callable[[int, int], int]


@dataclass
class StageContext:
    graph: NetworkGraph
    destination: int
    margins: Dict[int, int]
    own_demand: Dict[int, int]
    cap_min_rule: CapMinRule
    budget_used: Dict[int, int] = field(default_factory=dict)
    choice_model: str = "open"
    selection_strategy: str = policies.MIN_FILL
    penalty_rate: int = 1
    window: AvailabilityWindow = AvailabilityWindow(1000, 1)
    event_cap: Optional[int] = None


@dataclass
class CascadeOutcome:
    destination: int
    ledgers: Dict[int, CapacityLedger]
    demands: Dict[int, DemandRecord]
    offered: Set[int]
    log: List[Message]
    demand_counts: Dict[int, int]
    end_time: int

    def contracts(self) -> List[Contract]:
        return [l.upstream for _, l in sorted(self.ledgers.items())
                if l.upstream is not None and not l.upstream.is_self_rooted]

    def provider_map(self) -> Dict[int, int]:
        return {c.customer: c.provider for c in self.contracts()}

    def format_log(self) -> List[str]:
        return [m.format() for m in self.log]


def build_offer(ledger: CapacityLedger, margin: int, hop_delay: int, serial: int = 0) -> Optional[RouteOffer]:
    """The offer a node with a route makes to its neighbours, or None if it has nothing to sell."""
    up = ledger.upstream
    free = ledger.free_cap
    if up is None or free <= 0:
        return None
    return RouteOffer(
        seller=ledger.node,
        destination=ledger.destination,
        free_cap=free,
        delay=up.delay + hop_delay,
        price=up.cost + margin,
        window=up.window,
        serial=serial,
    )


def build_demand(
    buyer: int,
    offers: List[RouteOffer],
    cap_min: Callable[[RouteOffer], int],
    budget: int,
) -> Optional[Tuple[RouteOffer, DemandQuery]]:
    """Pick the preferred offer and quote ``[cap_min, cap_max]`` to its seller.

    Offers leaving nothing to ask for (``cap_max == 0``) are skipped.
    """
    for offer in sorted(offers, key=RouteOffer.preference):
        hi = policies.fix_cap_max(budget, offer.free_cap)
        if hi == 0:
            continue
        lo = min(cap_min(offer), hi)
        return offer, DemandQuery(buyer, offer.destination, lo, hi, offer.window, offer.serial)
    return None


def select_customers(
    provider: int,
    demands: List[DemandQuery],
    ledger: CapacityLedger,
    strategy: str,
    margin: int = 1,
) -> Dict[int, Optional[int]]:
    """Grant capacity to a batch of demands; ``None`` means the buyer is turned down."""
    free = ledger.free_cap
    parent = ledger.upstream.window if ledger.upstream is not None else None
    eligible = [d for d in demands if parent is None or check_window_nesting(d.window, parent)]
    pairs = [(d.cap_min, d.cap_max) for d in eligible]
    nums = [d.buyer for d in eligible]
    if strategy == policies.MIN_FILL:
        grants = policies.allocate_min_fill(free, pairs, nums)
    elif strategy == policies.BENEFIT_RANK:
        grants = policies.allocate_benefit_rank(free, pairs, [d.window for d in eligible], margin, nums)
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    out: Dict[int, Optional[int]] = {d.buyer: None for d in demands}
    for d, g in zip(eligible, grants):
        out[d.buyer] = g if g else None
    return out


def more_interesting(price: int, delay: int, current: Contract) -> bool:
    return (price, delay) < (current.cost, current.delay)


def apply_choice(
    ledger: CapacityLedger,
    contract: Contract,
    model: str,
    now: int,
) -> Tuple[bool, Optional[Contract]]:
    """Customer's answer to a positive selection.

    Returns ``(confirm, released)`` where ``released`` is the contract given
    up in favour of the new one, if any.
    """
    current = ledger.upstream
    if current is None:
        return True, None
    if model == "blocked":
        raise AssertionError(f"node {ledger.node} demanded again under the blocked model")
    if model not in ("open", "penalty"):
        raise ValueError(f"unknown choice model {model!r}")
    if ledger.sold or now >= current.window.start:
        return False, None
    if not more_interesting(contract.cost, contract.delay, current):
        return False, None
    return True, current


class _Cascade:
    def __init__(self, ctx: StageContext):
        self.ctx = ctx
        g = ctx.graph
        self.g = g
        self.u = ctx.destination
        n = len(g.nodes)
        self.event_cap = ctx.event_cap if ctx.event_cap is not None else 10 * n * n
        self.ledgers: Dict[int, CapacityLedger] = {v: CapacityLedger(v, self.u) for v in g.ids}
        self.queue: List[Tuple[tuple, int, Message]] = []
        self.seq = 0
        self.log: List[Message] = []
        self.offers_in: Dict[int, Dict[int, RouteOffer]] = {v: {} for v in g.ids}
        self.tried: Dict[int, Set[Tuple[int, int]]] = {v: set() for v in g.ids}
        self.pending: Dict[int, int] = {}
        self.pending_query: Dict[int, Tuple[DemandQuery, RouteOffer]] = {}
        self.demands_in: Dict[int, List[DemandQuery]] = {}
        self.records: Dict[int, DemandRecord] = {}
        self.offered: Set[int] = set()
        self.reoffered: Set[Tuple[int, int]] = set()
        self.amended: Set[int] = set()
        self.demand_counts: Dict[int, int] = {v: 0 for v in g.ids}
        self.offer_serial = 0
        self.to_decide: Set[int] = set()
        self.processed = 0
        self.now = 0

    # -- plumbing ---------------------------------------------------------
    def send(self, msg: Message) -> None:
        heapq.heappush(self.queue, (msg.sort_key(), self.seq, msg))
        self.seq += 1

    def budget(self, v: int) -> int:
        return self.g.node(v).cap - self.ctx.budget_used.get(v, 0)

    def eligible_buyers(self, v: int) -> List[int]:
        ledger = self.ledgers[v]
        return [w for w in self.g.neighbors(v)
                if w != ledger.provider and w != self.u and w not in ledger.sold]

    def emit_offers(self, v: int, t: int, only_new: bool = False) -> None:
        ledger = self.ledgers[v]
        for w in self.eligible_buyers(v):
            if only_new:
                if (v, w) in self.reoffered:
                    continue
                self.reoffered.add((v, w))
            self.offer_serial += 1
            offer = build_offer(ledger, self.ctx.margins[v], self.g.node(v).delay, self.offer_serial)
            if offer is None:
                return
            self.offered.add(v)
            self.send(Message(OFFER, v, w, t, self.u, offer=offer))

    def local_for(self, v: int, contract: Contract) -> int:
        node = self.g.node(v)
        keep = derive_local_capacity(self.ctx.own_demand.get(v, 0), contract.cost, node.utility)
        if contract.delay > node.max_delay:
            keep = 0
        return min(keep, contract.poss - self.ledgers[v].sold_total)

    # -- handlers ---------------------------------------------------------
    def on_offer(self, m: Message) -> None:
        self.offers_in[m.receiver][m.sender] = m.offer
        self.to_decide.add(m.receiver)

    def on_demand(self, m: Message) -> None:
        self.demands_in.setdefault(m.receiver, []).append(m.demand)

    def on_select_no(self, m: Message) -> None:
        v = m.receiver
        self.pending.pop(v, None)
        self.pending_query.pop(v, None)
        self.to_decide.add(v)

    def on_select_ok(self, m: Message) -> None:
        v, seller, contract = m.receiver, m.sender, m.contract
        query, offer = self.pending_query.pop(v)
        self.pending.pop(v, None)
        ledger = self.ledgers[v]
        confirm, released = apply_choice(ledger, contract, self.ctx.choice_model, m.time)
        if not confirm:
            self.send(Message(CONFIRM_NO, v, seller, m.time + 1, self.u))
            self.to_decide.add(v)
            return
        if released is not None:
            old = self.ledgers[released.provider]
            del old.sold[v]
            if self.ctx.choice_model == "penalty":
                fee = self.ctx.penalty_rate * released.poss * released.window.blocks
                ledger.penalty_paid += fee
                old.penalty_received += fee
            self.amended.discard(v)
            self.emit_offers(released.provider, m.time + 1, only_new=True)
        ledger.upstream = contract
        ledger.local_cap = self.local_for(v, contract)
        self.records[v] = DemandRecord(
            seller, query.cap_min, query.cap_max, contract.cost,
            query.cap_max == offer.free_cap,
        )
        self.send(Message(CONFIRM_OK, v, seller, m.time + 1, self.u,
                          release=released.provider if released is not None else None))
        self.emit_offers(v, m.time + 1)
        self.to_decide.add(v)

    def on_confirm_no(self, m: Message) -> None:
        self.ledgers[m.receiver].sold.pop(m.sender, None)
        self.emit_offers(m.receiver, m.time + 1, only_new=True)

    # -- per-step batches ---------------------------------------------------
    def decide(self, v: int, t: int) -> None:
        if v == self.u or v in self.pending:
            return
        if self.ctx.choice_model == "blocked" and self.demand_counts[v]:
            return  # one demand per stage, win or lose
        ledger = self.ledgers[v]
        current = ledger.upstream
        budget = self.budget(v)
        cands = [o for s, o in self.offers_in[v].items()
                 if o.free_cap > 0 and (s, o.serial) not in self.tried[v]]
        if current is not None:
            # only a node without customers may walk away from its route
            if self.ctx.choice_model == "blocked" or ledger.sold or t >= current.window.start:
                return
            cands = [o for o in cands
                     if o.seller != current.provider and more_interesting(o.price, o.delay, current)]
            budget += current.poss
        if not cands:
            return
        picked = build_demand(v, cands, lambda o: self.ctx.cap_min_rule(v, o.price), budget)
        for o in cands:
            # offers passed over as unusable are not retried until re-offered
            if picked is None or o.preference() < picked[0].preference():
                self.tried[v].add((o.seller, o.serial))
        if picked is None:
            return
        offer, query = picked
        self.tried[v].add((offer.seller, offer.serial))
        self.pending[v] = offer.seller
        self.pending_query[v] = (query, offer)
        self.demand_counts[v] += 1
        self.send(Message(DEMAND, v, offer.seller, t + 1, self.u, demand=query))

    def select(self, s: int, t: int) -> None:
        demands = self.demands_in.pop(s)
        ledger = self.ledgers[s]
        grants = select_customers(s, demands, ledger, self.ctx.selection_strategy, self.ctx.margins[s])
        up = ledger.upstream
        for d in sorted(demands, key=lambda q: q.buyer):
            g = grants[d.buyer]
            if g is None or up is None:
                self.send(Message(SELECT_NO, s, d.buyer, t + 1, self.u))
                continue
            contract = Contract(
                customer=d.buyer, provider=s, destination=self.u, poss=g,
                delay=up.delay + self.g.node(s).delay,
                cost=up.cost + self.ctx.margins[s],
                window=d.window,
            )
            ledger.sold[d.buyer] = contract
            self.send(Message(SELECT_OK, s, d.buyer, t + 1, self.u, contract=contract))
        ledger.check()

    def depth(self, v: int) -> int:
        hops, seen = 0, set()
        while v != self.u:
            if v in seen:
                raise AssertionError(f"provider cycle through node {v}")
            seen.add(v)
            v = self.ledgers[v].provider
            hops += 1
        return hops

    def give_back(self, t: int) -> bool:
        """Return unused stock upstream; True if some provider should re-offer."""
        holders = [v for v, l in self.ledgers.items()
                   if v != self.u and l.upstream is not None and v not in self.amended]
        holders.sort(key=lambda v: (-self.depth(v), v))
        refill = set()
        for v in holders:
            ledger = self.ledgers[v]
            c = ledger.upstream
            rec = self.records[v]
            target = max(rec.cap_min, ledger.local_cap + ledger.sold_total)
            if c.poss <= target:
                continue
            new, fee, returned = amend_contract(c, target, t, (rec.cap_min, rec.cap_max), self.ctx.penalty_rate)
            provider = self.ledgers[c.provider]
            provider.sold[v] = new
            ledger.upstream = new
            ledger.penalty_paid += fee
            provider.penalty_received += fee
            self.amended.add(v)
            refill.add(c.provider)
            self.log.append(Message(AMEND, v, c.provider, t, self.u, contract=new))
            logger.debug("t=%d node %d returns %d to %d", t, v, returned, c.provider)
        for s in sorted(refill):
            self.emit_offers(s, t + 1, only_new=True)
        return bool(self.queue)

    def run(self) -> CascadeOutcome:
        ctx = self.ctx
        u = self.u
        stock = max(0, self.budget(u))
        self.ledgers[u].upstream = self_contract(u, stock, ctx.window)
        self.emit_offers(u, 0)
        t = 0
        while True:
            while self.queue:
                t = self.queue[0][0][0]
                self.now = t
                batch = []
                while self.queue and self.queue[0][0][0] == t:
                    batch.append(heapq.heappop(self.queue)[2])
                for m in batch:
                    self.processed += 1
                    if self.processed > self.event_cap:
                        raise CascadeAbort(
                            f"destination {u}: more than {self.event_cap} events at t={t}"
                        )
                    self.log.append(m)
                    handler = {
                        OFFER: self.on_offer, DEMAND: self.on_demand,
                        SELECT_OK: self.on_select_ok, SELECT_NO: self.on_select_no,
                        CONFIRM_OK: lambda _m: None, CONFIRM_NO: self.on_confirm_no,
                    }[m.kind]
                    handler(m)
                for v in sorted(self.to_decide):
                    self.decide(v, t)
                self.to_decide.clear()
                for s in sorted(self.demands_in):
                    self.select(s, t)
            if not self.give_back(t):
                break
        for l in self.ledgers.values():
            l.check()
        return CascadeOutcome(
            destination=u,
            ledgers=self.ledgers,
            demands=self.records,
            offered=self.offered,
            log=self.log,
            demand_counts=self.demand_counts,
            end_time=t,
        )


def run_cascade(ctx: StageContext) -> CascadeOutcome:
    return _Cascade(ctx).run()

"""Bilateral route contracts and the per-node capacity ledger.

A node that buys a route to some destination holds exactly one upstream
contract for it.  Out of that capacity it keeps ``local_cap`` for its own
traffic, resells part of it to customers, and whatever is left is its free
(offerable) stock.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple


class ContractError(ValueError):
    """Raised when an amendment or ledger operation breaks a capacity rule."""


@dataclass(frozen=True)
class AvailabilityWindow:
    start: int
    blocks: int

    def __post_init__(self):
        if self.blocks < 0:
            raise ContractError(f"negative block count: {self.blocks}")

    @property
    def end(self) -> int:
        return self.start + self.blocks


@dataclass(frozen=True)
class Contract:
    customer: int
    provider: int
    destination: int
    poss: int
    delay: int
    cost: int
    window: AvailabilityWindow

    def __post_init__(self):
        if self.poss < 0 or self.cost < 0 or self.delay < 0:
            raise ContractError(f"negative contract term in {self}")

    @property
    def is_self_rooted(self) -> bool:
        return self.customer == self.provider == self.destination


def self_contract(destination: int, stock: int, window: AvailabilityWindow) -> Contract:
    """The destination's own stock, written as a contract with itself."""
    return Contract(destination, destination, destination, stock, 0, 0, window)


@dataclass
class CapacityLedger:
    """Accounting of one node's capacity on the route to one destination.

    ``free_cap`` is derived, so ``local_cap + sum(sold) + free_cap == poss``
    holds by construction; :meth:`check` guards against overselling.
    """

    node: int
    destination: int
    upstream: Optional[Contract] = None
    local_cap: int = 0
    sold: Dict[int, Contract] = field(default_factory=dict)
    penalty_paid: int = 0
    penalty_received: int = 0

    @property
    def poss(self) -> int:
        return self.upstream.poss if self.upstream is not None else 0

    @property
    def sold_total(self) -> int:
        return sum(c.poss for c in self.sold.values())

    @property
    def free_cap(self) -> int:
        return free_capacity(self)

    @property
    def provider(self) -> Optional[int]:
        return self.upstream.provider if self.upstream is not None else None

    def check(self) -> None:
        if self.local_cap < 0 or self.free_cap < 0:
            raise ContractError(
                f"node {self.node} dest {self.destination}: poss={self.poss} "
                f"local={self.local_cap} sold={self.sold_total}"
            )
        if self.upstream is not None:
            for c in self.sold.values():
                if not check_window_nesting(c.window, self.upstream.window):
                    raise ContractError(f"window of {c} does not nest in {self.upstream}")

    def snapshot(self) -> "CapacityLedger":
        return CapacityLedger(
            self.node, self.destination, self.upstream, self.local_cap,
            dict(self.sold), self.penalty_paid, self.penalty_received,
        )


def derive_local_capacity(own_demand: int, cost: int, utility: int) -> int:
    """Capacity kept for own traffic: all of it if the route is cheaper than its utility."""
    return own_demand if cost < utility else 0


def free_capacity(ledger: CapacityLedger) -> int:
    return ledger.poss - ledger.local_cap - ledger.sold_total


def check_window_nesting(child: AvailabilityWindow, parent: AvailabilityWindow) -> bool:
    return (
        child.blocks <= parent.blocks
        and child.start >= parent.start
        and child.blocks + child.start <= parent.blocks + parent.start
    )


def amend_contract(
    contract: Contract,
    new_poss: int,
    now: int,
    bounds: Tuple[int, int],
    penalty_rate: int,
    provider_free: Optional[int] = None,
) -> Tuple[Contract, int, int]:
    """Change the capacity of a confirmed contract.

    Returns ``(amended, penalty, returned)``.  Decreasing before the window
    opens is free; decreasing once it has started costs
    ``penalty_rate * returned * blocks``.  An increase must fit in
    ``provider_free`` when that is given.
    """
    lo, hi = bounds
    if not lo <= new_poss <= hi:
        raise ContractError(f"amendment to {new_poss} outside interval [{lo}, {hi}]")
    delta = new_poss - contract.poss
    if delta > 0 and provider_free is not None and delta > provider_free:
        raise ContractError(
            f"increase of {delta} exceeds provider free capacity {provider_free}"
        )
    returned = max(0, -delta)
    penalty = 0
    if returned and now >= contract.window.start:
        penalty = penalty_rate * returned * contract.window.blocks
    return replace(contract, poss=new_poss), penalty, returned

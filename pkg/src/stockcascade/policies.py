"""Per-node decision rules: margins, demand intervals, customer selection.

Everything here is a pure function of the previous stage's outcome, so a
replayed history always yields the same strategies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .contracts import AvailabilityWindow

FIXED = "fixed"
ADAPTIVE = "adaptive"
MIN_FILL = "min_fill"
BENEFIT_RANK = "benefit_rank"


@dataclass(frozen=True)
class StageOutcome:
    bought: int = 0
    sold: int = 0
    benefit: int = 0
    asked_provider_max: bool = False


@dataclass(frozen=True)
class StrategyState:
    margin: int = 1
    cap_min: int = 0
    cap_max: int = 0
    outcome: StageOutcome = field(default_factory=StageOutcome)

    def __post_init__(self):
        if self.margin < 1:
            raise ValueError(f"margin must be >= 1, got {self.margin}")
        if not 0 <= self.cap_min <= self.cap_max:
            raise ValueError(f"bad demand interval [{self.cap_min}, {self.cap_max}]")


def update_margin(prev: Optional[StrategyState], mode: str, initial: int = 1) -> int:
    """Margin for the coming stage.

    ``prev`` is None at the first stage.  In fixed mode the margin never moves
    from ``initial``.
    """
    if mode == FIXED:
        return prev.margin if prev is not None else initial
    if mode != ADAPTIVE:
        raise ValueError(f"unknown margin mode {mode!r}")
    if prev is None:
        return 1
    o = prev.outcome
    if o.sold > 0 and o.benefit > 0:
        return prev.margin + 1
    if o.sold == 0 and prev.margin > 1:
        return prev.margin - 1
    return prev.margin


def is_cap_min_reset(prev: Optional[StrategyState]) -> bool:
    # failed to sell while already asking the most the provider offered
    return prev is not None and prev.outcome.sold == 0 and prev.outcome.asked_provider_max


def fix_cap_min(
    prev: Optional[StrategyState],
    own_demand: int,
    cost: int,
    utility: int,
    is_first_stage: bool,
) -> int:
    if is_first_stage or prev is None:
        return own_demand if cost < utility else 0
    o = prev.outcome
    if o.sold > 0 and o.benefit > 0:
        return prev.cap_min
    if o.sold == 0:
        if not o.asked_provider_max:
            return prev.cap_min + 1
        return own_demand if utility > cost else 0
    return prev.cap_min


def fix_cap_max(node_cap: int, provider_free: int) -> int:
    return max(0, min(node_cap, provider_free))


def customer_benefit(window: AvailabilityWindow, poss: int, margin: int) -> int:
    return window.blocks * poss * margin


def route_preference(price: int, delay: int, free_cap: int, seller: int) -> Tuple[int, int, int, int]:
    """Sort key for competing offers: cheapest, then fastest, then largest, then lowest id."""
    return (price, delay, -free_cap, seller)


Demand = Tuple[int, int]  # (cap_min, cap_max)


def allocate_min_fill(
    free: int, demands: Sequence[Demand], nums: Optional[Sequence[int]] = None
) -> List[Optional[int]]:
    """Serve minima in ascending order, then share out what is left.

    Returns grants aligned with ``demands``; ``None`` marks a rejected demand.
    Leftover capacity is split in equal integer shares, each capped by the
    customer's ``cap_max - cap_min``, and any remainder goes out one unit at a
    time in the same order.
    """
    if nums is None:
        nums = range(len(demands))
    order = sorted(range(len(demands)), key=lambda i: (demands[i][0], nums[i]))
    grants: List[Optional[int]] = [None] * len(demands)
    remaining = free
    served = []
    for i in order:
        lo, _ = demands[i]
        if lo <= remaining:
            grants[i] = lo
            remaining -= lo
            served.append(i)
    if not served or remaining <= 0:
        return grants

    def room(i):
        return demands[i][1] - grants[i]

    share = remaining // len(served)
    if share:
        for i in served:
            add = min(share, room(i))
            grants[i] += add
            remaining -= add
    while remaining > 0:
        progressed = False
        for i in served:
            if remaining == 0:
                break
            if room(i) > 0:
                grants[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return grants


def rank_by_benefit(
    free: int,
    demands: Sequence[Demand],
    windows: Sequence[AvailabilityWindow],
    margin: int,
    nums: Sequence[int],
) -> List[int]:
    """Indices of ``demands`` ordered by the benefit each would bring, best first."""

    def key(i):
        best_poss = min(demands[i][1], free)
        return (-customer_benefit(windows[i], best_poss, margin), nums[i])

    return sorted(range(len(demands)), key=key)


def allocate_benefit_rank(
    free: int,
    demands: Sequence[Demand],
    windows: Sequence[AvailabilityWindow],
    margin: int,
    nums: Sequence[int],
) -> List[Optional[int]]:
    grants: List[Optional[int]] = [None] * len(demands)
    remaining = free
    for i in rank_by_benefit(free, demands, windows, margin, nums):
        lo, hi = demands[i]
        give = min(hi, remaining)
        if give >= lo:
            grants[i] = give
            remaining -= give
    return grants

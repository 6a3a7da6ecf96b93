import pytest
from hypothesis import given, strategies as st

from stockcascade.contracts import (AvailabilityWindow, CapacityLedger, Contract, ContractError,
                                    amend_contract, check_window_nesting, derive_local_capacity,
                                    free_capacity, self_contract)

W = AvailabilityWindow


def _contract(poss, customer=1, provider=0, start=10, blocks=4, cost=2, delay=1):
    return Contract(customer, provider, 0, poss, delay, cost, W(start, blocks))


@pytest.mark.parametrize("m, cost, utility, expected", [(3, 2, 5, 3), (3, 5, 5, 0), (0, 1, 5, 0)])
def test_local_capacity(m, cost, utility, expected):
    assert derive_local_capacity(m, cost, utility) == expected


def _ledger(poss, local, sold):
    led = CapacityLedger(1, 0, _contract(poss), local)
    for i, s in enumerate(sold, start=2):
        led.sold[i] = _contract(s, customer=i, provider=1)
    return led


@pytest.mark.parametrize("poss, local, sold, expected", [
    (10, 3, [7], 0), (10, 3, [], 7), (0, 0, [], 0), (10, 3, [2, 4], 1),
])
def test_free_capacity(poss, local, sold, expected):
    led = _ledger(poss, local, sold)
    assert free_capacity(led) == expected
    assert led.local_cap + led.sold_total + led.free_cap == led.poss


def test_empty_ledger():
    led = CapacityLedger(3, 0)
    assert led.poss == 0 and led.free_cap == 0 and led.provider is None


def test_oversold_ledger_fails_check():
    with pytest.raises(ContractError):
        _ledger(5, 3, [3]).check()


@pytest.mark.parametrize("child, parent, ok", [
    (W(2, 3), W(0, 5), True),
    (W(0, 5), W(0, 5), True),
    (W(0, 6), W(0, 5), False),
    (W(3, 3), W(0, 5), False),   # ends after parent
    (W(0, 2), W(1, 5), False),   # starts before parent
])
def test_window_nesting(child, parent, ok):
    assert check_window_nesting(child, parent) is ok


def test_window_end_and_validation():
    assert W(3, 4).end == 7
    with pytest.raises(ContractError):
        W(0, -1)


def test_self_contract_is_free_and_instant():
    c = self_contract(6, 50, W(1000, 1))
    assert c.is_self_rooted and c.poss == 50 and c.cost == 0 and c.delay == 0


def test_amend_down_before_start_is_free():
    new, penalty, returned = amend_contract(_contract(5), 3, now=2, bounds=(0, 9), penalty_rate=1)
    assert (new.poss, penalty, returned) == (3, 0, 2)


def test_amend_down_inside_window_costs_penalty():
    new, penalty, returned = amend_contract(_contract(5, start=10, blocks=4), 3, now=11,
                                            bounds=(0, 9), penalty_rate=1)
    assert (new.poss, penalty, returned) == (3, 8, 2)


def test_amend_identity():
    c = _contract(5)
    new, penalty, returned = amend_contract(c, 5, now=50, bounds=(0, 9), penalty_rate=3)
    assert new == c and penalty == 0 and returned == 0


def test_amend_rejections():
    c = _contract(5)
    with pytest.raises(ContractError):
        amend_contract(c, 2, now=0, bounds=(3, 9), penalty_rate=1)
    with pytest.raises(ContractError):
        amend_contract(c, 8, now=0, bounds=(0, 9), penalty_rate=1, provider_free=2)
    new, penalty, returned = amend_contract(c, 7, now=99, bounds=(0, 9), penalty_rate=1, provider_free=2)
    assert (new.poss, penalty, returned) == (7, 0, 0)


@given(old=st.integers(0, 50), new=st.integers(0, 50), now=st.integers(0, 30),
       start=st.integers(0, 30), blocks=st.integers(0, 6), rate=st.integers(0, 5))
def test_amend_accounting(old, new, now, start, blocks, rate):
    c = _contract(old, start=start, blocks=blocks)
    amended, penalty, returned = amend_contract(c, new, now, (0, 50), rate)
    assert amended.poss == new
    assert returned == max(0, old - new)
    assert penalty == (rate * returned * blocks if now >= start else 0)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import eps_oracle, rdp_oracle
from polifed.accountant import (
    DEFAULT_ORDERS,
    BudgetExceeded,
    PrivacyLedger,
    UnknownGroup,
    enforce_dp_budget,
    epsilon_from_rdp,
    rdp_subsampled_gaussian,
)

# Noise multipliers found by root-finding on the accountant (scripts/calibrate_noise.py)
# and cross-checked against the quadrature oracle below.
Q_POPULATION = 5000 / 1e8
Z_GR1 = 1.0955658742853722  # epsilon 0.82 after 1000 rounds
Z_GR2 = 0.7702803678514323  # epsilon 1.72 after 1000 rounds
Z_YES_NO = 0.9993034877529269  # 1000 rounds within budget 1, 2000 rounds over it
GRID_ORDERS = (1.5, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0)


def ledger_with(group, q, z, rounds, **kw):
    ledger = PrivacyLedger(**kw)
    for t in range(rounds):
        ledger.charge_round(group, q, z, t)
    return ledger


@pytest.mark.parametrize("z", [0.5, 1.0, 3.7])
def test_full_sampling_closed_form(z):
    rdp = rdp_subsampled_gaussian(1.0, z, 1)
    expected = np.array([a / (2 * z * z) for a in DEFAULT_ORDERS])
    assert np.array_equal(rdp, expected)


def test_steps_compose_additively():
    one = rdp_subsampled_gaussian(0.01, 1.3, 1)
    assert np.array_equal(rdp_subsampled_gaussian(0.01, 1.3, 2), 2 * one)


@pytest.mark.parametrize("q", [1e-4, 1e-3, 1e-2])
@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("steps", [1, 100, 1000])
def test_oracle_grid(q, z, steps):
    ours = rdp_subsampled_gaussian(q, z, steps, GRID_ORDERS)
    ref = rdp_oracle(q, z, steps, GRID_ORDERS)
    assert np.all(np.abs(ours - ref) <= 0.01 * np.abs(ref))
    e_ours = epsilon_from_rdp(ours, GRID_ORDERS, 1e-8)[0]
    e_ref = eps_oracle(ref, GRID_ORDERS, 1e-8)
    assert abs(e_ours - e_ref) <= 0.01 * e_ref


def test_fractional_orders_against_oracle():
    orders = (1.25, 1.75, 2.25, 2.75, 3.5, 4.5)
    ours = rdp_subsampled_gaussian(0.02, 0.8, 10, orders)
    ref = rdp_oracle(0.02, 0.8, 10, orders)
    np.testing.assert_allclose(ours, ref, rtol=1e-4)


def test_invalid_ranges():
    for q, z, steps in [(0, 1, 1), (1.5, 1, 1), (0.1, 0, 1), (0.1, 1, 0)]:
        with pytest.raises(ValueError):
            rdp_subsampled_gaussian(q, z, steps)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.1, 1, 1, orders=(1.0, 2.0))
    with pytest.raises(ValueError):
        epsilon_from_rdp([], [], 1e-8)
    with pytest.raises(ValueError):
        epsilon_from_rdp([0.0], [2.0], 1.0)


def test_conversion_floor():
    orders = np.array(DEFAULT_ORDERS)
    eps, order = epsilon_from_rdp(np.zeros(len(orders)), orders, 1e-8)
    assert eps == pytest.approx(math.log(1e8) / (orders.max() - 1))
    assert order == orders.max()


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.3, 5.0), st.integers(1, 500))
def test_doubling_rdp_never_lowers_epsilon(q, z, steps):
    rdp = rdp_subsampled_gaussian(q, z, steps)
    assert epsilon_from_rdp(2 * rdp, DEFAULT_ORDERS, 1e-8)[0] >= epsilon_from_rdp(rdp, DEFAULT_ORDERS, 1e-8)[0]


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(0.5, 4.0), st.integers(1, 300))
def test_monotone_in_rounds_and_noise(q, z, steps):
    def eps(zz, n):
        return ledger_with("g", q, zz, n).epsilon("g")

    assert eps(z, steps + 1) > eps(z, steps)
    assert eps(z * 1.1, steps) < eps(z, steps)


def test_rdp_increases_with_q():
    assert np.all(rdp_subsampled_gaussian(0.02, 1.0, 1) > rdp_subsampled_gaussian(0.01, 1.0, 1))


def test_calibrated_multipliers_hit_targets():
    assert ledger_with("Gr1", Q_POPULATION, Z_GR1, 1000).epsilon("Gr1") == pytest.approx(0.82, abs=1e-9)
    assert ledger_with("Gr2", Q_POPULATION, Z_GR2, 1000).epsilon("Gr2") == pytest.approx(1.72, abs=1e-9)


def test_calibration_agrees_with_oracle():
    orders = tuple(float(a) for a in range(2, 41))
    ours = rdp_subsampled_gaussian(Q_POPULATION, Z_GR1, 1000, orders)
    ref = rdp_oracle(Q_POPULATION, Z_GR1, 1000, orders)
    e_ref = eps_oracle(ref, orders, 1e-8)
    assert epsilon_from_rdp(ours, orders, 1e-8)[0] == pytest.approx(e_ref, rel=1e-3)
    assert e_ref == pytest.approx(0.82, rel=0.01)


def test_yes_no_flip():
    short = ledger_with("Gr1", Q_POPULATION, Z_YES_NO, 1000)
    long = ledger_with("Gr1", Q_POPULATION, Z_YES_NO, 2000)
    assert enforce_dp_budget(short, "Gr1", 1.0)
    assert not enforce_dp_budget(long, "Gr1", 1.0)


def test_budget_examples():
    ledger = ledger_with("Gr2", Q_POPULATION, Z_GR2, 1000)
    check = enforce_dp_budget(ledger, "Gr2", 2.0)
    assert check.passed and check.spent == pytest.approx(1.72)
    assert not enforce_dp_budget(ledger, "Gr2", 1.0)
    with pytest.raises(UnknownGroup):
        enforce_dp_budget(ledger, "Gr9", 1.0)


def test_uncharged_group_reports_zero():
    ledger = ledger_with("Gr1", Q_POPULATION, Z_GR1, 1000)
    ledger.register("Gr2")
    assert ledger.spent("Gr2") == (0.0, None)
    assert {r["group"]: r["epsilon"] for r in ledger.report()}["Gr2"] == 0.0


def test_post_processing_invariance():
    ledger = ledger_with("A", 0.01, 1.2, 50)
    before = ledger.epsilon("A")
    for t in range(200):
        ledger.charge_round("B", 0.05, 0.9, 50 + t)
    assert ledger.epsilon("A") == before


def test_order_free_composition():
    a, b = PrivacyLedger(), PrivacyLedger()
    charges = [(0.01, 1.0)] * 5 + [(0.02, 2.0)] * 3 + [(0.01, 0.7)] * 4
    for q, z in charges:
        a.charge_round("g", q, z)
    for q, z in reversed(charges):
        b.charge_round("g", q, z)
    assert a.epsilon("g") == b.epsilon("g")


def test_cascade_consistency_at_population_scale():
    cascaded = PrivacyLedger()
    cascaded.register("Gr2")
    for t in range(1000):
        cascaded.charge_round("Gr1", Q_POPULATION, Z_GR1, t)
    for t in range(1000, 2000):
        cascaded.charge_round("Gr2", Q_POPULATION, Z_GR2, t)
    assert cascaded.epsilon("Gr1") == ledger_with("Gr1", Q_POPULATION, Z_GR1, 1000).epsilon("Gr1")
    assert cascaded.epsilon("Gr2") == ledger_with("Gr2", Q_POPULATION, Z_GR2, 1000).epsilon("Gr2")


def test_non_private_round_is_infinite():
    ledger = ledger_with("g", 0.1, 0.0, 3)
    assert ledger.epsilon("g") == math.inf
    assert ledger.report()[0]["epsilon"] is None


def test_jsonl_round_trip():
    ledger = ledger_with("Gr1", 0.01, 1.1, 20)
    for t in range(5):
        ledger.charge_round("Gr2", 0.02, 0.8, 20 + t)
    again = PrivacyLedger.from_jsonl(ledger.to_jsonl().splitlines())
    assert again.records == ledger.records
    assert again.epsilon("Gr1") == ledger.epsilon("Gr1")
    assert again.epsilon("Gr2") == ledger.epsilon("Gr2")


def test_budget_exceeded_message():
    err = BudgetExceeded("Gr1", 1.2, 1.0)
    assert err.group == "Gr1" and "1.2000" in str(err)

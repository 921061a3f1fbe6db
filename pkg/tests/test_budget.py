import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitbudget.budget import (
    ACTION_BITS, BudgetState, LayerClamps, SKIP_INDEX, UnitDecision,
    avg_bits, effective_bits, effective_fifty, feasible_actions, protected_count,
)
from bitbudget.store import ModelStore, partition_units

from conftest import random_store


def one_unit(rows=4, cols=8, name="layers.0.attn.q", seed=0):
    store = random_store(seed, {name: (rows, cols)})
    return partition_units(store, cols)[0]


def test_effective_bits_skip():
    assert effective_bits(16.0, 100, 0) == 1600.0
    assert effective_bits(16.0, 100, 7) == 1600.0  # protection irrelevant for skip


def test_effective_bits_worked_case():
    assert effective_bits(2.0, 256, 8) == 560.0
    assert effective_bits(2.0, 256, 8) / 256 == pytest.approx(2.1875)


def test_effective_bits_ternary_exact():
    assert effective_bits(1.58, 100, 0) == 158.0


def test_effective_bits_bad_protection():
    with pytest.raises(ValueError):
        effective_bits(2.0, 10, 11)


def test_avg_bits_uniform():
    plan = [UnitDecision("t", i, 2.0, 2.0, 128, 0) for i in range(5)]
    assert avg_bits(plan) == 2.0


def test_avg_bits_symmetry():
    plan = [UnitDecision("t", 0, 1.0, 1.0, 64, 0), UnitDecision("t", 1, 3.0, 3.0, 64, 0)]
    assert avg_bits(plan) == 2.0


def test_avg_bits_empty_plan():
    with pytest.raises(ValueError):
        avg_bits([])


@given(st.lists(
    st.tuples(st.sampled_from(ACTION_BITS), st.integers(1, 500), st.floats(0, 1)),
    min_size=1, max_size=40,
))
@settings(max_examples=60, deadline=None)
def test_avg_bits_matches_per_weight_oracle(spec):
    plan = []
    total = 0.0
    n_total = 0
    for bits, n, rate in spec:
        n_p = 0 if bits == 16.0 else protected_count(n, rate)
        plan.append(UnitDecision("t", len(plan), bits, bits, n, n_p))
        # per-weight enumeration oracle
        if bits == 16.0:
            total += 16.0 * n
        else:
            total += 8.0 * n_p + bits * (n - n_p)
        n_total += n
    assert avg_bits(plan) == pytest.approx(total / n_total, rel=1e-12)


def test_protected_count_rounding():
    assert protected_count(256, 0.03) == 8  # round(7.68)
    assert protected_count(100, 0.005) == 1  # half away from zero
    assert protected_count(10, 0.0) == 0
    assert protected_count(10, 1.0) == 10


def test_mask_slack_budget_all_open():
    unit = one_unit()
    state = BudgetState(n_total=unit.n * 10, b_target=16.0)
    mask = feasible_actions(state, unit, 1.0, 0.0)
    assert mask.all()


def test_mask_exhausted_budget_force_rule():
    unit = one_unit()
    state = BudgetState(n_total=unit.n * 2, b_target=2.0)
    state.bits_used_fifty = state.target_fifty  # budget fully spent
    state.n_done = unit.n
    mask = feasible_actions(state, unit, 1.0, 0.0)
    assert mask[-1] and mask.sum() == 1  # only the 1-bit action survives


def test_mask_layer_clamp_blocks_low_bits():
    unit = one_unit(name="layers.0.attn.q")
    state = BudgetState(n_total=unit.n * 100, b_target=16.0)
    mask = feasible_actions(state, unit, 2.0, 0.0)
    bits = [b for b, m in zip(ACTION_BITS, mask) if m]
    assert 1.0 not in bits and 1.58 not in bits
    assert 16.0 in bits  # skip exempt from the clamp


def test_mask_monotone_in_bits_used():
    unit = one_unit()
    prev = None
    for used in range(0, 2000, 97):
        state = BudgetState(n_total=unit.n * 4, b_target=3.0)
        state.bits_used_fifty = used * 50
        state.n_done = unit.n * 2
        mask = feasible_actions(state, unit, 1.0, 0.03)
        if prev is not None:
            assert not (mask & ~prev).any()  # can only shrink
        prev = mask


def test_layer_clamps_categories():
    clamps = LayerClamps()
    early_attn = one_unit(name="layers.0.attn.q")
    late_mlp = one_unit(name="layers.7.mlp.up")
    late_other = one_unit(name="layers.7.norm")
    unparsable = one_unit(name="embed")  # layer 0, no flags: early clamp applies
    assert clamps.min_bits(early_attn) == 2.0
    assert clamps.min_bits(late_mlp) == 1.58
    assert clamps.min_bits(late_other) == 1.0
    assert clamps.min_bits(unparsable) == 2.0


def test_budget_state_accounting():
    state = BudgetState(n_total=1000, b_target=2.0)
    assert state.fp32_reference == 32000.0
    d = UnitDecision("t", 0, 2.0, 2.0, 100, 5)
    state.record(d)
    assert state.bits_used_fifty == effective_fifty(2.0, 100, 5)
    assert state.n_done == 100 and state.n_remaining == 900

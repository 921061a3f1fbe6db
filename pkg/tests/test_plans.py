import numpy as np
import pytest

from bitbudget.budget import UnitDecision
from bitbudget.plans import (
    PlanEntry, PlanError, QuantPlan, attach_units, check_plan_matches,
    ensure_recons, apply_plan, load_plan, plan_from_json, plan_to_json,
    render_report, save_plan,
)
from bitbudget.store import load_model, partition_units, save_model, store_hash

from conftest import random_store


def synthetic_plan(counts: dict[float, int], n=64) -> QuantPlan:
    entries = []
    i = 0
    for bits, count in counts.items():
        for _ in range(count):
            entries.append(PlanEntry(UnitDecision("layers.0.attn.q", i, bits, bits, n, 0, 0.1)))
            i += 1
    return QuantPlan(entries, model_hash="abc", config_echo={"chunk_size": 8})


def test_roundtrip_byte_identical():
    plan = synthetic_plan({2.0: 3, 1.58: 2, 16.0: 1})
    text = plan_to_json(plan)
    again = plan_to_json(plan_from_json(text))
    assert text == again


def test_summary_consistency_checked():
    plan = synthetic_plan({2.0: 4})
    text = plan_to_json(plan)
    corrupted = text.replace('"avg_bits": 2.0', '"avg_bits": 3.0')
    with pytest.raises(PlanError):
        plan_from_json(corrupted)


def test_effective_bits_validated():
    plan = synthetic_plan({1.58: 1})
    text = plan_to_json(plan)
    corrupted = text.replace('"effective_fifty": 5056', '"effective_fifty": 5057')
    assert corrupted != text
    with pytest.raises(PlanError):
        plan_from_json(corrupted)


def test_histogram_and_skip_frac():
    plan = synthetic_plan({2.0: 3, 16.0: 1})
    h = plan.histogram()
    assert h["2"] == 3 and h["skip"] == 1
    assert plan.skip_frac == 0.25


def test_report_percentages_sum_to_100():
    plan = synthetic_plan({2.0: 7, 1.58: 5, 1.0: 11, 4.0: 2})
    rep = render_report(plan)
    assert abs(sum(rep["percent"].values()) - 100.0) < 0.01
    counts = rep["counts"]
    assert sum(counts.values()) == len(plan.entries)


def test_report_reference_distribution():
    # grouped view built to match the published allocation pattern
    plan = synthetic_plan({3.0: 865, 2.0: 1565, 1.58: 3654, 1.0: 3916})
    rep = render_report(plan)
    g = rep["percent_grouped"]
    assert g["Upper-3bit"] == pytest.approx(8.65, abs=0.011)
    assert g["2bit"] == pytest.approx(15.65, abs=0.011)
    assert g["1.58bit"] == pytest.approx(36.54, abs=0.011)
    assert g["1bit"] == pytest.approx(39.15, abs=0.011)


def test_all_two_bit_report():
    rep = render_report(synthetic_plan({2.0: 10}))
    assert rep["percent"]["2"] == 100.0
    assert rep["avg_bits"] == 2.0


def test_check_plan_matches(tmp_path):
    store = random_store(0, {"layers.0.attn.q": (4, 8)})
    plan = synthetic_plan({2.0: 1}, n=32)
    plan.model_hash = store_hash(store)
    check_plan_matches(plan, store)
    plan.model_hash = "deadbeef"
    with pytest.raises(PlanError):
        check_plan_matches(plan, store)


def test_attach_units_validates_coverage():
    store = random_store(1, {"layers.0.attn.q": (4, 16)})
    units = partition_units(store, 8)
    entries = [PlanEntry(UnitDecision(u.tensor_name, u.chunk_index, 2.0, 2.0, u.n, 0)) for u in units]
    plan = QuantPlan(entries)
    attach_units(plan, store, 8)
    assert all(e.unit is not None for e in plan.entries)
    with pytest.raises(PlanError, match="missing unit"):
        attach_units(QuantPlan(entries[:1]), store, 8)
    bad = QuantPlan(entries + [PlanEntry(UnitDecision("nope", 0, 2.0, 2.0, 4, 0))])
    with pytest.raises(PlanError, match="unknown unit"):
        attach_units(bad, store, 8)


def test_apply_skip_identity(tmp_path):
    store = random_store(2, {"layers.0.attn.q": (4, 8)})
    units = partition_units(store, 8)
    plan = QuantPlan([PlanEntry(UnitDecision(units[0].tensor_name, 0, 16.0, 16.0, units[0].n, 0), units[0], None)])
    out = apply_plan(plan, store)
    assert out.tensors["layers.0.attn.q"].tobytes() == store.tensors["layers.0.attn.q"].tobytes()


def test_apply_writes_recons():
    store = random_store(3, {"layers.0.attn.q": (4, 8)})
    units = partition_units(store, 8)
    recon = np.zeros((4, 8))
    plan = QuantPlan([PlanEntry(UnitDecision(units[0].tensor_name, 0, 2.0, 2.0, units[0].n, 0), units[0], recon)])
    out = apply_plan(plan, store)
    assert np.all(out.tensors["layers.0.attn.q"] == 0.0)
    assert not np.all(store.tensors["layers.0.attn.q"] == 0.0)  # original untouched


def test_save_load_file_roundtrip(tmp_path):
    plan = synthetic_plan({2.0: 2, 8.0: 1})
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_plan(plan, str(p1))
    save_plan(load_plan(str(p1)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()

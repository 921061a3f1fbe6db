"""Quantization plans: per-unit records, JSON serialization, reports, apply."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .budget import ACTION_BITS, UnitDecision, avg_bits
from .calibration import ActivationScales, saliency, select_protected, quantize_protected
from .quantizers import fit_unit
from .store import ModelStore, WeightUnit, partition_units, store_hash

SCHEMA_VERSION = 1

ACTION_LABELS = {16.0: "skip", 8.0: "8", 4.0: "4", 3.0: "3", 2.0: "2", 1.58: "1.58", 1.0: "1"}
_BITS_BY_LABEL = {v: k for k, v in ACTION_LABELS.items()}


class PlanError(Exception):
    pass


@dataclass
class PlanEntry:
    decision: UnitDecision
    unit: WeightUnit | None = None
    recon: np.ndarray | None = None


@dataclass
class QuantPlan:
    entries: list[PlanEntry]
    model_hash: str = ""
    config_echo: dict = field(default_factory=dict)

    @property
    def decisions(self) -> list[UnitDecision]:
        return [e.decision for e in self.entries]

    @property
    def skip_frac(self) -> float:
        if not self.entries:
            return 0.0
        return sum(1 for e in self.entries if e.decision.is_skip) / len(self.entries)

    @property
    def avg_bits(self) -> float:
        return avg_bits(self.decisions)

    def histogram(self) -> dict[str, int]:
        counts = {ACTION_LABELS[b]: 0 for b in ACTION_BITS}
        for e in self.entries:
            counts[ACTION_LABELS[e.decision.action_bits]] += 1
        return counts

    def summary(self) -> dict:
        return {
            "avg_bits": self.avg_bits,
            "skip_frac": self.skip_frac,
            "action_histogram": self.histogram(),
        }


def plan_to_json(plan: QuantPlan) -> str:
    records = []
    for e in plan.entries:
        d = e.decision
        records.append({
            "tensor": d.tensor_name,
            "chunk": d.chunk_index,
            "action": ACTION_LABELS[d.action_bits],
            "realized": ACTION_LABELS[d.realized_bits],
            "n": d.n,
            "n_p": d.n_p,
            "effective_fifty": d.effective_fifty,
            "rel_error": d.rel_error,
        })
    payload = {
        "schema_version": SCHEMA_VERSION,
        "model_hash": plan.model_hash,
        "config": plan.config_echo,
        "summary": plan.summary(),
        "units": records,
    }
    return json.dumps(payload, indent=2) + "\n"


def plan_from_json(text: str) -> QuantPlan:
    payload = json.loads(text)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise PlanError(f"unsupported plan schema {payload.get('schema_version')!r}")
    entries = []
    for rec in payload["units"]:
        d = UnitDecision(
            tensor_name=rec["tensor"],
            chunk_index=rec["chunk"],
            action_bits=_BITS_BY_LABEL[rec["action"]],
            realized_bits=_BITS_BY_LABEL[rec["realized"]],
            n=rec["n"],
            n_p=rec["n_p"],
            rel_error=rec["rel_error"],
        )
        if d.effective_fifty != rec["effective_fifty"]:
            raise PlanError(
                f"unit {d.tensor_name}:{d.chunk_index}: stored effective bits "
                f"{rec['effective_fifty']} disagree with recomputation {d.effective_fifty}"
            )
        entries.append(PlanEntry(decision=d))
    plan = QuantPlan(entries, payload["model_hash"], payload.get("config", {}))
    stored = payload.get("summary", {})
    fresh = plan.summary()
    if stored and abs(stored["avg_bits"] - fresh["avg_bits"]) > 1e-12:
        raise PlanError("plan summary does not match its records")
    return plan


def save_plan(plan: QuantPlan, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(plan_to_json(plan))


def load_plan(path: str) -> QuantPlan:
    with open(path) as fh:
        return plan_from_json(fh.read())


def check_plan_matches(plan: QuantPlan, store: ModelStore) -> None:
    h = store_hash(store)
    if plan.model_hash and plan.model_hash != h:
        raise PlanError(f"plan was built for store {plan.model_hash}, got {h}")


def attach_units(plan: QuantPlan, store: ModelStore, chunk_size: int,
                 names: list[str] | None = None) -> None:
    """Bind plan records to the store's units; raises on any mismatch."""
    units = partition_units(store, chunk_size, names)
    by_key = {(u.tensor_name, u.chunk_index): u for u in units}
    seen = set()
    for e in plan.entries:
        key = (e.decision.tensor_name, e.decision.chunk_index)
        if key not in by_key:
            raise PlanError(f"plan references unknown unit {key[0]}:{key[1]}")
        unit = by_key[key]
        if unit.n != e.decision.n:
            raise PlanError(f"unit {key[0]}:{key[1]} has {unit.n} weights, plan says {e.decision.n}")
        e.unit = unit
        seen.add(key)
    missing = set(by_key) - seen
    if missing:
        name, chunk = sorted(missing)[0]
        raise PlanError(f"plan is missing unit {name}:{chunk} (and possibly others)")


def ensure_recons(
    plan: QuantPlan,
    scales: ActivationScales,
    protect_rate: float,
    fallback_threshold: float,
    fit_steps: int = 10,
) -> None:
    """Recompute reconstructions for entries that lack them (skip stays None).

    Refitting is deterministic, so the realized bit-width must reproduce the
    recorded one; a disagreement means plan and store no longer match.
    """
    for e in plan.entries:
        if e.recon is not None or e.decision.is_skip:
            continue
        if e.unit is None:
            raise PlanError("ensure_recons needs units attached first")
        sal = saliency(e.unit, scales)
        prot = select_protected(e.unit, sal, protect_rate)
        if prot.n_p != e.decision.n_p:
            raise PlanError(
                f"unit {e.unit.uid}: protection count {prot.n_p} != recorded {e.decision.n_p}"
            )
        _, dequant = quantize_protected(e.unit, prot)
        result = fit_unit(
            e.unit.weights, e.decision.action_bits, prot.indices, dequant,
            fallback_threshold=fallback_threshold, steps=fit_steps,
        )
        if result.realized_kind.nominal_bits != e.decision.realized_bits:
            raise PlanError(
                f"unit {e.unit.uid}: refit realized {result.realized_kind.nominal_bits}-bit, "
                f"plan recorded {e.decision.realized_bits}-bit"
            )
        e.recon = result.reconstructed


def apply_plan(plan: QuantPlan, store: ModelStore) -> ModelStore:
    """New store with each unit's weights replaced by its reconstruction.

    Skip units are left untouched; entries must have units and recons bound.
    """
    out = store.copy()
    for e in plan.entries:
        if e.decision.is_skip:
            continue
        if e.unit is None or e.recon is None:
            raise PlanError(f"entry {e.decision.tensor_name}:{e.decision.chunk_index} not materialized")
        target = out.tensors[e.unit.tensor_name]
        target[:, e.unit.col_start:e.unit.col_end] = e.recon.astype(np.float32)
    return out


def render_report(plan: QuantPlan) -> dict:
    """Action histogram with percentages plus the grouped ultra-low-bit view."""
    hist = plan.histogram()
    total = max(len(plan.entries), 1)
    pct = {label: 100.0 * count / total for label, count in hist.items()}
    grouped = {
        "Upper-3bit": pct["skip"] + pct["8"] + pct["4"] + pct["3"],
        "2bit": pct["2"],
        "1.58bit": pct["1.58"],
        "1bit": pct["1"],
    }
    return {
        "avg_bits": plan.avg_bits,
        "skip_frac": plan.skip_frac,
        "counts": hist,
        "percent": pct,
        "percent_grouped": grouped,
    }

"""Deterministic saliency-ranked baseline allocator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .budget import bits_to_fifty, effective_fifty, round_half_away
from .calibration import ProtectionSet
from .store import WeightUnit


class InfeasibleTarget(Exception):
    pass


@dataclass
class HeuristicConfig:
    target_bits: float = 2.0
    demotion_ladder: list[float] = field(default_factory=lambda: [2.0, 1.58, 1.0])
    promotion_ladder: list[float] = field(default_factory=lambda: [2.0, 3.0, 4.0])

    def __post_init__(self) -> None:
        if any(a <= b for a, b in zip(self.demotion_ladder, self.demotion_ladder[1:])):
            raise ValueError("demotion ladder must strictly decrease")
        if any(a >= b for a, b in zip(self.promotion_ladder, self.promotion_ladder[1:])):
            raise ValueError("promotion ladder must strictly increase")


def unit_score(sal: np.ndarray) -> float:
    """Mean saliency (|w| times activation scale) over the unit's weights."""
    return float(sal.mean())


def heuristic_allocate(
    units: list[WeightUnit],
    scores: list[float],
    protections: list[ProtectionSet],
    cfg: HeuristicConfig,
) -> list[float]:
    """Assign bit-widths greedily from a uniform default.

    Every unit starts at the ladder root. While the projected average
    (protection included) exceeds the target, the lowest-scored unit still on
    the current rung is demoted; rungs are exhausted breadth-first. Afterwards
    the highest-scored promotable unit is promoted whenever the result still
    fits the target. Ties break by unit order.
    """
    n_units = len(units)
    if n_units == 0:
        raise ValueError("no units to allocate")
    if len(scores) != n_units or len(protections) != n_units:
        raise ValueError("scores/protections must align with units")
    n_total = sum(u.n for u in units)
    target_total = round_half_away(50.0 * cfg.target_bits) * n_total

    bits = [cfg.demotion_ladder[0]] * n_units
    n_p = [p.n_p for p in protections]
    cost = [effective_fifty(bits[i], units[i].n, n_p[i]) for i in range(n_units)]
    total = sum(cost)

    ascending = sorted(range(n_units), key=lambda i: (scores[i], i))
    for rung_from, rung_to in zip(cfg.demotion_ladder, cfg.demotion_ladder[1:]):
        if total <= target_total:
            break
        for i in ascending:
            if total <= target_total:
                break
            if bits[i] != rung_from:
                continue
            bits[i] = rung_to
            new_cost = effective_fifty(rung_to, units[i].n, n_p[i])
            total += new_cost - cost[i]
            cost[i] = new_cost
    if total > target_total:
        floor_bits = total / (50.0 * n_total)
        raise InfeasibleTarget(
            f"target {cfg.target_bits} below the all-{cfg.demotion_ladder[-1]}-bit-plus-"
            f"protection floor ({floor_bits:.4f} bits)"
        )

    descending = sorted(range(n_units), key=lambda i: (-scores[i], i))
    next_rung = {a: b for a, b in zip(cfg.promotion_ladder, cfg.promotion_ladder[1:])}
    while True:
        promoted = False
        for i in descending:
            rung_to = next_rung.get(bits[i])
            if rung_to is None:
                continue
            new_cost = effective_fifty(rung_to, units[i].n, n_p[i])
            if total + new_cost - cost[i] <= target_total:
                total += new_cost - cost[i]
                cost[i] = new_cost
                bits[i] = rung_to
                promoted = True
                break
        if not promoted:
            return bits

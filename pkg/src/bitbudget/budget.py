"""Effective-bit accounting, feasibility masking, and plan-level summaries.

All accounting is done in integer fiftieths of a bit so that 1.58-bit units
(79/50 bit) sum exactly; floats only appear at the API surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import WeightUnit

# Action order is fixed: index 0 is skip (kept at 16-bit), then descending bits.
ACTION_BITS: tuple[float, ...] = (16.0, 8.0, 4.0, 3.0, 2.0, 1.58, 1.0)
ACTION_FIFTY: tuple[int, ...] = (800, 400, 200, 150, 100, 79, 50)
SKIP_INDEX = 0
N_ACTIONS = len(ACTION_BITS)
_FIFTY_BY_BITS = {b: f for b, f in zip(ACTION_BITS, ACTION_FIFTY)}


def bits_to_fifty(bits: float) -> int:
    try:
        return _FIFTY_BY_BITS[bits]
    except KeyError:
        raise ValueError(f"unknown action bit-width {bits!r}") from None


def round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def protected_count(n: int, rate: float) -> int:
    return min(round_half_away(rate * n), n)


def effective_fifty(action_bits: float, n: int, n_p: int) -> int:
    """Exact per-unit storage cost in fiftieths of a bit."""
    if n_p < 0 or n_p > n:
        raise ValueError(f"protected count {n_p} outside [0, {n}]")
    if action_bits == 16.0:
        return 800 * n
    f = bits_to_fifty(action_bits)
    return f * (n - n_p) + 400 * n_p


def effective_bits(action_bits: float, n: int, n_p: int) -> float:
    """Storage cost in bits: 16*n for skip, else b*(n - n_p) + 8*n_p."""
    return effective_fifty(action_bits, n, n_p) / 50.0


@dataclass
class UnitDecision:
    tensor_name: str
    chunk_index: int
    action_bits: float
    realized_bits: float
    n: int
    n_p: int
    rel_error: float = 0.0

    @property
    def n_q(self) -> int:
        return self.n - self.n_p

    @property
    def effective_fifty(self) -> int:
        return effective_fifty(self.realized_bits, self.n, self.n_p)

    @property
    def effective_bits(self) -> float:
        return self.effective_fifty / 50.0

    @property
    def is_skip(self) -> bool:
        return self.action_bits == 16.0


def avg_bits(plan: list[UnitDecision]) -> float:
    """Exact ratio of summed effective bits to summed weight counts."""
    if not plan:
        raise ValueError("empty plan")
    total_fifty = sum(d.effective_fifty for d in plan)
    total_n = sum(d.n for d in plan)
    return total_fifty / (50.0 * total_n)


@dataclass
class LayerClamps:
    """Minimum action bit-widths per structural category (skip is exempt)."""

    early_layer_count: int = 2
    early_min_bits: float = 2.0
    attention_min_bits: float = 1.58
    mlp_min_bits: float = 1.58
    other_min_bits: float = 1.0

    def min_bits(self, unit: WeightUnit) -> float:
        m = self.other_min_bits
        if unit.layer_index < self.early_layer_count:
            m = max(m, self.early_min_bits)
        if unit.is_attention:
            m = max(m, self.attention_min_bits)
        if unit.is_mlp:
            m = max(m, self.mlp_min_bits)
        return m


@dataclass
class BudgetState:
    """Per-episode accounting of decided bits against the target."""

    n_total: int
    b_target: float
    bits_used_fifty: int = 0
    n_done: int = 0
    decisions: list[UnitDecision] = field(default_factory=list)

    @property
    def bits_used(self) -> float:
        return self.bits_used_fifty / 50.0

    @property
    def fp32_reference(self) -> float:
        return 32.0 * self.n_total

    @property
    def target_fifty(self) -> int:
        return round_half_away(50.0 * self.b_target) * self.n_total

    @property
    def n_remaining(self) -> int:
        return self.n_total - self.n_done

    def record(self, decision: UnitDecision) -> None:
        self.decisions.append(decision)
        self.bits_used_fifty += decision.effective_fifty
        self.n_done += decision.n


def feasible_actions(
    state: BudgetState,
    unit: WeightUnit,
    min_bits: float,
    protect_rate: float,
    completion_fifty: int | None = None,
) -> np.ndarray:
    """Boolean mask over the 7 actions for the current unit.

    An action is infeasible if taking it (at the configured protection rate)
    plus the cheapest completion of every remaining unit would exceed the
    target, or if its bits fall below the layer minimum (skip exempt). If
    nothing survives, the lowest-bit action is force-unmasked so the episode
    can always proceed.

    `completion_fifty` is the exact cost of finishing all units after this
    one at 1 bit with their protected weights at 8 (callers that know the
    remaining units pass it); without it the test falls back to a flat 1-bit
    estimate, which under protection is optimistic and can let the realized
    average drift above the target.
    """
    n = unit.n
    n_p = protected_count(n, protect_rate)
    if completion_fifty is None:
        completion_fifty = 50 * (state.n_remaining - n)
    budget = state.target_fifty
    mask = np.zeros(N_ACTIONS, dtype=bool)
    for i, bits in enumerate(ACTION_BITS):
        cost = effective_fifty(bits, n, n_p)
        if state.bits_used_fifty + cost + completion_fifty > budget:
            continue
        if i != SKIP_INDEX and bits < min_bits:
            continue
        mask[i] = True
    if not mask.any():
        mask[N_ACTIONS - 1] = True  # force-unmask the 1-bit action
    return mask

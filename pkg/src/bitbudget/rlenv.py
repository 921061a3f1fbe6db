"""Finite-horizon allocation MDP: states, shaped rewards, episode scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .budget import (
    ACTION_BITS,
    BudgetState,
    LayerClamps,
    SKIP_INDEX,
    UnitDecision,
    feasible_actions,
)
from .calibration import ActivationScales, ProtectionSet, quantize_protected
from .plans import PlanEntry, QuantPlan
from .proxy import ProxyMetrics
from .quantizers import fit_unit
from .store import WeightStats, WeightUnit


class ContractViolation(Exception):
    pass


@dataclass
class RewardConfig:
    alpha: float = 1.0
    gain_cap: float = 0.95
    quality_tolerance: float = 0.3  # epsilon on dL/L0
    budget_coef: float = 10.0
    ppl_soft: float = 3.0
    ppl_hard: float = 20.0
    ppl_slope1: float = 0.1
    ppl_slope2: float = 1.0
    skip_threshold: float = 0.10
    skip_coef: float = 1.0
    quality_bonus: float = 0.5
    bonus_rho: float = 2.0
    skip_step_penalty: float = 0.05
    saved_coeff: float = 0.1
    over_penalty: float = 0.02
    eta_lambda: float = 0.1
    lambda0: float = 0.5


@dataclass
class DualState:
    lam: float
    eta: float

    @classmethod
    def fresh(cls, cfg: RewardConfig) -> "DualState":
        return cls(lam=cfg.lambda0, eta=cfg.eta_lambda)


def update_dual(dual: DualState, dl_rel: float, tolerance: float) -> DualState:
    """Projected gradient ascent: lambda stays non-negative."""
    lam = max(0.0, dual.lam + dual.eta * (dl_rel - tolerance))
    return DualState(lam=lam, eta=dual.eta)


@dataclass
class Curriculum:
    targets: list[float]
    episodes: int

    def __post_init__(self) -> None:
        if not self.targets:
            raise ValueError("curriculum needs at least one target")
        if any(b > a for a, b in zip(self.targets, self.targets[1:])):
            raise ValueError("curriculum targets must be non-increasing")

    def target(self, episode_index: int) -> float:
        return curriculum_target(episode_index, self.targets, self.episodes)

    @property
    def final_target(self) -> float:
        return self.targets[-1]


def curriculum_target(episode_index: int, targets: list[float], episodes: int) -> float:
    """Equal consecutive stages; the remainder extends the last stage."""
    if not 0 <= episode_index < episodes:
        raise ValueError(f"episode index {episode_index} outside [0, {episodes})")
    base = max(1, episodes // len(targets))
    return targets[min(episode_index // base, len(targets) - 1)]


def step_reward(action_bits: float, b_target: float, cfg: RewardConfig) -> float:
    if action_bits == 16.0:
        return -cfg.skip_step_penalty
    if action_bits <= b_target:
        return cfg.saved_coeff * (b_target - action_bits) / b_target
    return -cfg.over_penalty


def episode_reward(
    metrics: ProxyMetrics, b_target: float, lam: float, cfg: RewardConfig
) -> tuple[float, dict]:
    """Episode-end score: capped compression gain minus the quality, budget,
    perplexity, and skip penalties, plus the low-rho bonus."""
    if not metrics.finite():
        raise ValueError("non-finite metrics")
    gain = cfg.alpha * min(cfg.gain_cap, (32.0 - metrics.avg_bits) / 32.0)
    p_qual = lam * max(0.0, metrics.dl_rel - cfg.quality_tolerance)
    p_budget = cfg.budget_coef * max(0.0, metrics.avg_bits - b_target) ** 2
    rho = metrics.rho
    if rho <= cfg.ppl_soft:
        p_ppl = 0.0
    elif rho <= cfg.ppl_hard:
        p_ppl = cfg.ppl_slope1 * (rho - cfg.ppl_soft)
    else:
        p_ppl = cfg.ppl_slope1 * (cfg.ppl_hard - cfg.ppl_soft) + cfg.ppl_slope2 * (rho - cfg.ppl_hard)
    p_skip = cfg.skip_coef * max(0.0, metrics.skip_frac - cfg.skip_threshold)
    bonus = cfg.quality_bonus if rho < cfg.bonus_rho else 0.0
    total = gain - p_qual - p_budget - p_ppl - p_skip + bonus
    terms = {
        "gain": gain, "p_qual": p_qual, "p_budget": p_budget,
        "p_ppl": p_ppl, "p_skip": p_skip, "bonus": bonus, "lambda": lam,
    }
    return total, terms


def build_state(
    unit: WeightUnit,
    stats: WeightStats,
    budget: BudgetState,
    scale_slice: np.ndarray,
    step_index: int,
    n_units: int,
) -> np.ndarray:
    """The 15-dim observation; budget ratios use the FP32 reference and the
    current target, urgency is the positive part of 1 - B_r/(b_t * n_r)."""
    b_target_total = budget.b_target * budget.n_total
    remaining_budget = b_target_total - budget.bits_used
    n_r = budget.n_remaining
    urgency = 0.0
    if n_r > 0:
        urgency = max(0.0, 1.0 - remaining_budget / (budget.b_target * n_r))
    s = scale_slice.astype(np.float64)
    s_std = float(np.sqrt(np.maximum((s * s).mean() - s.mean() ** 2, 0.0)))
    return np.array([
        stats.mean,
        stats.std,
        stats.abs_mean,
        stats.sparsity,
        stats.outlier_frac,
        step_index / n_units,
        budget.bits_used / budget.fp32_reference,
        remaining_budget / b_target_total,
        urgency,
        float(s.mean()),
        s_std,
        float(s.max()),
        1.0 if unit.is_attention else 0.0,
        1.0 if unit.is_mlp else 0.0,
        budget.b_target / 8.0,
    ])


@dataclass
class EpisodeOutcome:
    plan: QuantPlan
    metrics: ProxyMetrics
    final_reward: float
    reward_terms: dict


@dataclass
class QuantEnv:
    """Sequential allocation over a fixed unit list; transitions are
    deterministic given the action sequence."""

    units: list[WeightUnit]
    stats: list[WeightStats]
    scales: ActivationScales
    protections: list[ProtectionSet]
    clamps: LayerClamps
    protect_rate: float
    reward_cfg: RewardConfig
    oracle: object  # anything with .evaluate(QuantPlan) -> ProxyMetrics
    fallback_threshold: float = 0.95
    fit_steps: int = 10
    fit_cache: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._dequants = [quantize_protected(u, p)[1] for u, p in zip(self.units, self.protections)]
        self._n_total = sum(u.n for u in self.units)
        # exact 1-bit-plus-protection completion cost for units after index i
        floors = [50 * (u.n - p.n_p) + 400 * p.n_p for u, p in zip(self.units, self.protections)]
        suffix = [0] * (len(floors) + 1)
        for i in range(len(floors) - 1, -1, -1):
            suffix[i] = suffix[i + 1] + floors[i]
        self._completion_fifty = suffix
        self.budget: BudgetState | None = None
        self._cursor = 0
        self._recons: list[np.ndarray | None] = []

    @property
    def n_units(self) -> int:
        return len(self.units)

    def reset(self, b_target: float) -> tuple[np.ndarray, np.ndarray]:
        self.budget = BudgetState(n_total=self._n_total, b_target=b_target)
        self._cursor = 0
        self._recons = []
        return self._observe()

    def _observe(self) -> tuple[np.ndarray, np.ndarray]:
        i = self._cursor
        unit = self.units[i]
        state = build_state(
            unit, self.stats[i], self.budget, self.scales.for_unit(unit), i, self.n_units
        )
        mask = feasible_actions(
            self.budget, unit, self.clamps.min_bits(unit), self.protect_rate,
            completion_fifty=self._completion_fifty[i + 1],
        )
        return state, mask

    def step(self, action_index: int) -> tuple[float, tuple[np.ndarray, np.ndarray] | None]:
        if self.budget is None:
            raise ContractViolation("step before reset")
        if self._cursor >= self.n_units:
            raise ContractViolation("episode already terminal")
        i = self._cursor
        unit = self.units[i]
        mask = feasible_actions(
            self.budget, unit, self.clamps.min_bits(unit), self.protect_rate,
            completion_fifty=self._completion_fifty[i + 1],
        )
        if not mask[action_index]:
            raise ContractViolation(
                f"masked action {ACTION_BITS[action_index]} supplied for unit {unit.uid}"
            )
        bits = ACTION_BITS[action_index]
        prot = self.protections[i]
        if action_index == SKIP_INDEX:
            decision = UnitDecision(unit.tensor_name, unit.chunk_index, 16.0, 16.0, unit.n, 0, 0.0)
            self._recons.append(None)
        else:
            key = (i, action_index)
            if key not in self.fit_cache:
                self.fit_cache[key] = fit_unit(
                    unit.weights, bits, prot.indices, self._dequants[i],
                    fallback_threshold=self.fallback_threshold, steps=self.fit_steps,
                )
            result = self.fit_cache[key]
            decision = UnitDecision(
                unit.tensor_name, unit.chunk_index, bits,
                result.realized_kind.nominal_bits, unit.n, prot.n_p, result.rel_error,
            )
            self._recons.append(result.reconstructed)
        self.budget.record(decision)
        reward = step_reward(bits, self.budget.b_target, self.reward_cfg)
        self._cursor += 1
        if self._cursor >= self.n_units:
            return reward, None
        return reward, self._observe()

    def finalize(self, lam: float, model_hash: str = "", config_echo: dict | None = None) -> EpisodeOutcome:
        if self.budget is None or self._cursor < self.n_units:
            raise ContractViolation("finalize before the episode is terminal")
        entries = [
            PlanEntry(decision=d, unit=u, recon=r)
            for d, u, r in zip(self.budget.decisions, self.units, self._recons)
        ]
        plan = QuantPlan(entries, model_hash=model_hash, config_echo=config_echo or {})
        metrics = self.oracle.evaluate(plan)
        total, terms = episode_reward(metrics, self.budget.b_target, lam, self.reward_cfg)
        return EpisodeOutcome(plan=plan, metrics=metrics, final_reward=total, reward_terms=terms)

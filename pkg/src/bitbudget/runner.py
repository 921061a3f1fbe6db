"""End-to-end pipelines: RL training, the heuristic baseline, and sweeps."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .allocators import HeuristicConfig, heuristic_allocate, unit_score
from .budget import ACTION_BITS, UnitDecision
from .calibration import ActivationScales, collect_activation_scales, saliency, \
    select_protected, quantize_protected
from .config import RunConfig
from .plans import PlanEntry, QuantPlan, save_plan
from .policy import PolicyParams, Trajectory, forward, load_checkpoint, ppo_update, \
    sample_action, save_checkpoint
from .proxy import ProxyModel, QualityOracle, encode, load_corpus, train_proxy
from .quantizers import fit_unit
from .rlenv import Curriculum, DualState, QuantEnv, update_dual
from .store import ModelStore, load_model, partition_units, save_model, store_hash, unit_stats


@dataclass
class Workspace:
    """Everything a run needs, loaded once: store, units, scales, oracle."""

    cfg: RunConfig
    store: ModelStore
    model: ProxyModel
    units: list
    stats: list
    scales: ActivationScales
    protections: list
    oracle: QualityOracle
    model_hash: str
    corpus_tokens: np.ndarray


def corpus_splits(tokens: np.ndarray, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """(calibration tokens, evaluation tokens); eval is the held-out tail."""
    eval_span = cfg.eval_tokens + 1
    if tokens.size <= eval_span:
        raise ValueError("corpus smaller than the evaluation split")
    calib_len = cfg.calib_windows * cfg.proxy.context + 1
    calib = tokens[:min(calib_len, tokens.size - eval_span)]
    return calib, tokens[tokens.size - eval_span:]


def scales_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out_dir, "scales.json")


def prepare_workspace(cfg: RunConfig) -> Workspace:
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    store = load_model(cfg.store_dir)
    model = ProxyModel.from_store(store)
    tokens = encode(load_corpus())
    calib, eval_tokens = corpus_splits(tokens, cfg)

    spath = scales_path(cfg)
    if os.path.exists(spath):
        scales = ActivationScales.load(spath)
    else:
        calib_x = calib[:(calib.size - 1) // cfg.proxy.context * cfg.proxy.context]
        scales = collect_activation_scales(model, calib_x.reshape(-1, cfg.proxy.context))
        scales.save(spath)

    units = partition_units(store, cfg.chunk_size, names=model.quantizable_names())
    stats = [unit_stats(u) for u in units]
    protections = [select_protected(u, saliency(u, scales), cfg.salient_rate) for u in units]
    oracle = QualityOracle(model, eval_tokens)
    return Workspace(
        cfg=cfg, store=store, model=model, units=units, stats=stats,
        scales=scales, protections=protections, oracle=oracle,
        model_hash=store_hash(store), corpus_tokens=tokens,
    )


@dataclass
class RunResult:
    plan: QuantPlan
    plan_path: str
    greedy_plan: QuantPlan | None
    greedy_plan_path: str | None
    checkpoint_path: str
    log_path: str
    best_reward: float
    metrics: dict  # best-by-reward plan's proxy metrics
    greedy_metrics: dict
    episodes_run: int
    units_per_episode: int
    episode_seconds: float = 0.0
    wall_seconds: float = 0.0


def _discounted_return(rewards: list[float], final_reward: float, gamma: float) -> float:
    t_len = len(rewards)
    return sum(gamma ** (t_len - 1 - t) * r for t, r in enumerate(rewards)) + final_reward


def _run_episode(env: QuantEnv, params: PolicyParams, b_target: float,
                 rng: np.random.Generator | None, greedy: bool) -> Trajectory:
    traj = Trajectory()
    obs = env.reset(b_target)
    while obs is not None:
        state, mask = obs
        probs, value = forward(params, state, mask)
        action, logp = sample_action(probs, rng, greedy=greedy)
        reward, obs = env.step(action)
        traj.append(state, mask, action, logp, value, reward)
    return traj


def run_training(cfg: RunConfig, workspace: Workspace | None = None,
                 resume: bool = False) -> RunResult:
    """The full RL loop: curriculum episodes, PPO updates, dual ascent,
    best-by-reward plan tracking, JSON-lines logs, and a final greedy plan."""
    t_start = time.perf_counter()
    ws = workspace or prepare_workspace(cfg)
    out = cfg.out_dir
    ckpt_path = os.path.join(out, "checkpoint.bin")
    log_path = os.path.join(out, "episodes.jsonl")
    plan_path = os.path.join(out, "plan.json")
    greedy_path = os.path.join(out, "plan_greedy.json")

    env = QuantEnv(
        units=ws.units, stats=ws.stats, scales=ws.scales, protections=ws.protections,
        clamps=cfg.clamps, protect_rate=cfg.salient_rate, reward_cfg=cfg.reward,
        oracle=ws.oracle, fallback_threshold=cfg.fallback_threshold, fit_steps=cfg.fit_steps,
    )
    curriculum = Curriculum(list(cfg.curriculum), cfg.episodes)
    params = PolicyParams(hidden=cfg.ppo.hidden, seed=cfg.seed)
    adam = ad.Adam(params.tensors(), lr=cfg.ppo.learning_rate)
    dual = DualState.fresh(cfg.reward)
    start_episode = 0
    best_reward = float("-inf")
    best_plan: QuantPlan | None = None
    best_metrics: dict = {}
    config_echo = cfg.to_dict()

    if resume and os.path.exists(ckpt_path):
        params, trainer = load_checkpoint(ckpt_path)
        if trainer:
            adam = ad.Adam(params.tensors(), lr=cfg.ppo.learning_rate)
            adam.m = trainer["adam_m"]
            adam.v = trainer["adam_v"]
            adam.step_count = trainer["adam_step_count"]
            dual = DualState(lam=trainer["dual_lambda"], eta=cfg.reward.eta_lambda)
            start_episode = trainer["episode"]
            best_reward = trainer["best_reward"]
        if os.path.exists(plan_path):
            from .plans import attach_units, ensure_recons, load_plan

            best_plan = load_plan(plan_path)
            attach_units(best_plan, ws.store, cfg.chunk_size, ws.model.quantizable_names())
            ensure_recons(best_plan, ws.scales, cfg.salient_rate,
                          cfg.fallback_threshold, cfg.fit_steps)
            best_metrics = ws.oracle.evaluate(best_plan).as_dict()

    mode = "a" if resume and start_episode > 0 else "w"
    episode_seconds = 0.0
    with open(log_path, mode) as log:
        for episode in range(start_episode, cfg.episodes):
            t0 = time.perf_counter()
            b_target = curriculum.target(episode)
            rng_episode = np.random.default_rng([cfg.seed, 1000 + episode])
            traj = _run_episode(env, params, b_target, rng_episode, greedy=False)
            outcome = env.finalize(dual.lam, ws.model_hash, config_echo)
            g_eq4 = _discounted_return(traj.rewards, outcome.final_reward, cfg.ppo.gamma)
            for t in range(len(traj)):
                d = outcome.plan.entries[t].decision
                log.write(json.dumps({
                    "type": "step", "episode": episode, "t": t,
                    "unit": f"{d.tensor_name}:{d.chunk_index}",
                    "state": [float(x) for x in traj.states[t]],
                    "mask": [int(b) for b in traj.masks[t]],
                    "action": traj.actions[t],
                    "action_bits": ACTION_BITS[traj.actions[t]],
                    "reward": traj.rewards[t],
                }) + "\n")
            traj.add_terminal(outcome.final_reward)
            dual = update_dual(dual, outcome.metrics.dl_rel, cfg.reward.quality_tolerance)
            update_stats = ppo_update(
                params, [traj], cfg.ppo, adam, np.random.default_rng([cfg.seed, 2000 + episode])
            )
            log.write(json.dumps({
                "type": "episode_end", "episode": episode, "b_target": b_target,
                "metrics": outcome.metrics.as_dict(),
                "reward_terms": outcome.reward_terms,
                "final_reward": outcome.final_reward,
                "return_eq4": g_eq4,
                "lambda": dual.lam,
                "ppo": {k: v for k, v in update_stats.items()},
            }) + "\n")
            if b_target == curriculum.final_target and outcome.final_reward > best_reward:
                best_reward = outcome.final_reward
                best_plan = outcome.plan
                best_metrics = outcome.metrics.as_dict()
            save_checkpoint(ckpt_path, params, adam, episode + 1, dual.lam, best_reward)
            episode_seconds += time.perf_counter() - t0

    if best_plan is None:
        raise RuntimeError("no episode ran at the final curriculum target")
    save_plan(best_plan, plan_path)

    greedy_traj = _run_episode(env, params, curriculum.final_target, np.random.default_rng(0), greedy=True)
    greedy_outcome = env.finalize(dual.lam, ws.model_hash, config_echo)
    save_plan(greedy_outcome.plan, greedy_path)

    episodes_run = cfg.episodes - start_episode
    return RunResult(
        plan=best_plan,
        plan_path=plan_path,
        greedy_plan=greedy_outcome.plan,
        greedy_plan_path=greedy_path,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        best_reward=best_reward,
        metrics=best_metrics,
        greedy_metrics=greedy_outcome.metrics.as_dict(),
        episodes_run=episodes_run,
        units_per_episode=len(ws.units),
        episode_seconds=episode_seconds / max(episodes_run, 1),
        wall_seconds=time.perf_counter() - t_start,
    )


@dataclass
class HeuristicResult:
    plan: QuantPlan
    plan_path: str
    metrics: dict
    units_per_episode: int
    wall_seconds: float = 0.0
    episode_seconds: float = 0.0


def run_heuristic(cfg: RunConfig, workspace: Workspace | None = None,
                  target_bits: float | None = None) -> HeuristicResult:
    """Saliency-ranked baseline on the identical quantization infrastructure."""
    t_start = time.perf_counter()
    ws = workspace or prepare_workspace(cfg)
    hcfg = cfg.heuristic
    if target_bits is not None:
        hcfg = HeuristicConfig(
            target_bits=target_bits,
            demotion_ladder=list(cfg.heuristic.demotion_ladder),
            promotion_ladder=list(cfg.heuristic.promotion_ladder),
        )
    scores = [unit_score(saliency(u, ws.scales)) for u in ws.units]
    bits = heuristic_allocate(ws.units, scores, ws.protections, hcfg)

    entries = []
    for unit, b, prot in zip(ws.units, bits, ws.protections):
        _, dequant = quantize_protected(unit, prot)
        result = fit_unit(
            unit.weights, b, prot.indices, dequant,
            fallback_threshold=cfg.fallback_threshold, steps=cfg.fit_steps,
        )
        decision = UnitDecision(
            unit.tensor_name, unit.chunk_index, b,
            result.realized_kind.nominal_bits, unit.n, prot.n_p, result.rel_error,
        )
        entries.append(PlanEntry(decision=decision, unit=unit, recon=result.reconstructed))
    plan = QuantPlan(entries, model_hash=ws.model_hash, config_echo=cfg.to_dict())
    metrics = ws.oracle.evaluate(plan)
    os.makedirs(cfg.out_dir, exist_ok=True)
    plan_path = os.path.join(cfg.out_dir, "plan_heuristic.json")
    save_plan(plan, plan_path)
    wall = time.perf_counter() - t_start
    return HeuristicResult(
        plan=plan, plan_path=plan_path, metrics=metrics.as_dict(),
        units_per_episode=len(ws.units), wall_seconds=wall, episode_seconds=wall,
    )


def train_proxy_store(cfg: RunConfig, out_dir: str) -> dict:
    """Train the bundled proxy recipe and persist it as a model store."""
    model, diag = train_proxy(load_corpus(), cfg.proxy, cfg.seed)
    save_model(model.to_store(), out_dir)
    diag_small = {k: diag[k] for k in ("steps", "held_out_loss", "loss_bar")}
    return diag_small


SWEEP_AXES = ("chunk_size", "salient_rate", "episodes")


def sweep(cfg: RunConfig, axis: str, values: list, out_csv: str) -> list[dict]:
    """One full run per value; aggregates (value, avg bits, rho, wall time)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r} (choose from {SWEEP_AXES})")
    rows = []
    for value in values:
        sub = RunConfig.from_dict(cfg.to_dict())
        setattr(sub, axis, type(getattr(sub, axis))(value))
        sub.out_dir = os.path.join(cfg.out_dir, f"sweep_{axis}_{value}")
        sub.validate()
        if sub.pipeline == "heuristic":
            res = run_heuristic(sub)
            plan, best_reward = res.plan, float("nan")
        else:
            res = run_training(sub)
            plan, best_reward = res.plan, res.best_reward
        rows.append({
            "value": value,
            "avg_bits": plan.avg_bits,
            "rho": res.metrics["rho"],
            "wall_seconds": res.wall_seconds,
            "units_per_episode": res.units_per_episode,
            "episode_seconds": res.episode_seconds,
            "best_reward": best_reward,
        })
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows

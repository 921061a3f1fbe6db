"""Masked-categorical actor-critic, GAE, and the clipped-surrogate PPO update."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .budget import N_ACTIONS

STATE_DIM = 15
MASK_OFFSET = 1e9  # subtracted from masked logits; exp underflows to exactly 0

CHECKPOINT_MAGIC = b"BBPC"
CHECKPOINT_VERSION = 1
_TRAINER_MAGIC = b"TRNR"


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.05
    epochs: int = 3
    learning_rate: float = 5e-4
    minibatch_size: int = 64
    hidden: int = 128


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    big, small = max(n_in, n_out), min(n_in, n_out)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(gain * w, dtype=np.float64)


class PolicyParams:
    """Two hidden layers with affine LayerNorm + ReLU, then actor/critic heads."""

    def __init__(self, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self.hidden = hidden
        h = hidden
        self.w1 = ad.param(_orthogonal(rng, STATE_DIM, h, np.sqrt(2.0)))
        self.b1 = ad.param(np.zeros(h))
        self.g1 = ad.param(np.ones(h))
        self.n1 = ad.param(np.zeros(h))
        self.w2 = ad.param(_orthogonal(rng, h, h, np.sqrt(2.0)))
        self.b2 = ad.param(np.zeros(h))
        self.g2 = ad.param(np.ones(h))
        self.n2 = ad.param(np.zeros(h))
        self.wa = ad.param(_orthogonal(rng, h, N_ACTIONS, 0.01))
        self.ba = ad.param(np.zeros(N_ACTIONS))
        self.wc = ad.param(_orthogonal(rng, h, 1, 1.0))
        self.bc = ad.param(np.zeros(1))

    def tensors(self) -> list[ad.Tensor]:
        return [self.w1, self.b1, self.g1, self.n1,
                self.w2, self.b2, self.g2, self.n2,
                self.wa, self.ba, self.wc, self.bc]

    def tensor_names(self) -> list[str]:
        return ["w1", "b1", "g1", "n1", "w2", "b2", "g2", "n2",
                "wa", "ba", "wc", "bc"]

    def graph(self, states: np.ndarray, masks: np.ndarray) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """Build the differentiable forward pass.

        Returns (masked log-probabilities (N, 7), values (N,), probabilities).
        Masked actions get logit - 1e9, which underflows to probability 0.
        """
        x = ad.const(np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM))
        h = ad.relu(ad.layer_norm(ad.add(ad.matmul(x, self.w1), self.b1), self.g1, self.n1))
        h = ad.relu(ad.layer_norm(ad.add(ad.matmul(h, self.w2), self.b2), self.g2, self.n2))
        logits = ad.add(ad.matmul(h, self.wa), self.ba)
        offset = ad.const((np.asarray(masks, dtype=np.float64).reshape(-1, N_ACTIONS) - 1.0) * MASK_OFFSET)
        masked = ad.add(logits, offset)
        logp = ad.log_softmax(masked)
        value = ad.reshape(ad.add(ad.matmul(h, self.wc), self.bc), (-1,))
        probs = ad.exp(logp)
        return logp, value, probs


def forward(params: PolicyParams, state: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numpy (probabilities, value); probabilities of masked actions are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.reshape(-1, N_ACTIONS).any(axis=1).all():
        raise ValueError("at least one action must be unmasked")
    logp, value, probs = params.graph(state, mask)
    single = np.asarray(state).ndim == 1
    p = probs.data[0] if single else probs.data
    v = float(value.data[0]) if single else value.data
    return p, v


def sample_action(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> tuple[int, float]:
    """Draw an action (or argmax in greedy mode); returns (index, log-probability)."""
    if greedy:
        a = int(np.argmax(probs))
        return a, float(np.log(probs[a]))
    support = np.flatnonzero(probs > 0.0)
    c = np.cumsum(probs[support])
    r = rng.random() * c[-1]
    i = min(int(np.searchsorted(c, r, side="right")), support.size - 1)
    a = int(support[i])
    return a, float(np.log(probs[a]))


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    terminal_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    t_len = rewards.size
    adv = np.zeros(t_len)
    next_v = terminal_value
    next_a = 0.0
    for t in range(t_len - 1, -1, -1):
        delta = rewards[t] + gamma * next_v - values[t]
        next_a = delta + gamma * lam * next_a
        adv[t] = next_a
        next_v = values[t]
    return adv, adv + values


@dataclass
class Trajectory:
    """One episode's rollout; the terminal reward is folded into the last step."""

    states: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def append(self, state, mask, action, log_prob, value, reward) -> None:
        self.states.append(np.asarray(state, dtype=np.float64))
        self.masks.append(np.asarray(mask, dtype=bool))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))

    def add_terminal(self, final_reward: float) -> None:
        self.rewards[-1] += float(final_reward)

    def __len__(self) -> int:
        return len(self.actions)


def _batch(trajectories: list[Trajectory], cfg: PPOConfig):
    states = np.concatenate([np.stack(t.states) for t in trajectories])
    masks = np.concatenate([np.stack(t.masks) for t in trajectories])
    actions = np.concatenate([np.asarray(t.actions) for t in trajectories])
    old_logp = np.concatenate([np.asarray(t.log_probs) for t in trajectories])
    advs, rets = [], []
    for t in trajectories:
        a, r = gae(np.asarray(t.rewards), np.asarray(t.values), cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    advantages = np.concatenate(advs)
    returns = np.concatenate(rets)
    advantages = (advantages - advantages.mean()) / max(float(advantages.std()), 1e-8)
    return states, masks, actions, old_logp, advantages, returns


def ppo_loss(
    params: PolicyParams,
    states: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PPOConfig,
) -> tuple[ad.Tensor, dict]:
    """Clipped surrogate + value regression + entropy bonus as one scalar graph."""
    logp_all, value, probs = params.graph(states, masks)
    logp_act = ad.select_columns(logp_all, np.asarray(actions))
    ratio = ad.exp(ad.sub(logp_act, ad.const(old_logp)))
    adv = ad.const(advantages)
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv))
    policy_term = ad.scale(ad.mean(surr), -1.0)
    diff = ad.sub(value, ad.const(returns))
    value_term = ad.mean(ad.mul(diff, diff))
    ent_rows = ad.scale(ad.sum_axis(ad.mul(probs, logp_all), 1), -1.0)
    entropy_term = ad.mean(ent_rows)
    loss = ad.add(
        ad.add(policy_term, ad.scale(value_term, cfg.value_coef)),
        ad.scale(entropy_term, -cfg.entropy_coef),
    )
    stats = {
        "policy_loss": float(policy_term.data),
        "value_loss": float(value_term.data),
        "entropy": float(entropy_term.data),
    }
    return loss, stats


def ppo_update(
    params: PolicyParams,
    trajectories: list[Trajectory],
    cfg: PPOConfig,
    adam: ad.Adam,
    rng: np.random.Generator,
) -> dict:
    """3 epochs of shuffled-minibatch Adam on the PPO objective.

    A non-finite loss aborts the whole update and restores the incoming
    parameters.
    """
    if not trajectories:
        raise ValueError("empty trajectory batch")
    states, masks, actions, old_logp, advantages, returns = _batch(trajectories, cfg)
    snapshot = [t.data.copy() for t in params.tensors()]
    adam_snapshot = ([m.copy() for m in adam.m], [v.copy() for v in adam.v], adam.step_count)
    n = states.shape[0]
    last_stats: dict = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            sel = order[start:start + cfg.minibatch_size]
            loss, stats = ppo_loss(
                params, states[sel], masks[sel], actions[sel],
                old_logp[sel], advantages[sel], returns[sel], cfg,
            )
            if not np.isfinite(loss.data):
                for t, saved in zip(params.tensors(), snapshot):
                    t.data[...] = saved
                adam.m, adam.v, adam.step_count = adam_snapshot
                return {"aborted": True, **stats}
            loss.backward()
            adam.step()
            last_stats = stats
    last_stats["aborted"] = False
    return last_stats


def save_checkpoint(
    path: str,
    params: PolicyParams,
    adam: ad.Adam | None = None,
    episode: int = 0,
    dual_lambda: float = 0.0,
    best_reward: float = float("-inf"),
) -> None:
    """Versioned binary: magic, dims, little-endian f32 parameter blob, and an
    optional trainer section for resuming."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, STATE_DIM, params.hidden))
        fh.write(struct.pack("<I", N_ACTIONS))
        for t in params.tensors():
            fh.write(t.data.astype("<f4").tobytes())
        if adam is not None:
            fh.write(_TRAINER_MAGIC)
            fh.write(struct.pack("<IdI", episode, dual_lambda, adam.step_count))
            fh.write(struct.pack("<d", best_reward))
            for blob in adam.m + adam.v:
                fh.write(blob.astype("<f4").tobytes())


class CheckpointError(Exception):
    pass


def load_checkpoint(path: str) -> tuple[PolicyParams, dict]:
    """Returns (params, trainer_state); trainer_state is {} for bare checkpoints."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, state_dim, hidden = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION or state_dim != STATE_DIM:
        raise CheckpointError(f"unsupported checkpoint version/dims {version}/{state_dim}")
    (n_actions,) = struct.unpack_from("<I", raw, 16)
    if n_actions != N_ACTIONS:
        raise CheckpointError(f"checkpoint has {n_actions} actions, expected {N_ACTIONS}")
    params = PolicyParams(hidden=hidden, seed=0)
    off = 20
    for t in params.tensors():
        size = t.data.size * 4
        t.data[...] = np.frombuffer(raw, dtype="<f4", count=t.data.size, offset=off).reshape(t.data.shape)
        off += size
    trainer: dict = {}
    if raw[off:off + 4] == _TRAINER_MAGIC:
        off += 4
        episode, dual_lambda, adam_steps = struct.unpack_from("<IdI", raw, off)
        off += struct.calcsize("<IdI")
        (best_reward,) = struct.unpack_from("<d", raw, off)
        off += 8
        m_blobs, v_blobs = [], []
        for dest in (m_blobs, v_blobs):
            for t in params.tensors():
                dest.append(
                    np.frombuffer(raw, dtype="<f4", count=t.data.size, offset=off)
                    .reshape(t.data.shape).astype(np.float64)
                )
                off += t.data.size * 4
        trainer = {
            "episode": episode,
            "dual_lambda": dual_lambda,
            "adam_step_count": adam_steps,
            "best_reward": best_reward,
            "adam_m": m_blobs,
            "adam_v": v_blobs,
        }
    return params, trainer

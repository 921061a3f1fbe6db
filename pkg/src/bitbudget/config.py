"""Run configuration: one JSON-serializable object that every command echoes."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .allocators import HeuristicConfig
from .budget import LayerClamps
from .policy import PPOConfig
from .proxy import ProxyConfig
from .rlenv import RewardConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    store_dir: str = ""
    out_dir: str = "runs/out"
    chunk_size: int = 256
    salient_rate: float = 0.03
    curriculum: list[float] = field(default_factory=lambda: [3.0, 2.5, 2.0, 2.0])
    episodes: int = 50
    seed: int = 42
    eval_tokens: int = 8192
    calib_windows: int = 64
    fit_steps: int = 10
    fallback_threshold: float = 0.95
    pipeline: str = "rl"  # 'rl' or 'heuristic' (what `sweep` re-runs per value)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    clamps: LayerClamps = field(default_factory=LayerClamps)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)

    def validate(self) -> None:
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if not 0.0 <= self.salient_rate <= 1.0:
            raise ConfigError("salient_rate must lie in [0, 1]")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.curriculum:
            raise ConfigError("curriculum must be non-empty")
        if any(b > a for a, b in zip(self.curriculum, self.curriculum[1:])):
            raise ConfigError("curriculum targets must be non-increasing")
        if self.pipeline not in ("rl", "heuristic"):
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.eval_tokens < self.proxy.context + 1:
            raise ConfigError("eval_tokens shorter than one context window")
        if self.fit_steps < 0 or self.fallback_threshold <= 0:
            raise ConfigError("bad quantizer settings")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        nested = {
            "reward": RewardConfig, "ppo": PPOConfig, "clamps": LayerClamps,
            "heuristic": HeuristicConfig, "proxy": ProxyConfig,
        }
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested and isinstance(value, dict):
                sub_known = {f.name for f in dataclasses.fields(nested[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} config keys {sorted(bad)}")
                kwargs[key] = nested[key](**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str, overrides: dict | None = None) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if overrides:
            raw = _deep_merge(raw, overrides)
        return cls.from_dict(raw)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out

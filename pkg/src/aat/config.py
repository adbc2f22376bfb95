"""Flat ``key = value`` run configuration with typed defaults and a content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

CONDITIONS = ("weighted_advantage", "returns_to_go", "ordinary_advantage")


@dataclass(frozen=True)
class RunConfig:
    # environment and target
    env: str = "grid"
    layout: str = ""
    seed: int = 0
    mode: str = "white"
    policy_algorithm: str = "q_learning"
    policy_episodes: int = 1500
    substitute_algorithm: str = "policy_gradient"
    substitute_episodes: int = 6000
    # offline data
    collect_episodes: int = 2000
    collector_mix: str = "random:0.5,fgsm:0.5"
    epsilon: float = 1.5
    # value heads
    gamma: float = 0.99
    sigma: float = 0.9
    lam: float = 0.5
    value_hidden: int = 128
    value_steps: int = 3000
    target_refresh: int = 100
    reward_transform: str = "attacker"
    # advantage predictor
    kappa: float = 0.1
    predictor_dim: int = 64
    predictor_steps: int = 1000
    predictor_states: int = 4096
    n_neighbors: int = 8
    n_gaussian: int = 8
    target_mode: str = "max_product"
    # generator
    model_dim: int = 128
    num_heads: int = 8
    num_layers: int = 6
    dropout: float = 0.2
    lr: float = 1e-3
    num_scales: int = 3
    base_window: int = 5
    growth: str = "exponential"
    growth_ratio: float = 2.0
    context: int = 20
    patch_side: int = 14
    omega: float = 1.0
    norm: str = "l2"
    condition: str = "weighted_advantage"
    batch_size: int = 128
    generator_steps: int = 1500
    # attack
    attack_episodes: int = 20
    attack_seed: int = 1000

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if self.mode not in ("white", "black"):
            raise ConfigError(f"mode must be white or black, got {self.mode!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        self.mix  # validates

    @property
    def mix(self) -> dict:
        out = {}
        for part in filter(None, (p.strip() for p in self.collector_mix.split(","))):
            name, _, frac = part.partition(":")
            try:
                out[name.strip()] = float(frac)
            except ValueError as exc:
                raise ConfigError(f"bad collector_mix entry {part!r}") from exc
        if abs(sum(out.values()) - 1.0) > 1e-9:
            raise ConfigError(f"collector fractions sum to {sum(out.values())}, not 1")
        return out

    @property
    def advantage_transform(self) -> str:
        return "ordinary" if self.condition == "ordinary_advantage" else "weighted"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def with_overrides(self, pairs) -> "RunConfig":
        return replace(self, **_typed(dict(_split(p) for p in pairs)))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _split(pair: str):
    key, sep, value = pair.partition("=")
    if not sep:
        raise ConfigError(f"expected key=value, got {pair!r}")
    return key.strip(), value.strip()


def _typed(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        cast = _CASTS[_TYPES[key]]
        try:
            out[key] = cast(float(value)) if cast is int and "e" in value.lower() else cast(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot read {value!r} as {_TYPES[key]}") from exc
    return out


def parse_config(text: str) -> dict:
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = _split(line)
        raw[key] = value
    return _typed(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    base = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        base = replace(base, **parse_config(p.read_text()))
    return base.with_overrides(overrides)

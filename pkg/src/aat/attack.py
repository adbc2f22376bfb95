"""Online attack loop with bounded history buffers, and clean-rollout baselines."""

from __future__ import annotations

import copy
import csv
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import episode_seed
from .errors import ConfigError, DataError
from .policies import BlackBoxPolicy
from .trajectory import normalize_reward

REPORT_SCHEMA_VERSION = 1


@dataclass
class AttackSession:
    generator: object
    predictor: object
    policy: object
    env: object
    epsilon: float
    condition: str = "weighted_advantage"
    rtg_target: float = 0.0
    mode: str = "white"
    substitute: object = None
    reward_range: tuple = (0.0, 1.0)
    env_id: str = "grid"
    policy_id: str = "target"
    events: list = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.generator.config.context

    def __post_init__(self):
        if self.mode not in ("white", "black"):
            raise ConfigError(f"unknown session mode {self.mode!r}")
        if self.condition not in ("weighted_advantage", "ordinary_advantage", "returns_to_go"):
            raise ConfigError(f"unknown condition {self.condition!r}")
        if tuple(self.env.obs_shape) != tuple(self.generator.obs_shape):
            raise ConfigError(f"model expects observations {tuple(self.generator.obs_shape)}, "
                              f"environment emits {tuple(self.env.obs_shape)}")


def white_box_session(generator, predictor, policy, env, epsilon, **kwargs) -> AttackSession:
    return AttackSession(generator, predictor, policy, env, epsilon, mode="white", **kwargs)


def black_box_session(substitute, target, generator, predictor, env, epsilon, **kwargs) -> AttackSession:
    """Session whose target only answers action queries; the substitute trained every model."""
    wall = target if isinstance(target, BlackBoxPolicy) else BlackBoxPolicy(target)
    return AttackSession(generator, predictor, wall, env, epsilon, mode="black", substitute=substitute, **kwargs)


@dataclass
class CleanStats:
    returns: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))


@dataclass
class AttackReport:
    env_id: str
    policy_id: str
    episodes: int
    attacked_mean: float
    attacked_std: float
    clean_mean: float
    reduction: float | None
    mean_delta_norm: float
    max_delta_norm: float
    mean_latency_ms: float
    forward_passes: int
    total_steps: int
    truncated_episodes: int
    epsilon: float
    condition: str
    mode: str
    attacked_returns: list
    clean_returns: list
    config_hash: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def run_clean(env, policy, episodes: int, seed: int) -> CleanStats:
    if episodes <= 0:
        raise DataError("no episodes requested: an empty report has no statistics")
    returns = []
    for i in range(episodes):
        e = copy.deepcopy(env)
        s, done, total = e.reset(seed=episode_seed(seed, i)), False, 0.0
        while not done:
            s, r, done, _ = e.step(policy.act(np.asarray(s, dtype=np.float32)[None])[0])
            total += r
        returns.append(total)
    return CleanStats(returns)


def run_attack(session: AttackSession, episodes: int, seed: int, trace: list | None = None,
               config_hash: str = "") -> AttackReport:
    """Attack ``episodes`` episodes; episode i starts from the same seed as in ``run_clean``.

    Per step: store the state, pick the condition, run one decoder pass,
    let the policy act on the perturbed state, store action and perturbation.
    ``trace`` (a list) receives one row per step when given.
    """
    if episodes <= 0:
        raise DataError("no episodes requested: an empty report has no statistics")
    gen, cap = session.generator, session.capacity
    gen.eval()
    passes0 = gen.forward_passes
    returns, norms, latencies, truncated = [], [], [], 0
    session.events.clear()
    for i in range(episodes):
        env = copy.deepcopy(session.env)
        s = env.reset(seed=episode_seed(seed, i))
        D_s, D_a, D_d, D_c = (deque(maxlen=cap) for _ in range(4))
        rtg = session.rtg_target
        done, t, total = False, 0, 0.0
        while not done:
            s = np.asarray(s, dtype=np.float32)
            D_s.append(s)
            session.events.append((i, t, "state", len(D_s), len(D_a), len(D_d)))
            if session.condition == "returns_to_go":
                cond = rtg
            else:
                cond = session.predictor.predict_max_advantage(s)
            D_c.append(cond)
            prev = len(D_s) - 1
            start = time.perf_counter()
            delta = gen.forward_perturbation(list(D_s), list(D_c), list(D_d)[len(D_d) - prev:],
                                             list(D_a)[len(D_a) - prev:], epsilon=session.epsilon)
            latencies.append((time.perf_counter() - start) * 1e3)
            a = session.policy.act((s + delta)[None])[0]
            D_a.append(a)
            D_d.append(delta)
            session.events.append((i, t, "action", len(D_s), len(D_a), len(D_d)))
            s, r, done, info = env.step(a)
            total += r
            n = float(np.sqrt(np.sum(np.square(delta, dtype=np.float64))))
            norms.append(n)
            rtg = rtg - float(-np.log2(normalize_reward(r, *session.reward_range)))
            if trace is not None:
                trace.append({"episode": i, "t": t, "reward": r, "delta_norm": n,
                              "latency_ms": latencies[-1], "condition": float(cond), "action": int(a)})
            t += 1
        truncated += int(bool(info.get("truncated", False)))
        returns.append(total)
    clean = run_clean(session.env, session.policy, episodes, seed)
    attacked = float(np.mean(returns))
    return AttackReport(
        env_id=session.env_id, policy_id=session.policy_id, episodes=episodes,
        attacked_mean=attacked, attacked_std=float(np.std(returns)), clean_mean=clean.mean,
        reduction=1.0 - attacked / clean.mean if clean.mean > 0 else None,
        mean_delta_norm=float(np.mean(norms)), max_delta_norm=float(np.max(norms)),
        mean_latency_ms=float(np.mean(latencies)), forward_passes=gen.forward_passes - passes0,
        total_steps=len(norms), truncated_episodes=truncated, epsilon=float(session.epsilon),
        condition=session.condition, mode=session.mode, attacked_returns=returns,
        clean_returns=clean.returns, config_hash=config_hash,
    )


def dataset_rtg_target(dataset) -> float:
    """Largest initial returns-to-go in the log: the most damaging outcome seen offline."""
    return float(max(tr.rtg[0] for tr in dataset.trajectories))


def write_report(report: AttackReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path


def write_trace(rows: list, path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["episode", "t", "reward", "delta_norm", "latency_ms", "condition", "action"]
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


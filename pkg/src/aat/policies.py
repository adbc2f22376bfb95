"""Toy target and substitute policies, and the black-box capability wall."""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .envs import episode_seed
from .errors import CapabilityError, ConfigError, TrainingFailure

ALGORITHMS = ("q_learning", "policy_gradient")


class ToyPolicy(nn.Module):
    """Two affine layers (width 64) from pixels to action logits.

    Under ``q_learning`` the network output is read as Q-values and the
    action distribution is ``softmax(beta * Q)``.
    """

    differentiable = True

    def __init__(self, obs_shape, n_actions: int, hidden: int = 64, algorithm: str = "q_learning",
                 beta: float | None = None):
        super().__init__()
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}")
        self.obs_shape = tuple(obs_shape)
        self.obs_dim = int(np.prod(self.obs_shape))
        self.n_actions = n_actions
        self.algorithm = algorithm
        self.beta = float(beta if beta is not None else (2.0 if algorithm == "q_learning" else 1.0))
        self.hidden = hidden
        self.net = nn.Sequential(nn.Linear(self.obs_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_actions))

    def raw(self, obs: torch.Tensor) -> torch.Tensor:
        lead = obs.shape[: obs.dim() - len(self.obs_shape)]
        return self.net(obs.reshape(*lead, self.obs_dim))

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.beta * self.raw(obs)

    def probs(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(obs), dim=-1)

    @torch.no_grad()
    def act(self, obs) -> np.ndarray:
        x = torch.as_tensor(np.asarray(obs), dtype=next(self.parameters()).dtype)
        return self.raw(x).argmax(dim=-1).numpy()

    def spec(self) -> dict:
        return {"obs_shape": list(self.obs_shape), "n_actions": self.n_actions, "hidden": self.hidden,
                "algorithm": self.algorithm, "beta": self.beta}


class BlackBoxPolicy:
    """Action-query-only view of a policy.

    Any attempt to reach parameters, logits or gradients raises
    ``CapabilityError`` and is counted in ``gradient_queries``.
    """

    differentiable = False

    def __init__(self, policy):
        self._policy = policy
        self.gradient_queries = 0
        self.action_queries = 0
        self.obs_shape = getattr(policy, "obs_shape", None)
        self.n_actions = getattr(policy, "n_actions", None)

    def act(self, obs) -> np.ndarray:
        self.action_queries += 1
        with torch.no_grad():
            return self._policy.act(obs)

    def _deny(self, what):
        self.gradient_queries += 1
        raise CapabilityError(f"black-box target: {what} access is not allowed")

    @property
    def module(self):
        self._deny("module")

    def parameters(self):
        self._deny("parameter")

    def probs(self, obs):
        self._deny("probability")

    def __call__(self, obs):
        self._deny("logit")


def require_differentiable(policy) -> nn.Module:
    """The policy as a differentiable module, or ``CapabilityError``."""
    if isinstance(policy, nn.Module) and getattr(policy, "differentiable", False):
        return policy
    if isinstance(policy, BlackBoxPolicy):
        return policy.module
    raise CapabilityError(f"{type(policy).__name__} does not expose gradients")


# ---------------------------------------------------------------- training

def rollout_returns(env, policy, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of greedy rollouts, episode i seeded by ``episode_seed(seed, i)``."""
    out = []
    for i in range(episodes):
        e = copy.deepcopy(env)
        obs, done, total = e.reset(seed=episode_seed(seed, i)), False, 0.0
        while not done:
            obs, r, done, _ = e.step(int(policy.act(obs[None])[0]))
            total += r
        out.append(total)
    return np.asarray(out)


def oracle_returns(env, episodes: int, seed: int) -> np.ndarray:
    out = []
    for i in range(episodes):
        e = copy.deepcopy(env)
        e.reset(seed=episode_seed(seed, i))
        out.append(e.oracle_return(e.agent))
    return np.asarray(out)


class _VecEnv:
    def __init__(self, env, n, rng):
        self.envs = [copy.deepcopy(env) for _ in range(n)]
        self.rng = rng
        self.obs = np.stack([e.reset(seed=int(rng.integers(2**31))) for e in self.envs])

    def step(self, actions):
        nxt, rew, done = [], [], []
        for k, e in enumerate(self.envs):
            o, r, d, _ = e.step(actions[k])
            rew.append(r)
            done.append(d)
            nxt.append(o)
            if d:
                o = e.reset(seed=int(self.rng.integers(2**31)))
            self.obs[k] = o
        return np.stack(nxt), np.asarray(rew, dtype=np.float32), np.asarray(done)


def _train_q_learning(env, policy, episodes, rng, gamma=0.95, lr=1e-3, n_envs=16, batch=128,
                      refresh=100):
    vec = _VecEnv(env, n_envs, rng)
    horizon = env.horizon
    iters = max(1, episodes * horizon // n_envs)
    cap = 20000
    obs_buf = np.zeros((cap, *env.obs_shape), np.float32)
    nxt_buf = np.zeros_like(obs_buf)
    act_buf = np.zeros(cap, np.int64)
    rew_buf = np.zeros(cap, np.float32)
    size, ptr = 0, 0
    target = copy.deepcopy(policy)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    for it in range(iters):
        eps = max(0.05, 1.0 - it / (0.5 * iters))
        greedy = policy.act(vec.obs)
        explore = rng.random(n_envs) < eps
        actions = np.where(explore, rng.integers(env.n_actions, size=n_envs), greedy)
        obs = vec.obs.copy()
        nxt, rew, _ = vec.step(actions)
        for k in range(n_envs):
            obs_buf[ptr], nxt_buf[ptr], act_buf[ptr], rew_buf[ptr] = obs[k], nxt[k], actions[k], rew[k]
            ptr = (ptr + 1) % cap
            size = min(size + 1, cap)
        if size < batch:
            continue
        idx = rng.integers(size, size=batch)
        s = torch.from_numpy(obs_buf[idx])
        with torch.no_grad():
            # Time-limit cutoffs are not true terminals, so always bootstrap.
            y = torch.from_numpy(rew_buf[idx]) + gamma * target.raw(torch.from_numpy(nxt_buf[idx])).max(-1).values
        q = policy.raw(s).gather(1, torch.from_numpy(act_buf[idx])[:, None]).squeeze(1)
        loss = F.smooth_l1_loss(q, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % refresh == 0:
            target.load_state_dict(policy.state_dict())


def _train_policy_gradient(env, policy, episodes, rng, gamma=0.95, lr=3e-3, n_envs=32, ent=0.01):
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    for _ in range(max(1, episodes // n_envs)):
        envs = [copy.deepcopy(env) for _ in range(n_envs)]
        obs = np.stack([e.reset(seed=int(rng.integers(2**31))) for e in envs])
        logps, ents, rews = [], [], []
        for _ in range(env.horizon):
            dist = torch.distributions.Categorical(logits=policy(torch.from_numpy(obs)))
            a = torch.multinomial(dist.probs, 1, generator=gen).squeeze(1)
            logps.append(dist.log_prob(a))
            ents.append(dist.entropy())
            step = [e.step(int(ai)) for e, ai in zip(envs, a)]
            obs = np.stack([s[0] for s in step])
            rews.append([s[1] for s in step])
        R = np.asarray(rews, dtype=np.float32)
        G = np.zeros_like(R)
        run = np.zeros(n_envs, np.float32)
        for t in reversed(range(len(R))):
            run = R[t] + gamma * run
            G[t] = run
        adv = (G - G.mean(1, keepdims=True)) / (G.std() + 1e-6)
        loss = -(torch.stack(logps) * torch.from_numpy(adv)).mean() - ent * torch.stack(ents).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()


def train_toy_policy(env, algorithm: str, episodes: int, seed: int, eval_episodes: int = 20,
                     threshold: float = 0.9, hidden: int = 64) -> ToyPolicy:
    """Train until done, then require ``threshold`` times the shortest-path return.

    Raises ``TrainingFailure`` (carrying the evaluation report) when the bar is
    missed; callers retry with a fresh seed.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    policy = ToyPolicy(env.obs_shape, env.n_actions, hidden=hidden, algorithm=algorithm)
    if algorithm == "q_learning":
        _train_q_learning(env, policy, episodes, rng)
    else:
        _train_policy_gradient(env, policy, episodes, rng)
    policy.eval()
    report = evaluation_report(env, policy, eval_episodes, seed=seed + 1)
    report.update({"algorithm": algorithm, "seed": seed, "episodes": episodes, "threshold": threshold})
    if not report["mean_return"] >= threshold * report["oracle_mean_return"]:
        raise TrainingFailure(f"{algorithm} policy reached {report['mean_return']:.3f} "
                              f"< {threshold} x oracle {report['oracle_mean_return']:.3f}", report)
    policy.report = report
    return policy


def evaluation_report(env, policy, episodes: int, seed: int) -> dict:
    returns = rollout_returns(env, policy, episodes, seed)
    report = {"mean_return": float(returns.mean()), "returns": returns.tolist()}
    if hasattr(env, "oracle_return"):
        report["oracle_mean_return"] = float(oracle_returns(env, episodes, seed).mean())
    else:
        report["oracle_mean_return"] = -math.inf
    return report


def train_with_retries(env, algorithm: str, episodes: int, seed: int, attempts: int = 3, **kwargs):
    failures = []
    for k in range(attempts):
        try:
            return train_toy_policy(env, algorithm, episodes, seed + 1000 * k, **kwargs)
        except TrainingFailure as exc:
            failures.append(exc.report)
    raise TrainingFailure(f"{algorithm}: {attempts} attempts below threshold", {"attempts": failures})

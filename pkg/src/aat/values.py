"""Expectile-trained Q(s, a, delta) and V(s, a) heads and the bounded advantage transform."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, DomainError

ADVANTAGE_TRANSFORMS = ("weighted", "ordinary")


def expectile_loss(nu, sigma: float):
    """``|sigma - 1(nu < 0)| * nu**2`` for floats, arrays or tensors."""
    if not 0.0 < sigma < 1.0:
        raise DomainError(f"expectile sigma must lie in (0, 1), got {sigma}")
    if isinstance(nu, torch.Tensor):
        w = torch.where(nu < 0, 1.0 - sigma, sigma).to(nu.dtype)
        return w * nu * nu
    nu = np.asarray(nu, dtype=np.float64)
    out = np.where(nu < 0, 1.0 - sigma, sigma) * nu * nu
    return float(out) if out.ndim == 0 else out


def expectile(samples, sigma: float) -> float:
    """Exact minimizer of ``sum_i L_sigma(q_i - v)`` over scalar v.

    The first-order condition is piecewise linear in v, so sort the samples
    and solve in closed form on the segment where the sign pattern holds.
    """
    if not 0.0 < sigma < 1.0:
        raise DomainError(f"expectile sigma must lie in (0, 1), got {sigma}")
    q = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if q.size == 0:
        raise DataError("no samples")
    n = q.size
    prefix = np.concatenate([[0.0], np.cumsum(q)])
    # k samples lie below v: (1-sigma) weights on q[:k], sigma on q[k:].
    # the closed form can overshoot its segment by a few ulps (e.g. identical samples)
    slack = 8 * np.finfo(np.float64).eps * float(np.abs(q).max())
    for k in range(n + 1):
        w_lo, w_hi = (1 - sigma) * k, sigma * (n - k)
        v = ((1 - sigma) * prefix[k] + sigma * (prefix[n] - prefix[k])) / (w_lo + w_hi)
        lo = q[k - 1] if k > 0 else -np.inf
        hi = q[k] if k < n else np.inf
        if lo - slack <= v <= hi + slack:
            return float(min(max(v, lo), hi))
    raise AssertionError("no consistent segment")


def weighted_advantage(A, lam: float):
    """``A / (1 + lam*|A|)``: sign-preserving, monotone, bounded by 1/lam."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if isinstance(A, torch.Tensor):
        return A / (1.0 + lam * A.abs())
    A = np.asarray(A, dtype=np.float64)
    out = A / (1.0 + lam * np.abs(A))
    return float(out) if out.ndim == 0 else out


def transform_advantage(A, lam: float, transform: str = "weighted"):
    if transform == "weighted":
        return weighted_advantage(A, lam)
    if transform == "ordinary":
        return A
    raise ConfigError(f"unknown advantage transform {transform!r}")


def attacker_reward(r):
    """Per-step attacker reward ``log_{1/2} r``: large when the victim earns little."""
    return -np.log2(np.asarray(r, dtype=np.float64))


def _mlp(n_in, hidden):
    net = nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                        nn.Linear(hidden, 1))
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


class ValueHeads(nn.Module):
    """Q(s, a, delta) and V(s, a); the last layers start at zero so A = 0 before training."""

    def __init__(self, obs_shape, n_actions: int, hidden: int = 128, gamma: float = 0.99,
                 sigma: float = 0.9, lam: float = 0.5, refresh: int = 100, continuous: bool = False):
        super().__init__()
        if not 0 < gamma < 1:
            raise DomainError("gamma must lie in (0, 1)")
        if not 0 < sigma < 1:
            raise DomainError("sigma must lie in (0, 1)")
        if not lam > 0:
            raise DomainError("lambda must be positive")
        self.obs_shape = tuple(obs_shape)
        self.obs_dim = int(np.prod(self.obs_shape))
        self.n_actions = n_actions
        self.continuous = continuous
        self.gamma, self.sigma, self.lam, self.refresh = gamma, sigma, lam, refresh
        self.hidden = hidden
        self.q_net = _mlp(2 * self.obs_dim + n_actions, hidden)
        self.v_net = _mlp(self.obs_dim + n_actions, hidden)
        self.q_target = copy.deepcopy(self.q_net).requires_grad_(False)
        self.step_count = 0

    def _flat(self, x):
        return x.reshape(x.shape[0], self.obs_dim)

    def _act(self, a):
        if self.continuous:
            return a.reshape(a.shape[0], self.n_actions).to(self.q_net[0].weight.dtype)
        return F.one_hot(a.long(), self.n_actions).to(self.q_net[0].weight.dtype)

    def q_value(self, s, a, delta, target: bool = False):
        net = self.q_target if target else self.q_net
        return net(torch.cat([self._flat(s), self._flat(delta), self._act(a)], dim=-1)).squeeze(-1)

    def v_value(self, s, a):
        return self.v_net(torch.cat([self._flat(s), self._act(a)], dim=-1)).squeeze(-1)

    def advantage(self, s, a, delta):
        return self.q_value(s, a, delta) - self.v_value(s, a)

    def sync_target(self):
        self.q_target.load_state_dict(self.q_net.state_dict())

    def spec(self) -> dict:
        return {"obs_shape": list(self.obs_shape), "n_actions": self.n_actions, "hidden": self.hidden,
                "gamma": self.gamma, "sigma": self.sigma, "lambda": self.lam, "refresh": self.refresh,
                "continuous": self.continuous, "step_count": self.step_count}


@dataclass
class Transitions:
    """Flat step arrays; ``next_index[i]`` points at the row holding s', a' (-1 when done)."""

    states: torch.Tensor
    actions: torch.Tensor
    deltas: torch.Tensor
    rewards: torch.Tensor  # already in the reward form used by the TD target
    next_index: torch.Tensor
    rows: torch.Tensor  # rows that are training samples
    truncated_count: int = 0

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_dataset(cls, dataset, reward_transform: str = "attacker") -> "Transitions":
        if dataset.n_steps == 0:
            raise DataError("dataset is empty")
        flat = dataset.flat()
        if reward_transform == "attacker":
            rewards = attacker_reward(flat["rewards"])
        elif reward_transform == "raw":
            rewards = flat["rewards"]
        else:
            raise ConfigError(f"unknown reward transform {reward_transform!r}")
        return cls(
            torch.from_numpy(np.ascontiguousarray(flat["states"], dtype=np.float32)),
            torch.from_numpy(np.asarray(flat["actions"])),
            torch.from_numpy(np.ascontiguousarray(flat["deltas"], dtype=np.float32)),
            torch.from_numpy(np.asarray(rewards, dtype=np.float32)),
            torch.from_numpy(flat["next_index"]),
            torch.arange(len(flat["rewards"])),
            int(flat["truncated"].sum()),
        )

    @classmethod
    def from_tuples(cls, s, a, delta, r, s_next=None, a_next=None, dtype=torch.float64) -> "Transitions":
        """Single transitions; ``s_next=None`` marks a terminal step."""
        s = torch.as_tensor(np.asarray(s), dtype=dtype)
        n = len(s)
        a = torch.as_tensor(np.asarray(a))
        delta = torch.as_tensor(np.asarray(delta), dtype=dtype)
        r = torch.as_tensor(np.asarray(r), dtype=dtype)
        if s_next is None:
            return cls(s, a, delta, r, torch.full((n,), -1), torch.arange(n))
        s2 = torch.as_tensor(np.asarray(s_next), dtype=dtype)
        a2 = torch.as_tensor(np.asarray(a_next))
        return cls(torch.cat([s, s2]), torch.cat([a, a2]), torch.cat([delta, torch.zeros_like(s2)]),
                   torch.cat([r, torch.zeros(n, dtype=dtype)]),
                   torch.cat([torch.arange(n, 2 * n), torch.full((n,), -1)]), torch.arange(n))

    def batch(self, idx):
        nxt = self.next_index[idx]
        done = nxt < 0
        safe = torch.where(done, idx, nxt)
        return (self.states[idx], self.actions[idx], self.deltas[idx], self.rewards[idx],
                self.states[safe], self.actions[safe], done)


def q_batch_loss(heads: ValueHeads, batch) -> torch.Tensor:
    s, a, d, r, s2, a2, done = batch
    with torch.no_grad():
        boot = heads.v_value(s2, a2)
        y = r.to(boot.dtype) + heads.gamma * (~done).to(boot.dtype) * boot
    return F.mse_loss(heads.q_value(s, a, d), y)


def v_batch_loss(heads: ValueHeads, batch, q_fn=None) -> torch.Tensor:
    s, a, d = batch[:3]
    with torch.no_grad():
        q = q_fn(s, a, d) if q_fn is not None else heads.q_value(s, a, d, target=True)
    return expectile_loss(q - heads.v_value(s, a), heads.sigma).mean()


def _sample(data: Transitions, batch_size, gen):
    if len(data) <= batch_size:
        return data.rows
    return data.rows[torch.randint(len(data), (batch_size,), generator=gen)]


def _check(data):
    if data is None or len(data) == 0:
        raise DataError("no transitions to train on")


def train_q(data: Transitions, heads: ValueHeads, steps: int, lr: float, batch_size: int = 128,
            seed: int = 0) -> list:
    _check(data)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(heads.q_net.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        loss = q_batch_loss(heads, data.batch(_sample(data, batch_size, gen)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def train_v(data: Transitions, heads: ValueHeads, steps: int, lr: float, batch_size: int = 128,
            seed: int = 0, q_fn=None) -> list:
    _check(data)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(heads.v_net.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        loss = v_batch_loss(heads, data.batch(_sample(data, batch_size, gen)), q_fn)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def train_values(data: Transitions, heads: ValueHeads, steps: int, lr: float, batch_size: int = 128,
                 seed: int = 0) -> dict:
    """Alternate Q and V updates; the frozen Q copy is refreshed every ``heads.refresh`` steps."""
    _check(data)
    gen = torch.Generator().manual_seed(seed)
    q_opt = torch.optim.Adam(heads.q_net.parameters(), lr=lr)
    v_opt = torch.optim.Adam(heads.v_net.parameters(), lr=lr)
    history = {"q_loss": [], "v_loss": []}
    for _ in range(steps):
        batch = data.batch(_sample(data, batch_size, gen))
        q_loss = q_batch_loss(heads, batch)
        q_opt.zero_grad()
        q_loss.backward()
        q_opt.step()
        v_loss = v_batch_loss(heads, batch)
        v_opt.zero_grad()
        v_loss.backward()
        v_opt.step()
        heads.step_count += 1
        if heads.step_count % heads.refresh == 0:
            heads.sync_target()
        history["q_loss"].append(q_loss.item())
        history["v_loss"].append(v_loss.item())
    history["truncated_count"] = data.truncated_count
    return history


@torch.no_grad()
def advantage(s, a, delta, heads: ValueHeads) -> np.ndarray:
    dtype = heads.q_net[0].weight.dtype
    s = torch.as_tensor(np.asarray(s), dtype=dtype)
    delta = torch.as_tensor(np.asarray(delta), dtype=dtype)
    a = torch.as_tensor(np.asarray(a))
    return heads.advantage(s, a, delta).double().numpy()


def annotate_dataset(dataset, heads: ValueHeads, transform: str = "weighted", chunk: int = 4096):
    """Copy of ``dataset`` with the (weighted) advantage filled on every step."""
    from .trajectory import Dataset

    out = []
    for tr in dataset.trajectories:
        A = np.concatenate([advantage(tr.states[i:i + chunk], tr.actions[i:i + chunk],
                                      tr.deltas[i:i + chunk], heads)
                            for i in range(0, len(tr), chunk)])
        out.append(tr.with_wadv(transform_advantage(A, heads.lam, transform)))
    return Dataset(dataset.manifest, out)

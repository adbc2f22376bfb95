"""Desk environments: a tabular chain MDP with exact evaluation, and a pixel gridworld."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ShapeError


def episode_seed(seed: int, episode: int) -> int:
    """Independent per-episode seed; shared by collection, clean and attacked rollouts."""
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1)[0])


class ChainMDP:
    """Tabular MDP with ``P[s, a, s']`` and rewards ``R[s, a]`` in (0, 1]."""

    def __init__(self, P, R, gamma: float, horizon: int | None = None):
        P = np.asarray(P, dtype=np.float64)
        R = np.asarray(R, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ShapeError(f"inconsistent shapes P{P.shape} R{R.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise DomainError("transition rows must be probability distributions")
        if np.any(R <= 0) or np.any(R > 1):
            raise DomainError("rewards must lie in (0, 1]")
        if not 0.0 <= gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
        self.P, self.R, self.gamma, self.horizon = P, R, float(gamma), horizon

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def chain(cls, n_states: int = 6, n_actions: int = 2, slip: float = 0.1, gamma: float = 0.9,
              horizon: int | None = None) -> "ChainMDP":
        """Action 0 steps left, action 1 steps right, others stay; ``slip`` reverses the move."""
        P = np.zeros((n_states, n_actions, n_states))
        for s in range(n_states):
            left, right = max(s - 1, 0), min(s + 1, n_states - 1)
            for a in range(n_actions):
                if a == 0:
                    P[s, a, left] += 1 - slip
                    P[s, a, right] += slip
                elif a == 1:
                    P[s, a, right] += 1 - slip
                    P[s, a, left] += slip
                else:
                    P[s, a, s] = 1.0
        R = np.full((n_states, n_actions), 0.1)
        R[-1, :] = 1.0
        return cls(P, R, gamma, horizon)

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: int, gamma: float) -> "ChainMDP":
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        P /= P.sum(-1, keepdims=True)
        R = rng.uniform(0.05, 1.0, size=(n_states, n_actions))
        return cls(P, R, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def policy_matrices(mdp: ChainMDP, policy):
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions) or np.any(pi < 0) or \
            np.max(np.abs(pi.sum(-1) - 1)) > 1e-9:
        raise DomainError("policy must be a row-stochastic [n_states x n_actions] array")
    return np.einsum("sa,sat->st", pi, mdp.P), np.einsum("sa,sa->s", pi, mdp.R)


def dp_value(mdp: ChainMDP, policy) -> np.ndarray:
    """Exact policy evaluation: linear solve, or backward induction with a horizon."""
    P_pi, R_pi = policy_matrices(mdp, policy)
    if mdp.horizon is not None:
        V = np.zeros(mdp.n_states)
        for _ in range(mdp.horizon):
            V = R_pi + mdp.gamma * P_pi @ V
        return V
    if mdp.gamma >= 1:
        raise DomainError("gamma >= 1 needs a finite horizon")
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi)


def bellman_residual(mdp: ChainMDP, policy, V) -> float:
    P_pi, R_pi = policy_matrices(mdp, policy)
    return float(np.max(np.abs(R_pi + mdp.gamma * P_pi @ V - V)))


def q_values(mdp: ChainMDP, V) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ V


class ChainEnv:
    """Episode interface over a ChainMDP with one-hot observations."""

    def __init__(self, mdp: ChainMDP | None = None, horizon: int = 40, start: int | None = None):
        self.mdp = mdp or ChainMDP.chain()
        self.horizon = horizon
        self.start = start
        self.obs_shape = (self.mdp.n_states,)
        self.n_actions = self.mdp.n_actions
        self._rng = np.random.default_rng(0)
        self.state, self.t = 0, 0

    def _obs(self):
        o = np.zeros(self.obs_shape, dtype=np.float32)
        o[self.state] = 1.0
        return o

    def reset(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self.state = self.start if self.start is not None else int(self._rng.integers(self.mdp.n_states))
        self.t = 0
        return self._obs()

    def step(self, action):
        a = int(action)
        r = float(self.mdp.R[self.state, a])
        self.state = int(self._rng.choice(self.mdp.n_states, p=self.mdp.P[self.state, a]))
        self.t += 1
        done = self.t >= self.horizon
        return self._obs(), r, done, {"truncated": done}


# ---------------------------------------------------------------- gridworld

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}
AGENT_PIXEL, GOAL_PIXEL, WALL_PIXEL = 0.75, 0.5, 0.25

# A snake corridor so every cell has a single shortest-path action.
DEFAULT_ROWS = (
    ".......",
    "######.",
    ".......",
    "G######",
)


@dataclass(frozen=True)
class GridLayout:
    rows: tuple

    def __post_init__(self):
        if not self.rows or len({len(r) for r in self.rows}) != 1:
            raise ConfigError("layout rows must be non-empty and equal length")
        if sum(r.count("G") for r in self.rows) != 1:
            raise ConfigError("layout needs exactly one goal cell 'G'")
        if set("".join(self.rows)) - set(".#G"):
            raise ConfigError("layout cells must be '.', '#' or 'G'")

    @property
    def cols(self) -> int:
        return len(self.rows[0])

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def goal(self) -> tuple:
        for y, row in enumerate(self.rows):
            if "G" in row:
                return (row.index("G"), y)
        raise AssertionError

    def is_open(self, x, y) -> bool:
        return 0 <= x < self.cols and 0 <= y < self.n_rows and self.rows[y][x] != "#"

    def open_cells(self) -> list:
        return [(x, y) for y in range(self.n_rows) for x in range(self.cols) if self.is_open(x, y)]

    def start_cells(self) -> list:
        return [c for c in self.open_cells() if c != self.goal]

    def move(self, cell, action) -> tuple:
        dx, dy = MOVES[int(action)]
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self.is_open(*nxt) else cell


def load_layout(path) -> GridLayout:
    """Layout file: JSON ``{"rows": ["....", ...]}`` using '.', '#' and 'G'."""
    data = json.loads(Path(path).read_text())
    return GridLayout(tuple(data["rows"]))


def bfs_distances(layout: GridLayout) -> dict:
    """Shortest number of moves from every open cell to the goal."""
    dist = {layout.goal: 0}
    queue = deque([layout.goal])
    while queue:
        cell = queue.popleft()
        for dx, dy in MOVES.values():
            nb = (cell[0] + dx, cell[1] + dy)
            if layout.is_open(*nb) and nb not in dist:
                dist[nb] = dist[cell] + 1
                queue.append(nb)
    return dist


class GridPixels:
    """7x4-cell gridworld rendered to 28x28 grayscale.

    Each step pays 0.1, or 1.0 once the agent stands on the goal. The goal is
    absorbing and episodes always last ``horizon`` steps, so reaching it early
    is what earns return.
    """

    def __init__(self, layout: GridLayout | None = None, horizon: int = 40, size=(28, 28),
                 step_reward: float = 0.1, goal_reward: float = 1.0, start=None):
        self.layout = layout or GridLayout(DEFAULT_ROWS)
        H, W = size
        if H % self.layout.n_rows or W % self.layout.cols:
            raise ConfigError(f"{H}x{W} pixels do not tile a {self.layout.cols}x{self.layout.n_rows} grid")
        self.cell_h, self.cell_w = H // self.layout.n_rows, W // self.layout.cols
        self.size = (H, W)
        self.horizon = horizon
        self.step_reward, self.goal_reward = step_reward, goal_reward
        self.start = start
        self.obs_shape = (H, W, 1)
        self.n_actions = 4
        self._base = self._render_background()
        self._cache = {}
        self.agent, self.t = self.layout.start_cells()[0], 0

    def _paint(self, img, cell, value):
        x, y = cell
        img[y * self.cell_h:(y + 1) * self.cell_h, x * self.cell_w:(x + 1) * self.cell_w, 0] = value

    def _render_background(self):
        img = np.zeros(self.obs_shape, dtype=np.float32)
        for y, row in enumerate(self.layout.rows):
            for x, c in enumerate(row):
                if c == "#":
                    self._paint(img, (x, y), WALL_PIXEL)
                elif c == "G":
                    self._paint(img, (x, y), GOAL_PIXEL)
        return img

    def render(self, agent=None) -> np.ndarray:
        agent = self.agent if agent is None else tuple(agent)
        if agent not in self._cache:
            img = self._base.copy()
            self._paint(img, agent, AGENT_PIXEL)
            self._cache[agent] = img
        return self._cache[agent].copy()

    def reset(self, seed: int | None = None):
        if self.start is not None:
            self.agent = tuple(self.start)
        else:
            starts = self.layout.start_cells()
            self.agent = starts[int(np.random.default_rng(seed).integers(len(starts)))]
        self.t = 0
        return self.render()

    def step(self, action):
        if self.agent != self.layout.goal:
            self.agent = self.layout.move(self.agent, action)
        r = self.goal_reward if self.agent == self.layout.goal else self.step_reward
        self.t += 1
        done = self.t >= self.horizon
        return self.render(), r, done, {"truncated": done}

    def oracle_return(self, start) -> float:
        """Return of the shortest path from ``start``: d-1 step rewards then goal rewards."""
        d = bfs_distances(self.layout)[tuple(start)]
        if d == 0:
            return self.goal_reward * self.horizon
        d_eff = min(d, self.horizon)
        goal_steps = self.horizon - d + 1 if d <= self.horizon else 0
        return self.step_reward * (d_eff - 1 if goal_steps else d_eff) + self.goal_reward * goal_steps

    def optimal_actions(self, cell) -> list:
        dist = bfs_distances(self.layout)
        here = dist[tuple(cell)]
        return [a for a in MOVES if dist.get(self.layout.move(cell, a), 10**9) == here - 1]


ENV_IDS = ("chain", "grid")


def make_env(env_id: str, layout_path=None, **kwargs):
    if env_id == "grid":
        layout = load_layout(layout_path) if layout_path else None
        return GridPixels(layout=layout, **kwargs)
    if env_id == "chain":
        return ChainEnv(**kwargs)
    raise ConfigError(f"unknown environment {env_id!r}; known: {', '.join(ENV_IDS)}")

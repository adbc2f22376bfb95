"""Exact tabular checks of the performance-difference identity and the weighted-advantage bound.

Naming: ``eps_est`` bounds the advantage estimation error and ``delta_gap``
is the bound constant of the improvement theorem. Neither is related to the
perturbation budget or to perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import ChainMDP, dp_value, policy_matrices, q_values, random_policy
from .errors import DomainError
from .values import weighted_advantage


def advantage_table(mdp: ChainMDP, policy) -> np.ndarray:
    V = dp_value(mdp, policy)
    return q_values(mdp, V) - V[:, None]


def discounted_occupancy(mdp: ChainMDP, policy) -> np.ndarray:
    """``(I - gamma P_pi)^{-1}``: row s holds expected discounted visits starting from s."""
    if mdp.gamma >= 1:
        raise DomainError("occupancy needs gamma < 1")
    P_pi, _ = policy_matrices(mdp, policy)
    return np.linalg.inv(np.eye(mdp.n_states) - mdp.gamma * P_pi)


def discounted_sum(mdp: ChainMDP, policy, table) -> np.ndarray:
    """``E_{tau ~ pi}[sum_t gamma^t table(s_t, a_t)]`` for every start state."""
    per_state = np.einsum("sa,sa->s", np.asarray(policy, dtype=np.float64), table)
    return discounted_occupancy(mdp, policy) @ per_state


def check_performance_difference(mdp: ChainMDP, pi, pi_prime) -> np.ndarray:
    """``|V^pi - V^pi' - E_pi sum_t gamma^t A^pi'(s_t, a_t)|`` per start state."""
    lhs = dp_value(mdp, pi) - dp_value(mdp, pi_prime)
    rhs = discounted_sum(mdp, pi, advantage_table(mdp, pi_prime))
    return np.abs(lhs - rhs)


@dataclass
class TheoremInstance:
    mdp: ChainMDP
    pi: np.ndarray
    beta: np.ndarray
    rho: np.ndarray  # start distribution
    A: np.ndarray
    A_hat: np.ndarray
    A_tilde: np.ndarray
    eps_est: float
    lam: float
    quantities: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"P": self.mdp.P.tolist(), "R": self.mdp.R.tolist(), "gamma": self.mdp.gamma,
                "pi": self.pi.tolist(), "beta": self.beta.tolist(), "rho": self.rho.tolist(),
                "A": self.A.tolist(), "A_hat": self.A_hat.tolist(), "A_tilde": self.A_tilde.tolist(),
                "eps_est": self.eps_est, "lam": self.lam, "quantities": self.quantities}


def _compute(inst: TheoremInstance) -> TheoremInstance:
    g = inst.mdp.gamma
    e_hat = inst.rho @ discounted_sum(inst.mdp, inst.pi, inst.A_hat)
    e_tilde = inst.rho @ discounted_sum(inst.mdp, inst.pi, inst.A_tilde)
    eps_new = float(np.max(np.abs(inst.A_tilde - inst.A)))
    inst.quantities = {
        "eps_est": inst.eps_est,
        "eps_new": eps_new,
        "delta_gap": max(0.0, float(e_hat - e_tilde)),
        "delta_c": float(e_hat - inst.eps_est / (1 - g)),
        "delta_c_new": float(e_tilde - eps_new / (1 - g)),
    }
    return inst


def make_theorem_instance(mdp: ChainMDP, pi, beta, eps_est: float, lam: float, rng: np.random.Generator,
                          rho=None, noise=None) -> TheoremInstance:
    """Exact A^beta plus uniform noise in [-eps_est, eps_est], then the weighted map."""
    A = advantage_table(mdp, beta)
    if noise is None:
        noise = rng.uniform(-eps_est, eps_est, size=A.shape) if eps_est > 0 else np.zeros_like(A)
    A_hat = A + noise
    rho = np.full(mdp.n_states, 1.0 / mdp.n_states) if rho is None else np.asarray(rho)
    inst = TheoremInstance(mdp, np.asarray(pi), np.asarray(beta), rho, A, A_hat,
                           weighted_advantage(A_hat, lam), float(eps_est), float(lam))
    return _compute(inst)


def with_lambda(inst: TheoremInstance, lam: float) -> TheoremInstance:
    out = TheoremInstance(inst.mdp, inst.pi, inst.beta, inst.rho, inst.A, inst.A_hat,
                          weighted_advantage(inst.A_hat, lam), inst.eps_est, float(lam))
    return _compute(out)


def conditions_hold(inst: TheoremInstance) -> bool:
    q = inst.quantities
    g = inst.mdp.gamma
    return q["eps_new"] <= q["eps_est"] and q["delta_gap"] <= (q["eps_est"] - q["eps_new"]) / (1 - g)


def check_theorem1(inst: TheoremInstance, tol: float = 1e-9) -> dict:
    """Gate on both conditions; the bound is only asserted when they hold."""
    q = inst.quantities
    gated = conditions_hold(inst)
    return {"conditions_hold": gated,
            "bound_holds": bool(q["delta_c_new"] >= q["delta_c"] - tol) if gated else None,
            "map_order": weighted_map_order(inst), **q}


def weighted_map_order(inst: TheoremInstance) -> bool:
    """The weighted estimate never overshoots the raw one on its own side of zero."""
    pos = inst.A_hat >= 0
    return bool(np.all(inst.A_tilde[pos] <= inst.A_hat[pos]) and np.all(inst.A_tilde[~pos] >= inst.A_hat[~pos]))


def enforce_conditions(inst: TheoremInstance, max_halvings: int = 60) -> TheoremInstance:
    """Halve lambda until both conditions hold (lambda -> 0 recovers the raw estimate)."""
    for _ in range(max_halvings):
        if conditions_hold(inst):
            return inst
        inst = with_lambda(inst, inst.lam / 2)
    return inst


def random_mdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 3,
               gamma_range=(0.0, 0.99)) -> ChainMDP:
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    return ChainMDP.random(rng, S, A, float(rng.uniform(*gamma_range)))


def random_theorem_instance(seed: int, enforce: bool = True) -> TheoremInstance:
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, gamma_range=(0.3, 0.95))
    pi = random_policy(rng, mdp.n_states, mdp.n_actions)
    beta = random_policy(rng, mdp.n_states, mdp.n_actions)
    inst = make_theorem_instance(mdp, pi, beta, float(rng.uniform(0.01, 0.5)),
                                 float(10 ** rng.uniform(-3, 0.5)), rng,
                                 rho=rng.dirichlet(np.ones(mdp.n_states)))
    return enforce_conditions(inst) if enforce else inst

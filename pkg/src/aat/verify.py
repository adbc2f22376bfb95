"""Verification suites behind ``aat verify``; each returns a JSON-ready report."""

from __future__ import annotations

import time

import numpy as np
import torch

from .envs import random_policy
from .errors import ConfigError
from .generator import GeneratorConfig, PerturbationGenerator, generator_losses, gradient_check
from .policies import ToyPolicy
from .sequence import EmbeddingConfig, MSCSAStack, ScaleConfig
from .theory import check_performance_difference, check_theorem1, random_mdp, random_theorem_instance
from .values import expectile, expectile_loss, weighted_advantage

SUITES = ("lemma1", "theorem1", "causality", "advantage", "gradients")


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out["runtime_s"] = time.perf_counter() - t0
        return out
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def lemma1_suite(n: int = 1000, seed: int = 0, tol: float = 1e-8) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mdp = random_mdp(rng)
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        pi2 = random_policy(rng, mdp.n_states, mdp.n_actions)
        worst = max(worst, float(check_performance_difference(mdp, pi, pi2).max()))
    return {"suite": "lemma1", "instances": n, "max_residual": worst, "tolerance": tol,
            "passed": worst <= tol}


@_timed
def theorem1_suite(n: int = 1000, seed: int = 0, enforce: bool = True, tol: float = 1e-9) -> dict:
    gated, violations, order_failures = 0, [], 0
    for k in range(n):
        inst = random_theorem_instance(seed * 1_000_003 + k, enforce=enforce)
        res = check_theorem1(inst, tol)
        order_failures += int(not res["map_order"])
        if res["conditions_hold"]:
            gated += 1
            if not res["bound_holds"]:
                violations.append(inst.to_dict())
    return {"suite": "theorem1", "instances": n, "gated": gated, "violations": len(violations),
            "counterexamples": violations, "map_order_failures": order_failures,
            "passed": not violations and order_failures == 0}


def causality_instance(rng: np.random.Generator) -> bool:
    """Mutate one token and require bit-identical outputs at every earlier position."""
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 32 // heads + 1))
    T = int(rng.integers(2, 26))
    K = int(rng.integers(1, 4))
    tps = int(rng.choice([1, 1, 3]))
    L = T * tps
    scales = ScaleConfig(K, int(rng.integers(1, 6)), "exponential", 2.0)
    torch.manual_seed(int(rng.integers(2**31)))
    model = MSCSAStack(EmbeddingConfig(d, heads, int(rng.integers(1, 3)), 0.0, L), scales, tps).double().eval()
    x = torch.randn(1, L, d, dtype=torch.float64)
    p = int(rng.integers(1, L))
    y = x.clone()
    y[0, p:] += torch.randn(L - p, d, dtype=torch.float64)
    with torch.no_grad():
        return bool(torch.equal(model(x)[0, :p], model(y)[0, :p]))


@_timed
def causality_suite(n: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    fails = sum(not causality_instance(rng) for _ in range(n))
    return {"suite": "causality", "instances": n, "failures": fails, "passed": fails == 0}


@_timed
def advantage_suite(n: int = 100_000, seed: int = 0) -> dict:
    """Weighted-advantage bounds and expectile identities."""
    rng = np.random.default_rng(seed)
    lam = 10 ** rng.uniform(-3, 3, size=n)
    A = rng.standard_normal(n) * 10 ** rng.uniform(-4, 4, size=n)
    At = weighted_advantage_vec(A, lam)
    bounded = bool(np.all(np.abs(At) < 1 / lam))
    small = np.abs(A) <= 0.1 / lam
    fidelity = bool(np.all(np.abs(At[small] - A[small]) <= 0.01 / lam[small]))
    mono = True
    for lam_k in (1e-3, 0.5, 1.0, 7.0, 1e3):
        a = np.sort(rng.standard_normal(10_000) * 10 ** rng.uniform(-3, 3, size=10_000))
        a = np.unique(a)
        mono &= bool(np.all(np.diff(weighted_advantage(a, lam_k)) > 0))
    limit = abs(weighted_advantage(1e6, 1.0) - 1.0)
    nu = rng.standard_normal(1000) * 10
    identity = bool(np.all(expectile_loss(nu, 0.5) == 0.5 * nu * nu))
    order_err, order_ok = 0.0, True
    for _ in range(50):
        q = rng.standard_normal(int(rng.integers(1, 20))) * 3
        prev = -np.inf
        for s in np.linspace(0.05, 0.95, 10):
            v = expectile(q, s)
            order_err = max(order_err, abs(v - golden_section_expectile(q, s)))
            order_ok &= v >= prev - 1e-12
            prev = v
    passed = bounded and fidelity and mono and limit <= 1e-5 and identity and order_ok and order_err <= 1e-6
    return {"suite": "advantage", "pairs": n, "bounded": bounded, "small_signal": fidelity,
            "monotone": mono, "limit_error": float(limit), "expectile_identity": identity,
            "expectile_monotone": bool(order_ok), "expectile_oracle_error": float(order_err),
            "passed": bool(passed)}


def weighted_advantage_vec(A, lam):
    """Elementwise over paired arrays (the scalar function takes one lambda)."""
    A = np.asarray(A, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ConfigError("lambda must be positive")
    return A / (1.0 + lam * np.abs(A))


def golden_section_expectile(q, sigma, tol=1e-12) -> float:
    """Independent scalar oracle: minimize sum L_sigma(q_i - v) by golden-section search."""
    q = np.asarray(q, dtype=np.float64)
    lo, hi = q.min() - 1.0, q.max() + 1.0
    f = lambda v: float(np.sum(expectile_loss(q - v, sigma)))  # noqa: E731
    phi = (np.sqrt(5) - 1) / 2
    c, d = hi - phi * (hi - lo), lo + phi * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - phi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + phi * (hi - lo)
            fd = f(d)
    return (lo + hi) / 2


def tiny_generator(seed: int = 0, d: int = 16, K: int = 2, T: int = 4, image=True):
    torch.manual_seed(seed)
    obs = (28, 28, 1) if image else (6,)
    cfg = GeneratorConfig(EmbeddingConfig(d, 2, 1, 0.0, T * (4 + 3 if image else 4)),
                          ScaleConfig(K, 2, "exponential", 2.0), context=T, epsilon=1.5)
    gen = PerturbationGenerator(obs, 4, cfg).double().eval()
    policy = ToyPolicy(obs, 4, hidden=8).double().eval()
    g = torch.Generator().manual_seed(seed + 1)
    batch = (torch.randn(2, T, generator=g, dtype=torch.float64),
             torch.rand(2, T, *obs, generator=g, dtype=torch.float64),
             0.05 * torch.randn(2, T, *obs, generator=g, dtype=torch.float64),
             torch.randint(0, 4, (2, T), generator=g))
    return gen, policy, batch


@_timed
def gradients_suite(seed: int = 0, tol: float = 1e-4) -> dict:
    torch.manual_seed(seed)
    stack = MSCSAStack(EmbeddingConfig(8, 2, 2, 0.0, 6), ScaleConfig(2, 2, "exponential", 2.0)).double().eval()
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    w = torch.randn(2, 6, 8, dtype=torch.float64)
    stack_err = gradient_check(lambda: (stack(x) * w).sum(), stack.parameters(), seed=seed)
    gen, policy, batch = tiny_generator(seed)
    gen_err = gradient_check(lambda: generator_losses(gen, policy, batch)[0], gen.parameters(), seed=seed)
    return {"suite": "gradients", "mscsa_max_rel_err": stack_err, "generator_max_rel_err": gen_err,
            "tolerance": tol, "passed": stack_err <= tol and gen_err <= tol}


RUNNERS = {"lemma1": lemma1_suite, "theorem1": theorem1_suite, "causality": causality_suite,
           "advantage": advantage_suite, "gradients": gradients_suite}


def run_suites(name: str = "all", seed: int = 0) -> dict:
    if name != "all" and name not in RUNNERS:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    names = SUITES if name == "all" else (name,)
    results = {n: RUNNERS[n](seed=seed) for n in names}
    return {"suites": results, "passed": all(r["passed"] for r in results.values())}

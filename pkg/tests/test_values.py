import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from aat.errors import ConfigError, DataError, DomainError
from aat.values import (
    Transitions, ValueHeads, advantage, attacker_reward, expectile, expectile_loss, q_batch_loss,
    train_q, train_v, train_values, transform_advantage, v_batch_loss, weighted_advantage,
)

from test_trajectory import make_dataset


def test_symmetric_expectile_loss_is_half_square():
    nu = np.random.default_rng(0).standard_normal(1000) * 7
    assert np.array_equal(expectile_loss(nu, 0.5), 0.5 * nu * nu)


def test_expectile_loss_asymmetry():
    assert expectile_loss(2.0, 0.9) == pytest.approx(0.9 * 4)
    assert expectile_loss(-2.0, 0.9) == pytest.approx(0.1 * 4)


def test_expectile_loss_tensor_matches_numpy():
    nu = torch.linspace(-3, 3, 13, dtype=torch.float64)
    assert np.allclose(expectile_loss(nu, 0.7).numpy(), expectile_loss(nu.numpy(), 0.7))


def test_expectile_sigma_domain():
    with pytest.raises(DomainError):
        expectile_loss(1.0, 1.0)
    with pytest.raises(DomainError):
        expectile([1.0], 0.0)


def test_identical_samples():
    assert expectile([5.0923188793639735e-57] * 3, 0.3) == 5.0923188793639735e-57
    assert expectile([0.1] * 7, 0.9) == 0.1


def test_median_like_cases():
    assert expectile([1.0, 2.0, 6.0], 0.5) == pytest.approx(3.0)
    assert expectile([4.0], 0.9) == 4.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=25), st.floats(0.02, 0.98))
def test_expectile_matches_scalar_minimizer(q, sigma):
    q = np.asarray(q)
    f = lambda v: np.sum(expectile_loss(q - v, sigma))  # noqa: E731
    ref = minimize_scalar(f, bounds=(q.min() - 1, q.max() + 1), method="bounded",
                          options={"xatol": 1e-10}).x
    assert expectile(q, sigma) == pytest.approx(ref, abs=1e-6 * max(1.0, np.abs(q).max()))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=15))
def test_expectile_monotone_in_sigma(q):
    vals = [expectile(q, s) for s in np.linspace(0.05, 0.95, 12)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e3))
def test_weighted_advantage_bounded_and_sign_preserving(A, lam):
    w = weighted_advantage(A, lam)
    assert abs(w) < 1 / lam
    assert np.sign(w) == np.sign(A)
    assert abs(w) <= abs(A)


def test_weighted_advantage_limit():
    assert abs(weighted_advantage(1e6, 1.0) - 1.0) <= 1e-5


def test_weighted_advantage_small_signal():
    A = np.linspace(-0.05, 0.05, 101)
    assert np.all(np.abs(weighted_advantage(A, 2.0) - A) <= 0.01 / 2.0)


def test_weighted_advantage_rejects_nonpositive_lambda():
    with pytest.raises(DomainError):
        weighted_advantage(1.0, 0.0)


def test_transform_choices():
    assert transform_advantage(3.0, 0.5, "ordinary") == 3.0
    assert transform_advantage(3.0, 0.5) == pytest.approx(3.0 / 2.5)
    with pytest.raises(ConfigError):
        transform_advantage(1.0, 0.5, "clipped")


def test_attacker_reward_is_log_half():
    assert np.allclose(attacker_reward([1.0, 0.5, 0.25]), [0.0, 1.0, 2.0])


# ---- heads

def heads_1d(**kw):
    torch.manual_seed(0)
    return ValueHeads((3,), 2, hidden=16, **kw).double()


def test_zero_initial_advantage():
    h = heads_1d()
    s = torch.randn(5, 3, dtype=torch.float64)
    assert torch.equal(h.advantage(s, torch.zeros(5, dtype=torch.long), torch.randn(5, 3, dtype=torch.float64)),
                       torch.zeros(5, dtype=torch.float64))


def test_heads_validate_hyperparameters():
    with pytest.raises(DomainError):
        ValueHeads((3,), 2, gamma=1.0)
    with pytest.raises(DomainError):
        ValueHeads((3,), 2, sigma=0.0)


def test_terminal_td_target_is_reward():
    h = heads_1d()
    batch = Transitions.from_tuples(np.ones((2, 3)), [0, 1], np.zeros((2, 3)), [0.5, 2.0]).batch(torch.arange(2))
    # Q starts at zero, so the loss is the mean squared reward
    assert q_batch_loss(h, batch).item() == pytest.approx((0.25 + 4.0) / 2)


def test_bootstrap_uses_v_of_next_pair():
    h = heads_1d()
    with torch.no_grad():
        h.v_net[-1].bias.fill_(3.0)
    data = Transitions.from_tuples(np.ones((1, 3)), [0], np.zeros((1, 3)), [1.0], np.zeros((1, 3)), [1])
    loss = q_batch_loss(h, data.batch(torch.arange(1)))
    assert loss.item() == pytest.approx((1.0 + h.gamma * 3.0) ** 2)


def test_v_fits_expectile_of_q():
    h = heads_1d(sigma=0.8)
    rng = np.random.default_rng(0)
    n = 256
    deltas = rng.standard_normal((n, 3))
    s = np.ones((n, 3))
    data = Transitions.from_tuples(s, np.zeros(n, dtype=int), deltas, np.zeros(n))
    q_fn = lambda s_, a_, d_: d_[:, 0] * 2.0  # noqa: E731
    train_v(data, h, 1500, 1e-2, batch_size=256, q_fn=q_fn)
    v = h.v_value(torch.ones(1, 3, dtype=torch.float64), torch.zeros(1, dtype=torch.long)).item()
    assert v == pytest.approx(expectile(2.0 * deltas[:, 0], 0.8), abs=0.02)


def test_v_loss_uses_frozen_copy():
    h = heads_1d()
    with torch.no_grad():
        h.q_net[-1].bias.fill_(5.0)
    batch = Transitions.from_tuples(np.ones((1, 3)), [0], np.zeros((1, 3)), [0.0]).batch(torch.arange(1))
    assert v_batch_loss(h, batch).item() == 0.0  # target copy still predicts 0
    h.sync_target()
    assert v_batch_loss(h, batch).item() == pytest.approx(h.sigma * 25.0)


def test_target_refresh_schedule():
    ds = make_dataset(np.random.default_rng(0), n_traj=3, obs=(4,))
    heads = ValueHeads((4,), 4, hidden=8, refresh=5)
    data = Transitions.from_dataset(ds)
    train_values(data, heads, 5, 1e-2, batch_size=4)
    for p, q in zip(heads.q_net.parameters(), heads.q_target.parameters()):
        assert torch.equal(p, q)
    train_values(data, heads, 1, 1e-2, batch_size=4)
    assert any(not torch.equal(p, q) for p, q in zip(heads.q_net.parameters(), heads.q_target.parameters()))


def test_truncation_counted():
    ds = make_dataset(np.random.default_rng(1), n_traj=4, obs=(4,))
    data = Transitions.from_dataset(ds)
    assert data.truncated_count == sum(t.truncated for t in ds.trajectories)
    assert np.allclose(data.rewards.numpy(), attacker_reward(ds.flat()["rewards"]), atol=1e-6)


def test_empty_training_rejected():
    with pytest.raises(DataError):
        train_values(None, heads_1d(), 1, 1e-3)


def test_advantage_helper_returns_float64():
    h = ValueHeads((4,), 2, hidden=8)
    out = advantage(np.zeros((3, 4)), [0, 1, 0], np.zeros((3, 4)), h)
    assert out.dtype == np.float64 and out.shape == (3,)


def test_single_transition_fixed_point():
    h = heads_1d()
    with torch.no_grad():
        h.v_net[-1].bias.fill_(2.0)  # V is held fixed by train_q
    data = Transitions.from_tuples(np.ones((1, 3)), [0], np.full((1, 3), 0.1), [0.5], np.zeros((1, 3)), [1])
    train_q(data, h, 600, 1e-2, batch_size=1)
    q = h.q_value(torch.ones(1, 3, dtype=torch.float64), torch.zeros(1, dtype=torch.long),
                  torch.full((1, 3), 0.1, dtype=torch.float64)).item()
    assert q == pytest.approx(0.5 + h.gamma * 2.0, abs=1e-3)


def test_terminal_transition_fixed_point():
    h = heads_1d()
    data = Transitions.from_tuples(np.ones((1, 3)), [1], np.zeros((1, 3)), [0.7])
    train_q(data, h, 600, 1e-2, batch_size=1)
    q = h.q_value(torch.ones(1, 3, dtype=torch.float64), torch.ones(1, dtype=torch.long),
                  torch.zeros(1, 3, dtype=torch.float64)).item()
    assert q == pytest.approx(0.7, abs=1e-3)


def test_zero_learning_rate_changes_nothing():
    h = heads_1d()
    before = [p.clone() for p in h.parameters()]
    data = Transitions.from_tuples(np.ones((2, 3)), [0, 1], np.zeros((2, 3)), [0.5, 2.0])
    train_q(data, h, 5, 0.0, batch_size=2)
    assert all(torch.equal(a, b) for a, b in zip(before, h.parameters()))

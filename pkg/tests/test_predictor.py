import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aat.errors import ConfigError, DataError
from aat.predictor import (
    AdvantageCandidateSet, AdvantagePredictor, build_targets, candidate_mu, entropy, fit_predictor,
    predictor_loss, regression_target, softmax_mu, train_predictor,
)
from aat.values import ValueHeads

from test_trajectory import make_dataset


def cset(logits):
    return AdvantageCandidateSet(None, None, None, np.asarray(logits, float), softmax_mu(logits))


def test_softmax_by_hand():
    mu = softmax_mu([0.0, np.log(3.0)])
    assert np.allclose(mu, [0.25, 0.75])


def test_softmax_is_shift_invariant_and_stable():
    assert np.allclose(softmax_mu([1000.0, 1001.0]), softmax_mu([0.0, 1.0]))


def test_empty_candidates_rejected():
    with pytest.raises(DataError):
        softmax_mu([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_entropy_range(logits):
    h = entropy(softmax_mu(logits))
    assert -1e-12 <= h <= np.log(len(logits)) + 1e-12


def test_uniform_entropy():
    assert entropy(np.full(8, 1 / 8)) == pytest.approx(np.log(8))
    assert entropy([1.0, 0.0]) == 0.0


def test_regression_target_modes():
    c = cset([0.0, np.log(3.0)])
    assert regression_target(c) == pytest.approx(0.75 * np.log(3.0))
    assert regression_target(c, "argmax_mu") == pytest.approx(np.log(3.0))
    with pytest.raises(ConfigError):
        regression_target(c, "mean")


def test_max_product_can_pick_a_negative_candidate():
    # all logits negative: the least damped product wins
    c = cset([-1.0, -4.0])
    assert regression_target(c) == pytest.approx(max(c.mu * c.logits))


def test_zero_initialized_prediction():
    p = AdvantagePredictor((28, 28, 1))
    assert np.array_equal(p.predict_max_advantage(np.random.rand(3, 28, 28, 1)), np.zeros(3))
    assert p.predict_max_advantage(np.zeros((28, 28, 1))) == 0.0


def test_prediction_clipped_to_bound():
    p = AdvantagePredictor((4,), lam=2.0, encoder="identity")
    with torch.no_grad():
        p.head[-1].bias.fill_(100.0)
    assert p.predict_max_advantage(np.zeros(4)) == pytest.approx(0.5, abs=1e-5)
    assert p.predict_max_advantage(np.zeros(4)) < 0.5
    p.clip = False
    assert p.predict_max_advantage(np.zeros(4)) == pytest.approx(100.0)


def test_bad_options_rejected():
    with pytest.raises(ConfigError):
        AdvantagePredictor((4,), kappa=-1.0)
    with pytest.raises(ConfigError):
        AdvantagePredictor((4,), encoder="cnn")


def test_entropy_term_has_no_gradient():
    p = AdvantagePredictor((4,), encoder="identity", head="linear").double()
    s = torch.randn(6, 4, dtype=torch.float64)
    t = torch.randn(6, dtype=torch.float64)
    grads = []
    for ent in (torch.zeros(6, dtype=torch.float64), torch.full((6,), 3.0, dtype=torch.float64)):
        p.zero_grad()
        loss, reg, e = predictor_loss(p, s, t, ent, 0.1)
        loss.backward()
        grads.append(p.head[0].weight.grad.clone())
    assert torch.equal(grads[0], grads[1])
    assert loss.item() == pytest.approx(reg.item() - 0.3)


def test_fit_recovers_linear_targets():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((200, 3))
    w = np.array([0.3, -0.2, 0.1])
    p = AdvantagePredictor((3,), encoder="identity", head="linear").double()
    hist = fit_predictor(p, S, S @ w, steps=800, lr=1e-2, kappa=0.0)
    assert hist["reg"][-1] < 1e-4


def test_candidate_mu_shapes():
    heads = ValueHeads((4,), 3, hidden=8)
    c = candidate_mu(np.zeros(4), 1, np.random.rand(5, 4), heads)
    assert c.mu.shape == (5,) and c.mu.sum() == pytest.approx(1.0)
    with pytest.raises(DataError):
        candidate_mu(np.zeros(4), 1, np.zeros((0, 4)), heads)


def perturbed_heads(obs, seed=0):
    torch.manual_seed(seed)
    heads = ValueHeads(obs, 4, hidden=8, lam=0.5)
    with torch.no_grad():
        for p in heads.parameters():
            p.add_(torch.randn_like(p))
    return heads


def test_targets_bounded_and_reproducible():
    ds = make_dataset(np.random.default_rng(0), n_traj=6, obs=(4,))
    heads = perturbed_heads((4,))
    pred = AdvantagePredictor((4,), encoder="identity")
    a = build_targets(ds, heads, pred, 1.5, seed=3)
    b = build_targets(ds, heads, pred, 1.5, seed=3)
    assert np.array_equal(a.targets, b.targets)
    assert np.all(np.abs(a.targets) < 1 / heads.lam)
    assert np.all(a.entropies <= np.log(a.n_candidates) + 1e-12)
    assert a.n_candidates == min(8, ds.n_steps) + 8


def test_train_predictor_reports_candidates():
    ds = make_dataset(np.random.default_rng(2), n_traj=4, obs=(28, 28, 1))
    heads = perturbed_heads((28, 28, 1))
    hist = train_predictor(ds, heads, AdvantagePredictor((28, 28, 1), model_dim=16, hidden=16), 5, 1e-3, 1.5)
    assert len(hist["loss"]) == 5 and "target_mean" in hist


def test_empty_dataset_rejected():
    ds = make_dataset(np.random.default_rng(0), n_traj=1, obs=(4,))
    ds.trajectories = []
    with pytest.raises(DataError):
        build_targets(ds, ValueHeads((4,), 4), AdvantagePredictor((4,), encoder="identity"), 1.0)

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from aat.errors import ConfigError, DataError, ShapeError
from aat.generator import (
    Deconv2d, GeneratorConfig, PerturbationGenerator, SegmentSampler, action_loss, generator_losses,
    gradient_check, norm_loss, project_l2, safe_norm, train_generator,
)
from aat.policies import ToyPolicy
from aat.sequence import EmbeddingConfig, ScaleConfig
from aat.trajectory import TokenSequence, state_tokens

from test_trajectory import make_dataset


def tiny_config(**kw):
    base = dict(embedding=EmbeddingConfig(8, 2, 1, 0.0, 6 * 7), scales=ScaleConfig(2, 2), context=6)
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_model(obs=(28, 28, 1), seed=0, **kw):
    torch.manual_seed(seed)
    return PerturbationGenerator(obs, 4, tiny_config(**kw)).double().eval()


def test_deconv_matches_conv_transpose():
    torch.manual_seed(0)
    ours = Deconv2d(6, 3, 2).double()
    ref = nn.ConvTranspose2d(6, 3, 2, stride=2).double()
    with torch.no_grad():
        ref.weight.copy_(ours.weight)
        ref.bias.copy_(torch.randn(3, dtype=torch.float64))
        ours.bias.copy_(ref.bias)
    x = torch.randn(2, 5, 4, 6, dtype=torch.float64)
    expected = ref(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    assert torch.allclose(ours(x), expected, atol=1e-12)


def test_safe_norm_gradient_at_zero():
    x = torch.zeros(2, 3, requires_grad=True)
    safe_norm(x).sum().backward()
    assert torch.equal(x.grad, torch.zeros(2, 3))


def test_norm_kinds():
    x = torch.tensor([[3.0, -4.0]])
    assert safe_norm(x, "l1").item() == 7.0
    assert safe_norm(x, "l2").item() == 5.0
    assert safe_norm(x, "linf").item() == 4.0
    with pytest.raises(ConfigError):
        safe_norm(x, "l3")


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 10.0), st.integers(0, 1000))
def test_projection_stays_in_ball(eps, scale, seed):
    d = torch.randn(3, 2, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    out = project_l2(d, eps, 1)
    n = out.norm(dim=-1)
    assert torch.all(n <= eps + 1e-12)
    inside = d.norm(dim=-1) <= eps
    assert torch.allclose(out[inside], d[inside])


def test_config_round_trip_and_validation():
    cfg = tiny_config(norm="linf", condition="returns_to_go")
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        tiny_config(norm="l0")
    with pytest.raises(ConfigError):
        tiny_config(condition="reward")


def test_context_must_fit_positions():
    with pytest.raises(ConfigError):
        PerturbationGenerator((28, 28, 1), 4, tiny_config(context=7))  # 7 steps of 7 tokens exceed 42


def test_indivisible_images_rejected():
    with pytest.raises(ConfigError):
        PerturbationGenerator((30, 30, 1), 4, tiny_config())


def test_forward_perturbation_budget_and_pass_count():
    model = tiny_model()
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for p in model.head.parameters():
            p.mul_(50.0)
    for t in range(1, 5):
        d = model.forward_perturbation(rng.random((t, 28, 28, 1)), rng.standard_normal(t),
                                       rng.standard_normal((t - 1, 28, 28, 1)), rng.integers(0, 4, t - 1))
        assert d.dtype == np.float32 and d.shape == (28, 28, 1)
        assert np.sqrt(np.sum(np.square(d, dtype=np.float64))) <= 1.5
    assert model.forward_passes == 4
    with pytest.raises(ShapeError):
        model.forward_perturbation(np.zeros((1, 4)), [0.0], np.zeros((0, 4)), [])


def test_zero_budget_gives_zero():
    d = tiny_model().forward_perturbation(np.random.rand(1, 28, 28, 1), [0.3], np.zeros((0, 28, 28, 1)), [], 0.0)
    assert not d.any()


def test_step_output_ignores_its_own_delta_action_and_the_future():
    model = tiny_model()
    g = torch.Generator().manual_seed(1)
    C = torch.randn(1, 5, generator=g, dtype=torch.float64)
    S = torch.rand(1, 5, 28, 28, 1, generator=g, dtype=torch.float64)
    D = torch.randn(1, 5, 28, 28, 1, generator=g, dtype=torch.float64)
    A = torch.randint(0, 4, (1, 5), generator=g)
    base = model.decode(C, S, D, A)
    D2, A2, S2, C2 = D.clone(), A.clone(), S.clone(), C.clone()
    D2[0, 2:] += 1.0
    A2[0, 2:] = (A2[0, 2:] + 1) % 4
    S2[0, 3:] += 0.5
    C2[0, 3:] -= 2.0
    out = model.decode(C2, S2, D2, A2)
    assert torch.equal(base[0, :3], out[0, :3])
    assert not torch.allclose(base[0, 3], out[0, 3])


def test_perturb_sequence_agrees_with_direct_call():
    model = tiny_model()
    rng = np.random.default_rng(3)
    S = rng.random((3, 28, 28, 1))
    D = (0.1 * rng.standard_normal((2, 28, 28, 1)))
    A = np.array([1, 2])
    seq = TokenSequence("weighted_advantage", np.array([0.2, -0.1]), state_tokens(S[:2], 14),
                        D.reshape(2, -1), A)
    a = model.perturb_sequence(seq, S[2], 0.4)
    b = model.forward_perturbation(S, [0.2, -0.1, 0.4], D, A)
    assert np.allclose(a, b, atol=1e-6)


def test_action_loss_by_hand():
    policy = ToyPolicy((2,), 2).double()
    with torch.no_grad():
        policy.net[0].weight.copy_(torch.eye(64, 2, dtype=torch.float64))
        policy.net[0].bias.zero_()
        policy.net[2].weight.zero_()
        policy.net[2].bias.zero_()
    s = torch.zeros(1, 2, 2, dtype=torch.float64)
    loss = action_loss(policy, s, torch.zeros_like(s), torch.tensor([[0, 1]]))
    # uniform probabilities against one-hot targets: 2 steps of (0.25 + 0.25)
    assert loss.item() == pytest.approx(1.0)


def test_norm_loss_by_hand():
    d = torch.zeros(2, 2, 2, dtype=torch.float64)
    d[0, 0] = torch.tensor([3.0, 4.0])
    d[1, 1] = torch.tensor([0.0, 1.0])
    assert norm_loss(d).item() == pytest.approx(6.0 / 4)
    assert norm_loss(d, "l1").item() == pytest.approx(8.0 / 4)


def test_sampler_probabilities_follow_exponential_weights():
    ds = make_dataset(np.random.default_rng(0), n_traj=5, obs=(4,))
    sampler = SegmentSampler(ds, 2, omega=1.7)
    L = sampler.length
    means = []
    for tr in ds.trajectories:
        means += [tr.wadv[s:s + L].mean() for s in range(len(tr) - L + 1)]
    w = np.exp(1.7 * np.asarray(means))
    assert np.allclose(sampler.probabilities, w / w.sum(), atol=1e-12)
    sampler.set_omega(0.0)
    assert np.allclose(sampler.probabilities, 1 / len(means))


def test_sampler_needs_advantages_unless_rtg():
    ds = make_dataset(np.random.default_rng(0), obs=(4,), annotated=False)
    with pytest.raises(DataError):
        SegmentSampler(ds, 3)
    C, S, D, A = SegmentSampler(ds, 3, "returns_to_go").batch(np.array([0]))
    assert C.shape[0] == 1 and S.shape[2:] == (4,)


def test_generator_gradients_match_finite_differences():
    model = tiny_model(obs=(4,), embedding=EmbeddingConfig(8, 2, 1, 0.0, 12), context=3)
    policy = ToyPolicy((4,), 4).double()
    ds = make_dataset(np.random.default_rng(1), n_traj=4, obs=(4,))
    sampler = SegmentSampler(ds, 3)
    batch = sampler.batch(np.arange(min(4, len(sampler.segments))), dtype=torch.float64)
    err = gradient_check(lambda: generator_losses(model, policy, batch)[0], model.parameters(), 60)
    assert err <= 1e-4


def test_training_logs_curves_and_freezes_policy():
    ds = make_dataset(np.random.default_rng(2), n_traj=4, obs=(4,))
    model = PerturbationGenerator((4,), 4, tiny_config(embedding=EmbeddingConfig(8, 2, 1, 0.0, 12), context=3))
    policy = ToyPolicy((4,), 4)
    before = [p.clone() for p in policy.parameters()]
    hist = train_generator(ds, model, policy, 4, 1e-3, batch_size=8)
    assert hist["step"] == [0, 1, 2, 3]
    assert all(torch.equal(a, b) for a, b in zip(before, policy.parameters()))
    assert not model.training

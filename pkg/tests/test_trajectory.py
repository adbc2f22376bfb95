import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aat.envs import GridPixels
from aat.errors import CapabilityError, ConfigError, DataError, DomainError, ParseError, ShapeError
from aat.policies import BlackBoxPolicy, ToyPolicy
from aat.trajectory import (
    R_FLOOR, Dataset, DatasetManifest, Trajectory, allocate_episodes, build_token_sequence, collect,
    collect_dataset, deserialize, fgsm_perturbation, load_dataset, normalize_reward, patchify,
    patchify_tensor, project_l2_np, random_perturbation, returns_to_go, returns_to_go_all, save_dataset,
    serialize, unpatchify,
)


def make_dataset(rng, n_traj=3, obs=(28, 28, 1), annotated=True):
    trajs = []
    for k in range(n_traj):
        T = int(rng.integers(1, 6))
        r = rng.uniform(R_FLOOR, 1.0, size=T)
        trajs.append(Trajectory(
            rng.random((T, *obs)).astype(np.float32), rng.integers(0, 4, size=T),
            (0.01 * rng.standard_normal((T, *obs))).astype(np.float32), r, returns_to_go_all(r),
            rng.standard_normal(T) if annotated else None, True, bool(k % 2), "random",
        ))
    m = DatasetManifest("grid", {"random": 0.5, "fgsm": 0.5}, n_traj, 1.5, 7, {"grid": {"r_min": 0, "r_max": 1}},
                        obs, 4)
    return Dataset(m, trajs)


def assert_same(a: Dataset, b: Dataset):
    assert a.manifest == b.manifest
    assert len(a) == len(b)
    for x, y in zip(a.trajectories, b.trajectories):
        for name in ("states", "actions", "deltas", "rewards", "rtg"):
            u, v = getattr(x, name), getattr(y, name)
            assert u.dtype == v.dtype and np.array_equal(u, v)
        assert (x.wadv is None) == (y.wadv is None)
        if x.wadv is not None:
            assert np.array_equal(x.wadv, y.wadv)
        assert (x.terminal, x.truncated, x.collector) == (y.terminal, y.truncated, y.collector)


# ---- returns-to-go

def test_rtg_of_halves():
    # log_{1/2}(1/2) = 1 per step
    assert returns_to_go([0.5, 0.5, 0.5]) == 3.0
    assert returns_to_go([0.5, 0.5, 0.5], from_t=2) == 1.0


def test_rtg_of_ones_is_zero():
    assert returns_to_go([1.0, 1.0]) == 0.0


def test_rtg_rejects_out_of_range():
    with pytest.raises(DomainError):
        returns_to_go([0.5, 0.0])
    with pytest.raises(DomainError):
        returns_to_go([1.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(R_FLOOR, 1.0), min_size=1, max_size=20), st.data())
def test_rtg_all_matches_pointwise(rewards, data):
    t = data.draw(st.integers(0, len(rewards) - 1))
    assert returns_to_go_all(rewards)[t] == pytest.approx(returns_to_go(rewards, t), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12), st.data())
def test_lowering_a_reward_raises_every_earlier_rtg(rewards, data):
    u = data.draw(st.integers(0, len(rewards) - 1))
    lower = list(rewards)
    lower[u] = rewards[u] * 0.5
    before, after = returns_to_go_all(rewards), returns_to_go_all(lower)
    assert np.all(after[: u + 1] > before[: u + 1])
    assert np.array_equal(after[u + 1:], before[u + 1:])


def test_normalize_reward_floor_and_range():
    assert normalize_reward(-3.0, -1.0, 1.0) == R_FLOOR
    assert normalize_reward(0.0, -1.0, 1.0) == 0.5
    with pytest.raises(ConfigError):
        normalize_reward(0.0, 1.0, 1.0)


# ---- patches

def test_patch_count_for_default_image():
    assert patchify(np.zeros((28, 28, 1)), 14).num_patches == 4


def test_patch_order_is_row_major():
    img = np.zeros((4, 4))
    img[0:2, 2:4] = 1.0  # top-right patch
    grid = patchify(img, 2)
    assert grid.patches.sum(axis=1).tolist() == [0, 4, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 3, 7]), st.integers(1, 3),
       st.integers(0, 2**31 - 1))
def test_patchify_round_trip(gh, gw, p, C, seed):
    img = np.random.default_rng(seed).random((gh * p, gw * p, C))
    assert np.array_equal(unpatchify(patchify(img, p)), img)


def test_patchify_tensor_agrees_with_numpy():
    x = np.random.default_rng(0).random((3, 28, 28, 2)).astype(np.float32)
    batched = patchify_tensor(torch.from_numpy(x), 14).numpy()
    for i in range(3):
        assert np.array_equal(batched[i], patchify(x[i], 14).patches)


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((28, 28)), 10)


# ---- token sequences

def test_token_layout():
    ds = make_dataset(np.random.default_rng(1), n_traj=1)
    recs = ds.trajectories[0].records()
    seq = build_token_sequence(recs, "weighted_advantage", 14)
    T = len(recs)
    assert len(seq) == T * (4 + 3)
    assert seq.kinds()[:7] == [("condition", 0), ("patch_1", 0), ("patch_2", 0), ("patch_3", 0),
                               ("patch_4", 0), ("perturbation", 0), ("action", 0)]


def test_token_sequence_uses_requested_condition():
    ds = make_dataset(np.random.default_rng(2), n_traj=1)
    tr = ds.trajectories[0]
    assert np.array_equal(build_token_sequence(tr.records(), "returns_to_go").conditions, tr.rtg)
    assert np.array_equal(build_token_sequence(tr.records(), "weighted_advantage").conditions, tr.wadv)


def test_token_sequence_needs_advantage():
    ds = make_dataset(np.random.default_rng(3), n_traj=1, annotated=False)
    with pytest.raises(DataError):
        build_token_sequence(ds.trajectories[0].records(), "weighted_advantage")


def test_token_sequence_gap_rejected():
    recs = make_dataset(np.random.default_rng(4), n_traj=1).trajectories[0].records()
    recs = [r for r in recs] + [recs[0]]
    with pytest.raises(DataError):
        build_token_sequence(recs, "returns_to_go")


# ---- serialization

@pytest.mark.parametrize("suffix", [".jsonl", ".npz"])
def test_dataset_round_trip(tmp_path, suffix):
    ds = make_dataset(np.random.default_rng(5), n_traj=4)
    path = save_dataset(ds, tmp_path / f"d{suffix}")
    assert_same(ds, load_dataset(path))


@pytest.mark.parametrize("suffix", [".jsonl", ".npz"])
def test_empty_dataset_round_trip(tmp_path, suffix):
    ds = make_dataset(np.random.default_rng(0), n_traj=0)
    path = save_dataset(ds, tmp_path / f"e{suffix}")
    back = load_dataset(path)
    assert len(back) == 0 and back.manifest == ds.manifest
    if suffix == ".jsonl":
        assert len(path.read_text().splitlines()) == 1


def test_manifest_fractions_must_sum_to_one(tmp_path):
    ds = make_dataset(np.random.default_rng(0), n_traj=1)
    ds.manifest.collector_mix = {"random": 0.6, "fgsm": 0.5}
    with pytest.raises(ConfigError):
        serialize(ds, tmp_path / "bad.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    path = serialize(make_dataset(np.random.default_rng(0), n_traj=2), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        deserialize(path)
    assert err.value.line == 3


def test_missing_manifest_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"t": [0]}) + "\n")
    with pytest.raises(ParseError) as err:
        deserialize(path)
    assert err.value.line == 1


def test_flat_next_index():
    ds = make_dataset(np.random.default_rng(9), n_traj=3)
    f = ds.flat()
    ends = f["starts"] + f["lengths"] - 1
    assert np.all(f["next_index"][ends] == -1)
    inner = np.setdiff1d(np.arange(len(f["rewards"])), ends)
    assert np.array_equal(f["next_index"][inner], inner + 1)


# ---- perturbations and collection

@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.integers(0, 2**31 - 1), st.sampled_from([np.float32, np.float64]))
def test_projection_budget(eps, seed, dtype):
    d = np.random.default_rng(seed).standard_normal((28, 28, 1)) * 3
    out = project_l2_np(d, eps, dtype)
    assert out.dtype == dtype
    assert np.linalg.norm(out.astype(np.float64)) <= eps + 1e-9


@pytest.mark.parametrize("eps", [1e-30, 1e-3, 0.7, 4.999])
def test_float32_projection_terminates_inside_ball(eps):
    rng = np.random.default_rng(7)
    for _ in range(50):
        out = project_l2_np(rng.standard_normal((28, 28, 1)) * 3, eps, np.float32)
        assert np.linalg.norm(out.astype(np.float64)) <= eps


def test_projection_leaves_small_vectors_alone():
    d = np.array([0.3, 0.4])
    assert np.array_equal(project_l2_np(d, 1.0), d)


def test_random_perturbation_zero_budget():
    assert not random_perturbation(np.random.default_rng(0), (4, 4), 0.0).any()


def test_fgsm_is_sign_direction_on_the_sphere():
    torch.manual_seed(0)
    policy = ToyPolicy((28, 28, 1), 4)
    s = np.random.default_rng(0).random((2, 28, 28, 1)).astype(np.float32)
    d = fgsm_perturbation(policy, s, 1.5)
    for di in d:
        assert np.linalg.norm(di.astype(np.float64)) == pytest.approx(1.5, abs=1e-5)
        nz = np.abs(di[di != 0])
        assert np.allclose(nz, nz[0])


def test_fgsm_needs_gradients():
    env = GridPixels()
    with pytest.raises(CapabilityError):
        collect(env, BlackBoxPolicy(ToyPolicy(env.obs_shape, 4)), "fgsm", 1, 1.5, 0)


def test_fgsm_with_substitute_gradients():
    env = GridPixels(horizon=3)
    torch.manual_seed(0)
    target, sub = ToyPolicy(env.obs_shape, 4), ToyPolicy(env.obs_shape, 4)
    wall = BlackBoxPolicy(target)
    trajs = collect(env, wall, "fgsm", 2, 1.5, 0, gradient_source=sub)
    assert wall.gradient_queries == 0 and wall.action_queries > 0
    assert all(len(t) == 3 for t in trajs)


def test_zero_budget_random_equals_clean():
    env = GridPixels(horizon=6)
    torch.manual_seed(0)
    policy = ToyPolicy(env.obs_shape, 4)
    a = collect(env, policy, "random", 3, 0.0, 11)
    b = collect(env, policy, "none", 3, 0.0, 11)
    for x, y in zip(a, b):
        assert not x.deltas.any()
        assert np.array_equal(x.actions, y.actions) and np.array_equal(x.rewards, y.rewards)


def test_collection_is_reproducible_and_batch_independent(tmp_path):
    env = GridPixels(horizon=8)
    torch.manual_seed(0)
    policy = ToyPolicy(env.obs_shape, 4)
    mix = {"random": 0.5, "fgsm": 0.5}
    a = collect_dataset(env, policy, "grid", mix, 5, 1.5, 3, batch_size=2)
    b = collect_dataset(env, policy, "grid", mix, 5, 1.5, 3, batch_size=64)
    assert_same(a, b)
    pa, pb = save_dataset(a, tmp_path / "a.npz"), save_dataset(b, tmp_path / "b.npz")
    assert pa.read_bytes() == pb.read_bytes()
    for tr in a.trajectories:
        assert np.all(np.linalg.norm(tr.deltas.reshape(len(tr), -1).astype(np.float64), axis=1) <= 1.5 + 1e-9)


def test_allocate_episodes_largest_remainder():
    assert allocate_episodes({"random": 0.5, "fgsm": 0.5}, 5) in ({"fgsm": 3, "random": 2},
                                                                   {"fgsm": 2, "random": 3})
    assert sum(allocate_episodes({"none": 0.3, "random": 0.3, "fgsm": 0.4}, 7).values()) == 7

"""Attack trajectories: records, returns-to-go, patch tokens, storage and collection."""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, DomainError, ParseError, ShapeError
from .envs import episode_seed
from .policies import require_differentiable

R_FLOOR = 1e-3
SCHEMA_VERSION = 1
CONDITIONS = ("returns_to_go", "weighted_advantage")
COLLECTORS = ("none", "random", "fgsm")


def normalize_reward(r_raw: float, r_min: float, r_max: float) -> float:
    if not r_max > r_min:
        raise ConfigError(f"reward range is empty: r_min={r_min}, r_max={r_max}")
    r = (r_raw - r_min) / (r_max - r_min)
    return float(min(1.0, max(R_FLOOR, r)))


def _check_rewards(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    if np.any(r <= 0) or np.any(r > 1):
        raise DomainError("returns-to-go needs rewards in (0, 1]")
    return r


def returns_to_go(rewards, from_t: int = 0) -> float:
    """Sum of ``log_{1/2} r_u`` for u >= from_t."""
    r = _check_rewards(rewards)
    return float(-np.log2(r[from_t:]).sum()) + 0.0


def returns_to_go_all(rewards) -> np.ndarray:
    r = _check_rewards(rewards)
    return np.cumsum(-np.log2(r)[::-1])[::-1] + 0.0


@dataclass
class PatchGrid:
    patch_side: int
    patches: np.ndarray  # [X, patch_side * patch_side * C]
    image_shape: tuple

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def _as_hwc(image):
    if image.ndim == 2:
        return image[..., None]
    if image.ndim != 3:
        raise ShapeError(f"expected an [H x W] or [H x W x C] image, got shape {image.shape}")
    return image


def patchify(image, patch_side: int = 14) -> PatchGrid:
    image = np.asarray(image)
    img = _as_hwc(image)
    H, W, C = img.shape
    if H % patch_side or W % patch_side:
        raise ShapeError(f"{H}x{W} image is not divisible into {patch_side}px patches")
    gh, gw = H // patch_side, W // patch_side
    patches = (
        img.reshape(gh, patch_side, gw, patch_side, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_side * patch_side * C)
    )
    return PatchGrid(patch_side, patches, tuple(image.shape))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p = grid.patch_side
    shape = grid.image_shape
    H, W = shape[0], shape[1]
    C = shape[2] if len(shape) == 3 else 1
    gh, gw = H // p, W // p
    img = grid.patches.reshape(gh, gw, p, p, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
    return img.reshape(shape)


def patchify_tensor(x: torch.Tensor, patch_side: int) -> torch.Tensor:
    """Batched patchify: ``[..., H, W, C] -> [..., X, p*p*C]`` in row-major patch order."""
    *lead, H, W, C = x.shape
    p = patch_side
    x = x.reshape(*lead, H // p, p, W // p, p, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def image_shape(obs_shape) -> tuple | None:
    """``(H, W, C)`` when observations are images, else None."""
    if len(obs_shape) == 3:
        return tuple(obs_shape)
    if len(obs_shape) == 2:
        return (obs_shape[0], obs_shape[1], 1)
    return None


@dataclass
class TrajectoryRecord:
    t: int
    state: np.ndarray
    action: object
    perturbation: np.ndarray
    reward: float
    returns_to_go: float
    weighted_advantage: float | None = None


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    deltas: np.ndarray
    rewards: np.ndarray  # normalized, in [R_FLOOR, 1]
    rtg: np.ndarray
    wadv: np.ndarray | None = None
    terminal: bool = True
    truncated: bool = False
    collector: str = "random"

    def __len__(self):
        return len(self.rewards)

    def records(self) -> list[TrajectoryRecord]:
        out = []
        for t in range(len(self)):
            a = self.actions[t]
            out.append(TrajectoryRecord(
                t, self.states[t], a.item() if np.ndim(a) == 0 else a, self.deltas[t],
                float(self.rewards[t]), float(self.rtg[t]),
                None if self.wadv is None else float(self.wadv[t]),
            ))
        return out

    def with_wadv(self, wadv) -> "Trajectory":
        return Trajectory(self.states, self.actions, self.deltas, self.rewards, self.rtg,
                          np.asarray(wadv, dtype=np.float64), self.terminal, self.truncated,
                          self.collector)


@dataclass
class DatasetManifest:
    env_id: str
    collector_mix: dict
    episode_count: int
    epsilon: float
    seed: int
    reward_normalization: dict = field(default_factory=dict)
    obs_shape: tuple = ()
    n_actions: int = 0
    float_dtype: str = "float32"
    config_hash: str = ""
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        total = sum(float(v) for v in self.collector_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"collector fractions sum to {total}, not 1")
        if any(float(v) < 0 for v in self.collector_mix.values()):
            raise ConfigError("collector fractions must be non-negative")
        unknown = set(self.collector_mix) - set(COLLECTORS)
        if unknown:
            raise ConfigError(f"unknown collectors {sorted(unknown)}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("type", None)
        d["obs_shape"] = tuple(d.get("obs_shape", ()))
        return cls(**d)


@dataclass
class Dataset:
    manifest: DatasetManifest
    trajectories: list[Trajectory]

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def obs_shape(self) -> tuple:
        return tuple(self.manifest.obs_shape)

    @property
    def annotated(self) -> bool:
        return bool(self.trajectories) and all(t.wadv is not None for t in self.trajectories)

    def flat(self) -> dict:
        """Concatenated step arrays plus ``next_index`` (-1 where the episode ends)."""
        if not self.trajectories:
            raise DataError("dataset is empty")
        lengths = np.array([len(t) for t in self.trajectories])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        n = int(lengths.sum())
        next_index = np.arange(1, n + 1)
        ends = starts + lengths - 1
        next_index[ends] = -1
        out = {
            "states": np.concatenate([t.states for t in self.trajectories]),
            "actions": np.concatenate([t.actions for t in self.trajectories]),
            "deltas": np.concatenate([t.deltas for t in self.trajectories]),
            "rewards": np.concatenate([t.rewards for t in self.trajectories]),
            "rtg": np.concatenate([t.rtg for t in self.trajectories]),
            "next_index": next_index,
            "traj_index": np.repeat(np.arange(len(lengths)), lengths),
            "step_index": np.concatenate([np.arange(k) for k in lengths]),
            "starts": starts,
            "lengths": lengths,
            "truncated": np.array([t.truncated for t in self.trajectories]),
        }
        if self.annotated:
            out["wadv"] = np.concatenate([t.wadv for t in self.trajectories])
        return out


@dataclass
class TokenSequence:
    """Per-step token groups ``[condition, patch_1..patch_X, perturbation, action]``."""

    condition_kind: str
    conditions: np.ndarray  # [T]
    patches: np.ndarray  # [T, X, P]
    perturbations: np.ndarray  # [T, obs_dim]
    actions: np.ndarray  # [T] (discrete) or [T, act_dim]

    @property
    def num_steps(self) -> int:
        return len(self.conditions)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def tokens_per_step(self) -> int:
        return self.num_patches + 3

    def __len__(self):
        return self.num_steps * self.tokens_per_step

    def kinds(self) -> list[tuple[str, int]]:
        per_step = ["condition"] + [f"patch_{m + 1}" for m in range(self.num_patches)]
        per_step += ["perturbation", "action"]
        return [(k, t) for t in range(self.num_steps) for k in per_step]


def state_tokens(states, patch_side):
    """``[T, *obs] -> [T, X, P]``; non-image observations become a single token."""
    states = np.asarray(states)
    if image_shape(states.shape[1:]) is None:
        return states.reshape(len(states), 1, -1)
    return np.stack([patchify(s, patch_side).patches for s in states]) if len(states) else \
        np.zeros((0, 1, 1))


def build_token_sequence(records: Sequence[TrajectoryRecord], condition: str = "weighted_advantage",
                         patch_side: int = 14) -> TokenSequence:
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    if not records:
        raise DataError("no records")
    ts = [r.t for r in records]
    if any(b != a + 1 for a, b in zip(ts, ts[1:])):
        raise DataError("records are not contiguous in t")
    if condition == "weighted_advantage":
        if any(r.weighted_advantage is None for r in records):
            raise DataError("weighted_advantage condition requested but a record has no advantage")
        cond = [r.weighted_advantage for r in records]
    else:
        cond = [r.returns_to_go for r in records]
    states = np.stack([np.asarray(r.state) for r in records])
    return TokenSequence(
        condition,
        np.asarray(cond, dtype=np.float64),
        state_tokens(states, patch_side),
        np.stack([np.asarray(r.perturbation).reshape(-1) for r in records]),
        np.asarray([r.action for r in records]),
    )


# ---------------------------------------------------------------- storage

def _traj_to_json(tr: Trajectory) -> dict:
    return {
        "t": list(range(len(tr))),
        "s": tr.states.tolist(),
        "a": tr.actions.tolist(),
        "delta": tr.deltas.tolist(),
        "r": tr.rewards.tolist(),
        "rtg": tr.rtg.tolist(),
        "wadv": None if tr.wadv is None else tr.wadv.tolist(),
        "terminal": bool(tr.terminal),
        "truncated": bool(tr.truncated),
        "collector": tr.collector,
    }


def _traj_from_json(obj: dict, dtype) -> Trajectory:
    T = len(obj["t"])
    if obj["t"] != list(range(T)):
        raise ValueError("t must be 0..T-1")
    tr = Trajectory(
        np.asarray(obj["s"], dtype=dtype),
        np.asarray(obj["a"]),
        np.asarray(obj["delta"], dtype=dtype),
        np.asarray(obj["r"], dtype=np.float64),
        np.asarray(obj["rtg"], dtype=np.float64),
        None if obj.get("wadv") is None else np.asarray(obj["wadv"], dtype=np.float64),
        bool(obj.get("terminal", True)),
        bool(obj.get("truncated", False)),
        obj.get("collector", "random"),
    )
    for name in ("states", "actions", "deltas", "rewards", "rtg"):
        if len(getattr(tr, name)) != T:
            raise ValueError(f"field {name} has the wrong length")
    return tr


def serialize(dataset: Dataset, path) -> Path:
    """Write JSON Lines: manifest on line 1, then one trajectory per line."""
    dataset.manifest.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        head = {"type": "manifest", **dataset.manifest.to_dict()}
        fh.write(json.dumps(head) + "\n")
        for tr in dataset.trajectories:
            fh.write(json.dumps(_traj_to_json(tr)) + "\n")
    return path


def deserialize(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, manifest line missing", line=1)
    try:
        head = json.loads(lines[0])
        if head.get("type") != "manifest" or "schema_version" not in head:
            raise ValueError("first line is not a manifest")
        manifest = DatasetManifest.from_dict(head)
    except (ValueError, TypeError) as exc:
        raise ParseError(str(exc), line=1) from exc
    manifest.validate()
    dtype = np.dtype(manifest.float_dtype)
    trajectories = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            trajectories.append(_traj_from_json(json.loads(line), dtype))
        except (ValueError, TypeError, KeyError) as exc:
            raise ParseError(f"malformed trajectory: {exc}", line=i) from exc
    return Dataset(manifest, trajectories)


def save_npz(dataset: Dataset, path) -> Path:
    """Binary bulk format (same content as the JSON Lines file)."""
    path = Path(path)
    flat = dataset.flat() if dataset.trajectories else None
    arrays = {"manifest": np.frombuffer(json.dumps(dataset.manifest.to_dict()).encode(), dtype=np.uint8)}
    meta = [{"terminal": t.terminal, "truncated": t.truncated, "collector": t.collector}
            for t in dataset.trajectories]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    if flat is not None:
        for key in ("states", "actions", "deltas", "rewards", "rtg", "lengths"):
            arrays[key] = flat[key]
        if "wadv" in flat:
            arrays["wadv"] = flat["wadv"]
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_npz(path) -> Dataset:
    with np.load(Path(path)) as z:
        manifest = DatasetManifest.from_dict(json.loads(z["manifest"].tobytes().decode()))
        meta = json.loads(z["meta"].tobytes().decode())
        if not meta:
            return Dataset(manifest, [])
        lengths = z["lengths"]
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        data = {k: z[k] for k in ("states", "actions", "deltas", "rewards", "rtg")}
        wadv = z["wadv"] if "wadv" in z.files else None
    trajs = []
    for i, m in enumerate(meta):
        sl = slice(bounds[i], bounds[i + 1])
        trajs.append(Trajectory(
            data["states"][sl], data["actions"][sl], data["deltas"][sl], data["rewards"][sl],
            data["rtg"][sl], None if wadv is None else wadv[sl], m["terminal"], m["truncated"],
            m["collector"],
        ))
    return Dataset(manifest, trajs)


def load_dataset(path) -> Dataset:
    path = Path(path)
    return load_npz(path) if path.suffix == ".npz" else deserialize(path)


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return save_npz(dataset, path) if path.suffix == ".npz" else serialize(dataset, path)


# ---------------------------------------------------------------- collection

def project_l2_np(delta, epsilon, dtype=None):
    """Scale ``delta`` onto the L2 ball of radius ``epsilon``.

    The result is cast to ``dtype`` (default: the input dtype) and shrunk
    further if rounding in that dtype lands it just outside the ball.
    """
    delta = np.asarray(delta)
    dtype = np.dtype(dtype or delta.dtype)
    if epsilon <= 0:
        return np.zeros(delta.shape, dtype=dtype)
    x = delta.astype(np.float64)
    n = float(np.sqrt(np.sum(x * x)))
    if n > epsilon:
        x = x * (epsilon / n)
    out = x.astype(dtype)
    while float(np.sqrt(np.sum(np.square(out, dtype=np.float64)))) > epsilon:
        out = np.nextafter(out, np.zeros_like(out))  # one ulp toward zero always makes progress
    return out


def random_perturbation(rng, shape, epsilon, dtype=np.float32):
    if epsilon == 0:
        return np.zeros(shape, dtype=dtype)
    direction = rng.standard_normal(shape)
    direction /= max(np.linalg.norm(direction), 1e-12)
    return project_l2_np((epsilon * rng.uniform()) * direction, epsilon, dtype=dtype)


def fgsm_perturbation(module, states, epsilon):
    """Gradient-sign step against the clean action, projected onto the L2 ball."""
    x = torch.as_tensor(states, dtype=torch.float32).clone().requires_grad_(True)
    logits = module(x)
    target = logits.argmax(dim=-1).detach()
    loss = torch.nn.functional.cross_entropy(logits, target, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    step = torch.sign(grad).reshape(len(states), -1).double()
    norms = step.norm(dim=1, keepdim=True).clamp_min(1e-12)
    out = (epsilon * step / norms).numpy().reshape(states.shape)
    return np.stack([project_l2_np(d, epsilon, dtype=np.float32) for d in out])


def collect(env, policy, collector: str, episodes: int, epsilon: float, seed: int,
            first_episode: int = 0, batch_size: int = 64, reward_range=(0.0, 1.0),
            gradient_source=None) -> list[Trajectory]:
    """Roll the target policy out under ``collector`` perturbations.

    Episode ``i`` is seeded by ``episode_seed(seed, first_episode + i)`` so the
    result does not depend on ``batch_size``. FGSM gradients come from
    ``gradient_source`` when given (a substitute for a query-only target).
    """
    if collector not in COLLECTORS:
        raise ConfigError(f"unknown collector {collector!r}")
    if epsilon < 0:
        raise DomainError("epsilon must be non-negative")
    module = require_differentiable(gradient_source or policy) if collector == "fgsm" else None
    r_min, r_max = reward_range
    out = []
    for b0 in range(0, episodes, batch_size):
        ids = list(range(first_episode + b0, first_episode + min(episodes, b0 + batch_size)))
        envs = [copy.deepcopy(env) for _ in ids]
        rngs = [np.random.default_rng(episode_seed(seed, i) ^ 0x5EED) for i in ids]
        obs = [e.reset(seed=episode_seed(seed, i)) for e, i in zip(envs, ids)]
        logs = [{"s": [], "a": [], "d": [], "r": [], "terminal": False, "truncated": False}
                for _ in ids]
        active = list(range(len(ids)))
        while active:
            S = np.stack([obs[j] for j in active]).astype(np.float32)
            if collector == "fgsm" and epsilon > 0:
                D = fgsm_perturbation(module, S, epsilon)
            elif collector == "random":
                D = np.stack([random_perturbation(rngs[j], S.shape[1:], epsilon) for j in active])
            else:
                D = np.zeros_like(S)
            A = policy.act(S + D)
            still = []
            for k, j in enumerate(active):
                nxt, r, done, info = envs[j].step(A[k])
                log = logs[j]
                log["s"].append(S[k])
                log["a"].append(A[k])
                log["d"].append(D[k])
                log["r"].append(normalize_reward(r, r_min, r_max))
                obs[j] = nxt
                if done:
                    log["terminal"] = True
                    log["truncated"] = bool(info.get("truncated", False))
                else:
                    still.append(j)
            active = still
        for log in logs:
            rewards = np.asarray(log["r"], dtype=np.float64)
            out.append(Trajectory(
                np.stack(log["s"]), np.asarray(log["a"]), np.stack(log["d"]), rewards,
                returns_to_go_all(rewards), None, log["terminal"], log["truncated"], collector,
            ))
    return out


def allocate_episodes(mix: dict, episodes: int) -> dict:
    """Largest-remainder split of ``episodes`` across collectors."""
    names = sorted(mix)
    raw = {k: float(mix[k]) * episodes for k in names}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = episodes - sum(counts.values())
    for k in sorted(names, key=lambda k: (counts[k] - raw[k], k))[:rest]:
        counts[k] += 1
    return counts


def collect_dataset(env, policy, env_id: str, mix: dict, episodes: int, epsilon: float, seed: int,
                    reward_range=(0.0, 1.0), config_hash: str = "", batch_size: int = 64,
                    gradient_source=None) -> Dataset:
    manifest = DatasetManifest(
        env_id=env_id, collector_mix=dict(mix), episode_count=episodes, epsilon=float(epsilon),
        seed=int(seed), reward_normalization={env_id: {"r_min": reward_range[0], "r_max": reward_range[1]}},
        obs_shape=tuple(env.obs_shape), n_actions=int(env.n_actions), config_hash=config_hash,
    ).validate()
    trajectories = []
    first = 0
    for name, count in allocate_episodes(mix, episodes).items():
        if count:
            trajectories += collect(env, policy, name, count, epsilon, seed, first_episode=first,
                                    batch_size=batch_size, reward_range=reward_range,
                                    gradient_source=gradient_source)
        first += count
    return Dataset(manifest, trajectories)


def iter_records(dataset: Dataset) -> Iterable[TrajectoryRecord]:
    for tr in dataset.trajectories:
        yield from tr.records()

"""Autoregressive perturbation decoder over trajectory tokens, its losses and training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, ShapeError
from .sequence import LN_EPS, EmbeddingConfig, MSCSAStack, ScaleConfig
from .trajectory import TokenSequence, image_shape, patchify_tensor, project_l2_np

NORMS = ("l1", "l2", "linf")
GENERATOR_CONDITIONS = ("weighted_advantage", "returns_to_go", "ordinary_advantage")


@dataclass
class GeneratorConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    scales: ScaleConfig = field(default_factory=ScaleConfig)
    context: int = 20
    patch_side: int = 14
    epsilon: float = 1.5
    omega: float = 1.0
    norm: str = "l2"
    condition: str = "weighted_advantage"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.condition not in GENERATOR_CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.context < 1:
            raise ConfigError("context must be positive")

    def to_dict(self) -> dict:
        return {"model_dim": self.embedding.model_dim, "num_heads": self.embedding.num_heads,
                "num_layers": self.embedding.num_layers, "dropout": self.embedding.dropout_rate,
                "max_sequence_length": self.embedding.max_sequence_length,
                "num_scales": self.scales.num_scales, "base_window": self.scales.base_window,
                "growth": self.scales.growth, "growth_ratio": self.scales.growth_ratio,
                "context": self.context, "patch_side": self.patch_side, "epsilon": self.epsilon,
                "omega": self.omega, "norm": self.norm, "condition": self.condition}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            EmbeddingConfig(d["model_dim"], d["num_heads"], d["num_layers"], d["dropout"],
                            d["max_sequence_length"]),
            ScaleConfig(d["num_scales"], d["base_window"], d["growth"], d["growth_ratio"]),
            d["context"], d["patch_side"], d["epsilon"], d["omega"], d["norm"], d["condition"],
        )


def safe_norm(x: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Norm over all non-batch dims of ``x [N, ...]``; the gradient at x = 0 is taken as 0."""
    flat = x.reshape(x.shape[0], -1)
    if kind == "l1":
        return flat.abs().sum(-1)
    if kind == "linf":
        return flat.abs().amax(-1)
    if kind != "l2":
        raise ConfigError(f"unknown norm {kind!r}")
    sq = (flat * flat).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def project_l2(delta: torch.Tensor, epsilon: float, obs_ndim: int) -> torch.Tensor:
    """Scale each ``[..., *obs]`` perturbation by ``min(1, epsilon/||delta||_2)``."""
    if epsilon <= 0:
        return torch.zeros_like(delta)
    lead = delta.shape[: delta.dim() - obs_ndim]
    n = safe_norm(delta.reshape(-1, *delta.shape[delta.dim() - obs_ndim:]))
    scale = epsilon / torch.clamp(n, min=epsilon)
    return delta * scale.reshape(*lead, *([1] * obs_ndim))


class Deconv2d(nn.Module):
    """Transposed convolution with kernel == stride on channels-last input.

    Without overlapping taps the op is one matmul and a reshuffle. It matches
    ``nn.ConvTranspose2d(c_in, c_out, k, stride=k)`` with the same weight
    layout ``[c_in, c_out, k, k]``, and is much faster on CPU for thin channels.
    """

    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.k, self.c_out = k, c_out
        self.weight = nn.Parameter(torch.empty(c_in, c_out, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    def forward(self, x):
        N, H, W, C = x.shape
        k = self.k
        y = x.reshape(-1, C) @ self.weight.permute(0, 2, 3, 1).reshape(C, k * k * self.c_out)
        y = y.reshape(N, H, W, k, k, self.c_out).permute(0, 1, 3, 2, 4, 5)
        return y.reshape(N, H * k, W * k, self.c_out) + self.bias


class PerturbationHead(nn.Module):
    """Two affine layers then three deconvolutions up to the image (affine only for vector observations)."""

    def __init__(self, model_dim: int, obs_shape, hidden: int = 128, channels: int = 16):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        img = image_shape(self.obs_shape)
        self.conv = img is not None and img[0] % 4 == 0 and img[1] % 4 == 0
        if self.conv:
            H, W, C = img
            self.grid = (H // 4, W // 4, channels)
            self.fc = nn.Sequential(nn.Linear(model_dim, hidden), nn.ReLU(),
                                    nn.Linear(hidden, channels * (H // 4) * (W // 4)), nn.ReLU())
            self.deconv = nn.Sequential(
                Deconv2d(channels, channels // 2, 2), nn.ReLU(),
                Deconv2d(channels // 2, channels // 4, 2), nn.ReLU(),
                Deconv2d(channels // 4, C, 1),
            )
        else:
            self.fc = nn.Sequential(nn.Linear(model_dim, hidden), nn.ReLU(),
                                    nn.Linear(hidden, int(np.prod(self.obs_shape))))

    def forward(self, z):
        lead = z.shape[:-1]
        x = self.fc(z.reshape(-1, z.shape[-1]))
        if self.conv:
            x = self.deconv(x.reshape(-1, *self.grid))
        return x.reshape(*lead, *self.obs_shape)


class PerturbationGenerator(nn.Module):
    """Decoder over ``[condition, patch_1..patch_X, perturbation, action]`` step groups.

    The perturbation for step t is read from the fused output at the last patch
    token of step t, so it depends only on earlier steps and the current state.
    """

    def __init__(self, obs_shape, n_actions: int, config: GeneratorConfig | None = None,
                 continuous: bool = False):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        self.obs_shape = tuple(obs_shape)
        self.obs_dim = int(np.prod(self.obs_shape))
        self.n_actions = n_actions
        self.continuous = continuous
        self.image = image_shape(self.obs_shape)
        p = config.patch_side
        if self.image is not None:
            H, W, C = self.image
            if H % p or W % p:
                raise ConfigError(f"{H}x{W} observations do not split into {p}px patches")
            self.num_patches, patch_dim = (H // p) * (W // p), p * p * C
        else:
            self.num_patches, patch_dim = 1, self.obs_dim
        self.tokens_per_step = self.num_patches + 3
        max_len = config.context * self.tokens_per_step
        if max_len > config.embedding.max_sequence_length:
            raise ConfigError(f"context of {config.context} steps needs {max_len} tokens, more than "
                              f"max_sequence_length={config.embedding.max_sequence_length}")
        d = config.embedding.model_dim
        self.cond_embed = nn.Linear(1, d)
        self.patch_embed = nn.Linear(patch_dim, d)
        self.delta_embed = nn.Linear(self.obs_dim, d)
        self.action_embed = nn.Linear(n_actions, d) if continuous else nn.Embedding(n_actions, d)
        self.pos = nn.Parameter(torch.randn(max_len, d) * 0.02)
        self.ln_in = nn.LayerNorm(d, eps=LN_EPS)
        self.stack = MSCSAStack(config.embedding, config.scales, self.tokens_per_step)
        self.head = PerturbationHead(d, self.obs_shape)
        self.forward_passes = 0

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def state_patches(self, states):
        if self.image is not None:
            return patchify_tensor(states.reshape(*states.shape[:2], *self.image), self.config.patch_side)
        return states.reshape(*states.shape[:2], 1, self.obs_dim)

    def embed(self, conditions, patches, deltas, actions):
        """Token matrix ``[B, T*(X+3), d]``."""
        B, T = conditions.shape
        if patches.shape[:3] != (B, T, self.num_patches):
            raise ShapeError(f"patch tokens {tuple(patches.shape)} do not match [{B}, {T}, {self.num_patches}, *]")
        if T > self.config.context:
            raise ShapeError(f"{T} steps exceed the decoder context of {self.config.context}")
        dtype = self.pos.dtype
        c = self.cond_embed(conditions.to(dtype)[..., None])[:, :, None]
        x = self.patch_embed(patches.to(dtype))
        dl = self.delta_embed(deltas.reshape(B, T, self.obs_dim).to(dtype))[:, :, None]
        a = self.action_embed(actions.to(dtype) if self.continuous else actions.long())[:, :, None]
        tokens = torch.cat([c, x, dl, a], dim=2).reshape(B, T * self.tokens_per_step, -1)
        return self.ln_in(tokens + self.pos[: tokens.shape[1]])

    def decode(self, conditions, states, deltas, actions):
        """Unprojected perturbation for every step: ``[B, T, *obs]``."""
        B, T = conditions.shape
        z = self.stack(self.embed(conditions, self.state_patches(states), deltas, actions))
        last_patch = torch.arange(T, device=z.device) * self.tokens_per_step + self.num_patches
        return self.head(z[:, last_patch])

    def forward(self, conditions, states, deltas, actions, epsilon: float | None = None):
        eps = self.config.epsilon if epsilon is None else epsilon
        return project_l2(self.decode(conditions, states, deltas, actions), eps, len(self.obs_shape))

    @torch.no_grad()
    def forward_perturbation(self, states, conditions, deltas, actions, epsilon: float | None = None):
        """One decoder pass for the newest step of a single history.

        ``states`` and ``conditions`` include the current step; ``deltas`` and
        ``actions`` hold the earlier steps only, and the current slots are zero.
        Returns a float32 array within the L2 budget.
        """
        eps = self.config.epsilon if epsilon is None else epsilon
        dtype = self.pos.dtype
        S = torch.as_tensor(np.asarray(states), dtype=dtype)
        T = S.shape[0]
        if tuple(S.shape[1:]) != self.obs_shape:
            raise ShapeError(f"state shape {tuple(S.shape[1:])} does not match model {self.obs_shape}")
        D = torch.zeros((T, *self.obs_shape), dtype=dtype)
        A = torch.zeros((T, self.n_actions) if self.continuous else (T,), dtype=dtype)
        if T > 1:
            D[:-1] = torch.as_tensor(np.asarray(deltas), dtype=dtype).reshape(T - 1, *self.obs_shape)
            A[:-1] = torch.as_tensor(np.asarray(actions), dtype=dtype).reshape(A[:-1].shape)
        C = torch.as_tensor(np.asarray(conditions, dtype=np.float64), dtype=dtype)
        self.forward_passes += 1
        raw = self.decode(C[None], S[None], D[None], A[None])[0, -1]
        return project_l2_np(raw.double().numpy(), eps, dtype=np.float32)

    def perturb_sequence(self, seq: TokenSequence, state, condition, epsilon: float | None = None):
        """``forward_perturbation`` from a TokenSequence history (prior steps) plus the current step."""
        prev = seq.num_steps
        patches = np.concatenate([seq.patches, self.state_patches(
            torch.as_tensor(np.asarray(state), dtype=torch.float64)[None, None]).numpy()[0]])
        states = np.stack([self._unpatch(p) for p in patches])
        conds = np.concatenate([seq.conditions, [condition]])
        return self.forward_perturbation(states, conds, seq.perturbations[:prev], seq.actions[:prev], epsilon)

    def _unpatch(self, patches):
        from .trajectory import PatchGrid, unpatchify

        if self.image is None:
            return patches.reshape(self.obs_shape)
        return unpatchify(PatchGrid(self.config.patch_side, patches, self.obs_shape))

    def spec(self) -> dict:
        return {"obs_shape": list(self.obs_shape), "n_actions": self.n_actions,
                "continuous": self.continuous, "config": self.config.to_dict()}


# ---------------------------------------------------------------- losses

@dataclass
class LossReport:
    action_loss: float
    norm_loss: float
    total: float


def action_loss(policy: nn.Module, states, deltas, actions, continuous: bool = False):
    """Sum over steps of the squared error between the policy output on ``s + delta`` and the logged action.

    Discrete policies compare their probability vector with the one-hot action.
    The sum over steps is averaged over the batch.
    """
    x = states + deltas
    if continuous:
        out = policy(x)
        target = actions.to(out.dtype)
    else:
        out = torch.softmax(policy(x), dim=-1)
        target = F.one_hot(actions.long(), out.shape[-1]).to(out.dtype)
    return ((out - target) ** 2).sum(-1).sum(-1).mean()


def norm_loss(deltas, kind: str = "l2", obs_ndim: int | None = None):
    """Mean perturbation norm over all (batch, step) entries of ``deltas [B, T, *obs]``."""
    obs_ndim = deltas.dim() - 2 if obs_ndim is None else obs_ndim
    flat = deltas.reshape(-1, *deltas.shape[deltas.dim() - obs_ndim:])
    return safe_norm(flat, kind).mean()


def generator_losses(model: PerturbationGenerator, policy: nn.Module, batch):
    conditions, states, deltas, actions = batch
    gen = model(conditions, states, deltas, actions)
    la = action_loss(policy, states, gen, actions, model.continuous)
    ln = norm_loss(gen, model.config.norm, len(model.obs_shape))
    return la + ln, la, ln


# ---------------------------------------------------------------- sampling and training

class SegmentSampler:
    """Fixed-length segments drawn with probability proportional to exp(omega * mean advantage)."""

    def __init__(self, dataset, context: int, condition: str = "weighted_advantage", omega: float = 1.0):
        if condition not in GENERATOR_CONDITIONS:
            raise ConfigError(f"unknown condition {condition!r}")
        if dataset.n_steps == 0:
            raise DataError("dataset is empty")
        if condition != "returns_to_go" and not dataset.annotated:
            raise DataError(f"condition {condition} needs an annotated dataset")
        self.dataset = dataset
        self.condition = condition
        self.length = min(context, min(len(t) for t in dataset.trajectories))
        L = self.length
        segs, means = [], []
        for i, tr in enumerate(dataset.trajectories):
            adv = tr.wadv
            for s in range(len(tr) - L + 1):
                segs.append((i, s))
                means.append(0.0 if adv is None else float(np.mean(adv[s:s + L])))
        self.segments = np.asarray(segs)
        self.segment_advantage = np.asarray(means)
        self.set_omega(omega)

    def set_omega(self, omega: float):
        self.omega = omega
        logits = omega * self.segment_advantage
        w = np.exp(logits - logits.max())
        self.probabilities = w / w.sum()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.segments), size=n, p=self.probabilities)

    def batch(self, idx, dtype=torch.float32):
        L = self.length
        C, S, D, A = [], [], [], []
        for i, s in self.segments[idx]:
            tr = self.dataset.trajectories[i]
            cond = tr.rtg if self.condition == "returns_to_go" else tr.wadv
            C.append(cond[s:s + L])
            S.append(tr.states[s:s + L])
            D.append(tr.deltas[s:s + L])
            A.append(tr.actions[s:s + L])
        return (torch.as_tensor(np.stack(C), dtype=dtype), torch.as_tensor(np.stack(S), dtype=dtype),
                torch.as_tensor(np.stack(D), dtype=dtype), torch.as_tensor(np.stack(A)))


def train_generator(dataset, model: PerturbationGenerator, policy: nn.Module, steps: int, lr: float,
                    batch_size: int = 128, seed: int = 0, sampler: SegmentSampler | None = None,
                    log_every: int = 1) -> dict:
    """Minimize ``L_a + L_norm`` over advantage-weighted segments; returns the loss curves."""
    sampler = sampler or SegmentSampler(dataset, model.config.context, model.config.condition,
                                        model.config.omega)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    for p in policy.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = {"step": [], "action_loss": [], "norm_loss": [], "total": []}
    for step in range(steps):
        batch = sampler.batch(sampler.sample(batch_size, rng), dtype=model.pos.dtype)
        total, la, ln = generator_losses(model, policy, batch)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            history["step"].append(step)
            history["action_loss"].append(la.item())
            history["norm_loss"].append(ln.item())
            history["total"].append(total.item())
    model.eval()
    return history


# ---------------------------------------------------------------- gradient check

def gradient_check(loss_fn, params, n_params: int = 200, steps=(1e-5, 1e-6, 1e-7), seed: int = 0) -> float:
    """Max relative error between autograd and central differences on sampled scalar parameters.

    ``loss_fn()`` must be deterministic (eval mode, float64). Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``; unused parameters have gradient 0.
    Each coordinate keeps its best estimate over ``steps``: roundoff spoils a
    small step on tiny gradients, and a ReLU kink inside a large step spoils
    that one, but a wrong gradient disagrees at every step.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].view(-1)
            old = view[j].item()
            ana = grads[k].reshape(-1)[j].item()
            best = np.inf
            for h in steps:
                view[j] = old + h
                up = loss_fn().item()
                view[j] = old - h
                down = loss_fn().item()
                view[j] = old
                num = (up - down) / (2 * h)
                best = min(best, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
            worst = max(worst, best)
    return worst

"""State-only predictor of the in-sample maximum (weighted) advantage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError
from .trajectory import image_shape, patchify_tensor, project_l2_np
from .values import ValueHeads, transform_advantage

CLIP_MARGIN = 1e-6
TARGET_MODES = ("max_product", "argmax_mu")


def softmax_mu(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size == 0:
        raise DataError("empty candidate set")
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy(mu) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    nz = mu[mu > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


@dataclass
class AdvantageCandidateSet:
    state: np.ndarray
    action: object
    candidates: np.ndarray  # [N_c, *obs]
    logits: np.ndarray  # [N_c]
    mu: np.ndarray  # [N_c]


def regression_target(cset, mode: str = "max_product") -> float:
    """``max_j mu_j * logit_j``; ``argmax_mu`` reads the logit at the most likely candidate instead."""
    logits = np.asarray(cset.logits, dtype=np.float64)
    mu = np.asarray(cset.mu, dtype=np.float64)
    if mode == "max_product":
        return float(np.max(mu * logits))
    if mode == "argmax_mu":
        return float(logits[int(np.argmax(mu))])
    raise ConfigError(f"unknown target mode {mode!r}")


def candidate_logits(heads: ValueHeads, states, actions, candidates, transform="weighted"):
    """Logits ``[B, N_c]`` for candidates ``[B, N_c, *obs]`` at logged (s, a)."""
    dtype = heads.q_net[0].weight.dtype
    s = torch.as_tensor(np.asarray(states), dtype=dtype)
    a = torch.as_tensor(np.asarray(actions))
    c = torch.as_tensor(np.asarray(candidates), dtype=dtype)
    B, N = c.shape[:2]
    with torch.no_grad():
        v = heads.v_value(s, a)
        q = heads.q_value(s.repeat_interleave(N, 0), a.repeat_interleave(N, 0), c.reshape(B * N, *c.shape[2:]))
        A = (q.reshape(B, N) - v[:, None]).double().numpy()
    return transform_advantage(A, heads.lam, transform)


def candidate_mu(state, action, candidates, heads: ValueHeads, transform="weighted") -> AdvantageCandidateSet:
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        raise DataError("empty candidate set")
    logits = np.asarray(candidate_logits(heads, np.asarray(state)[None], np.asarray([action]),
                                         candidates[None], transform))[0]
    return AdvantageCandidateSet(np.asarray(state), action, candidates, logits, softmax_mu(logits))


class StateEncoder(nn.Module):
    """Patch embedding with positions and LayerNorm, mean-pooled to one vector."""

    def __init__(self, obs_shape, model_dim: int = 64, patch_side: int = 14):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        self.patch_side = patch_side
        img = image_shape(self.obs_shape)
        if img is not None:
            H, W, C = img
            n_patches = (H // patch_side) * (W // patch_side)
            in_dim = patch_side * patch_side * C
        else:
            n_patches, in_dim = 1, int(np.prod(self.obs_shape))
        self.image = img
        self.embed = nn.Linear(in_dim, model_dim)
        self.pos = nn.Parameter(torch.randn(n_patches, model_dim) * 0.02)
        self.norm = nn.LayerNorm(model_dim, eps=1e-5)

    def tokens(self, states):
        if self.image is not None:
            return patchify_tensor(states.reshape(-1, *self.image), self.patch_side)
        return states.reshape(-1, 1, int(np.prod(self.obs_shape)))

    def forward(self, states):
        return self.norm(self.embed(self.tokens(states)) + self.pos).mean(dim=1)


class AdvantagePredictor(nn.Module):
    def __init__(self, obs_shape, lam: float = 0.5, model_dim: int = 64, hidden: int = 64,
                 patch_side: int = 14, encoder: str = "patch", head: str = "mlp", clip: bool = True,
                 kappa: float = 0.1):
        super().__init__()
        if kappa < 0:
            raise ConfigError("kappa must be non-negative")
        self.obs_shape = tuple(obs_shape)
        self.lam, self.kappa, self.clip = lam, kappa, clip
        self.config = {"model_dim": model_dim, "hidden": hidden, "patch_side": patch_side,
                       "encoder": encoder, "head": head}
        if encoder == "patch":
            self.encoder = StateEncoder(obs_shape, model_dim, patch_side)
            feat = model_dim
        elif encoder == "identity":
            self.encoder = nn.Flatten()
            feat = int(np.prod(self.obs_shape))
        else:
            raise ConfigError(f"unknown encoder {encoder!r}")
        if head == "mlp":
            self.head = nn.Sequential(nn.Linear(feat, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        elif head == "linear":
            self.head = nn.Sequential(nn.Linear(feat, 1))
        else:
            raise ConfigError(f"unknown head {head!r}")
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    @property
    def bound(self) -> float:
        return 1.0 / self.lam - CLIP_MARGIN

    def encode(self, states):
        return self.encoder(states)

    def forward(self, states):
        return self.head(self.encode(states)).squeeze(-1)

    @torch.no_grad()
    def predict_max_advantage(self, states):
        """Clipped prediction; a single state returns a float."""
        x = np.asarray(states)
        single = x.shape == self.obs_shape
        if single:
            x = x[None]
        out = self(torch.as_tensor(x, dtype=self.head[-1].weight.dtype)).double().numpy()
        if self.clip:
            out = np.clip(out, -self.bound, self.bound)
        return float(out[0]) if single else out

    def spec(self) -> dict:
        return {"obs_shape": list(self.obs_shape), "lam": self.lam, "kappa": self.kappa,
                "clip": self.bound if self.clip else None, **self.config}


@dataclass
class PredictorTargets:
    states: np.ndarray
    targets: np.ndarray
    entropies: np.ndarray
    n_candidates: int


def build_targets(dataset, heads: ValueHeads, predictor: AdvantagePredictor, epsilon: float,
                  n_neighbors: int = 8, n_gaussian: int = 8, max_states: int = 4096, seed: int = 0,
                  transform: str = "weighted", mode: str = "max_product", chunk: int = 256) -> PredictorTargets:
    """Candidate sets from logged perturbations at the nearest encoded states plus Gaussian proposals."""
    if dataset.n_steps == 0:
        raise DataError("dataset is empty")
    rng = np.random.default_rng(seed)
    flat = dataset.flat()
    S, D, A = flat["states"], flat["deltas"], flat["actions"]
    N = len(S)
    pick = np.sort(rng.choice(N, size=min(max_states, N), replace=False))
    dtype = predictor.head[-1].weight.dtype
    with torch.no_grad():
        enc = torch.cat([predictor.encode(torch.as_tensor(S[i:i + 8192], dtype=dtype))
                         for i in range(0, N, 8192)])
    k = min(n_neighbors, N)
    targets, ents = [], []
    for c0 in range(0, len(pick), chunk):
        rows = pick[c0:c0 + chunk]
        dist = torch.cdist(enc[rows].double(), enc.double())
        # Repeated states are common; a seeded jitter spreads ties across the whole log.
        dist = dist + torch.from_numpy(rng.uniform(0, 1e-9, size=tuple(dist.shape)))
        nn_idx = torch.topk(-dist, k, dim=1, sorted=True).indices.numpy()
        cands = [D[nn_idx]]
        if n_gaussian:
            g = rng.normal(0.0, epsilon / 4, size=(len(rows), n_gaussian, *S.shape[1:]))
            g = np.stack([[project_l2_np(x, epsilon, dtype=D.dtype) for x in row] for row in g])
            cands.append(g)
        cands = np.concatenate(cands, axis=1)
        logits = np.asarray(candidate_logits(heads, S[rows], A[rows], cands, transform))
        for j in range(len(rows)):
            mu = softmax_mu(logits[j])
            targets.append(regression_target(AdvantageCandidateSet(None, None, None, logits[j], mu), mode))
            ents.append(entropy(mu))
    return PredictorTargets(S[pick], np.asarray(targets), np.asarray(ents), k + n_gaussian)


def predictor_loss(predictor: AdvantagePredictor, states, targets, entropies, kappa: float):
    """Squared error to the target minus ``kappa`` times the candidate entropy.

    The entropy comes from the value heads, so it shifts the loss value
    without contributing a gradient to the predictor.
    """
    pred = predictor(states)
    reg = ((pred - targets) ** 2).mean()
    ent = entropies.mean()
    return reg - kappa * ent, reg, ent


def fit_predictor(predictor: AdvantagePredictor, states, targets, entropies=None, steps: int = 1000,
                  lr: float = 1e-3, kappa: float | None = None, batch_size: int = 128, seed: int = 0) -> dict:
    states = np.asarray(states)
    if len(states) == 0:
        raise DataError("no states to fit")
    kappa = predictor.kappa if kappa is None else kappa
    dtype = predictor.head[-1].weight.dtype
    S = torch.as_tensor(states, dtype=dtype)
    T = torch.as_tensor(np.asarray(targets), dtype=dtype)
    H = torch.zeros_like(T) if entropies is None else torch.as_tensor(np.asarray(entropies), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(predictor.parameters(), lr=lr)
    history = {"loss": [], "reg": [], "entropy": []}
    for _ in range(steps):
        idx = torch.randint(len(S), (batch_size,), generator=gen) if len(S) > batch_size else slice(None)
        loss, reg, ent = predictor_loss(predictor, S[idx], T[idx], H[idx], kappa)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["loss"].append(loss.item())
        history["reg"].append(reg.item())
        history["entropy"].append(ent.item())
    return history


def train_predictor(dataset, heads: ValueHeads, predictor: AdvantagePredictor, steps: int, lr: float,
                    epsilon: float, seed: int = 0, max_states: int = 4096, transform: str = "weighted",
                    mode: str = "max_product", batch_size: int = 128) -> dict:
    tg = build_targets(dataset, heads, predictor, epsilon, max_states=max_states, seed=seed,
                       transform=transform, mode=mode)
    history = fit_predictor(predictor, tg.states, tg.targets, tg.entropies, steps, lr,
                            batch_size=batch_size, seed=seed)
    history["n_candidates"] = tg.n_candidates
    history["target_mean"] = float(tg.targets.mean())
    return history

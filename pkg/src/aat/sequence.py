"""Multi-scale causal self-attention (MSCSA).

Each scale k runs an independent causal attention block over a window of the
last ``L_k`` timesteps; the per-scale outputs are merged by a sigmoid gate
conditioned on the current token.  Windows are measured in timesteps, so a
trajectory with several tokens per step (``tokens_per_step``) sees the same
temporal extent at every token of a step.

Two equivalent routes are provided:

* ``mscsa_forward`` evaluates every position at once using banded masks
  (the fast path used by the models);
* ``explicit_scale_stack`` materialises the left-padded window ending at one
  position, exactly as the windows are defined, and is used to cross-check
  the banded path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, LengthError, ShapeError

LN_EPS = 1e-5
GROWTH_MODES = ("exponential", "linear", "fixed")


@dataclass(frozen=True)
class EmbeddingConfig:
    model_dim: int = 128
    num_heads: int = 8
    num_layers: int = 6
    dropout_rate: float = 0.2
    max_sequence_length: int = 140

    def __post_init__(self):
        for name in ("model_dim", "num_heads", "num_layers", "max_sequence_length"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class ScaleConfig:
    """Window schedule.  Defaults give windows ``(5, 10, 20)``."""

    num_scales: int = 3
    base_window: int = 5
    growth: str = "exponential"
    growth_ratio: float = 2.0

    def __post_init__(self):
        if self.num_scales < 1 or self.base_window < 1:
            raise ConfigError("num_scales and base_window must be positive")
        if self.growth not in GROWTH_MODES:
            raise ConfigError(f"unknown growth mode {self.growth!r}")
        if self.growth_ratio <= 0:
            raise ConfigError("growth_ratio must be positive")
        windows = self.windows
        if self.growth == "fixed":
            if self.num_scales > 1:
                warnings.warn(
                    "fixed window growth: all scales share one window, multi-scale "
                    "attention degenerates to repeated single-scale attention",
                    stacklevel=3,
                )
        elif any(b <= a for a, b in zip(windows, windows[1:])):
            raise ConfigError(f"window lengths must strictly increase, got {windows}")

    @property
    def windows(self) -> tuple[int, ...]:
        n, r = self.base_window, self.growth_ratio
        if self.growth == "exponential":
            out = [n * r**k for k in range(self.num_scales)]
        elif self.growth == "linear":
            out = [n * (1 + k * (r - 1)) for k in range(self.num_scales)]
        else:
            out = [n] * self.num_scales
        return tuple(max(1, int(round(w))) for w in out)

    @property
    def max_window(self) -> int:
        return max(self.windows)


@dataclass
class AttentionParams:
    """Raw parameter view of one MSCSA layer (plus the optional input embedding)."""

    w_q: list[torch.Tensor]
    w_k: list[torch.Tensor]
    w_v: list[torch.Tensor]
    w_g: torch.Tensor
    w_s: torch.Tensor | None = None
    pos: torch.Tensor | None = None
    begin: torch.Tensor | None = None

    @property
    def model_dim(self) -> int:
        return self.w_g.shape[0]


@dataclass
class ScaleStack:
    windows: list[torch.Tensor]
    masks: list[torch.Tensor]
    outputs: list[torch.Tensor]
    gates: list[torch.Tensor] = field(default_factory=list)
    fused: torch.Tensor | None = None


def embed_inputs(states, w_s, pos, gain=None, bias=None):
    """``LayerNorm(W_s s_i + p_i)`` for every row of ``states`` ([T, dim_s] or [B, T, dim_s])."""
    T = states.shape[-2]
    if T > pos.shape[0]:
        raise LengthError(f"sequence of length {T} exceeds max_sequence_length={pos.shape[0]}")
    if states.shape[-1] != w_s.shape[1]:
        raise ShapeError(f"state width {states.shape[-1]} does not match W_s {tuple(w_s.shape)}")
    h = states @ w_s.T + pos[:T]
    return F.layer_norm(h, (h.shape[-1],), gain, bias, eps=LN_EPS)


def build_causal_mask(L: int, dtype=torch.float64, device=None) -> torch.Tensor:
    if L < 1:
        raise DomainError("causal mask length must be >= 1")
    return torch.full((L, L), float("-inf"), dtype=dtype, device=device).triu(1)


def window_mask(T: int, window: int, tokens_per_step: int = 1, dtype=torch.float64, device=None):
    """Additive mask letting token i see tokens j <= i from the last ``window`` timesteps."""
    if T < 1 or window < 1:
        raise DomainError("mask dimensions must be positive")
    idx = torch.arange(T, device=device)
    step = idx // tokens_per_step
    allowed = (idx[None, :] <= idx[:, None]) & (step[None, :] > step[:, None] - window)
    mask = torch.zeros((T, T), dtype=dtype, device=device)
    return mask.masked_fill(~allowed, float("-inf"))


def scale_attention(
    window,
    w_q,
    w_k,
    w_v,
    mask,
    num_heads: int = 1,
    dropout_p: float = 0.0,
    training: bool = False,
    return_weights: bool = False,
):
    """``Softmax(Q K^T / sqrt(d_head) + M) V`` with head-partitioned projections."""
    L, d = window.shape[-2], window.shape[-1]
    if mask.shape != (L, L):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match window length {L}")
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    lead = window.shape[:-2]

    def split(x):
        return x.reshape(*lead, L, num_heads, hd).transpose(-3, -2)

    q, k, v = split(window @ w_q), split(window @ w_k), split(window @ w_v)
    if not return_weights:
        # fused kernel; same maths as the explicit route below
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask.to(window.dtype),
                                             dropout_p=dropout_p if training else 0.0)
        return out.transpose(-3, -2).reshape(*lead, L, d)
    logits = q @ k.transpose(-2, -1) / math.sqrt(hd) + mask.to(window.dtype)
    weights = torch.softmax(logits, dim=-1)
    if dropout_p and training:
        weights = F.dropout(weights, dropout_p, training=True)
    out = (weights @ v).transpose(-3, -2).reshape(*lead, L, d)
    if return_weights:
        return out, weights
    return out


def gated_fusion(branch_outputs: Sequence[torch.Tensor], h, w_g, return_gates: bool = False):
    """``z = sum_k sigmoid(W_g [o_k; h]) * o_k`` (broadcast over leading dims)."""
    if len(branch_outputs) < 1:
        raise ShapeError("gated fusion needs at least one scale")
    d = h.shape[-1]
    if w_g.shape != (d, 2 * d):
        raise ShapeError(f"W_g must be [{d} x {2 * d}], got {tuple(w_g.shape)}")
    z = torch.zeros_like(h)
    gates = []
    for o in branch_outputs:
        if o.shape[-1] != d:
            raise ShapeError("all fused vectors must share the token width")
        g = torch.sigmoid(torch.cat([o, h], dim=-1) @ w_g.T)
        gates.append(g)
        z = z + g * o
    if return_gates:
        return z, gates
    return z


def mscsa_forward(
    sequence,
    scales: ScaleConfig,
    params: AttentionParams,
    num_heads: int = 1,
    tokens_per_step: int = 1,
    dropout_p: float = 0.0,
    training: bool = False,
    return_branches: bool = False,
):
    """Fused multi-scale output at every position of ``sequence`` ([..., T, d])."""
    T, d = sequence.shape[-2], sequence.shape[-1]
    if T < 1:
        raise ShapeError("empty sequence")
    if params.model_dim != d:
        raise ShapeError(f"sequence width {d} does not match parameters ({params.model_dim})")
    branches = []
    for k, L in enumerate(scales.windows):
        mask = window_mask(T, L, tokens_per_step, dtype=sequence.dtype, device=sequence.device)
        branches.append(
            scale_attention(
                sequence, params.w_q[k], params.w_k[k], params.w_v[k], mask,
                num_heads=num_heads, dropout_p=dropout_p, training=training,
            )
        )
    z = gated_fusion(branches, sequence, params.w_g)
    if return_branches:
        return z, branches
    return z


def explicit_scale_stack(sequence, t: int, scales: ScaleConfig, params: AttentionParams,
                         num_heads: int = 1) -> ScaleStack:
    """Materialise the windows ending at position ``t`` (one token per step).

    Windows that would start before position 0 are left-padded with the begin
    token; padded columns are masked so real rows never attend to them.
    """
    d = sequence.shape[-1]
    begin = params.begin if params.begin is not None else sequence.new_zeros(d)
    stack = ScaleStack([], [], [])
    last = []
    for k, L in enumerate(scales.windows):
        start = t - L + 1
        n_pad = max(0, -start)
        real = sequence[max(0, start): t + 1]
        window = torch.cat([begin.expand(n_pad, d), real], dim=0)
        mask = build_causal_mask(L, dtype=sequence.dtype, device=sequence.device)
        if n_pad:
            mask[n_pad:, :n_pad] = float("-inf")
        out = scale_attention(window, params.w_q[k], params.w_k[k], params.w_v[k], mask, num_heads)
        stack.windows.append(window)
        stack.masks.append(mask)
        stack.outputs.append(out)
        last.append(out[-1])
    stack.fused, stack.gates = gated_fusion(last, sequence[t], params.w_g, return_gates=True)
    return stack


def _init_matrix(rows, cols, generator=None):
    return nn.Parameter(torch.randn(rows, cols, generator=generator) / math.sqrt(cols))


class MultiScaleCausalSelfAttention(nn.Module):
    def __init__(self, model_dim, num_heads, scales: ScaleConfig, dropout=0.0, tokens_per_step=1):
        super().__init__()
        if model_dim % num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.scales = scales
        self.dropout = dropout
        self.tokens_per_step = tokens_per_step
        K, d = scales.num_scales, model_dim
        self.w_q = nn.ParameterList([_init_matrix(d, d) for _ in range(K)])
        self.w_k = nn.ParameterList([_init_matrix(d, d) for _ in range(K)])
        self.w_v = nn.ParameterList([_init_matrix(d, d) for _ in range(K)])
        self.w_g = _init_matrix(d, 2 * d)
        # Masked out of every real attention row; kept so padded windows have a defined value.
        self.begin_token = nn.Parameter(torch.zeros(d))

    def params(self) -> AttentionParams:
        return AttentionParams(list(self.w_q), list(self.w_k), list(self.w_v), self.w_g,
                               begin=self.begin_token)

    def forward(self, x, return_branches=False):
        out = mscsa_forward(
            x, self.scales, self.params(), num_heads=self.num_heads,
            tokens_per_step=self.tokens_per_step, dropout_p=self.dropout,
            training=self.training, return_branches=return_branches,
        )
        if return_branches:
            z, branches = out
            return F.dropout(z, self.dropout, self.training), branches
        return F.dropout(out, self.dropout, self.training)


class InputEmbedding(nn.Module):
    """``h_i = LayerNorm(W_s s_i + p_i)`` with a learnable positional table."""

    def __init__(self, input_dim, model_dim, max_sequence_length):
        super().__init__()
        self.w_s = _init_matrix(model_dim, input_dim)
        self.pos = nn.Parameter(torch.randn(max_sequence_length, model_dim) * 0.02)
        self.norm = nn.LayerNorm(model_dim, eps=LN_EPS)

    def forward(self, states):
        return embed_inputs(states, self.w_s, self.pos, self.norm.weight, self.norm.bias)


class MSCSABlock(nn.Module):
    def __init__(self, model_dim, num_heads, scales, dropout=0.0, tokens_per_step=1):
        super().__init__()
        self.ln1 = nn.LayerNorm(model_dim, eps=LN_EPS)
        self.attn = MultiScaleCausalSelfAttention(model_dim, num_heads, scales, dropout, tokens_per_step)
        self.ln2 = nn.LayerNorm(model_dim, eps=LN_EPS)
        self.mlp = nn.Sequential(
            nn.Linear(model_dim, 4 * model_dim),
            nn.GELU(),
            nn.Linear(4 * model_dim, model_dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class MSCSAStack(nn.Module):
    """``num_layers`` residual MSCSA blocks followed by a final LayerNorm."""

    def __init__(self, config: EmbeddingConfig, scales: ScaleConfig, tokens_per_step=1):
        super().__init__()
        self.config = config
        self.scales = scales
        self.blocks = nn.ModuleList(
            MSCSABlock(config.model_dim, config.num_heads, scales, config.dropout_rate, tokens_per_step)
            for _ in range(config.num_layers)
        )
        self.ln_f = nn.LayerNorm(config.model_dim, eps=LN_EPS)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

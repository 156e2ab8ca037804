"""Dynamic change focus: agent attention + Sobel edge magnitude, fused as a
residual sigmoid gate over the fused difference features.

Attention primitives operate on the last two axes ``[..., N, d]`` so they
apply equally to single matrices and to batched multi-head tensors.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DcfmConfig
from .errors import ConfigError, InputError, PreconditionError, ShapeError

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))


def _check_qkv(q, k, v):
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[-1] < 1:
        raise ShapeError(f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise InputError(f"{name} contains NaN or Inf")


def softmax_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)


def _softmax_attention(q, k, v):
    return softmax_weights(q, k) @ v


def softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-normalized exp(q.k / sqrt(d)) weighting of the rows of ``v``."""
    _check_qkv(q, k, v)
    return _softmax_attention(q, k, v)


def phi_kernel(name: str):
    if name == "softplus":
        return F.softplus
    if name == "shifted-rectifier":
        return lambda x: F.relu(x) + 1e-6
    raise ConfigError(f"unknown feature map {name!r}")


def linear_attention(q, k, v, phi="softplus") -> torch.Tensor:
    """Kernelized attention computed as phi(Q) (phi(K)^T V) / phi(Q) sum_j phi(K_j)^T.

    Never materializes the N x N similarity matrix.
    """
    _check_qkv(q, k, v)
    fn = phi_kernel(phi) if isinstance(phi, str) else phi
    pq, pk = fn(q), fn(k)
    kv = pk.transpose(-2, -1) @ v  # [..., d, d_v]
    z = pk.sum(dim=-2, keepdim=True).transpose(-2, -1)  # [..., d, 1]
    den = pq @ z
    if not (den > 0).all():
        raise RuntimeError("linear attention normalizer is not strictly positive")
    return (pq @ kv) / den


def agent_grid(n: int, h: int, w: int) -> tuple[int, int]:
    """Agent layout for ``n`` agents over an ``h x w`` token grid, clamped to the grid."""
    side = max(1, math.isqrt(n))
    return min(side, h), min(max(1, n // side), w)


def pool_agents(q: torch.Tensor, n: int, spatial: tuple[int, int] | None = None) -> torch.Tensor:
    """Agent tokens by adaptive average pooling of ``q`` over the token axis.

    With ``spatial=(h, w)`` the tokens are pooled as an image into the grid
    given by :func:`agent_grid`, so each agent summarizes a contiguous patch.
    """
    N = q.shape[-2]
    if n > N:
        raise PreconditionError(f"cannot pool {N} tokens into {n} agents")
    if n < 1:
        raise PreconditionError("need at least one agent")
    lead, d = q.shape[:-2], q.shape[-1]
    flat = q.reshape(-1, N, d).transpose(1, 2)  # [M, d, N]
    if spatial is not None:
        h, w = spatial
        if h * w != N:
            raise ShapeError(f"token count {N} != {h}*{w}")
        gh, gw = agent_grid(n, h, w)
        pooled = F.adaptive_avg_pool2d(flat.reshape(-1, d, h, w), (gh, gw)).flatten(2)
    else:
        pooled = F.adaptive_avg_pool1d(flat, n)
    return pooled.transpose(1, 2).reshape(*lead, -1, d)


def agent_attention(q, k, v, n: int | None = None, agents: torch.Tensor | None = None, spatial=None):
    """Two softmax stages mediated by agent tokens.

    Agents first attend to (K, V) as queries; then the original queries
    attend to the agents, which serve as keys with the aggregated agent
    values as values.
    """
    _check_qkv(q, k, v)
    if agents is None:
        if n is None:
            raise ConfigError("agent_attention needs either n or explicit agents")
        agents = pool_agents(q, n, spatial)
    agent_v = _softmax_attention(agents, k, v)
    return _softmax_attention(q, agents, agent_v)


def softmax_attention_macs(n_q: int, n_k: int, d: int, d_v: int | None = None) -> int:
    d_v = d if d_v is None else d_v
    return n_q * n_k * d + n_q * n_k * d_v


def linear_attention_macs(n_q: int, n_k: int, d: int, d_v: int | None = None) -> int:
    d_v = d if d_v is None else d_v
    return n_k * d * d_v + n_q * d * d_v + n_q * d


def agent_attention_macs(n_q: int, n_k: int, n_agents: int, d: int, d_v: int | None = None) -> int:
    return softmax_attention_macs(n_agents, n_k, d, d_v) + softmax_attention_macs(n_q, n_agents, d, d_v)


def sobel_gradients(x: torch.Tensor):
    """Per-channel (Gx, Gy) with replicate padding; ``x`` is [B, C, H, W]."""
    if x.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W], got {tuple(x.shape)}")
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise PreconditionError(f"Sobel needs spatial size >= 3, got {tuple(x.shape[-2:])}")
    C = x.shape[1]
    kx = x.new_tensor(SOBEL_X).expand(C, 1, 3, 3)
    ky = x.new_tensor(SOBEL_Y).expand(C, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return F.conv2d(padded, kx, groups=C), F.conv2d(padded, ky, groups=C)


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    gx, gy = sobel_gradients(x)
    sq = gx * gx + gy * gy
    # gradient of sqrt at 0 is undefined; route zeros through a safe branch
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


class AgentAttention(nn.Module):
    """Multi-head agent attention over a feature map's tokens."""

    def __init__(self, dim: int, cfg: DcfmConfig):
        super().__init__()
        if dim % cfg.heads:
            raise ConfigError(f"dim {dim} not divisible by heads {cfg.heads}")
        self.dim = dim
        self.heads = cfg.heads
        self.num_agents = cfg.num_agents
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=cfg.include_bias)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.qkv.weight, std=0.02)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        if self.qkv.bias is not None:
            nn.init.zeros_(self.qkv.bias)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        qkv = self.qkv(tokens).reshape(B, H * W, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        agents = pool_agents(q, min(self.num_agents, H * W), spatial=(H, W))
        out = _softmax_attention(q, agents, _softmax_attention(agents, k, v))
        out = self.proj(out.transpose(1, 2).reshape(B, H * W, C))
        return out.transpose(1, 2).reshape(B, C, H, W)

    def macs(self, h: int, w: int) -> int:
        n = h * w
        gh, gw = agent_grid(min(self.num_agents, n), h, w)
        d = self.dim // self.heads
        attn = self.heads * agent_attention_macs(n, n, gh * gw, d)
        return n * self.dim * 3 * self.dim + attn + n * self.dim * self.dim


class DynamicChangeFocus(nn.Module):
    """``x + sigmoid(combine(attention(x), edge(x))) * x``.

    ``variant='alpha'`` drops the attention branch, ``'beta'`` the edge branch.
    """

    def __init__(self, channels: int, cfg: DcfmConfig, variant: str | None = None):
        super().__init__()
        variant = variant or cfg.variant
        if variant not in ("full", "alpha", "beta"):
            raise ConfigError(f"unknown DCFM variant {variant!r}")
        self.variant = variant
        self.attn = AgentAttention(channels, cfg) if variant in ("full", "beta") else None
        self.edge = nn.Conv2d(channels, channels, 1) if variant in ("full", "alpha") else None
        branches = (self.attn is not None) + (self.edge is not None)
        self.combine = nn.Conv2d(branches * channels, channels, 1)

    def branches(self, x):
        a = self.attn(x) if self.attn is not None else None
        e = self.edge(sobel_magnitude(x)) if self.edge is not None else None
        return a, e

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, e = self.branches(x)
        gate = torch.sigmoid(self.combine(torch.cat([t for t in (a, e) if t is not None], dim=1)))
        return x + gate * x


def dcfm_forward(x: torch.Tensor, module: DynamicChangeFocus) -> torch.Tensor:
    return module(x)

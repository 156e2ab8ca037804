"""Weight-sharing pyramid transformer encoder.

Each stage is an overlapping strided-conv patch embedding followed by
pre-norm transformer blocks whose attention pools keys/values with a
strided convolution (spatial reduction). Stages run at strides 4, 8, 16, 32.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import PATCH_KERNELS, PATCH_STRIDES, PYRAMID_STRIDES, EncoderConfig
from .errors import ConfigError, PreconditionError, ShapeError


def init_transformer_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class SpatialReductionAttention(nn.Module):
    """Multi-head attention with keys/values pooled by a ``sr_ratio`` strided conv."""

    def __init__(self, dim: int, heads: int = 1, sr_ratio: int = 1, qkv_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} should be divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.sr_ratio = sr_ratio

        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, dim * 2, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def reduce(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """Tokens used for keys and values: [B, N / sr^2, C]."""
        if self.sr_ratio == 1:
            return x
        B, N, C = x.shape
        x_ = x.transpose(1, 2).reshape(B, C, h, w)
        x_ = self.sr(x_).flatten(2).transpose(1, 2)
        return self.norm(x_)

    def attention_weights(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """Softmax weights [B, heads, N, N_reduced]."""
        self._check(x, h, w)
        q, k, _ = self._qkv(x, h, w)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        self._check(x, h, w)
        B, N, C = x.shape
        q, k, v = self._qkv(x, h, w)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)

    def _qkv(self, x, h, w):
        B, N, C = x.shape
        q = self.q(x).reshape(B, N, self.heads, self.head_dim).transpose(1, 2)
        kv = self.kv(self.reduce(x, h, w)).reshape(B, -1, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return q, kv[0], kv[1]

    def _check(self, x, h, w):
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"expected tokens [B, N, {self.dim}], got {tuple(x.shape)}")
        if x.shape[1] != h * w:
            raise ShapeError(f"token count {x.shape[1]} != {h}*{w}")
        if h % self.sr_ratio or w % self.sr_ratio:
            raise ConfigError(f"sr_ratio {self.sr_ratio} does not divide spatial size ({h}, {w})")

    def macs(self, h: int, w: int) -> int:
        n = h * w
        m = n // (self.sr_ratio ** 2)
        macs = n * self.dim * self.dim  # q
        macs += m * self.dim * 2 * self.dim  # kv
        macs += 2 * n * m * self.dim  # q k^T and attn v, summed over heads
        macs += n * self.dim * self.dim  # proj
        if self.sr_ratio > 1:
            macs += m * self.dim * self.dim * self.sr_ratio ** 2
        return macs


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, max(1, int(dim * mlp_ratio)))

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.mlp(self.norm2(x))
        return x


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class PyramidEncoder(nn.Module):
    """Four-stage pyramid transformer; ``forward`` returns feature maps at strides 4/8/16/32."""

    strides = PYRAMID_STRIDES

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch = cfg.in_channels
        for j in range(4):
            dim = cfg.channels[j]
            self.embeds.append(OverlapPatchEmbed(in_ch, dim, PATCH_KERNELS[j], PATCH_STRIDES[j]))
            self.stages.append(nn.ModuleList(
                TransformerBlock(dim, cfg.heads[j], cfg.sr_ratios[j], cfg.mlp_ratio) for _ in range(cfg.depths[j])
            ))
            self.norms.append(nn.LayerNorm(dim))
            in_ch = dim
        self.apply(init_transformer_weights)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise PreconditionError(f"expected image batch [B, {self.cfg.in_channels}, H, W], got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H < 32 or W < 32 or H % 32 or W % 32:
            raise PreconditionError(f"image size {H}x{W} must be a multiple of 32 and at least 32")
        if not torch.isfinite(x).all():
            raise PreconditionError("image contains non-finite values")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(x)
        B = x.shape[0]
        pyramid = []
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            tokens, h, w = embed(x)
            for blk in blocks:
                tokens = blk(tokens, h, w)
            tokens = norm(tokens)
            x = tokens.transpose(1, 2).reshape(B, -1, h, w)
            pyramid.append(x)
        return pyramid


class SiameseEncoder(nn.Module):
    """Applies a single :class:`PyramidEncoder` to both temporal images."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = PyramidEncoder(cfg)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor):
        if x1.shape != x2.shape:
            raise PreconditionError(f"bi-temporal images differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        return self.backbone(x1), self.backbone(x2)


def encode_pyramid(image: torch.Tensor, encoder: PyramidEncoder) -> list[torch.Tensor]:
    return encoder(image)


def siamese_encode(image_a: torch.Tensor, image_b: torch.Tensor, encoder: SiameseEncoder):
    return encoder(image_a, image_b)

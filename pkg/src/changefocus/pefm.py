"""Progressive enhanced fusion of bi-temporal pyramid features.

Per level: each temporal feature map is preprocessed by its own conv block,
the raw maps and their absolute difference pass through a first residual
block (shallow fusion), the preprocessed maps are cross-multiplied with the
opposite raw map, and a second residual block fuses the cross products with
the shallow result (deep fusion).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import PreconditionError


def _same_shape(*maps: torch.Tensor) -> None:
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise PreconditionError(f"feature maps differ in shape: {tuple(shape)} vs {tuple(m.shape)}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    """Two 3x3 conv-BN stages plus a skip, 1x1-projected when widths differ."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        if in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch))
        else:
            self.skip = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


def abs_difference(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    _same_shape(x1, x2)
    return (x2 - x1).abs()


def cross_interact(x1p, x2p, x1, x2):
    """Returns ``(x1p * x2, x2p * x1)``."""
    _same_shape(x1p, x2p, x1, x2)
    return x1p * x2, x2p * x1


def shallow_fuse(x1, x2, diff, block: ResidualBlock) -> torch.Tensor:
    _same_shape(x1, x2, diff)
    return block(torch.cat([x1, x2, diff], dim=1))


def deep_fuse(cross1, cross2, shallow, block: ResidualBlock) -> torch.Tensor:
    if not (cross1.shape[0] == cross2.shape[0] == shallow.shape[0]) or not (
        cross1.shape[2:] == cross2.shape[2:] == shallow.shape[2:]
    ):
        raise PreconditionError("deep_fuse inputs must share batch and spatial dims")
    return block(torch.cat([cross1, cross2, shallow], dim=1))


class FusionLevel(nn.Module):
    def __init__(self, channels: int, fuse_channels: int | None = None):
        super().__init__()
        fuse = fuse_channels or channels
        self.pre1 = ConvBNReLU(channels, channels)
        self.pre2 = ConvBNReLU(channels, channels)
        self.r1 = ResidualBlock(3 * channels, fuse)
        self.r2 = ResidualBlock(2 * channels + fuse, fuse)

    def forward(self, x1, x2, return_shallow: bool = False):
        if x1.shape[0] != x2.shape[0] or x1.shape[1] != x2.shape[1]:
            raise PreconditionError(f"level inputs differ in batch/channels: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        if x1.shape[2:] != x2.shape[2:]:
            x2 = F.interpolate(x2, size=x1.shape[2:], mode="bilinear", align_corners=False)
        x1p, x2p = self.pre1(x1), self.pre2(x2)
        shallow = shallow_fuse(x1, x2, abs_difference(x1, x2), self.r1)
        cross1, cross2 = cross_interact(x1p, x2p, x1, x2)
        deep = deep_fuse(cross1, cross2, shallow, self.r2)
        return (shallow, deep) if return_shallow else deep


class ProgressiveFusion(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.levels = nn.ModuleList(FusionLevel(c) for c in channels)

    def forward(self, pyr1, pyr2, return_shallow: bool = False):
        if len(pyr1) != len(self.levels) or len(pyr2) != len(self.levels):
            raise PreconditionError(f"expected {len(self.levels)} pyramid levels, got {len(pyr1)} and {len(pyr2)}")
        outs = [lvl(a, b, return_shallow=return_shallow) for lvl, a, b in zip(self.levels, pyr1, pyr2)]
        if return_shallow:
            return [o[0] for o in outs], [o[1] for o in outs]
        return outs


class ConcatFusion(nn.Module):
    """Ablation stand-in: channel concat of the two maps + 1x1 projection."""

    def __init__(self, channels):
        super().__init__()
        self.levels = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in channels)

    def forward(self, pyr1, pyr2, return_shallow: bool = False):
        if len(pyr1) != len(self.levels) or len(pyr2) != len(self.levels):
            raise PreconditionError(f"expected {len(self.levels)} pyramid levels, got {len(pyr1)} and {len(pyr2)}")
        outs = [proj(torch.cat([a, b], dim=1)) for proj, a, b in zip(self.levels, pyr1, pyr2)]
        return (outs, outs) if return_shallow else outs


def pefm_forward(pyr1, pyr2, fusion: ProgressiveFusion):
    return fusion(pyr1, pyr2)

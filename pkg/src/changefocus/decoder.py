"""Cross-scale top-down decoder and the full change-detection network."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .dcfm import DynamicChangeFocus
from .encoder import SiameseEncoder
from .errors import PreconditionError
from .pefm import ConcatFusion, ProgressiveFusion, ResidualBlock


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class UpsampleAlign(nn.Module):
    """Bilinear 2x upsampling of the coarser map, then a 1x1 projection to the finer width."""

    def __init__(self, low_ch: int, high_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(low_ch, high_ch, 1)

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        if low.shape[0] != high.shape[0] or (2 * low.shape[-2], 2 * low.shape[-1]) != tuple(high.shape[-2:]):
            raise PreconditionError(
                f"low map {tuple(low.shape)} is not half the spatial size of {tuple(high.shape)}"
            )
        return self.proj(upsample2x(low))


class AttentionGuidedFuse(nn.Module):
    """Channel-attention blend ``w*a + (1-w)*b`` followed by a residual block."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(2 * channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.refine = ResidualBlock(channels, channels)

    def weights(self, a, b):
        return self.gate(torch.cat([a, b], dim=1))

    def blend(self, a, b):
        if a.shape != b.shape:
            raise PreconditionError(f"fuse inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        w = self.weights(a, b)
        return w * a + (1 - w) * b

    def forward(self, a, b):
        return self.refine(self.blend(a, b))


class CrossScaleDecoder(nn.Module):
    def __init__(self, channels):
        super().__init__()
        c = list(channels)
        # index j fuses level j+1 (coarser) into level j
        self.align = nn.ModuleList(UpsampleAlign(c[j + 1], c[j]) for j in range(3))
        self.fuse = nn.ModuleList(AttentionGuidedFuse(c[j]) for j in range(3))
        self.head = nn.Sequential(
            nn.Conv2d(c[0], c[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
            nn.Conv2d(c[0], 1, 1),
        )

    def forward(self, levels) -> torch.Tensor:
        if len(levels) != 4:
            raise PreconditionError(f"decoder expects 4 levels, got {len(levels)}")
        x = levels[3]
        for j in (2, 1, 0):
            x = self.fuse[j](self.align[j](x, levels[j]), levels[j])
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return self.head(x)


def decode(levels, decoder: CrossScaleDecoder) -> torch.Tensor:
    return decoder(levels)


class ChangeDetector(nn.Module):
    """Siamese encoder -> per-level fusion -> change focus -> decoder -> logits."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = SiameseEncoder(cfg.encoder)
        self.fusion = ProgressiveFusion(ch) if cfg.use_pefm else ConcatFusion(ch)
        if cfg.use_dcfm:
            self.focus = nn.ModuleList(DynamicChangeFocus(c, cfg.dcfm) for c in ch)
        else:
            self.focus = None
        self.decoder = CrossScaleDecoder(ch)

    def stages(self, image_a: torch.Tensor, image_b: torch.Tensor) -> dict:
        """All intermediate maps: encoder pyramids, shallow/deep fusion, focused levels, logits."""
        pyr1, pyr2 = self.encoder(image_a, image_b)
        shallow, deep = self.fusion(pyr1, pyr2, return_shallow=True)
        focused = [f(x) for f, x in zip(self.focus, deep)] if self.focus is not None else list(deep)
        return {
            "encoder_a": pyr1,
            "encoder_b": pyr2,
            "shallow": shallow,
            "deep": deep,
            "focused": focused,
            "logits": self.decoder(focused),
        }

    def forward(self, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
        pyr1, pyr2 = self.encoder(image_a, image_b)
        levels = self.fusion(pyr1, pyr2)
        if self.focus is not None:
            levels = [f(x) for f, x in zip(self.focus, levels)]
        return self.decoder(levels)

    @torch.no_grad()
    def predict_proba(self, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(image_a, image_b))

    def predict_mask(self, image_a, image_b) -> torch.Tensor:
        return (self.predict_proba(image_a, image_b) > self.cfg.threshold).to(torch.uint8)


def full_forward(image_a: torch.Tensor, image_b: torch.Tensor, model: ChangeDetector) -> torch.Tensor:
    """Change probabilities [B, 1, H, W] in [0, 1]."""
    return torch.sigmoid(model(image_a, image_b))

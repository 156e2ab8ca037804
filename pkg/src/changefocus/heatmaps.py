"""Stage heatmaps: channel-mean activations after each processing stage.

Stage 0 is the encoder (mean over both temporal pyramids), stage 1 the
shallow fusion, stage 2 the deep fusion, stage 3 the change-focus output.
Files are written as ``stage{s}_level{l}.png`` with levels numbered 1-4
from finest to coarsest.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .data import BitemporalPair
from .decoder import ChangeDetector

STAGE_KEYS = ("encoder", "shallow", "deep", "focused")


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes uniform mid-scale."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full_like(m, 0.5, dtype=np.float64)
    return (m - lo) / (hi - lo)


def colorize(m: np.ndarray, size: tuple[int, int], cmap: str = "jet") -> Image.Image:
    rgb = colormaps[cmap](normalize_map(m))[..., :3]
    img = Image.fromarray(np.rint(rgb * 255).astype(np.uint8))
    H, W = size
    return img.resize((W, H), Image.BILINEAR) if img.size != (W, H) else img


@torch.no_grad()
def stage_maps(model: ChangeDetector, pair: BitemporalPair) -> dict:
    model.eval()
    dtype = next(model.parameters()).dtype
    a = torch.from_numpy(pair.image_a[None]).to(dtype)
    b = torch.from_numpy(pair.image_b[None]).to(dtype)
    st = model.stages(a, b)
    encoder = [0.5 * (x1 + x2) for x1, x2 in zip(st["encoder_a"], st["encoder_b"])]
    levels = {"encoder": encoder, "shallow": st["shallow"], "deep": st["deep"], "focused": st["focused"]}
    return {k: [x[0].mean(dim=0).numpy() for x in v] for k, v in levels.items()}


def emit_stage_heatmaps(model: ChangeDetector, pair: BitemporalPair, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create heatmap directory {out_dir}: {exc}") from exc
    maps = stage_maps(model, pair)
    written = []
    for s, key in enumerate(STAGE_KEYS):
        for level, m in enumerate(maps[key], start=1):
            path = out_dir / f"stage{s}_level{level}.png"
            try:
                colorize(m, pair.size).save(path)
            except OSError as exc:
                raise OSError(f"cannot write heatmap {path}: {exc}") from exc
            written.append(path)
    return written

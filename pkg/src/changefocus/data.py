"""Bi-temporal datasets: PNG ingestion, tiling, splitting, synthetic generation.

On-disk layout is ``<root>/A/*.png``, ``<root>/B/*.png``, ``<root>/label/*.png``
matched by filename. Images are 8-bit RGB scaled to [0, 1]; labels are
single-channel {0, 255} mapped to {0, 1}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import IngestionError, PreconditionError

SPLIT_KEYS = ("train", "val", "test")


@dataclass
class BitemporalPair:
    image_a: np.ndarray  # [3, H, W] float32 in [0, 1]
    image_b: np.ndarray
    label: Optional[np.ndarray] = None  # [1, H, W] uint8 in {0, 1}
    id: str = ""
    # synthetic pairs only: pseudo-change shadow strips, never labelled
    shadow: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise PreconditionError(f"{self.id}: images differ in shape {self.image_a.shape} vs {self.image_b.shape}")
        if self.label is not None:
            if self.label.shape != (1, *self.image_a.shape[1:]):
                raise PreconditionError(f"{self.id}: label shape {self.label.shape} not co-registered")
            if not np.isin(self.label, (0, 1)).all():
                raise PreconditionError(f"{self.id}: label is not binary")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image_a.shape[1:])


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple = (7, 2, 1)

    def as_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        with open(path) as fh:
            data = json.load(fh)
        missing = [k for k in SPLIT_KEYS if k not in data]
        if missing:
            raise IngestionError(f"{path}: split manifest missing keys {missing}")
        return cls(data["train"], data["val"], data["test"])


# ---------------------------------------------------------------------------
# tiling


def tile_image(image: np.ndarray, tile: int):
    """Non-overlapping grid tiles of a [C, H, W] array with their (row, col)."""
    if image.ndim != 3:
        raise PreconditionError(f"expected [C, H, W], got shape {image.shape}")
    _, H, W = image.shape
    if tile < 1 or H % tile or W % tile:
        raise PreconditionError(f"tile {tile} does not divide image size {H}x{W}")
    tiles, coords = [], []
    for r in range(H // tile):
        for c in range(W // tile):
            tiles.append(image[:, r * tile:(r + 1) * tile, c * tile:(c + 1) * tile].copy())
            coords.append((r, c))
    return tiles, coords


def stitch_tiles(tiles: Sequence[np.ndarray], coords: Sequence[tuple[int, int]]) -> np.ndarray:
    C, t, _ = tiles[0].shape
    rows = max(r for r, _ in coords) + 1
    cols = max(c for _, c in coords) + 1
    out = np.zeros((C, rows * t, cols * t), dtype=tiles[0].dtype)
    for tile, (r, c) in zip(tiles, coords):
        out[:, r * t:(r + 1) * t, c * t:(c + 1) * t] = tile
    return out


def random_crop_boxes(height: int, width: int, tile: int, count: int, seed: int):
    """Top-left corners of ``count`` seeded random ``tile`` crops (may overlap)."""
    if tile > height or tile > width:
        raise PreconditionError(f"tile {tile} larger than image {height}x{width}")
    rng = np.random.default_rng(seed)
    return [(int(rng.integers(0, height - tile + 1)), int(rng.integers(0, width - tile + 1))) for _ in range(count)]


def tile_pair(pair: BitemporalPair, tile: int, mode: str = "grid", count: int = 0, seed: int = 0):
    """Cut a pair into co-registered sub-pairs, ids suffixed with the tile position."""
    H, W = pair.size
    if mode == "grid":
        if H % tile or W % tile:
            raise PreconditionError(f"tile {tile} does not divide image size {H}x{W}")
        boxes = [(r * tile, c * tile) for r in range(H // tile) for c in range(W // tile)]
        names = [f"{pair.id}_r{r // tile}_c{c // tile}" for r, c in boxes]
    elif mode == "random":
        boxes = random_crop_boxes(H, W, tile, count, seed)
        names = [f"{pair.id}_crop{k}" for k in range(len(boxes))]
    else:
        raise PreconditionError(f"unknown tiling mode {mode!r}")

    def cut(arr, y, x):
        return None if arr is None else arr[:, y:y + tile, x:x + tile].copy()

    return [
        BitemporalPair(cut(pair.image_a, y, x), cut(pair.image_b, y, x), cut(pair.label, y, x), name,
                       cut(pair.shadow, y, x))
        for (y, x), name in zip(boxes, names)
    ]


# ---------------------------------------------------------------------------
# splitting


def split_dataset(ids: Sequence[str], ratios=(7, 2, 1), seed: int = 0) -> DatasetSplit:
    ids = list(ids)
    if not ids:
        raise PreconditionError("cannot split an empty id list")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise PreconditionError(f"ratios must be three positive numbers, got {ratios}")
    n, total = len(ids), sum(ratios)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = (ratios[0] * n) // total
    n_val = (ratios[1] * n) // total
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], tuple(ratios)
    )


# ---------------------------------------------------------------------------
# on-disk datasets


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def _read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = set(np.unique(arr).tolist())
    if values <= {0, 255}:
        arr = arr // 255
    elif not values <= {0, 1}:
        raise IngestionError(f"{path.name}: label has non-binary values {sorted(values)[:6]}")
    return arr[None].astype(np.uint8)


def load_pair_dataset(root, require_labels: bool = True) -> Iterator[BitemporalPair]:
    """Yield pairs from ``root/{A,B,label}`` in filename order."""
    root = Path(root)
    dir_a, dir_b, dir_l = root / "A", root / "B", root / "label"
    if not dir_a.is_dir():
        raise IngestionError(f"{dir_a} is not a directory")
    names = sorted(p.name for p in dir_a.iterdir() if p.suffix.lower() == ".png")
    for name in names:
        if not (dir_b / name).is_file():
            raise IngestionError(f"{name} present in A/ but missing in B/ ({root})")
        has_label = (dir_l / name).is_file()
        if require_labels and not has_label:
            raise IngestionError(f"{name} present in A/ but missing in label/ ({root})")
        a, b = _read_rgb(dir_a / name), _read_rgb(dir_b / name)
        label = _read_label(dir_l / name) if has_label else None
        try:
            yield BitemporalPair(a, b, label, Path(name).stem)
        except PreconditionError as exc:
            raise IngestionError(f"{name}: {exc}") from exc


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_pair(pair: BitemporalPair, root) -> None:
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pair.image_a).transpose(1, 2, 0)).save(root / "A" / f"{pair.id}.png")
    Image.fromarray(to_uint8(pair.image_b).transpose(1, 2, 0)).save(root / "B" / f"{pair.id}.png")
    if pair.label is not None:
        Image.fromarray((pair.label[0] * 255).astype(np.uint8)).save(root / "label" / f"{pair.id}.png")


def save_pair_dataset(pairs, root) -> None:
    for pair in pairs:
        save_pair(pair, root)


def flip_pair(pair: BitemporalPair, horizontal: bool, vertical: bool) -> BitemporalPair:
    def f(arr):
        if arr is None:
            return None
        if horizontal:
            arr = arr[:, :, ::-1]
        if vertical:
            arr = arr[:, ::-1, :]
        return np.ascontiguousarray(arr)

    return BitemporalPair(f(pair.image_a), f(pair.image_b), f(pair.label), pair.id, f(pair.shadow))


def stack_pairs(pairs: Sequence[BitemporalPair]):
    a = np.stack([p.image_a for p in pairs]).astype(np.float32)
    b = np.stack([p.image_b for p in pairs]).astype(np.float32)
    labels = None
    if all(p.label is not None for p in pairs):
        labels = np.stack([p.label for p in pairs]).astype(np.float32)
    return a, b, labels


# ---------------------------------------------------------------------------
# synthetic bi-temporal scenes

_GRID = 8
_SHADOW = 4


def _texture(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 4.0, 2)
        tex += np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return tex / 4.0


def _place_rects(rng, size: int, count: int, taken: list) -> list:
    """Grid-aligned rectangles kept one grid cell clear of every rectangle in ``taken``."""
    out = []
    for _ in range(count * 20):
        if len(out) == count:
            break
        h, w = (int(v) * _GRID for v in rng.integers(2, 5, 2))
        y = int(rng.integers(1, (size - h) // _GRID)) * _GRID
        x = int(rng.integers(1, (size - w) // _GRID)) * _GRID
        if y + h + _GRID > size or x + w + _GRID > size:
            continue
        clear = all(
            y + h + _GRID <= ty or ty + th + _GRID <= y or x + w + _GRID <= tx or tx + tw + _GRID <= x
            for ty, tx, th, tw in taken + out
        )
        if clear:
            out.append((y, x, h, w))
    return out


def _synth_pair(rng, size: int, change_rate: float, pair_id: str) -> BitemporalPair:
    ground = np.array([0.30, 0.38, 0.22]) + rng.uniform(-0.06, 0.06, 3)
    tex = _texture(rng, size)
    base = ground[:, None, None] + 0.07 * tex[None]

    existing = _place_rects(rng, size, int(rng.integers(2, 5)), [])
    candidates = _place_rects(rng, size, int(rng.integers(1, 4)), existing)
    removed = [r for r in existing if rng.random() < change_rate]
    inserted = [r for r in candidates if rng.random() < change_rate]
    roofs = {r: rng.uniform(0.6, 0.95) + rng.uniform(-0.08, 0.08, 3) for r in existing + candidates}

    def render(rects):
        img = base.copy()
        for (y, x, h, w) in rects:
            img[:, y:y + h, x:x + w] = roofs[(y, x, h, w)][:, None, None]
        return img

    buildings_a = existing
    buildings_b = [r for r in existing if r not in removed] + inserted
    img_a = render(buildings_a)
    img_b = render(buildings_b)

    shadow = np.zeros((size, size), dtype=bool)
    for (y, x, h, w) in buildings_b:
        shadow[y + _SHADOW:y + h + _SHADOW, x + w:x + w + _SHADOW] = True
        shadow[y + h:y + h + _SHADOW, x + _SHADOW:x + w + _SHADOW] = True
    img_b = np.where(shadow[None], img_b * 0.45, img_b)

    gain = rng.uniform(0.75, 1.25)
    tint = rng.uniform(-0.05, 0.05, 3)
    img_b = img_b * gain + tint[:, None, None]
    img_a = img_a + rng.normal(0, 0.02, img_a.shape)
    img_b = img_b + rng.normal(0, 0.02, img_b.shape)

    label = np.zeros((1, size, size), dtype=np.uint8)
    for (y, x, h, w) in removed + inserted:
        label[0, y:y + h, x:x + w] = 1
    return BitemporalPair(
        np.clip(img_a, 0, 1).astype(np.float32),
        np.clip(img_b, 0, 1).astype(np.float32),
        label,
        pair_id,
        shadow[None] & (label == 0),
    )


def synthesize_dataset(n_pairs: int, size: int = 128, seed: int = 0, change_rate: float = 0.5) -> list[BitemporalPair]:
    """Procedural bi-temporal scenes of textured ground with rectangular "buildings".

    Image B removes existing and inserts new buildings with probability
    ``change_rate`` each, casts a dark shadow strip along the right and
    bottom side of every building it shows, and applies a global
    brightness/tint jitter. Only the removed or inserted rectangles are
    labelled; shadows and jitter are pseudo-changes.
    """
    if size < 32 or size % 32:
        raise PreconditionError(f"size must be a positive multiple of 32, got {size}")
    if not 0.0 <= change_rate <= 1.0:
        raise PreconditionError(f"change_rate must lie in [0, 1], got {change_rate}")
    if n_pairs < 0:
        raise PreconditionError("n_pairs must be nonnegative")
    return [
        _synth_pair(np.random.default_rng([seed, i]), size, change_rate, f"syn{seed}_{i:04d}")
        for i in range(n_pairs)
    ]


def write_split_manifest(split: DatasetSplit, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    split.save(path)

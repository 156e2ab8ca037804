import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from changefocus.data import (
    BitemporalPair,
    DatasetSplit,
    flip_pair,
    load_pair_dataset,
    save_pair_dataset,
    split_dataset,
    stack_pairs,
    stitch_tiles,
    synthesize_dataset,
    tile_image,
    tile_pair,
)
from changefocus.errors import IngestionError, PreconditionError


def _pair(h=64, w=64, seed=0, pid="p"):
    rng = np.random.default_rng(seed)
    a = rng.random((3, h, w), dtype=np.float32)
    b = rng.random((3, h, w), dtype=np.float32)
    label = (rng.random((1, h, w)) > 0.5).astype(np.uint8)
    return BitemporalPair(a, b, label, pid)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), tile=st.sampled_from([1, 4, 8, 16]), c=st.integers(1, 3))
def test_tiling_round_trip_and_count(rows, cols, tile, c):
    img = np.random.default_rng(rows * 7 + cols).random((c, rows * tile, cols * tile))
    tiles, coords = tile_image(img, tile)
    assert len(tiles) == rows * cols
    assert np.array_equal(stitch_tiles(tiles, coords), img)


def test_tiling_1024_into_256():
    img = np.random.default_rng(0).integers(0, 256, (3, 1024, 1024)).astype(np.uint8)
    tiles, coords = tile_image(img, 256)
    assert len(tiles) == 16 and all(t.shape == (3, 256, 256) for t in tiles)
    assert np.array_equal(stitch_tiles(tiles, coords), img)


def test_tiling_errors():
    with pytest.raises(PreconditionError):
        tile_image(np.zeros((3, 100, 128)), 32)
    with pytest.raises(PreconditionError):
        tile_image(np.zeros((100, 128)), 4)


def test_tile_pair_grid_and_random():
    pair = _pair(64, 64)
    tiles = tile_pair(pair, 32)
    assert [t.id for t in tiles] == ["p_r0_c0", "p_r0_c1", "p_r1_c0", "p_r1_c1"]
    assert np.array_equal(tiles[3].label, pair.label[:, 32:, 32:])
    crops = tile_pair(pair, 32, mode="random", count=5, seed=3)
    again = tile_pair(pair, 32, mode="random", count=5, seed=3)
    assert len(crops) == 5
    assert all(np.array_equal(x.image_a, y.image_a) for x, y in zip(crops, again))
    with pytest.raises(PreconditionError):
        tile_pair(pair, 48)
    with pytest.raises(PreconditionError):
        tile_pair(pair, 32, mode="hex")


@pytest.mark.parametrize("n,sizes", [(10, (7, 2, 1)), (637, (445, 127, 65)), (1, (0, 0, 1))])
def test_split_sizes(n, sizes):
    s = split_dataset([f"id{i}" for i in range(n)], seed=4)
    assert (len(s.train), len(s.val), len(s.test)) == sizes


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, 2**31))
def test_split_disjoint_cover_and_determinism(n, seed):
    ids = [f"x{i}" for i in range(n)]
    s = split_dataset(ids, seed=seed)
    parts = s.train + s.val + s.test
    assert sorted(parts) == sorted(ids)
    assert len(set(parts)) == n
    assert len(s.train) == 7 * n // 10 and len(s.val) == 2 * n // 10
    assert split_dataset(ids, seed=seed).as_dict() == s.as_dict()


def test_split_seed_changes_permutation_and_errors():
    ids = [str(i) for i in range(50)]
    assert split_dataset(ids, seed=0).train != split_dataset(ids, seed=1).train
    with pytest.raises(PreconditionError):
        split_dataset([])


def test_split_manifest_round_trip(tmp_path):
    s = split_dataset([str(i) for i in range(10)])
    s.save(tmp_path / "split.json")
    assert DatasetSplit.load(tmp_path / "split.json").as_dict() == s.as_dict()
    (tmp_path / "bad.json").write_text('{"train": []}')
    with pytest.raises(IngestionError):
        DatasetSplit.load(tmp_path / "bad.json")


def test_ingestion_round_trip(tmp_path):
    pairs = [_pair(32, 32, seed=i, pid=name) for i, name in enumerate(["c", "a", "b"])]
    save_pair_dataset(pairs, tmp_path)
    loaded = list(load_pair_dataset(tmp_path))
    assert [p.id for p in loaded] == ["a", "b", "c"]
    src = {p.id: p for p in pairs}
    for p in loaded:
        assert p.image_a.dtype == np.float32 and 0 <= p.image_a.min() and p.image_a.max() <= 1
        assert np.abs(p.image_a - src[p.id].image_a).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(p.label, src[p.id].label)


def test_label_255_maps_to_one(tmp_path):
    save_pair_dataset([_pair(32, 32, pid="x")], tmp_path)
    raw = np.asarray(Image.open(tmp_path / "label" / "x.png"))
    assert set(np.unique(raw).tolist()) == {0, 255}
    (p,) = load_pair_dataset(tmp_path)
    assert np.array_equal(p.label[0], raw // 255)


def test_missing_files_name_the_file(tmp_path):
    save_pair_dataset([_pair(32, 32, pid="x"), _pair(32, 32, pid="y")], tmp_path)
    (tmp_path / "B" / "x.png").unlink()
    with pytest.raises(IngestionError, match="x.png"):
        list(load_pair_dataset(tmp_path))
    save_pair_dataset([_pair(32, 32, pid="x")], tmp_path)
    (tmp_path / "label" / "y.png").unlink()
    with pytest.raises(IngestionError, match="y.png"):
        list(load_pair_dataset(tmp_path))


def test_non_binary_label_rejected(tmp_path):
    save_pair_dataset([_pair(32, 32, pid="x")], tmp_path)
    Image.fromarray(np.full((32, 32), 128, np.uint8)).save(tmp_path / "label" / "x.png")
    with pytest.raises(IngestionError):
        list(load_pair_dataset(tmp_path))


def test_pair_validation():
    a = np.zeros((3, 8, 8), np.float32)
    with pytest.raises(PreconditionError):
        BitemporalPair(a, np.zeros((3, 8, 4), np.float32))
    with pytest.raises(PreconditionError):
        BitemporalPair(a, a, np.full((1, 8, 8), 2, np.uint8))


def test_synthetic_determinism_and_ranges():
    x = synthesize_dataset(3, 64, seed=5)
    y = synthesize_dataset(3, 64, seed=5)
    for p, q in zip(x, y):
        assert np.array_equal(p.image_a, q.image_a) and np.array_equal(p.image_b, q.image_b)
        assert np.array_equal(p.label, q.label)
        assert p.image_a.shape == (3, 64, 64) and 0 <= p.image_b.min() and p.image_b.max() <= 1
    assert not np.array_equal(x[0].image_a, synthesize_dataset(1, 64, seed=6)[0].image_a)


def test_synthetic_zero_change_rate():
    assert all(p.label.sum() == 0 for p in synthesize_dataset(6, 64, seed=0, change_rate=0.0))


def test_synthetic_errors():
    with pytest.raises(PreconditionError):
        synthesize_dataset(1, 100)
    with pytest.raises(PreconditionError):
        synthesize_dataset(1, 64, change_rate=1.5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), rate=st.floats(0.0, 1.0))
def test_synthetic_labels_are_rectangles_never_shadows(seed, rate):
    (p,) = synthesize_dataset(1, 64, seed=seed, change_rate=rate)
    label = p.label[0].astype(bool)
    assert not (label & p.shadow[0]).any()
    # every labelled connected blob is a filled axis-aligned rectangle on the 8-px grid
    seen = np.zeros_like(label)
    for y, x in zip(*np.nonzero(label)):
        if seen[y, x]:
            continue
        h = 0
        while y + h < 64 and label[y + h, x]:
            h += 1
        w = 0
        while x + w < 64 and label[y, x + w]:
            w += 1
        assert label[y:y + h, x:x + w].all()
        assert y % 8 == 0 and x % 8 == 0 and h % 8 == 0 and w % 8 == 0
        seen[y:y + h, x:x + w] = True
    assert np.array_equal(seen, label)


def test_flip_and_stack():
    p = _pair(32, 32)
    f = flip_pair(p, True, False)
    assert np.array_equal(f.image_a, p.image_a[:, :, ::-1])
    a, b, labels = stack_pairs([p, f])
    assert a.shape == (2, 3, 32, 32) and labels.dtype == np.float32

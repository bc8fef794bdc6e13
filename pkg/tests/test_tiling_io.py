import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dvnet.tiling import axis_tiles, split_tiles, stitch
from dvnet.volume_io import (
    Volume,
    expected_bytes,
    from_uint8,
    load_volume,
    meta_path,
    save_volume,
    to_uint8,
)


@st.composite
def triples(draw, max_extent=40):
    extents = tuple(draw(st.integers(1, max_extent)) for _ in range(3))
    tile = draw(st.integers(2, 24))
    overlap = draw(st.integers(0, tile - 1))
    return extents, tile, overlap


def test_spec_layout_counts():
    layout = split_tiles((256, 256, 256), 128, 32)
    assert layout.counts() == (3, 3, 3) and len(layout) == 27


def test_no_overlap_cores_equal_tiles():
    for t in split_tiles((64, 32, 96), 32, 0).tiles:
        assert t.core == t.region


def test_single_tile_when_tile_covers_extent():
    assert len(split_tiles((128, 128, 128), 128, 32)) == 1
    (t,) = split_tiles((20, 30, 10), 64, 16).tiles
    assert t.size == (20, 30, 10)


def test_bad_overlap_rejected():
    with pytest.raises(ValueError, match="tile > overlap"):
        split_tiles((10, 10, 10), 8, 8)
    with pytest.raises(ValueError, match="tile > overlap"):
        axis_tiles(10, 4, -1)


def test_axis_tiles_example():
    # stride 6, count ceil((20-4)/6) = 3, final tile pulled back to 10..20
    assert axis_tiles(20, 10, 4) == [(0, 10, 0, 8), (6, 10, 8, 13), (10, 10, 13, 20)]


@given(st.integers(1, 300), st.integers(2, 64), st.data())
def test_axis_count_formula(extent, tile, data):
    overlap = data.draw(st.integers(0, tile - 1))
    tiles = axis_tiles(extent, tile, overlap)
    if tile >= extent:
        assert len(tiles) == 1
    else:
        assert len(tiles) == math.ceil((extent - overlap) / (tile - overlap))
        for (o, s, _, _) in tiles:
            assert 0 <= o and o + s <= extent
        assert tiles[-1][0] + tiles[-1][1] == extent


@given(triples())
@settings(max_examples=200)
def test_split_stitch_inverse(triple):
    extents, tile, overlap = triple
    rng = np.random.default_rng(sum(extents) * 131 + tile * 7 + overlap)
    vol = rng.integers(0, 255, extents, dtype=np.uint8)
    layout = split_tiles(extents, tile, overlap)
    out = stitch(layout, [vol[t.region].copy() for t in layout.tiles])
    assert out.tobytes() == vol.tobytes()


@given(triples(24))
def test_cores_partition_volume(triple):
    extents, tile, overlap = triple
    hits = np.zeros(extents, np.int32)
    for t in split_tiles(extents, tile, overlap).tiles:
        hits[t.core] += 1
        for lo, hi, o, s in zip(t.core_lo, t.core_hi, t.origin, t.size):
            assert o <= lo < hi <= o + s
    assert (hits == 1).all()


def test_constant_tiles_stitch_to_constant():
    layout = split_tiles((30, 20, 17), 12, 5)
    out = stitch(layout, [np.full((2,) + t.size, 0.25) for t in layout.tiles])
    assert out.shape == (2, 30, 20, 17)
    assert (out == 0.25).all()


def test_stitch_reports_missing_tile():
    layout = split_tiles((20, 20, 20), 12, 4)
    outs = [np.zeros(t.size) for t in layout.tiles]
    with pytest.raises(ValueError, match=f"tile {len(outs) - 1} is missing"):
        stitch(layout, outs[:-1])
    outs[3] = None
    with pytest.raises(ValueError, match="tile 3 is missing"):
        stitch(layout, outs)


def test_stitch_rejects_wrong_tile_shape():
    layout = split_tiles((20, 20, 20), 12, 4)
    outs = [np.zeros(t.size) for t in layout.tiles]
    outs[1] = np.zeros((11, 12, 12))
    with pytest.raises(ValueError, match="tile 1"):
        stitch(layout, outs)


# --- volume io -----------------------------------------------------------


def test_expected_bytes_large_volume():
    assert expected_bytes((1600, 1500, 1000)) == 2_400_000_000
    assert expected_bytes((10, 10, 10), "float32") == 4000


@pytest.mark.parametrize("dtype", ["uint8", "uint16", "float32", "float64", "int32"])
def test_raw_round_trip(tmp_path, dtype, rng):
    data = (rng.random((7, 5, 3)) * 200).astype(dtype)
    save_volume(Volume(data, (0.6, 0.7, 1.0)), tmp_path / "v.raw")
    back = load_volume(tmp_path / "v.raw")
    assert back.data.dtype == data.dtype
    assert back.data.tobytes() == data.tobytes()
    assert back.voxel_size == (0.6, 0.7, 1.0)


def test_raw_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    save_volume(Volume(data), tmp_path / "v.raw")
    raw = np.fromfile(tmp_path / "v.raw", np.uint8)
    assert raw[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]
    assert "extents 2 3 4" in meta_path(tmp_path / "v.raw").read_text()


def test_size_mismatch_reports_byte_counts(tmp_path):
    save_volume(Volume(np.zeros((4, 4, 4), np.uint8)), tmp_path / "v.raw")
    with open(tmp_path / "v.raw", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(ValueError, match="64 bytes but the file holds 65"):
        load_volume(tmp_path / "v.raw")


def test_missing_extents_rejected(tmp_path):
    (tmp_path / "v.raw").write_bytes(b"\0" * 8)
    meta_path(tmp_path / "v.raw").write_text("dtype uint8\n")
    with pytest.raises(ValueError, match="extents"):
        load_volume(tmp_path / "v.raw")


def test_slice_round_trip(tmp_path, rng):
    data = rng.integers(0, 256, (9, 6, 4), dtype=np.uint8)
    save_volume(Volume(data, (0.5, 0.5, 2.0)), tmp_path / "slices")
    assert len(list((tmp_path / "slices").glob("slice_*.png"))) == 4
    back = load_volume(tmp_path / "slices")
    assert back.data.tobytes() == data.tobytes()
    assert back.voxel_size == (0.5, 0.5, 2.0)


def test_slice_numbering_is_numeric(tmp_path):
    for k in (2, 10, 1):
        Image.fromarray(np.full((3, 4), k, np.uint8)).save(tmp_path / f"img{k}.png")
    vol = load_volume(tmp_path)
    assert vol.data[0, 0].tolist() == [1, 2, 10]


def test_inconsistent_slice_named(tmp_path):
    Image.fromarray(np.zeros((3, 4), np.uint8)).save(tmp_path / "s_0.png")
    Image.fromarray(np.zeros((3, 5), np.uint8)).save(tmp_path / "s_1.png")
    with pytest.raises(ValueError, match="s_1.png"):
        load_volume(tmp_path)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Volume(np.zeros((3, 0, 3)))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_uint8_quantisation(ps):
    p = np.asarray(ps)
    q = to_uint8(p)
    assert np.abs(from_uint8(q) - p).max() <= 0.5 / 255 + 1e-7
    assert (to_uint8(from_uint8(q)) == q).all()

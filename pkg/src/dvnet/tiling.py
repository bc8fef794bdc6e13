"""Overlapped tiling of large volumes and stitching of per-tile results.

Along each axis tiles start every ``tile - overlap`` voxels and the last one
is pulled back to end at the boundary. Neighbouring tiles split their shared
margin in the middle, so every voxel belongs to the core of exactly one tile
and is taken from the tile that sees it furthest from an edge.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class Tile:
    index: int
    origin: Tuple[int, ...]  # padded tile region: origin .. origin + size
    size: Tuple[int, ...]
    core_lo: Tuple[int, ...]  # absolute core region: core_lo .. core_hi
    core_hi: Tuple[int, ...]

    @property
    def region(self) -> Tuple[slice, ...]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    @property
    def core(self) -> Tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self.core_lo, self.core_hi))

    @property
    def core_in_tile(self) -> Tuple[slice, ...]:
        return tuple(slice(a - o, b - o) for a, b, o in zip(self.core_lo, self.core_hi, self.origin))


@dataclass(frozen=True)
class TileLayout:
    extents: Tuple[int, ...]
    tile: int
    overlap: int
    tiles: Tuple[Tile, ...]

    def __len__(self) -> int:
        return len(self.tiles)

    def counts(self) -> Tuple[int, ...]:
        return tuple(len({t.origin[a] for t in self.tiles}) for a in range(len(self.extents)))


def axis_tiles(extent: int, tile: int, overlap: int) -> List[Tuple[int, int, int, int]]:
    """(origin, size, core_lo, core_hi) along one axis."""
    if extent < 1:
        raise ValueError(f"extent must be positive, got {extent}")
    if tile <= overlap or overlap < 0:
        raise ValueError(f"need tile > overlap >= 0, got tile={tile} overlap={overlap}")
    if tile >= extent:
        return [(0, extent, 0, extent)]
    stride = tile - overlap
    count = math.ceil((extent - overlap) / stride)
    origins = [min(i * stride, extent - tile) for i in range(count)]
    bounds = [0]
    for a, b in zip(origins[:-1], origins[1:]):
        bounds.append((a + tile + b) // 2)  # middle of the shared margin
    bounds.append(extent)
    return [(o, tile, lo, hi) for o, lo, hi in zip(origins, bounds[:-1], bounds[1:])]


def split_tiles(extents: Sequence[int], tile: int, overlap: int) -> TileLayout:
    per_axis = [axis_tiles(int(e), int(tile), int(overlap)) for e in extents]
    tiles = []
    for i, combo in enumerate(itertools.product(*per_axis)):
        tiles.append(
            Tile(
                i,
                tuple(c[0] for c in combo),
                tuple(c[1] for c in combo),
                tuple(c[2] for c in combo),
                tuple(c[3] for c in combo),
            )
        )
    return TileLayout(tuple(int(e) for e in extents), int(tile), int(overlap), tuple(tiles))


def stitch(layout: TileLayout, outputs: Sequence[np.ndarray], out: np.ndarray = None) -> np.ndarray:
    """Assemble tile outputs (leading axes allowed, spatial axes last) by core cropping."""
    if len(outputs) != len(layout.tiles):
        missing = len(outputs) if len(outputs) < len(layout.tiles) else None
        raise ValueError(f"expected {len(layout.tiles)} tile outputs, got {len(outputs)}" + (f"; tile {missing} is missing" if missing is not None else ""))
    for t, arr in zip(layout.tiles, outputs):
        if arr is None:
            raise ValueError(f"tile {t.index} is missing")
        if out is None:
            lead = arr.shape[: arr.ndim - len(layout.extents)]
            out = np.empty(lead + layout.extents, dtype=arr.dtype)
        write_core(out, t, arr)
    return out


def write_core(out: np.ndarray, tile: Tile, arr: np.ndarray) -> None:
    nd = len(tile.size)
    if tuple(arr.shape[-nd:]) != tile.size:
        raise ValueError(f"tile {tile.index}: output spatial shape {arr.shape[-nd:]} != tile size {tile.size}")
    out[(Ellipsis,) + tile.core] = arr[(Ellipsis,) + tile.core_in_tile]

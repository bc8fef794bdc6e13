"""Volume storage: raw voxel blocks with a text header, or directories of PNG slices.

A raw volume ``name.raw`` is accompanied by ``name.raw.txt``::

    extents 128 128 64
    voxel_size 0.6 0.7 1.0
    dtype uint8

Voxels are little-endian with x varying fastest. Arrays in memory are
indexed ``[x, y, z]``. Slice directories hold one 8-bit image per z,
named ``slice_0000.png`` and so on, each ``x`` pixels wide and ``y`` high.
``save_volume`` picks the slice layout for paths without a file suffix.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

DTYPES = {"uint8": "<u1", "uint16": "<u2", "float32": "<f4", "float64": "<f8", "int32": "<i4"}


@dataclass
class Volume:
    data: np.ndarray
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive extents, got shape {self.data.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def extents(self):
        return self.data.shape


def meta_path(path) -> Path:
    return Path(str(path) + ".txt")


def expected_bytes(extents, dtype="uint8") -> int:
    return int(np.prod([int(e) for e in extents], dtype=np.int64)) * np.dtype(DTYPES[dtype]).itemsize


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        meta[key] = vals
    try:
        extents = tuple(int(v) for v in meta["extents"])
    except KeyError:
        raise ValueError(f"{path}: missing 'extents'") from None
    if len(extents) != 3 or min(extents) < 1:
        raise ValueError(f"{path}: extents must be three positive integers, got {extents}")
    dtype = meta.get("dtype", ["uint8"])[0]
    if dtype not in DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype!r}")
    voxel = tuple(float(v) for v in meta.get("voxel_size", ["1", "1", "1"]))
    return {"extents": extents, "dtype": dtype, "voxel_size": voxel}


def save_volume(volume: Volume, path) -> None:
    path = Path(path)
    if path.suffix == "":
        return save_slices(volume, path)
    dtype = volume.data.dtype.name
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    x, y, z = volume.data.shape
    meta_path(path).write_text(
        f"extents {x} {y} {z}\n"
        f"voxel_size {' '.join(repr(v) for v in volume.voxel_size)}\n"
        f"dtype {dtype}\n"
    )
    with open(path, "wb") as fh:
        fh.write(volume.data.astype(DTYPES[dtype]).tobytes(order="F"))


def load_volume(path) -> Volume:
    path = Path(path)
    if path.is_dir():
        return load_slices(path)
    meta = read_meta(meta_path(path))
    want = expected_bytes(meta["extents"], meta["dtype"])
    got = path.stat().st_size
    if got != want:
        raise ValueError(f"{path}: metadata implies {want} bytes but the file holds {got}")
    data = np.fromfile(path, dtype=DTYPES[meta["dtype"]]).reshape(meta["extents"], order="F")
    return Volume(np.ascontiguousarray(data.astype(np.dtype(meta["dtype"]))), meta["voxel_size"])


def save_slices(volume: Volume, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    data = volume.data
    if data.dtype != np.uint8:
        raise ValueError(f"slice images are 8-bit; got dtype {data.dtype}")
    for k in range(data.shape[2]):
        # PIL images are row-major (height=y, width=x)
        Image.fromarray(np.ascontiguousarray(data[:, :, k].T)).save(d / f"slice_{k:04d}.png")
    (d / "voxel_size.txt").write_text(" ".join(repr(v) for v in volume.voxel_size) + "\n")


def _slice_key(p: Path):
    m = re.findall(r"\d+", p.stem)
    return (int(m[-1]) if m else -1, p.name)


def load_slices(directory) -> Volume:
    d = Path(directory)
    files = sorted((p for p in d.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", ".bmp", ".pgm")), key=_slice_key)
    if not files:
        raise ValueError(f"{d}: no slice images")
    planes = []
    first = None
    for p in files:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"))
        if first is None:
            first = arr.shape
        elif arr.shape != first:
            raise ValueError(f"{p.name}: slice is {arr.shape[1]}x{arr.shape[0]} but earlier slices are {first[1]}x{first[0]}")
        planes.append(arr.T)
    vs = d / "voxel_size.txt"
    voxel = tuple(float(v) for v in vs.read_text().split()) if vs.exists() else (1.0, 1.0, 1.0)
    return Volume(np.stack(planes, axis=2), voxel)


def to_uint8(prob: np.ndarray) -> np.ndarray:
    """Probabilities in [0, 1] as 8-bit values ``round(255 p)``."""
    return np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float32) / 255.0

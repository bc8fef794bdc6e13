"""Iterative radial voting for cell-centre detection in 3D probability masks.

Voters are voxels with a strong (smoothed) gradient. Each voter spreads its
gradient magnitude over a cone pointing toward the bright interior of the
mask. After every pass the voter turns toward the strongest accumulator
voxel inside its cone and the cone narrows, so votes converge on centres.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import ndimage

from .structures import CellList

CHUNK = 2048  # voters per partial accumulator; fixed so results ignore thread count


@dataclass
class VoteField:
    """Dense per-voxel vote magnitude, unit vote direction and cone half-angle.

    ``direction`` points uphill in the mask, toward the bright interior.
    """

    magnitude: np.ndarray  # (X, Y, Z)
    direction: np.ndarray  # (X, Y, Z, 3)
    half_angle: np.ndarray  # (X, Y, Z) radians

    @property
    def shape(self):
        return self.magnitude.shape


@dataclass(frozen=True)
class IVoteParams:
    sigma: float = 1.0
    start_angle: float = math.pi / 4
    narrowing: float = 0.5
    max_iterations: int = 8
    tolerance: float = 1e-3
    voter_fraction: float = 0.1  # voters need magnitude >= this * max magnitude
    detect_fraction: float = 0.1  # peaks need votes >= this * global max
    min_separation: Optional[float] = None  # default rmax / 2
    mask_threshold: float = 0.5  # a centre must lie where the mask is at least this
    threads: int = 1


def compute_gradient(volume: np.ndarray, sigma: float = 1.0, start_angle: float = math.pi / 4) -> VoteField:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    v = np.asarray(volume, dtype=np.float64)
    if sigma > 0:
        v = ndimage.gaussian_filter(v, sigma, mode="nearest")
    grad = np.stack(np.gradient(v), axis=-1)
    mag = np.linalg.norm(grad, axis=-1)
    direction = np.zeros_like(grad)
    nz = mag > 0
    direction[nz] = grad[nz] / mag[nz, None]
    return VoteField(mag, direction, np.full(v.shape, float(start_angle)))


@lru_cache(maxsize=8)
def _offsets(rmax: int):
    r = int(rmax)
    ax = np.arange(-r, r + 1)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    d = np.linalg.norm(g, axis=1)
    keep = (d > 0) & (d <= r + 1e-9)
    off = g[keep]
    norm = d[keep]
    unit = off / norm[:, None]
    lut = np.full((2 * r + 1,) * 3, -1, dtype=np.int64)
    lut[tuple((off + r).T)] = np.arange(len(off))
    return off, unit, lut


def _voter_index(field: VoteField, min_magnitude: float) -> np.ndarray:
    return np.argwhere(field.magnitude > min_magnitude)


def _cone_chunk(field: VoteField, vox: np.ndarray, rmax: int):
    """In-cone mask and flat target indices for a chunk of voters."""
    off, unit, lut = _offsets(rmax)
    shape = np.array(field.shape)
    dirs = field.direction[tuple(vox.T)]
    ang = field.half_angle[tuple(vox.T)]
    cone = (dirs @ unit.T) >= np.cos(ang)[:, None] - 1e-12
    # the axis ray always belongs to the cone, so a zero half-angle still votes
    t = np.arange(1, rmax + 1)
    ray = np.rint(dirs[:, None, :] * t[None, :, None]).astype(np.int64)  # (n, rmax, 3)
    rr = np.linalg.norm(ray, axis=-1)
    ok = (rr > 0) & (rr <= rmax + 1e-9)
    ridx = lut[tuple((ray + rmax).reshape(-1, 3).T)].reshape(ray.shape[:2])
    rows = np.broadcast_to(np.arange(len(vox))[:, None], ridx.shape)
    sel = ok & (ridx >= 0)
    cone[rows[sel], ridx[sel]] = True
    pos = vox[:, None, :] + off[None, :, :]
    inside = np.all((pos >= 0) & (pos < shape), axis=-1)
    cone &= inside
    flat = np.ravel_multi_index(tuple(np.clip(pos, 0, shape - 1).transpose(2, 0, 1)), field.shape)
    return cone, flat


def _chunks(n: int):
    return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def vote_pass(field: VoteField, rmax: int, min_magnitude: float = 0.0, threads: int = 1) -> np.ndarray:
    """Accumulate every voter's magnitude over its cone of length ``rmax``."""
    if rmax < 1:
        raise ValueError(f"rmax must be >= 1, got {rmax}")
    rmax = int(rmax)
    vox = _voter_index(field, min_magnitude)
    size = int(np.prod(field.shape))

    def partial(span):
        a, b = span
        cone, flat = _cone_chunk(field, vox[a:b], rmax)
        w = np.broadcast_to(field.magnitude[tuple(vox[a:b].T)][:, None], cone.shape)
        return np.bincount(flat[cone], weights=w[cone], minlength=size)

    acc = np.zeros(size)
    for part in _map(partial, _chunks(len(vox)), threads):
        acc += part  # fixed chunk order keeps sums reproducible
    return acc.reshape(field.shape)


def cone_voxel_counts(field: VoteField, rmax: int, min_magnitude: float = 0.0) -> np.ndarray:
    """In-volume cone size of every voter (same order as the voting loop)."""
    vox = _voter_index(field, min_magnitude)
    out = []
    for a, b in _chunks(len(vox)):
        cone, _ = _cone_chunk(field, vox[a:b], int(rmax))
        out.append(cone.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0, int)


def refine(
    field: VoteField,
    accumulator: np.ndarray,
    rmax: int,
    narrowing: float = 0.5,
    min_magnitude: float = 0.0,
    threads: int = 1,
) -> VoteField:
    """Turn each voter toward its in-cone accumulator maximum and narrow every cone."""
    rmax = int(rmax)
    off, _, _ = _offsets(rmax)
    vox = _voter_index(field, min_magnitude)
    acc = accumulator.ravel()
    direction = field.direction.copy()

    def turn(span):
        a, b = span
        cone, flat = _cone_chunk(field, vox[a:b], rmax)
        vals = np.where(cone, acc[flat], -np.inf)
        best = vals.argmax(axis=1)
        has = np.isfinite(vals[np.arange(len(best)), best])
        new = off[best].astype(float)
        new /= np.linalg.norm(new, axis=1, keepdims=True)
        return a, b, new, has

    for a, b, new, has in _map(turn, _chunks(len(vox)), threads):
        idx = tuple(vox[a:b][has].T)
        direction[idx] = new[has]
    return VoteField(field.magnitude, direction, field.half_angle * narrowing)


def estimate_radius(mask: np.ndarray, center, r_max: float, step: float = 0.25, n_dirs: int = 200) -> float:
    """Distance at which the spherically averaged mask first drops below 0.5."""
    k = np.arange(n_dirs) + 0.5
    phi = np.arccos(1 - 2 * k / n_dirs)
    theta = np.pi * (1 + 5**0.5) * k
    dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    radii = np.arange(0.0, r_max + 2 + step, step)
    c = np.asarray(center, float)
    pts = c[None, None, :] + radii[:, None, None] * dirs[None, :, :]
    vals = ndimage.map_coordinates(mask, pts.reshape(-1, 3).T, order=1, mode="nearest")
    prof = vals.reshape(len(radii), n_dirs).mean(axis=1)
    below = np.nonzero(prof < 0.5)[0]
    if len(below) == 0:
        return float(radii[-1])
    i = below[0]
    if i == 0:
        return 0.0
    p0, p1 = prof[i - 1], prof[i]
    return float(radii[i - 1] + step * (p0 - 0.5) / (p0 - p1))


def find_peaks(acc: np.ndarray, threshold: float, min_separation: float):
    """Local maxima above ``threshold``, greedily thinned to ``min_separation``."""
    size = max(3, 2 * int(math.floor(min_separation)) + 1)
    mx = ndimage.maximum_filter(acc, size=size, mode="constant", cval=-np.inf)
    cand = np.argwhere((acc == mx) & (acc > threshold))
    if len(cand) == 0:
        return np.zeros((0, 3), int), np.zeros(0)
    vals = acc[tuple(cand.T)]
    order = np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0], -vals))
    keep, kept_pos = [], []
    for i in order:
        p = cand[i]
        if kept_pos and np.min(np.linalg.norm(np.asarray(kept_pos) - p, axis=1)) < min_separation:
            continue
        keep.append(i)
        kept_pos.append(p)
    keep = np.asarray(keep, int)
    return cand[keep], vals[keep]


def _subvoxel(acc: np.ndarray, peaks: np.ndarray) -> np.ndarray:
    out = np.empty(peaks.shape, float)
    shape = np.array(acc.shape)
    for i, p in enumerate(peaks):
        lo = np.maximum(p - 1, 0)
        hi = np.minimum(p + 2, shape)
        block = acc[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        g = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
        w = block.sum()
        out[i] = (g * block[..., None]).reshape(-1, 3).sum(0) / w if w > 0 else p
    return out


@dataclass
class DetectionTrace:
    accumulators: list = dc_field(default_factory=list)
    half_angles: list = dc_field(default_factory=list)
    iterations: int = 0


def detect_cells(mask: np.ndarray, rmax: int, params: IVoteParams = IVoteParams(), trace: Optional[DetectionTrace] = None) -> CellList:
    """Cell centres in a probability mask (bright cells) with radii up to ``rmax``."""
    if rmax < 1:
        raise ValueError(f"rmax must be >= 1, got {rmax}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    rmax = int(math.ceil(rmax))
    field = compute_gradient(mask, params.sigma, params.start_angle)
    peak_mag = field.magnitude.max()
    if peak_mag <= 0 or mask.max() < params.mask_threshold:
        return CellList()
    thr = params.voter_fraction * peak_mag
    prev = None
    acc = None
    it = 0
    for it in range(params.max_iterations):
        acc = vote_pass(field, rmax, thr, params.threads)
        if trace is not None:
            trace.accumulators.append(acc)
            trace.half_angles.append(float(field.half_angle.flat[0]))
        if prev is not None:
            change = np.linalg.norm(acc - prev) / max(np.linalg.norm(prev), 1e-300)
            if change < params.tolerance:
                break
        if it < params.max_iterations - 1:
            field = refine(field, acc, rmax, params.narrowing, thr, params.threads)
        prev = acc
    if trace is not None:
        trace.iterations = it + 1
    min_sep = params.min_separation if params.min_separation is not None else rmax / 2
    peaks, vals = find_peaks(acc, params.detect_fraction * acc.max(), min_sep)
    if len(peaks) == 0:
        return CellList()
    centers = _subvoxel(acc, peaks)
    at = ndimage.map_coordinates(mask, centers.T, order=1, mode="nearest")
    keep = at >= params.mask_threshold
    centers, vals = centers[keep], vals[keep]
    radii = np.array([estimate_radius(mask, c, rmax) for c in centers])
    return CellList(centers, vals, radii)

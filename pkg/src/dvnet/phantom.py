"""Synthetic neurovascular phantoms with exact ground truth.

Cells are dark spheres and vessels a random tree of less-dark tubes, both on
a mid-grey neuropil background, followed by a smooth illumination bias and
Gaussian noise. Labels use 0 = tissue, 1 = cell, 2 = vessel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .structures import CellList, Edge, VesselGraph

TISSUE, CELL, VESSEL = 0, 1, 2


class PhantomPackingError(RuntimeError):
    def __init__(self, requested: int, achieved: int):
        super().__init__(f"could only place {achieved} of {requested} cells")
        self.requested = requested
        self.achieved = achieved


@dataclass(frozen=True)
class PhantomParams:
    shape: tuple = (64, 64, 64)
    n_cells: int = 20
    cell_radius: tuple = (3.0, 6.0)
    n_vessel_trees: int = 1
    vessel_segments: int = 6
    vessel_radius: tuple = (1.5, 3.0)
    segment_length: tuple = (10.0, 24.0)
    branch_probability: float = 0.4
    background: float = 0.6
    cell_intensity: float = 0.2
    vessel_intensity: float = 0.38
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.1
    min_gap: float = 1.0
    max_attempts: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "cell_radius", tuple(float(s) for s in self.cell_radius))
        object.__setattr__(self, "vessel_radius", tuple(float(s) for s in self.vessel_radius))
        object.__setattr__(self, "segment_length", tuple(float(s) for s in self.segment_length))
        lo, hi = self.cell_radius
        if not 0 < lo <= hi or 2 * hi >= min(self.shape):
            raise ValueError(f"cell radii {self.cell_radius} do not fit in {self.shape}")
        lo, hi = self.vessel_radius
        if not 0 < lo <= hi or 2 * hi >= min(self.shape):
            raise ValueError(f"vessel radii {self.vessel_radius} do not fit in {self.shape}")

    def with_(self, **changes) -> "PhantomParams":
        return replace(self, **changes)

    def to_text(self) -> str:
        out = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append(f"{key}={value}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PhantomParams":
        defaults = asdict(cls())
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"phantom params line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in defaults:
                raise ValueError(f"phantom params line {lineno}: unknown key {key!r}")
            ref = defaults[key]
            if isinstance(ref, tuple):
                kind = int if key == "shape" else float
                kwargs[key] = tuple(kind(v) for v in value.split(","))
            else:
                kwargs[key] = type(ref)(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PhantomParams":
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass
class Phantom:
    volume: np.ndarray  # float32 in [0, 1], indexed [x, y, z]
    labels: np.ndarray  # uint8 class ids
    cells: CellList
    graph: VesselGraph
    params: PhantomParams
    seed: int

    def class_mask(self, cls: int) -> np.ndarray:
        return (self.labels == cls).astype(np.float32)


# ---------------------------------------------------------------------------
# rasterisation helpers


def _grid(shape, lo, hi):
    lo = np.maximum(np.floor(lo).astype(int), 0)
    hi = np.minimum(np.ceil(hi).astype(int) + 1, shape)
    if np.any(hi <= lo):
        return None, None
    axes = [np.arange(a, b, dtype=np.float64) for a, b in zip(lo, hi)]
    return tuple(slice(a, b) for a, b in zip(lo, hi)), np.meshgrid(*axes, indexing="ij")


def sphere_occupancy(shape, center, radius) -> np.ndarray:
    """Soft occupancy in [0, 1]: ``clip(radius - d + 0.5, 0, 1)``."""
    occ = np.zeros(shape, np.float32)
    add_sphere(occ, center, radius)
    return occ


def add_sphere(occ: np.ndarray, center, radius) -> None:
    c = np.asarray(center, float)
    sl, g = _grid(occ.shape, c - radius - 1, c + radius + 1)
    if sl is None:
        return
    d = np.sqrt(sum((gi - ci) ** 2 for gi, ci in zip(g, c)))
    np.maximum(occ[sl], np.clip(radius - d + 0.5, 0, 1).astype(np.float32), out=occ[sl])


def add_segment(occ: np.ndarray, p0, p1, r0, r1, capped: bool = True) -> None:
    """Union a (possibly tapered) tube from ``p0`` to ``p1`` into ``occ``.

    With ``capped`` the tube has spherical ends, otherwise it is cut flat at
    the end planes.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    rmax = max(r0, r1)
    sl, g = _grid(occ.shape, np.minimum(p0, p1) - rmax - 1, np.maximum(p0, p1) + rmax + 1)
    if sl is None:
        return
    d = p1 - p0
    L2 = float(d @ d)
    rel = [gi - pi for gi, pi in zip(g, p0)]
    t_raw = sum(ri * di for ri, di in zip(rel, d)) / L2 if L2 > 0 else np.zeros_like(rel[0])
    t = np.clip(t_raw, 0.0, 1.0)
    dist = np.sqrt(sum((ri - t * di) ** 2 for ri, di in zip(rel, d)))
    rad = r0 + (r1 - r0) * t
    val = np.clip(rad - dist + 0.5, 0, 1)
    if not capped and L2 > 0:
        along = t_raw * np.sqrt(L2)
        val = val * np.clip(along + 0.5, 0, 1) * np.clip(np.sqrt(L2) - along + 0.5, 0, 1)
    np.maximum(occ[sl], val.astype(np.float32), out=occ[sl])


def polyline_occupancy(shape, points, radii, capped: bool = True) -> np.ndarray:
    """Soft occupancy of a tube following ``points`` with per-point ``radii``."""
    occ = np.zeros(shape, np.float32)
    points = np.asarray(points, float)
    radii = np.broadcast_to(np.asarray(radii, float), (len(points),))
    for i in range(len(points) - 1):
        add_segment(occ, points[i], points[i + 1], radii[i], radii[i + 1], capped=True)
    if not capped and len(points) >= 2:
        for end, nxt in ((0, 1), (len(points) - 1, len(points) - 2)):
            _trim_cap(occ, points[end], points[end] - points[nxt], radii[end])
    return occ


def _trim_cap(occ, point, outward, radius):
    n = outward / np.linalg.norm(outward)
    sl, g = _grid(occ.shape, point - radius - 2, point + radius + 2)
    if sl is None:
        return
    along = sum((gi - pi) * ni for gi, pi, ni in zip(g, point, n))
    occ[sl] *= np.clip(0.5 - along, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# simple test shapes


def straight_tube(shape, start, end, radius) -> np.ndarray:
    occ = np.zeros(shape, np.float32)
    add_segment(occ, start, end, radius, radius, capped=False)
    return occ


def helix_points(center, radius, pitch, turns, spacing: float = 0.25) -> np.ndarray:
    """Helix about the z axis: ``(c + R cos t, c + R sin t, c + pitch*t)``."""
    speed = np.hypot(radius, pitch)
    t_end = 2 * np.pi * turns
    t = np.linspace(0.0, t_end, int(np.ceil(t_end * speed / spacing)) + 1)
    cx, cy, cz = center
    return np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t), cz + pitch * t], axis=1)


def y_junction(shape, center, arm_length, radius, angles_deg=(90.0, 210.0, 330.0)):
    """Three straight tubes meeting at ``center`` in the x-y plane.

    Returns ``(occupancy, VesselGraph)``; arm ends are flat-cut.
    """
    c = np.asarray(center, float)
    occ = np.zeros(shape, np.float32)
    g = VesselGraph()
    hub = g.add_vertex(c)
    for ang in np.deg2rad(angles_deg):
        end = c + arm_length * np.array([np.cos(ang), np.sin(ang), 0.0])
        add_segment(occ, c, end, radius, radius, capped=False)
        v = g.add_vertex(end)
        pts = np.stack([c, end])
        g.edges.append(Edge(hub, v, pts, np.full(2, float(radius))))
    add_sphere(occ, c, radius)
    return occ, g


# ---------------------------------------------------------------------------
# full phantom


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _grow_tree(params: PhantomParams, rng, occ: np.ndarray):
    """Random branching tree of tapered tubes; returns its graph."""
    shape = np.array(params.shape, float)
    margin = params.vessel_radius[1] + 1
    rlo, rhi = params.vessel_radius
    nodes = [rng.uniform(margin, shape - margin)]
    node_r = [rng.uniform(0.5 * (rlo + rhi), rhi)]
    parent = [-1]
    heading = [_random_unit(rng)]
    frontier = [0]
    made = 0
    while frontier and made < params.vessel_segments:
        i = frontier.pop(0)
        n_child = 2 if (rng.random() < params.branch_probability and made > 0) else 1
        if i == 0:
            n_child = 2  # root grows both ways so it is not a dangling stub
        for c in range(n_child):
            if made >= params.vessel_segments:
                break
            base = heading[i] if c == 0 else -heading[i] if i == 0 else _random_unit(rng)
            for _ in range(20):
                d = base + 0.5 * _random_unit(rng)
                d /= np.linalg.norm(d)
                length = rng.uniform(*params.segment_length)
                end = nodes[i] + length * d
                if np.all(end >= margin) and np.all(end <= shape - 1 - margin):
                    break
            else:
                continue
            r = max(rlo, node_r[i] * rng.uniform(0.8, 1.0))
            nodes.append(end)
            node_r.append(r)
            parent.append(i)
            heading.append(d)
            frontier.append(len(nodes) - 1)
            add_segment(occ, nodes[i], end, node_r[i], r)
            made += 1
    # collapse degree-2 chains into edges
    n = len(nodes)
    children = [[] for _ in range(n)]
    for j in range(1, n):
        children[parent[j]].append(j)
    deg = np.array([len(children[j]) + (parent[j] >= 0) for j in range(n)])
    g = VesselGraph()
    vid = {}
    for j in range(n):
        if deg[j] != 2:
            vid[j] = g.add_vertex(nodes[j])
    for j in range(n):
        if deg[j] == 2 or (deg[j] == 0):
            continue
        for c in children[j]:
            chain = [j, c]
            while deg[chain[-1]] == 2:
                chain.append(children[chain[-1]][0])
            pts = np.array([nodes[k] for k in chain])
            rad = np.array([node_r[k] for k in chain])
            g.edges.append(Edge(vid[j], vid[chain[-1]], pts, rad))
    # a root with exactly two children has degree 2 and is absorbed
    if deg[0] == 2:
        a, b = children[0]
        def chain_from(start):
            ch = [0, start]
            while deg[ch[-1]] == 2:
                ch.append(children[ch[-1]][0])
            return ch
        ca, cb = chain_from(a), chain_from(b)
        full = ca[::-1] + cb[1:]
        pts = np.array([nodes[k] for k in full])
        rad = np.array([node_r[k] for k in full])
        g.edges.append(Edge(vid[full[0]], vid[full[-1]], pts, rad))
    return g


def gen_phantom(params: PhantomParams = PhantomParams(), seed: int = 0) -> Phantom:
    rng = np.random.default_rng(seed)
    shape = params.shape
    vocc = np.zeros(shape, np.float32)
    graph = VesselGraph()
    for _ in range(params.n_vessel_trees):
        tree = _grow_tree(params, rng, vocc)
        off = graph.n_vertices
        graph.vertices.extend(tree.vertices)
        graph.edges.extend(Edge(e.a + off, e.b + off, e.points, e.radii) for e in tree.edges)
    vessel = vocc >= 0.5
    blocked = ndimage.distance_transform_edt(~vessel) if vessel.any() else np.full(shape, np.inf)

    centers, radii = [], []
    lo, hi = params.cell_radius
    attempts = 0
    shp = np.array(shape, float)
    while len(centers) < params.n_cells and attempts < params.max_attempts:
        attempts += 1
        r = rng.uniform(lo, hi)
        c = rng.uniform(r + 1, shp - r - 2)
        if centers:
            d = np.linalg.norm(np.asarray(centers) - c, axis=1)
            if np.any(d < np.asarray(radii) + r + params.min_gap):
                continue
        ci = tuple(np.round(c).astype(int))
        if blocked[ci] < r + params.min_gap + 1:
            continue
        centers.append(c)
        radii.append(r)
    if len(centers) < params.n_cells:
        raise PhantomPackingError(params.n_cells, len(centers))

    cocc = np.zeros(shape, np.float32)
    for c, r in zip(centers, radii):
        add_sphere(cocc, c, r)

    labels = np.zeros(shape, np.uint8)
    labels[vessel] = VESSEL
    labels[cocc >= 0.5] = CELL

    img = np.full(shape, params.background, np.float32)
    img = img * (1 - vocc) + params.vessel_intensity * vocc
    img = img * (1 - cocc) + params.cell_intensity * cocc
    if params.bias_amplitude:
        field_ = ndimage.gaussian_filter(rng.normal(size=shape), sigma=max(shape) / 4, mode="wrap")
        field_ /= np.abs(field_).max() or 1.0
        img *= (1 + params.bias_amplitude * field_).astype(np.float32)
    if params.noise_sigma:
        img += rng.normal(0, params.noise_sigma, size=shape).astype(np.float32)
    img = np.clip(img, 0, 1).astype(np.float32)
    cells = CellList(np.array(centers).reshape(-1, 3), np.ones(len(centers)), np.array(radii))
    return Phantom(img, labels, cells, graph, params, seed)

"""Predictor-corrector centreline tracing of tubular structures in a 3D mask.

Each step predicts the next centreline point one step ahead and keeps the
candidate direction and radius whose pair of perpendicular rectangular
templates best matches the mask there. Traces claim the tube they cover in a
VisitMap; a trace that runs into a tube claimed earlier stops and becomes a
branch at that point. The traces are then cut at the junctions and assembled
into a graph whose vertices are end points and branch points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .structures import Edge, VesselGraph


@dataclass(frozen=True)
class TracerParams:
    threshold: float = 0.5  # mask binarisation for seeds and the VisitMap check
    cone_angle: float = 35.0  # degrees
    ring_sizes: Tuple[int, ...] = (1, 8, 8, 16)
    radius_factors: Tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.25)
    min_radius: float = 1.0
    max_radius: float = 8.0
    step_fraction: float = 0.5
    stop_fraction: float = 0.2
    trim_fraction: float = 0.5  # fading tail points below this * seed response are dropped
    band: float = 2.0
    sample_spacing: float = 0.5
    min_seed_radius: float = 1.0
    min_length: float = 3.0
    bend_penalty: float = 1.0  # responses are scaled by 1 - bend_penalty * (1 - cos(turn))
    lateral_shifts: Tuple[float, ...] = (0.5,)  # centring offsets tried after each step


@dataclass
class Seed:
    position: np.ndarray
    radius: float
    direction: np.ndarray


@dataclass
class Junction:
    """A trace end that ran into the tube of trace ``other``."""

    other: int
    position: np.ndarray


@dataclass
class Trace:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    start: Optional[Junction] = None
    end: Optional[Junction] = None
    seed_response: float = 0.0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


class VisitMap:
    """Per-voxel id of the trace that claimed it (-1 where unclaimed)."""

    def __init__(self, shape):
        self.owner = np.full(shape, -1, dtype=np.int32)

    @property
    def shape(self):
        return self.owner.shape

    def at(self, pos) -> int:
        idx = np.rint(np.asarray(pos, float)).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.owner.shape):
            return -1
        return int(self.owner[tuple(idx)])

    def claim(self, points, radii, trace_id: int) -> None:
        """Claim the union of balls of radius ``radii`` around ``points``; first claim wins."""
        shape = np.array(self.owner.shape)
        for p, r in zip(np.asarray(points, float), radii):
            lo = np.maximum(np.floor(p - r).astype(int), 0)
            hi = np.minimum(np.ceil(p + r).astype(int) + 1, shape)
            if np.any(hi <= lo):
                continue
            sl = tuple(slice(a, b) for a, b in zip(lo, hi))
            g = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
            d2 = sum((gi - pi) ** 2 for gi, pi in zip(g, p))
            block = self.owner[sl]
            block[(d2 <= r * r) & (block < 0)] = trace_id


def _perpendiculars(d: np.ndarray):
    """Two unit vectors completing ``d`` (n, 3) to right-handed frames."""
    d = np.atleast_2d(d)
    helper = np.where(np.abs(d[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    u = np.cross(d, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(d, u)
    return u, v


def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("direction must be non-zero")
    return v / n


def _template_points(pos, dirs, radii, step, band, spacing, roll=0.0):
    """Sample coordinates of the two rectangle templates for many candidates.

    Returns (coords (3, n_cand * n_s * n_a), interior mask over the sample
    axis, sample counts) with samples ordered candidate-major.
    """
    u, v = _perpendiculars(dirs)
    if roll:
        c, s = math.cos(roll), math.sin(roll)
        u, v = c * u + s * v, -s * u + c * v
    rmax = float(np.max(radii))
    ns = int(math.ceil((rmax + band) / spacing))
    # transverse offsets as multiples of spacing, symmetric about the axis
    t = np.arange(-ns, ns + 1) * spacing
    na = max(2, int(math.ceil(step / spacing)) + 1)
    a = np.linspace(-step / 2, step / 2, na)
    r = np.asarray(radii, float)[:, None]
    interior = np.abs(t)[None, :] <= r + 1e-9
    exterior = (np.abs(t)[None, :] > r + 1e-9) & (np.abs(t)[None, :] <= r + band + 1e-9)
    axes = np.stack([u, v], axis=1)  # (n, 2, 3)
    pts = (
        np.asarray(pos, float)[None, None, None, None, :]
        + a[None, None, None, :, None] * dirs[:, None, None, None, :]
        + t[None, None, :, None, None] * axes[:, :, None, None, :]
    )  # (n, 2, len(t), na, 3)
    return pts, interior, exterior


def _responses(mask, pos, dirs, radii, step, params: TracerParams, roll=0.0) -> np.ndarray:
    pts, interior, exterior = _template_points(pos, dirs, radii, step, params.band, params.sample_spacing, roll)
    shape = np.array(mask.shape)
    flat = pts.reshape(-1, 3)
    vals = ndimage.map_coordinates(mask, flat.T, order=1, mode="constant", cval=0.0).reshape(pts.shape[:-1])
    inside = np.all((flat > -1) & (flat < shape), axis=1).reshape(pts.shape[:-1])
    # (n, 2, T, A) -> per-candidate, per transverse offset sums
    prof = vals.sum(axis=(1, 3))
    w = pts.shape[1] * pts.shape[3]
    mi = (prof * interior).sum(1) / (interior.sum(1) * w)
    me = (prof * exterior).sum(1) / np.maximum(exterior.sum(1) * w, 1)
    out = mi - me
    out[~inside.any(axis=(1, 2, 3))] = 0.0
    return out


def template_response(mask, position, direction, radius, step: Optional[float] = None, params: TracerParams = TracerParams(), roll: float = 0.0) -> float:
    """Mean mask inside two perpendicular rectangles minus the mean in a band just outside them.

    Both rectangles contain the axis ``direction`` through ``position``; they
    are ``2*radius`` wide and ``step`` long. ``roll`` spins the pair about the
    axis.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    d = _unit(direction)
    if step is None:
        step = max(1.0, params.step_fraction * radius)
    return float(_responses(np.asarray(mask, float), position, d[None], [radius], step, params, roll)[0])


def candidate_directions(direction, cone_angle: float = 35.0, ring_sizes=(1, 8, 8, 16)) -> np.ndarray:
    """Unit vectors on concentric rings around ``direction`` (the axis first)."""
    d = _unit(direction)
    u, v = _perpendiculars(d[None])
    u, v = u[0], v[0]
    out = []
    n_rings = len(ring_sizes) - 1
    for i, k in enumerate(ring_sizes):
        theta = math.radians(cone_angle) * i / max(n_rings, 1)
        for j in range(k):
            phi = 2 * math.pi * j / k + (math.pi / k if i % 2 == 0 else 0.0)
            out.append(math.cos(theta) * d + math.sin(theta) * (math.cos(phi) * u + math.sin(phi) * v))
    return np.asarray(out)


def generate_seeds(mask: np.ndarray, threshold: float = 0.5, params: TracerParams = TracerParams()) -> List[Seed]:
    """Distance-transform ridge maxima of the binarised mask, deepest first."""
    mask = np.asarray(mask, float)
    binary = mask > threshold
    if not binary.any():
        return []
    dt = ndimage.distance_transform_edt(binary)
    peaks = (dt == ndimage.maximum_filter(dt, size=3)) & (dt >= params.min_seed_radius)
    idx = np.argwhere(peaks)
    vals = dt[tuple(idx.T)]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -vals))
    seeds = []
    for i in order:
        p = idx[i].astype(float)
        r = float(vals[i])
        seeds.append(Seed(p, r, _principal_axis(binary, p, r)))
    return seeds


def _principal_axis(binary, p, r) -> np.ndarray:
    h = int(math.ceil(2 * r + 1))
    lo = np.maximum(p.astype(int) - h, 0)
    hi = np.minimum(p.astype(int) + h + 1, binary.shape)
    pts = np.argwhere(binary[tuple(slice(a, b) for a, b in zip(lo, hi))]) + lo
    pts = pts[np.linalg.norm(pts - p, axis=1) <= h]
    if len(pts) < 3:
        return np.array([1.0, 0.0, 0.0])
    w, vecs = np.linalg.eigh(np.cov((pts - p).T))
    d = vecs[:, -1]
    # fixed sign so the same geometry always yields the same direction
    k = int(np.argmax(np.abs(d)))
    return d if d[k] > 0 else -d


def _best_batched(mask, pos, direction, radius, params: TracerParams):
    dirs = candidate_directions(direction, params.cone_angle, params.ring_sizes)
    radii = np.clip(np.asarray(params.radius_factors) * radius, params.min_radius, params.max_radius)
    step = max(1.0, params.step_fraction * radius)
    resp = np.empty((len(dirs), len(radii)))
    for i, d in enumerate(dirs):
        resp[i] = _responses(mask, np.asarray(pos, float) + step * d, np.repeat(d[None], len(radii), 0), radii, step, params)
    bend = 1.0 - params.bend_penalty * (1.0 - dirs @ _unit(direction))
    i, j = np.unravel_index(int(np.argmax(resp * bend[:, None])), resp.shape)
    d, r = dirs[i], float(radii[j])
    nxt = np.asarray(pos, float) + step * d
    best = float(resp[i, j])
    # corrector: nudge the new point across the axis toward the tube centre
    offsets = _lateral_offsets(d, params.lateral_shifts)
    if len(offsets):
        cand = nxt[None] + offsets
        lat = np.array([_responses(mask, c, d[None], [r], step, params)[0] for c in cand])
        k = int(np.argmax(lat))
        if lat[k] > best:
            best, nxt = float(lat[k]), cand[k]
    return best, nxt, d, r


def _lateral_offsets(d, shifts, n_angles: int = 8) -> np.ndarray:
    u, v = _perpendiculars(d[None])
    phi = 2 * np.pi * np.arange(n_angles) / n_angles
    ring = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
    return np.concatenate([s * ring for s in shifts]) if shifts else np.zeros((0, 3))


def _march(mask, pos, direction, radius, stop, trim, visit: Optional[VisitMap], own_id, params, max_steps):
    pts, rads, dirs, resps = [], [], [], []
    shape = np.array(mask.shape)
    junction = None
    for _ in range(max_steps):
        resp, nxt, d, r = _best_batched(mask, pos, direction, radius, params)
        if resp < stop:
            # the fibre faded out: the last weak points wander off the axis
            while resps and resps[-1] < trim:
                for lst in (pts, rads, dirs, resps):
                    lst.pop()
            break
        if np.any(nxt < 0) or np.any(nxt > shape - 1):
            break
        if visit is not None:
            owner = visit.at(nxt)
            if owner >= 0 and owner != own_id:
                junction = Junction(owner, nxt)
                break
        pts.append(nxt)
        rads.append(r)
        dirs.append(d)
        resps.append(resp)
        pos, direction, radius = nxt, d, r
    return pts, rads, dirs, junction


def trace_fiber(mask: np.ndarray, seed: Seed, visit: Optional[VisitMap] = None, params: TracerParams = TracerParams(), trace_id: int = -1) -> Trace:
    """Trace both ways from ``seed`` and join the halves into one ordered centreline."""
    mask = np.asarray(mask, float)
    pos = np.asarray(seed.position, float)
    r0 = float(np.clip(seed.radius, params.min_radius, params.max_radius))
    d0 = _unit(seed.direction)
    # settle the seed's radius and direction in place before marching
    dirs = candidate_directions(d0, params.cone_angle, params.ring_sizes)
    radii = np.clip(np.asarray(params.radius_factors) * r0, params.min_radius, params.max_radius)
    step = max(1.0, params.step_fraction * r0)
    resp = np.stack([_responses(mask, pos, np.repeat(d[None], len(radii), 0), radii, step, params) for d in dirs])
    i, j = np.unravel_index(int(np.argmax(resp)), resp.shape)
    seed_resp = float(resp[i, j])
    if seed_resp <= 0:
        return Trace(pos[None], np.array([r0]), d0[None], seed_response=seed_resp)
    d0, r0 = dirs[i], float(radii[j])
    stop = params.stop_fraction * seed_resp
    trim = params.trim_fraction * seed_resp
    max_steps = int(math.ceil(np.linalg.norm(mask.shape) / 1.0)) + 1
    fp, fr, fd, fj = _march(mask, pos, d0, r0, stop, trim, visit, trace_id, params, max_steps)
    bp, br, bd, bj = _march(mask, pos, -d0, r0, stop, trim, visit, trace_id, params, max_steps)
    points = bp[::-1] + [pos] + fp
    radii_out = br[::-1] + [r0] + fr
    dirs_out = [-d for d in bd[::-1]] + [d0] + fd
    return Trace(np.asarray(points), np.asarray(radii_out), np.asarray(dirs_out), bj, fj, seed_resp)


# ---------------------------------------------------------------------------
# graph assembly


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, k):
        self.parent.setdefault(k, k)
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _arclength(points):
    if len(points) < 2:
        return np.zeros(len(points))
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def _merge_cuts(s: np.ndarray, cuts, tol: float):
    """Collapse cut indices closer than ``tol`` in arclength; ends win."""
    n = len(s) - 1
    kept = [0, n]
    mapping = {0: 0, n: n}
    for c in sorted(set(cuts) - {0, n}, key=lambda c: s[c]):
        near = min(kept, key=lambda k: abs(s[k] - s[c]))
        if abs(s[near] - s[c]) < tol:
            mapping[c] = near
        else:
            kept.append(c)
            mapping[c] = c
    return sorted(kept), mapping


def assemble_graph(traces: List[Trace]) -> VesselGraph:
    """Cut traces at junction contacts and join them into a graph."""
    cuts = {t: {0, len(tr) - 1} for t, tr in enumerate(traces)}
    attach = []  # (trace, end index, host trace, host index)
    for t, tr in enumerate(traces):
        for end, j in ((0, tr.start), (len(tr) - 1, tr.end)):
            if j is None or j.other >= len(traces):
                continue
            host = traces[j.other]
            k = int(np.argmin(np.linalg.norm(host.points - j.position, axis=1)))
            cuts[j.other].add(k)
            attach.append((t, end, j.other, k))
    uf = _UnionFind()
    kept_cuts = {}
    for t, tr in enumerate(traces):
        s = _arclength(tr.points)
        tol = max(2.0, float(np.median(tr.radii)))
        kept, mapping = _merge_cuts(s, cuts[t], tol)
        kept_cuts[t] = kept
        for c, m in mapping.items():
            uf.union((t, c), (t, m))
    for t, end, h, k in attach:
        uf.union((t, end), (h, k))
    # vertex positions prefer host (interior) points over attaching ends
    attaching = {(t, end) for t, end, _, _ in attach}
    groups = {}
    for t, kept in kept_cuts.items():
        for c in kept:
            groups.setdefault(uf.find((t, c)), []).append((t, c))
    g = VesselGraph()
    vid = {}
    for root in sorted(groups):
        members = groups[root]
        hosts = [m for m in members if m not in attaching] or members
        pos = np.mean([traces[t].points[c] for t, c in hosts], axis=0)
        vid[root] = g.add_vertex(pos)
    for t, tr in enumerate(traces):
        kept = kept_cuts[t]
        for a, b in zip(kept[:-1], kept[1:]):
            va, vb = vid[uf.find((t, a))], vid[uf.find((t, b))]
            pts = tr.points[a : b + 1].copy()
            rad = tr.radii[a : b + 1].copy()
            pts[0], pts[-1] = g.vertices[va], g.vertices[vb]
            g.edges.append(Edge(va, vb, pts, rad))
    return absorb_degree_two(g)


def absorb_degree_two(g: VesselGraph) -> VesselGraph:
    """Merge edge pairs meeting at degree-2 vertices and drop unused vertices."""
    edges = [Edge(e.a, e.b, e.points, e.radii) for e in g.edges if not (e.a == e.b and e.length < 1e-9)]
    changed = True
    while changed:
        changed = False
        deg = np.zeros(len(g.vertices), int)
        for e in edges:
            deg[e.a] += 1
            deg[e.b] += 1
        for v in np.nonzero(deg == 2)[0]:
            inc = [i for i, e in enumerate(edges) if e.a == v or e.b == v]
            if len(inc) != 2:
                continue  # a closed loop through v
            e1, e2 = edges[inc[0]], edges[inc[1]]
            p1, r1 = (e1.points, e1.radii) if e1.b == v else (e1.points[::-1], e1.radii[::-1])
            p2, r2 = (e2.points, e2.radii) if e2.a == v else (e2.points[::-1], e2.radii[::-1])
            a = e1.a if e1.b == v else e1.b
            b = e2.b if e2.a == v else e2.a
            merged = Edge(a, b, np.concatenate([p1, p2[1:]]), np.concatenate([r1, r2[1:]]))
            edges = [e for i, e in enumerate(edges) if i not in inc] + [merged]
            changed = True
            break
    used = sorted({e.a for e in edges} | {e.b for e in edges})
    remap = {old: new for new, old in enumerate(used)}
    out = VesselGraph([g.vertices[i] for i in used], [])
    for e in edges:
        out.edges.append(Edge(remap[e.a], remap[e.b], e.points, e.radii))
    return out


@dataclass
class TraceLog:
    traces: List[Trace] = field(default_factory=list)
    skipped_seeds: int = 0


def build_graph(mask: np.ndarray, params: TracerParams = TracerParams(), log: Optional[TraceLog] = None) -> VesselGraph:
    """Trace every unclaimed seed in order and assemble the vessel graph."""
    mask = np.asarray(mask, float)
    visit = VisitMap(mask.shape)
    traces: List[Trace] = []
    skipped = 0
    for seed in generate_seeds(mask, params.threshold, params):
        if visit.at(seed.position) >= 0:
            skipped += 1
            continue
        tr = trace_fiber(mask, seed, visit, params, trace_id=len(traces))
        if len(tr) < 2 or tr.length < params.min_length:
            continue
        visit.claim(tr.points, tr.radii, len(traces))
        traces.append(tr)
    if log is not None:
        log.traces = traces
        log.skipped_seeds = skipped
    if not traces:
        return VesselGraph()
    return assemble_graph(traces)

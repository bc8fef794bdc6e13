"""Cell lists and vessel graphs, with their plain-text file formats."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List

import numpy as np


@dataclass
class CellList:
    """Cell centres (voxel coordinates, x/y/z), confidences and radii."""

    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    radius: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        n = len(self.centers)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        self.radius = np.asarray(self.radius, dtype=float).reshape(-1)
        if self.confidence.size == 0 and n:
            self.confidence = np.ones(n)
        if self.radius.size == 0 and n:
            self.radius = np.zeros(n)
        if len(self.confidence) != n or len(self.radius) != n:
            raise ValueError("centers, confidence and radius must have equal length")

    def __len__(self) -> int:
        return len(self.centers)

    def translated(self, offset) -> "CellList":
        return CellList(self.centers + np.asarray(offset, float), self.confidence.copy(), self.radius.copy())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "z", "confidence", "radius"])
        for (x, y, z), c, r in zip(self.centers, self.confidence, self.radius):
            w.writerow([f"{x:.4f}", f"{y:.4f}", f"{z:.4f}", f"{c:.6g}", f"{r:.4f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CellList":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            return cls()
        centers = [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]
        return cls(centers, [float(r["confidence"]) for r in rows], [float(r["radius"]) for r in rows])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path) -> "CellList":
        with open(path) as fh:
            return cls.from_csv(fh.read())


@dataclass
class Edge:
    a: int
    b: int
    points: np.ndarray  # (n, 3) centreline, ordered from vertex a to vertex b
    radii: np.ndarray  # (n,)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class VesselGraph:
    """Vertices are end and branch points; edges carry centreline geometry."""

    vertices: List[np.ndarray] = field(default_factory=list)
    edges: List[Edge] = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.vertices), dtype=int)
        for e in self.edges:
            deg[e.a] += 1
            deg[e.b] += 1
        return deg

    def add_vertex(self, pos) -> int:
        self.vertices.append(np.asarray(pos, dtype=float))
        return len(self.vertices) - 1

    def translated(self, offset) -> "VesselGraph":
        off = np.asarray(offset, float)
        return VesselGraph(
            [v + off for v in self.vertices],
            [Edge(e.a, e.b, e.points + off, e.radii.copy()) for e in self.edges],
        )

    def total_length(self) -> float:
        return sum(e.length for e in self.edges)

    def summary(self, bins: int = 10) -> dict:
        deg = self.degree()
        radii = np.concatenate([e.radii for e in self.edges]) if self.edges else np.zeros(0)
        if radii.size:
            counts, edges = np.histogram(radii, bins=bins)
        else:
            counts, edges = np.zeros(0, int), np.zeros(0)
        return {
            "vertices": self.n_vertices,
            "edges": self.n_edges,
            "branch_points": int((deg >= 3).sum()),
            "end_points": int((deg == 1).sum()),
            "total_length": round(self.total_length(), 4),
            "mean_radius": round(float(radii.mean()), 4) if radii.size else 0.0,
            "radius_histogram": {
                "counts": counts.tolist(),
                "bin_edges": [round(float(b), 4) for b in edges],
            },
        }

    def summary_text(self) -> str:
        return json.dumps(self.summary(), indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"# vessel graph: {self.n_vertices} vertices {self.n_edges} edges"]
        lines.append(f"VERTICES {self.n_vertices}")
        for i, v in enumerate(self.vertices):
            lines.append(f"{i} {v[0]:.4f} {v[1]:.4f} {v[2]:.4f}")
        lines.append(f"EDGES {self.n_edges}")
        for i, e in enumerate(self.edges):
            lines.append(f"{i} {e.a} {e.b} {len(e.points)}")
            for p, r in zip(e.points, e.radii):
                lines.append(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {r:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VesselGraph":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        it = iter(lines)
        head = next(it).split()
        if head[0] != "VERTICES":
            raise ValueError(f"expected VERTICES header, got {head[0]!r}")
        g = cls()
        for _ in range(int(head[1])):
            _, x, y, z = next(it).split()
            g.add_vertex([float(x), float(y), float(z)])
        head = next(it).split()
        if head[0] != "EDGES":
            raise ValueError(f"expected EDGES header, got {head[0]!r}")
        for _ in range(int(head[1])):
            _, a, b, n = (int(t) for t in next(it).split())
            rows = np.array([[float(t) for t in next(it).split()] for _ in range(n)]).reshape(n, 4)
            g.edges.append(Edge(a, b, rows[:, :3], rows[:, 3]))
        return g

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "VesselGraph":
        with open(path) as fh:
            return cls.from_text(fh.read())


def resample_polyline(points: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Points along a polyline at (at most) ``spacing`` arclength apart, ends included."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return points.copy()
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0:
        return points[:1].copy()
    # tolerance keeps whole-voxel lengths stable under float rounding
    n = max(int(np.ceil(total / spacing - 1e-9)), 1)
    t = np.linspace(0.0, total, n + 1)
    return np.stack([np.interp(t, s, points[:, i]) for i in range(3)], axis=1)

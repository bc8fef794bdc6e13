"""Detection and tracing scores against ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .structures import CellList, VesselGraph, resample_polyline


def _ratio(num: float, den: float, empty: float) -> float:
    return num / den if den else empty


@dataclass
class MatchResult:
    """Counts behind precision and recall.

    ``tp`` counts matched predictions and ``tp_truth`` matched truths; they
    differ only for point-set matching, where matches need not be one-to-one.
    """

    tp: float
    fp: float
    fn: float
    tp_truth: Optional[float] = None
    curve: List[Tuple[float, float, float]] = field(default_factory=list)  # (threshold, precision, recall)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp, 1.0)

    @property
    def recall(self) -> float:
        hit = self.tp if self.tp_truth is None else self.tp_truth
        return _ratio(hit, hit + self.fn, 1.0)

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r, 0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in ("tp", "fp", "fn", "precision", "recall", "f_score"):
            w.writerow([k, f"{getattr(self, k):.6g}"])
        if self.tp_truth is not None:
            w.writerow(["tp_truth", f"{self.tp_truth:.6g}"])
        if self.curve:
            w.writerow([])
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.curve:
                w.writerow([f"{t:.6g}", f"{p:.6g}", f"{r:.6g}"])
        return buf.getvalue()


def greedy_match(pred: np.ndarray, truth: np.ndarray, match_dist: float):
    """One-to-one pairs taken in order of increasing distance, up to ``match_dist``."""
    if len(pred) == 0 or len(truth) == 0:
        return []
    d = cdist(pred, truth)
    i, j = np.nonzero(d <= match_dist)
    order = np.lexsort((j, i, d[i, j]))
    used_p, used_t, pairs = set(), set(), []
    for k in order:
        a, b = int(i[k]), int(j[k])
        if a in used_p or b in used_t:
            continue
        used_p.add(a)
        used_t.add(b)
        pairs.append((a, b))
    return pairs


def eval_cells(pred: CellList, truth: CellList, match_dist: Optional[float] = None, curve: bool = True) -> MatchResult:
    """Greedy centre matching, plus a precision-recall sweep over detection confidence.

    The default ``match_dist`` is half the mean true radius.
    """
    if match_dist is None:
        match_dist = 0.5 * float(np.mean(truth.radius)) if len(truth) else 1.0
    if match_dist <= 0:
        raise ValueError(f"match_dist must be positive, got {match_dist}")
    n = len(greedy_match(pred.centers, truth.centers, match_dist))
    result = MatchResult(n, len(pred) - n, len(truth) - n)
    if curve:
        for thr in np.unique(pred.confidence):
            keep = pred.confidence >= thr
            m = len(greedy_match(pred.centers[keep], truth.centers, match_dist))
            r = MatchResult(m, int(keep.sum()) - m, len(truth) - m)
            result.curve.append((float(thr), r.precision, r.recall))
    return result


def centreline_points(graph: VesselGraph, spacing: float = 1.0) -> np.ndarray:
    pts = [resample_polyline(e.points, spacing) for e in graph.edges]
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def eval_vessels(pred: VesselGraph, truth: VesselGraph, sigma: float = 2.0) -> MatchResult:
    """Fraction of resampled centreline points lying within ``sigma`` of the other graph."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p = _dedupe(centreline_points(pred))
    t = _dedupe(centreline_points(truth))
    if len(p) == 0 or len(t) == 0:
        return MatchResult(0, len(p), len(t), tp_truth=0)
    hit_p = cKDTree(t).query(p, distance_upper_bound=sigma)[0] <= sigma
    hit_t = cKDTree(p).query(t, distance_upper_bound=sigma)[0] <= sigma
    # precision counts over predicted points, recall over truth points
    tp_p, tp_t = float(hit_p.sum()), float(hit_t.sum())
    return MatchResult(tp_p, len(p) - tp_p, len(t) - tp_t, tp_truth=tp_t)


def _dedupe(points: np.ndarray) -> np.ndarray:
    """Drop exact repeats (shared vertices appear once per incident edge)."""
    if len(points) == 0:
        return points
    return np.unique(np.round(points, 9), axis=0)

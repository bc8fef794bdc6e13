import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvnet.evaluation import MatchResult, eval_cells, eval_vessels, greedy_match
from dvnet.structures import CellList, Edge, VesselGraph


def cells(points, conf=None):
    pts = np.asarray(points, float).reshape(-1, 3)
    return CellList(pts, conf if conf is not None else np.ones(len(pts)), np.full(len(pts), 4.0))


def two_edge_graph():
    g = VesselGraph()
    for v in ([0.0, 0, 0], [20.0, 0, 0], [20.0, 20, 0]):
        g.add_vertex(v)
    g.edges.append(Edge(0, 1, np.linspace([0.0, 0, 0], [20.0, 0, 0], 5), np.ones(5)))
    g.edges.append(Edge(1, 2, np.linspace([20.0, 0, 0], [20.0, 20, 0], 5), np.ones(5)))
    return g


point_sets = st.lists(st.tuples(*[st.integers(0, 40)] * 3), max_size=12).map(lambda v: np.asarray(v, float).reshape(-1, 3))


def test_perfect_cells():
    t = cells([[1, 2, 3], [10, 10, 10], [20, 5, 5]])
    r = eval_cells(t, t)
    assert (r.precision, r.recall, r.f_score) == (1.0, 1.0, 1.0)


def test_empty_prediction_conventions():
    r = eval_cells(cells([]), cells([[1, 1, 1]]))
    assert r.precision == 1.0 and r.recall == 0.0 and r.f_score == 0.0
    assert MatchResult(0, 0, 0).f_score == 1.0


def test_one_spurious_detection():
    truth = cells([[5, 5, 5], [15, 5, 5], [25, 5, 5], [35, 5, 5]])
    pred = cells(np.vstack([truth.centers, [[100, 100, 100]]]))
    r = eval_cells(pred, truth)
    assert r.precision == pytest.approx(4 / 5)
    assert r.recall == 1.0


def test_default_match_distance_is_half_mean_radius():
    truth = cells([[0, 0, 0]])
    assert eval_cells(cells([[1.9, 0, 0]]), truth).tp == 1
    assert eval_cells(cells([[2.1, 0, 0]]), truth).tp == 0


def test_match_distance_must_be_positive():
    with pytest.raises(ValueError):
        eval_cells(cells([[0, 0, 0]]), cells([[0, 0, 0]]), match_dist=0)


def test_greedy_takes_closest_pair_first():
    pred = np.array([[0.0, 0, 0], [2.5, 0, 0]])
    truth = np.array([[2.0, 0, 0]])
    assert greedy_match(pred, truth, 3.0) == [(1, 0)]


def test_pr_curve_rows():
    truth = cells([[0, 0, 0], [10, 0, 0]])
    pred = cells([[0, 0, 0], [10, 0, 0], [30, 0, 0]], conf=[0.9, 0.5, 0.7])
    r = eval_cells(pred, truth, 1.0)
    assert r.curve == [(0.5, 2 / 3, 1.0), (0.7, 0.5, 0.5), (0.9, 1.0, 0.5)]
    assert "threshold,precision,recall" in r.to_csv()


@given(point_sets, point_sets, st.floats(0.5, 6))
def test_cell_eval_swap_symmetry(a, b, dist):
    ab = eval_cells(cells(a), cells(b), dist, curve=False)
    ba = eval_cells(cells(b), cells(a), dist, curve=False)
    assert ab.precision == ba.recall and ab.recall == ba.precision


@given(point_sets, point_sets, st.tuples(*[st.integers(-50, 50)] * 3))
def test_cell_eval_translation(a, b, shift):
    p, t = cells(a), cells(b)
    r1 = eval_cells(p, t, 3.0)
    r2 = eval_cells(p.translated(shift), t.translated(shift), 3.0)
    assert (r1.tp, r1.fp, r1.fn) == (r2.tp, r2.fp, r2.fn)


@given(point_sets, point_sets, st.lists(st.floats(0, 1), min_size=12, max_size=12))
@settings(max_examples=40)
def test_pr_curve_recall_non_increasing(a, b, conf):
    r = eval_cells(cells(a, np.asarray(conf[: len(a)])), cells(b), 4.0)
    recalls = [rec for _, _, rec in r.curve]
    assert all(x >= y for x, y in zip(recalls, recalls[1:]))


def test_vessels_perfect_and_empty():
    g = two_edge_graph()
    assert eval_vessels(g, g).f_score == 1.0
    assert eval_vessels(VesselGraph(), g).f_score == 0.0


def test_missing_edge_scores_two_thirds():
    g = two_edge_graph()
    half = VesselGraph([v.copy() for v in g.vertices], [g.edges[0]])
    r = eval_vessels(half, g, sigma=0.5)
    assert r.precision == 1.0
    assert r.recall == pytest.approx(0.5, abs=0.03)
    assert r.f_score == pytest.approx(2 / 3, abs=0.03)


def test_vessel_sigma_must_be_positive():
    with pytest.raises(ValueError):
        eval_vessels(two_edge_graph(), two_edge_graph(), sigma=-1)


def shifted(g, offset):
    return g.translated(offset)


@given(st.floats(0, 5), st.tuples(*[st.integers(-30, 30)] * 3))
def test_vessel_eval_invariances(offset, shift):
    truth = two_edge_graph()
    pred = shifted(truth, (0.0, offset, 0.0))
    base = eval_vessels(pred, truth)
    # point order
    rev = VesselGraph(pred.vertices, [Edge(e.b, e.a, e.points[::-1], e.radii[::-1]) for e in pred.edges])
    assert eval_vessels(rev, truth).f_score == pytest.approx(base.f_score)
    # rigid translation of both
    assert eval_vessels(pred.translated(shift), truth.translated(shift)).f_score == pytest.approx(base.f_score)
    # splitting an edge at a whole-voxel arclength keeps the sampled geometry
    e = pred.edges[0]
    mid = e.points[0] + (e.points[-1] - e.points[0]) * 0.5
    split = VesselGraph(
        pred.vertices + [mid],
        [Edge(e.a, 3, np.array([e.points[0], mid]), np.ones(2)), Edge(3, e.b, np.array([mid, e.points[-1]]), np.ones(2)), pred.edges[1]],
    )
    assert eval_vessels(split, truth).f_score == pytest.approx(base.f_score)

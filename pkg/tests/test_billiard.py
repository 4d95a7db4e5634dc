import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from newton_sic.billiard import (PlanePatch, Ray, Scene, WallPatch, batch_trace, graph_scene, reflect,
                                 theorem2_checks, trace_ray)
from newton_sic.errors import GrazingError, NonRegularScattering


def test_reflect_examples():
    assert np.allclose(reflect([0, 0, -1], [0, 0, 1]), [0, 0, 1])
    n = np.array([1.0, 0, 1]) / np.sqrt(2)
    assert np.allclose(reflect([0, 0, -1], n), [1, 0, 0])


@pytest.mark.parametrize("v, n", [([0, 0, 1], [0, 0, 1]), ([1, 0, 0], [0, 0, 1])])
def test_reflect_rejects_non_incoming(v, n):
    with pytest.raises(GrazingError):
        reflect(v, n)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_reflect_involution_and_energy(c):
    v, n = np.array(c[:3]), np.array(c[3:])
    if np.linalg.norm(v) < 1e-3 or np.linalg.norm(n) < 1e-3:
        return
    v, n = v / np.linalg.norm(v), n / np.linalg.norm(n)
    if v @ n > -1e-6:
        n = -n
    if abs(v @ n) < 1e-6:
        return
    w = reflect(v, n)
    assert np.linalg.norm(w) == pytest.approx(1, abs=1e-12)
    assert np.allclose(reflect(w, -n), v, atol=1e-12)


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0.0, 0, 2]))


def test_plateau_single_vertical_bounce(square):
    sc = Scene([PlanePatch(0.0, True, lambda xy: square.contains_many(xy, closed=True))], square, 1.0)
    b = batch_trace(sc, 1000, seed=1)
    assert b.histogram() == {1: 1000}
    assert np.allclose(b.v_plus, [0, 0, 1])
    assert b.checks["ineq2_violations"] == 0


def test_wall_hit_from_inside(disc):
    w = WallPatch(disc, -1.0, 1.0)
    t, n = w.intersect(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), 1e-12)
    assert t[0] == pytest.approx(1.0)
    assert np.allclose(n[0], [-1, 0, 0])


def test_cap_raises_non_regular(square):
    sc = Scene([PlanePatch(0.0, True, lambda xy: square.contains_many(xy, closed=True))], square, 1.0)
    with pytest.raises(NonRegularScattering):
        trace_ray(sc, [0.5, 0.5], cap=0)


def test_wedge_mirror_ray_goes_through_focus(wedge_surface, wedge_function):
    sc = graph_scene(wedge_surface)
    x = np.array([0.95, 0.05])
    smp = wedge_function.eval(x)
    assert smp.region == "Mirror"
    tr = trace_ray(sc, x)
    assert len(tr.impacts) == 1
    X = tr.impacts[0][0]
    assert X[2] == pytest.approx(smp.u, abs=1e-12)
    # the outgoing ray passes through the focus (O, 0)
    d = np.array([0.0, 0.0, 0.0]) - X
    assert np.linalg.norm(np.cross(tr.v_plus, d)) < 1e-12
    assert tr.v_plus @ d > 0


def test_wedge_valley_ray_returns_vertically(wedge_surface, wedge_function):
    x = np.array([0.3, 0.0])
    assert wedge_function.eval(x).region == "Valley"
    tr = trace_ray(graph_scene(wedge_surface), x)
    assert len(tr.impacts) == 1 and np.allclose(tr.v_plus, [0, 0, 1])


def test_wedge_batch_single_impact(wedge_surface):
    sc = graph_scene(wedge_surface)
    b = batch_trace(sc, 20_000, seed=2)
    assert b.histogram() == {1: 20_000}
    c = b.checks
    assert c["v3_monotone_violations"] == 0 and c["z_convex_violations"] == 0 and c["ineq2_violations"] == 0


def test_batch_is_deterministic(wedge_surface):
    sc = graph_scene(wedge_surface)
    a, b = batch_trace(sc, 3000, seed=9), batch_trace(sc, 3000, seed=9)
    assert np.array_equal(a.v_plus, b.v_plus) and np.array_equal(a.impacts, b.impacts)


def test_composite_impacts_on_graph(small_surface):
    sc = graph_scene(small_surface)
    b = batch_trace(sc, 5000, seed=4)
    assert b.histogram() == {1: 5000}
    u = small_surface.eval_many(b.x0)[0]
    first = np.unique(b.impact_ray, return_index=True)[1]
    assert np.allclose(b.impact_point[first, 2], u[b.impact_ray[first]], atol=1e-9)
    t2 = theorem2_checks(b, sc)
    assert t2["ineq2_violations"] == 0 and t2["v3_monotone_violations"] == 0


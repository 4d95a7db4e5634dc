import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings, strategies as st
from shapely.ops import unary_union

from newton_sic.errors import DomainError, ResourceError
from newton_sic.hierarchy import (Tri, build_first_order_family, build_second_order_family, covered_by_tree,
                                  double_triangle, family_report, predicted_pairs, run_doubling,
                                  sample_triangle, scale_family_to_circle, tree_valley_area_bound)
from newton_sic.hierarchy import _r1_coefficient


def unit_tri(d=1.0):
    return Tri(np.array([-d / 2, 0.0]), np.array([d / 2, 0.0]), np.array([0.0, 1.0]))


def test_double_triangle_omega_one():
    a, b = double_triangle(Tri(np.array([-1.0, 0]), np.array([1.0, 0]), np.array([0.0, 1])), 1.0)
    assert np.allclose(a.apex, [1, 2]) and np.allclose(b.apex, [-1, 2])
    assert np.allclose(a.N, [0, 0]) and np.allclose(b.M, [0, 0])
    assert a.height == pytest.approx(2) and b.height == pytest.approx(2)


def test_double_triangle_half():
    a, b = double_triangle(Tri(np.array([-1.0, 0]), np.array([1.0, 0]), np.array([0.0, 1])), 0.5)
    assert np.allclose(a.apex, [0.5, 1.5]) and a.height == pytest.approx(1.5)


@pytest.mark.parametrize("omega", [0.0, -0.1, 1.5])
def test_double_triangle_rejects_omega(omega):
    with pytest.raises(DomainError):
        double_triangle(unit_tri(), omega)


def test_area_growth_of_doubling(rng):
    for _ in range(1000):
        P = rng.normal(size=(3, 2))
        t = Tri(P[0], P[1], P[2])
        if t.height < 1e-3 * t.base_length:
            continue
        w = rng.uniform(1e-3, 1.0)
        a, b = double_triangle(t, w)
        grown = unary_union([a.polygon(), b.polygon()]).area - t.area
        assert grown < 2 * w * w * t.area + 1e-12 * t.area
        assert a.height == pytest.approx((1 + w) * t.height, rel=1e-12)


def test_doubling_start_and_counts():
    r0 = run_doubling(unit_tri(), 0)
    assert r0.S == [pytest.approx(0.5)]
    r = run_doubling(unit_tri(), 4)
    assert len(r.triangles) == 16
    assert all(t.height == pytest.approx(5, rel=1e-12) for t in r.triangles)
    assert all(t.base_length == pytest.approx(1 / 16, rel=1e-12) for t in r.triangles)


@pytest.mark.parametrize("m", range(1, 11))
def test_doubling_log_bound(m):
    r = run_doubling(unit_tri(), m)
    assert r.S[-1] < math.log(m) + 1.5
    assert all(inc < 1 / k for k, inc in enumerate(r.increments, start=1))


def test_doubling_budget():
    with pytest.raises(ResourceError):
        run_doubling(unit_tri(), 17)


def test_first_order_m1():
    f = build_first_order_family(unit_tri(), 1)
    assert len(f.pairs) == 2
    e = f.pairs.N - f.pairs.M
    nrm = np.stack([-e[:, 1], e[:, 0]], axis=1) / np.linalg.norm(e, axis=1)[:, None]
    h = np.abs(np.einsum("ij,ij->i", f.pairs.O - f.pairs.M, nrm))
    assert np.allclose(h, 2)
    # trapezoid height sqrt(m) = 1: distance between the lines MN and AB
    depth = np.abs(np.einsum("ij,ij->i", f.pairs.A - f.pairs.M, nrm))
    assert np.allclose(depth, 1)


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 6, 7, 8])
def test_first_order_invariants(m):
    f = build_first_order_family(unit_tri(), m)
    res = f.check()
    assert all(ok for ok, _ in res.values()), res
    assert f.trapezoid_union_area() > math.sqrt(m) * f.d
    assert f.convex_hull_theta.height == pytest.approx(math.sqrt(m) + 1)


def test_first_order_m4_bounds():
    f = build_first_order_family(unit_tri(), 4)
    assert f.pairs.kappa.max() <= (2 + 1 / 16) / 7 + 1e-12
    assert f.valley_union_area() / f.trapezoid_union_area() <= (math.log(4) + 1.5) / 2


def _overlap_exact(polys):
    geoms = shapely.polygons(polys)
    tree = shapely.STRtree(geoms)
    i, j = tree.query(geoms, predicate="intersects")
    k = i < j
    return float(shapely.area(shapely.intersection(geoms[i[k]], geoms[j[k]])).max()) if k.any() else 0.0


@pytest.mark.parametrize("m", [2, 4, 6, 8])
def test_nesting_of_trapezoids(m):
    """Each trapezoid of step m-1 contains the two it generates."""
    prev = build_first_order_family(unit_tri(), m - 1).pairs
    cur = build_first_order_family(unit_tri(), m).pairs
    # depth changes with m, so compare the trapezoids of the mth step cut at the previous depth
    gp = shapely.polygons(prev.trapezoids())
    gc = shapely.polygons(cur.trapezoids())
    parent = np.repeat(np.arange(len(prev)), 2)
    inter = shapely.area(shapely.intersection(gc, gp[parent]))
    # the part of the child below the previous base line is the whole child near MN
    assert np.all(inter > 0)
    assert _overlap_exact(cur.trapezoids()) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.3, 3), b=st.floats(-2, 2), c=st.floats(-2, 2), d=st.floats(0.3, 3),
       sx=st.floats(-5, 5), sy=st.floats(-5, 5), m=st.integers(1, 5))
def test_linear_isomorphism(a, b, c, d, sx, sy, m):
    lin = np.array([[a, b], [c, d]])
    if abs(np.linalg.det(lin)) < 0.1:
        return
    shift = np.array([sx, sy])
    t = unit_tri()
    f0 = build_first_order_family(t, m, check=False)
    mapped = Tri(lin @ t.M + shift, lin @ t.N + shift, lin @ t.apex + shift)
    f1 = build_first_order_family(mapped, m, check=False)
    want = f0.pairs.affine(lin, shift)
    scale = 1 + np.abs(want.A).max()
    for k in ("O", "A", "B", "M", "N"):
        assert np.allclose(getattr(f1.pairs, k), getattr(want, k), rtol=0, atol=1e-9 * scale)


def test_second_order_counts():
    assert predicted_pairs(4) == 3616 * 16
    tree = build_second_order_family(unit_tri(), 4)
    assert tree.depth == 3
    assert tree.set_count == 1 + 15 + 225 + 3375
    assert tree.total_pairs == 57856


def test_second_order_budget():
    with pytest.raises(ResourceError) as e:
        build_second_order_family(unit_tri(), 6, max_pairs=10_000)
    assert e.value.predicted == predicted_pairs(6)


def test_second_order_theta_and_report():
    tree = build_second_order_family(unit_tri(), 4)
    assert tree.theta.height == pytest.approx(3)
    rep = family_report(tree, n_samples=10_000)
    assert rep.pair_count == 57856
    assert rep.ok, rep.checks


@pytest.mark.parametrize("m", [2, 3, 4])
def test_depth_is_needed_for_coverage(m, rng):
    """Coverage of Theta is complete at the full depth; a single level leaves gaps (the depth is sufficient, not tight)."""
    full = build_second_order_family(unit_tri(), m)
    short = build_second_order_family(unit_tri(), m, depth=1)
    pts = sample_triangle(full.theta, 10_000, rng)
    assert covered_by_tree(full, pts).all()
    assert not covered_by_tree(short, pts).all()


def test_valley_bound_second_order():
    tree = build_second_order_family(unit_tri(), 3)
    exact = unary_union(shapely.polygons(tree.pairs().triangles())).area
    assert exact <= tree_valley_area_bound(tree) + 1e-12
    m = 3
    assert exact < (math.log(m) + 1.5) / math.sqrt(m) * (2 * math.sqrt(m) + 2) ** 2 * 0.5


ABC = Tri(np.array([1.0, -0.3]), np.array([1.0, 0.3]), np.array([0.0, 0.0]))


@pytest.fixture(scope="module")
def scaled_ladder():
    c = 0.9 * _r1_coefficient(ABC, 4) * ABC.height
    return [scale_family_to_circle(ABC, c / math.sqrt(m + 0.5)) for m in (1, 2, 3)]


def test_scaled_family_report(scaled_ladder):
    for fam in scaled_ladder:
        rep = family_report(fam, n_samples=4000)
        assert rep.ok, rep.checks


def test_scaled_family_trends(scaled_ladder):
    """As omega shrinks: valley area / omega^2, max kappa and the focal spread alpha all decrease."""
    va = [tree_valley_area_bound(f.tree) / f.omega ** 2 for f in scaled_ladder]
    kap = [f.pairs.kappa.max() for f in scaled_ladder]
    A, B = ABC.M, ABC.N

    def alpha(f):
        O = f.pairs.O
        t = np.clip(((O - A) @ (B - A)) / ((B - A) @ (B - A)), 0, 1)
        return np.linalg.norm(O - (A + t[:, None] * (B - A)), axis=1).max()
    al = [alpha(f) for f in scaled_ladder]
    assert va[0] > va[1] > va[2]
    assert kap[0] > kap[1] > kap[2]
    assert al[0] > al[1] > al[2]
    assert [f.m for f in scaled_ladder] == [1, 2, 3]


def test_scaled_family_rejects_bad_omega():
    with pytest.raises(DomainError):
        scale_family_to_circle(ABC, 0.0)

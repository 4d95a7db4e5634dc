import numpy as np
import pytest

from newton_sic.assembly import (build_composite_surface, cell_frame, cell_triangle, composite_from_pairs,
                                 evaluate_surface, standard_family, valley_area_exact, verify_composite)
from newton_sic.domain import lattice_cover, make_domain
from newton_sic.elementary import EDGE, FLAT, MIRROR, OUTSIDE, VALLEY, PairArrays, eval_pairs_at, sic_sample_check
from newton_sic.errors import ConstructionError, CoverageError, DomainError, ResourceError
from newton_sic.geometry import incircle


def test_standard_family_layout():
    std = standard_family(4)
    assert len(std.pairs) == 57856 == len(std.copy_theta) * std.per_copy
    idx = std.copy_pairs([0, 2])
    assert idx.tolist() == list(range(16)) + list(range(32, 48))


def test_cell_triangle_in_exterior_square(disc):
    plan = lattice_cover(disc, 0.3)
    for cell in plan.cells[::17]:
        t = cell_triangle(cell, plan.delta)
        x0, y0, x1, y1 = cell.qt_box(plan.delta)
        corners = np.array(cell.q_box(plan.delta)).reshape(2, 2)
        for off in (t.M - t.apex, t.N - t.apex):
            for cx in corners[:, 0]:
                for cy in corners[:, 1]:
                    px, py = cx + off[0], cy + off[1]
                    assert x0 < px < x1 and y0 < py < y1
        assert np.allclose(t.apex, cell.q_center)


def test_cell_frame_disc_covers_squares(disc):
    plan = lattice_cover(disc, 0.3)
    std = standard_family(4)
    for i, cell in enumerate(plan.cells[::23]):
        fr = cell_frame(i, cell, plan.delta, std, 2)
        theta = std.theta @ fr.lin.T + fr.shift
        ctr, rad = incircle(theta)
        assert np.allclose(ctr, fr.center)
        assert fr.omega / np.sqrt(2) <= rad * (1 + 1e-9)
        assert fr.n >= 2 and len(fr.square_centers()) == fr.n ** 2


def test_build_rejects_bad_parameters(small_disc):
    with pytest.raises(DomainError):
        build_composite_surface(small_disc, 1.0, 0.0)
    with pytest.raises(DomainError):
        build_composite_surface(small_disc, -1.0, 0.3)
    with pytest.raises(ResourceError) as e:
        build_composite_surface(small_disc, 1.0, 0.3, m=4, max_pairs=1000)
    assert e.value.predicted == 57856


def test_build_deterministic(small_disc, small_surface):
    again = build_composite_surface(small_disc, 1.0, 0.3, verify=False)
    for k in ("O", "A", "B", "M", "N"):
        assert np.array_equal(getattr(again.pairs, k), getattr(small_surface.pairs, k))


def test_properties_of_small_surface(small_surface):
    rep = verify_composite(small_surface, 20_000, seed=3)
    assert rep["C_kappa_lt_eps"]
    assert rep["focal_line_residual"] < 1e-12
    assert rep["focus_depth_min"] > 0
    # d0 >= p is enforced pair by pair
    assert np.all(small_surface.pairs.d0 >= small_surface.p * (1 - 1e-12))


def test_bounds_and_winner(small_surface, rng):
    s = small_surface
    pts = s.domain.sample_uniform(20_000, rng)
    u, g, r, w = s.eval_many(pts)
    assert np.all(np.isfinite(u))
    assert u.min() >= -1e-12 and u.max() <= s.M * (1 + 1e-12)
    assert np.all((w >= 0) | (r == FLAT))
    assert np.all(r != OUTSIDE)
    assert np.all(u[r == FLAT] == 0) and np.all(g[r == FLAT] == 0)


def test_min_over_containing_closures(small_surface, rng):
    """eval_many agrees with a brute-force min over every pair whose closure contains x."""
    s = small_surface
    P = s.pairs
    pts = s.domain.sample_uniform(150, rng)
    u, _, _, w = s.eval_many(pts)
    for x, ux, wx in zip(pts, u, w):
        X = np.broadcast_to(x, (len(P), 2))
        uu, _, rr = eval_pairs_at(X, P.O, P.A, P.B, P.M, P.N, s.p, None)
        inside = rr != OUTSIDE
        if inside.any():
            assert ux == pytest.approx(uu[inside].min(), abs=1e-11)
            assert wx >= 0
        else:
            assert wx < 0 and ux == 0


def test_mirror_gradient_reflects_to_focus(small_surface, rng):
    s = small_surface
    pts = s.domain.sample_uniform(5000, rng)
    u, g, r, w = s.eval_many(pts)
    mir = r == MIRROR
    x, gx, O, p = pts[mir], g[mir], s.pairs.O[w[mir]], s.p[w[mir]]
    # u = (r^2 - p^2) / 2p has its focus at (O, 0): the reflected vertical ray passes through it
    n = np.column_stack([-gx, np.ones(len(gx))])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    v = np.array([0.0, 0.0, -1.0]) - 2 * (-n[:, 2])[:, None] * n
    X = np.column_stack([x, u[mir]])
    F = np.column_stack([O, np.zeros(len(O))])
    d = F - X
    cr = np.cross(v, d)
    assert np.abs(cr).max() < 1e-9 * (1 + np.abs(d).max())


def test_single_impact_sampled(small_surface):
    rep = sic_sample_check(small_surface, small_surface.domain, 2000, 16, seed=5)
    assert rep.ok, rep.worst_point


def test_valley_area_exact_matches_mc():
    # exact polygon unions are expensive, so a small square keeps this under half a minute
    D = make_domain({"polygon": [[0, 0], [0.1, 0], [0.1, 0.1], [0, 0.1]]})
    s = build_composite_surface(D, 1.0, 0.3, verify=False)
    exact = valley_area_exact(s)
    n = 200_000
    rep = verify_composite(s, n, seed=7)
    se = D.area * np.sqrt(rep["V_fraction_mc"] * (1 - rep["V_fraction_mc"]) / n)
    assert abs(exact - rep["V_area_mc"]) < 4 * se + 1e-9


def test_uncovered_point_raises_without_flat_fill(wedge_surface):
    with pytest.raises(CoverageError):
        evaluate_surface(wedge_surface, [-1.0, 0.0])
    smp = evaluate_surface(wedge_surface, [0.9, 0.0])
    assert smp.region in (MIRROR, VALLEY, EDGE)


def test_composite_from_empty_pairs_raises(disc):
    with pytest.raises(ConstructionError):
        composite_from_pairs(disc, 1.0, PairArrays.concat([]))


def test_focal_filter_is_respected(small_disc):
    keep_left = lambda F: F[:, 0] < 0.0  # noqa: E731
    s = build_composite_surface(small_disc, 1.0, 0.3, focus_filter=keep_left, verify=False)
    assert np.all(s.pairs.O[:, 0] < 0)

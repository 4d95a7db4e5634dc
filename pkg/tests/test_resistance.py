import math

import numpy as np
import pytest

from newton_sic.billiard import PlanePatch, Scene, batch_trace, graph_scene
from newton_sic.domain import make_domain
from newton_sic.elementary import FunctionSurface
from newton_sic.errors import DomainError, SceneError
from newton_sic.resistance import (ANALYTIC_MC, ANALYTIC_QUADRATURE, BILLIARD_MC, ResistanceReport, asymptotics,
                                   format_table, pair_resistance, phi_density, phi_lower_bound, reference_table,
                                   resistance_analytic, resistance_billiard)


@pytest.mark.parametrize("M, want", [(1.5, 0.05), (1.0, 0.10), (0.7, 0.18), (0.4, 0.35)])
def test_phi_table(disc, M, want):
    r = phi_lower_bound(disc, M)
    assert abs(r.value - want) <= 0.01
    assert r.method == ANALYTIC_QUADRATURE and r.error_estimate <= 1e-9


def test_phi_rejects_bad_M(disc):
    with pytest.raises(DomainError):
        phi_lower_bound(disc, 0.0)


def test_phi_density_stable():
    d = np.array([1e-9, 1e-4, 0.5, 3.0])
    naive = 0.5 * (1 - 2.0 / np.sqrt(4.0 + d * d))
    assert np.allclose(phi_density(d, 2.0)[2:], naive[2:], rtol=1e-12)
    assert phi_density(1e-9, 2.0) == pytest.approx(1e-18 / 8, rel=1e-9)
    assert np.all(np.diff(phi_density(np.linspace(0, 5, 50), 1.0)) > 0)


def test_phi_small_M_rate(disc):
    """pi/2 - phi(M) behaves like pi M ln(1/M) as M -> 0."""
    for M in (1e-3, 1e-4, 1e-5):
        gap = math.pi / 2 - phi_lower_bound(disc, M).value
        assert 0.6 < gap / (math.pi * M * math.log(1 / M)) < 1.1
    assert abs(phi_lower_bound(disc, 1e-5).value - math.pi / 2) < 0.01


def test_phi_large_M(disc):
    a = asymptotics(disc)
    assert abs(a["large_M"][100.0] - 1) < 0.02
    assert abs(a["large_M"][200.0] - 1) < abs(a["large_M"][50.0] - 1)
    assert a["newton_ratio"] == pytest.approx(20.25)


@pytest.mark.parametrize("k", [16, 64])
def test_polygon_phi_matches_mc(k, rng):
    P = make_domain({"polygon": [[math.cos(2 * math.pi * j / k), math.sin(2 * math.pi * j / k)] for j in range(k)]})
    q = phi_lower_bound(P, 1.0).value
    pts = P.sample_uniform(400_000, rng)
    f = phi_density(P.distance_many(pts), 1.0)
    mc = f.mean() * P.area
    assert abs(q - mc) < 4 * f.std() / math.sqrt(len(f)) * P.area


def test_polygon_phi_square_exact():
    """Unit square, M=1: four congruent triangles with level-set length 1 - 2t."""
    from scipy import integrate
    S = make_domain({"polygon": [[0, 0], [1, 0], [1, 1], [0, 1]]})
    want = 4 * integrate.quad(lambda t: float(phi_density(t, 1.0)) * (1 - 2 * t), 0, 0.5, epsabs=1e-13)[0]
    assert phi_lower_bound(S, 1.0).value == pytest.approx(want, abs=1e-10)


def test_reference_table_rows():
    rows = reference_table()
    assert [r["M"] for r in rows] == [1.5, 1.0, 0.7, 0.4]
    assert rows[1]["P_SC"] == 1.18 and rows[1]["P_C"] == 1.14
    assert abs(rows[1]["phi"] - 0.10) < 0.01
    assert "1.18" in format_table(rows).splitlines()[2]


def test_report_rejects_negative_error():
    with pytest.raises(ValueError):
        ResistanceReport(1.0, BILLIARD_MC, -1.0)


def test_flat_function_is_pi(disc):
    flat = FunctionSurface(lambda p: np.zeros(len(p)), lambda p: np.zeros((len(p), 2)), disc)
    r = resistance_analytic(flat, n=10_000, seed=0)
    assert r.value == pytest.approx(math.pi, rel=1e-12) and r.error_estimate == pytest.approx(0, abs=1e-12)


def test_plateau_billiard_is_area(square):
    sc = Scene([PlanePatch(0.0, True, lambda xy: square.contains_many(xy, closed=True))], square, 1.0)
    r = resistance_billiard(sc, 5000, seed=1)
    assert r.value == pytest.approx(1.0, abs=1e-15) and r.error_estimate == 0


def test_non_regular_fraction_raises(square):
    sc = Scene([PlanePatch(0.0, True, lambda xy: square.contains_many(xy, closed=True))], square, 1.0)
    b = batch_trace(sc, 100, seed=1, cap=0)
    with pytest.raises(SceneError):
        resistance_billiard(sc, batch=b)


def test_pair_quadrature_vs_estimators(wedge_pair, wedge_function, wedge_surface):
    q = pair_resistance(wedge_pair, 1.0)
    P, h = wedge_pair, 1.0
    upper = P.valley_area + 0.5 / (1 - P.kappa) ** 2 * (1 - h / math.hypot(P.d, h)) * P.mirror_area
    assert P.valley_area < q.value < upper
    mc = resistance_analytic(wedge_surface, n=200_000, seed=3)
    bl = resistance_billiard(graph_scene(wedge_surface), 100_000, seed=4)
    assert mc.method == ANALYTIC_MC
    assert abs(q.value - mc.value) <= q.error_estimate + mc.error_estimate
    assert abs(q.value - bl.value) <= q.error_estimate + bl.error_estimate
    assert abs(mc.value - bl.value) <= mc.error_estimate + bl.error_estimate


def test_elementary_needs_height(wedge_pair):
    with pytest.raises(DomainError):
        resistance_analytic(wedge_pair)
    assert resistance_analytic(wedge_pair, h=1.0).value == pytest.approx(pair_resistance(wedge_pair, 1.0).value)


def test_composite_estimators_agree(small_surface):
    F = resistance_analytic(small_surface, n=100_000, seed=5)
    R = resistance_billiard(graph_scene(small_surface), 50_000, seed=6)
    phi = phi_lower_bound(small_surface.domain, small_surface.M)
    assert abs(F.value - R.value) <= F.error_estimate + R.error_estimate
    assert F.value >= phi.value - F.error_estimate
    assert R.value >= phi.value - R.error_estimate

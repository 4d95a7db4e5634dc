import math
import pickle

import numpy as np
import pytest

from newton_sic.dic_body import (PID_HOLLOW, InnerParams, build_dic_body, dic_verify, nearest_boundary_points,
                                 segment_distances)
from newton_sic.errors import DomainError

EPS = 0.2


@pytest.fixture(scope="module")
def body(dic_bodies):
    return dic_bodies(EPS)


@pytest.fixture(scope="module")
def report(body):
    return dic_verify(body, 20_000, seed=11)


def test_nearest_boundary_points(disc, square):
    assert np.allclose(nearest_boundary_points(disc, [[0.5, 0.0], [0.0, -0.2]]), [[1, 0], [0, -1]])
    assert np.allclose(nearest_boundary_points(square, [[0.5, 0.1], [0.9, 0.6]]), [[0.5, 0], [1, 0.6]])


def test_segment_distances():
    z = np.zeros((1, 3))
    d = segment_distances(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]),
                          np.array([[0.5, -1, 1]]), np.array([[0.5, 1, 1]]))
    assert d[0] == pytest.approx(1.0)
    d = segment_distances(z, np.array([[1.0, 0, 0]]), np.array([[2.0, 0, 0]]), np.array([[3.0, 0, 0]]))
    assert d[0] == pytest.approx(1.0)  # collinear, disjoint
    d = segment_distances(z, np.array([[1.0, 0, 0]]), np.array([[0.0, 2, 0]]), np.array([[1.0, 2, 0]]))
    assert d[0] == pytest.approx(2.0)  # parallel


@pytest.mark.parametrize("eps, M", [(0.0, 1.0), (0.2, 0.0), (0.6, 1.0)])
def test_build_rejects_bad_parameters(disc, eps, M):
    with pytest.raises(DomainError):
        build_dic_body(disc, M, eps)


def test_resistance_bound_formula(body):
    e = EPS
    want = e * 2 * math.pi + e + math.pi * 0.5 * (1 - 0.5 / math.sqrt(0.25 + e * e))
    assert body.resistance_bound == pytest.approx(want, rel=1e-12)
    assert body.v3_exit_bound == pytest.approx(-0.5 / math.sqrt(0.25 + e * e))


def test_foci_lie_in_the_band(body):
    d = body.domain.distance_many(body.foci)
    assert np.all(d > 0) and np.all(d < body.epsilon)
    assert not body.tilde_domain.contains_many(body.foci, closed=True).any()
    assert len(np.unique(body.foci, axis=0)) == len(body.foci)


def test_exterior_discs_and_axes(body):
    D = body.domain
    # U_i lies outside the domain and x_i lies in U_i
    assert np.all(-D.distance_many(body.u_center) > body.u_radius)
    assert np.all(np.linalg.norm(body.x_point - body.u_center, axis=1) <= body.u_radius)
    # U_i is eps-close to its focus
    reach = np.linalg.norm(body.u_center - body.foci, axis=1) + body.u_radius
    assert np.all(reach < body.epsilon)
    assert np.allclose(np.linalg.norm(body.axis, axis=1), 1)
    assert np.all(body.axis[:, 2] < 0)
    assert body.info["min_axis_separation"] > 0


def test_hollows_fit_between_shield_and_ring(body):
    depth = body.domain.distance_many(body.foci)
    ecc = np.linalg.norm(body.axis[:, :2], axis=1)
    r_inlet = 2 * body.focal_length / (1 - ecc)
    assert np.all(depth - r_inlet > body.eps_prime)
    assert np.all(depth + r_inlet < body.epsilon - body.eps_prime)
    assert np.all(2 * body.focal_length < depth)


def test_inner_surface_is_lifted_and_bounded(body):
    s = body.inner_surface
    assert s.M == pytest.approx(body.M / 2)
    pts = s.domain.sample_uniform(5000, np.random.default_rng(0))
    u = s.eval_many(pts)[0]
    assert np.nanmin(u) >= -1e-12 and np.nanmax(u) <= body.M / 2 * (1 + 1e-12)


def test_double_impact(report):
    assert report.violations == 0
    assert set(report.histogram) <= {1, 2}
    assert report.ok
    assert report.second_on_hollow and report.vertical_ok
    assert report.focal_residual < 1e-9
    assert report.worst_exit_v3 < report.v3_bound


def test_hollow_patches_listed(body):
    ids = [p.owner for p in body.scene.patch_list() if p.kind == "ParaboloidTiltedAxis"]
    assert ids == list(range(PID_HOLLOW, PID_HOLLOW + len(body.foci)))


def test_pickle_round_trip(body):
    again = pickle.loads(pickle.dumps(body))
    a = dic_verify(body, 2000, seed=3)
    b = dic_verify(again, 2000, seed=3)
    assert a.histogram == b.histogram and a.resistance == b.resistance


def test_inner_params_are_frozen():
    p = InnerParams()
    with pytest.raises(Exception):
        p.epsilon = 0.1

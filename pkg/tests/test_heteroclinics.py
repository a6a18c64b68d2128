import math

import numpy as np
import pytest

from mpep.dynamics import hamiltonian_value
from mpep.heteroclinics import (
    Candidate,
    build_exit_torus,
    cluster_candidates,
    coarse_intersections,
    gamma_distance,
    mirror_check,
    principal_angles,
    torus_winding,
)
from mpep.manifolds import StableManifoldMesh

TWO_PI = 2 * math.pi


def _cand(theta, d=1e-3):
    return Candidate(theta, 1.0, d, np.zeros(4), np.zeros(4), (0, 0))


def test_clusters_merge_across_zero():
    groups = cluster_candidates([_cand(0.01), _cand(6.27), _cand(3.0), _cand(3.02)], dtheta=0.05)
    assert sorted(len(g) for g in groups) == [2, 2]
    assert cluster_candidates([]) == []


def test_coarse_intersections_find_local_minimum():
    times = -np.linspace(0, 1, 5)
    pts = np.zeros((1, 5, 4))
    pts[0, :, 0] = np.linspace(0, 1, 5)
    mesh = StableManifoldMesh(1e-5, 1, 1.0, times, pts, np.array([0]))
    ts = np.linspace(0, 2, 21)
    z = np.zeros((21, 4))
    z[:, 0] = 0.5
    z[:, 1] = ts - 1.0
    found = coarse_intersections([(0.3, ts, z)], mesh, threshold=0.01)
    assert len(found) == 1
    assert found[0].time == pytest.approx(1.0)
    assert found[0].mesh_index == (0, 2)


def test_principal_angles_of_orthogonal_planes():
    U = np.eye(4)[:, :2]
    V = np.eye(4)[:, [0, 2]]
    assert np.allclose(principal_angles(U, V), [0, math.pi / 2])


def test_four_connections_in_two_mirror_pairs(pipe, hets):
    assert len(hets) == 4
    assert pipe.get("heteroclinics").payload["mirror_pairs"] == 2
    th = np.sort([h.theta for h in hets])
    assert np.allclose(th, [1.6510, 2.8930, 4.7926, 6.0346], atol=1e-3)
    for a, b in zip(th[:2], th[2:]):
        assert b - a == pytest.approx(math.pi, abs=1e-9)


def test_connections_leave_origin_and_approach_gamma(hets):
    for h in hets:
        assert h.d_origin == pytest.approx(1e-6, rel=1e-9)
        assert h.min_d_gamma <= 1e-4
        assert not h.meta["crosses_before_closest"]
        assert not h.crosses_gamma


def test_classification_flips_across_bracket(problem, hets):
    for h in hets[:2]:
        lo, hi = h.meta["bracket"]
        assert hi - lo <= 1e-12
        a = problem.classify(lo - 1e-6)[0]
        b = problem.classify(hi + 1e-6)[0]
        assert {a, b} == {"exit", "return"}


def test_connections_are_transversal(hets):
    for h in hets:
        tc = h.meta["transversality"]
        assert tc["angle"] > 1e-3
        assert tc["flow_angle"] < 1e-3
        assert tc["angle_fd"] == pytest.approx(tc["angle"], abs=0.05)


def test_mirror_connection_is_symmetry_image(problem, hets):
    out = mirror_check(problem, hets[0])
    assert abs(out["dtheta_from_shift"]) <= 1e-9
    assert out["max_state_error"] <= 1e-6


def test_exit_torus_contains_gamma(field, orbit):
    tor = build_exit_torus(field, orbit)
    g = tor.grid(16, stride=64).reshape(-1, 4)
    assert np.max(np.abs(hamiltonian_value(field, g))) <= 1e-12
    assert np.max(np.abs(tor.distance(g))) <= 1e-9
    assert np.all(np.abs(tor.crossing(g)) <= 1e-9)


def test_unstable_manifold_winds_once_around_torus(problem):
    w = torus_winding(problem, radius=1.0, n=256)
    assert abs(w["toroidal"]) == pytest.approx(1.0, abs=1e-6)
    assert w["closure"] <= 1e-6

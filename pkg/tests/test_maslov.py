import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mpep.maslov import (
    DegeneratePlaneError,
    PluckerVector,
    basis_oracle,
    conjugate_points,
    frame_at,
    plucker_from_basis,
    plucker_matrix,
    plucker_rows,
    plucker_trajectory,
    unstable_plane_at,
)

vec = arrays(np.float64, 4, elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=80, deadline=None)
@given(vec, vec)
def test_decomposable_vectors_satisfy_relation(v1, v2):
    try:
        rho = plucker_from_basis(v1, v2)
    except DegeneratePlaneError:
        return
    assert abs(rho.relation()) <= 1e-10 * max(1.0, rho.norm() ** 2)
    assert np.allclose(plucker_rows(np.stack([v1, v2], 1)), rho.rho)


def test_dependent_basis_is_rejected():
    with pytest.raises(DegeneratePlaneError):
        plucker_from_basis([1.0, 2, 3, 4], [2.0, 4, 6, 8])


def test_named_coordinates_and_basis():
    rho = plucker_from_basis([1.0, 0, 0, 0], [0.0, 1, 0, 0])
    assert rho.r12 == 1.0 and rho.r34 == 0.0
    B = rho.basis()
    assert np.allclose(np.abs(B[:2, :] @ B[:2, :].T), np.eye(2))
    assert np.allclose(rho.projection_singular_values(), [1, 1])


def test_vertical_plane_has_singular_projection():
    rho = plucker_from_basis([0.0, 0, 1, 0], [0.0, 0, 0, 1])
    assert rho.r12 == 0.0
    assert np.allclose(rho.projection_singular_values(), [0, 0], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2, allow_nan=False)), vec, vec)
def test_induced_generator_matches_product_rule(A, v1, v2):
    rho = plucker_rows(np.stack([v1, v2], 1))
    lhs = plucker_matrix(A) @ rho
    rhs = plucker_rows(np.stack([A @ v1, v2], 1)) + plucker_rows(np.stack([v1, A @ v2], 1))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_unstable_eigenplane_is_lagrangian(manifold):
    rho = unstable_plane_at(manifold)
    assert rho.norm() == pytest.approx(1.0)
    assert abs(rho.lagrangian_defect()) <= 1e-12
    assert abs(rho.relation()) <= 1e-12
    assert abs(rho.r12) > 0.1


def test_flow_preserves_relation_and_lagrangian_property(problem, hets):
    tr = plucker_trajectory(problem, hets[1].theta, t_end=20.0, stop_at_exit=False)
    r = tr(np.linspace(tr.t0, tr.t1, 500))[:, 4:10]
    for rho in r:
        p = PluckerVector(rho)
        assert abs(p.relation()) <= 1e-8 * p.norm() ** 2
        assert abs(p.lagrangian_defect()) <= 1e-8 * p.norm()


def test_plucker_flow_matches_basis_oracle(problem, hets):
    th = hets[1].theta
    rho = plucker_trajectory(problem, th, t_end=10.0, stop_at_exit=False)
    frames = basis_oracle(problem, th, t_end=10.0)
    t = np.linspace(max(rho.t0, frames.t0), 10.0, 200)
    a = rho(t)[:, 4:10]
    b = plucker_rows(frame_at(frames, t))
    a /= np.linalg.norm(a, axis=1)[:, None]
    b /= np.linalg.norm(b, axis=1)[:, None]
    sgn = np.sign(np.sum(a * b, axis=1))[:, None]
    assert np.max(np.abs(a - sgn * b)) <= 1e-6


def test_heteroclinic_indices(pipe, hets):
    rows = [r for r in pipe.get("maslov").payload["rows"] if r["label"]]
    assert sorted(r["theta"] for r in rows) == sorted(h.theta for h in hets)
    assert [r["index"] for r in sorted(rows, key=lambda r: r["theta"])] == [0, 1, 0, 1]
    assert all(r["index"] == r["index_half_tol"] for r in rows)


def test_conjugate_point_is_a_fold_of_the_projection(problem, hets):
    h = min(hets, key=lambda h: abs(h.theta - 2.893))
    rec = conjugate_points(problem, h.theta, t_end=30.0, stop_at_exit=False)
    assert rec.index == 1 and rec.multiplicities == [1]
    tc = rec.first
    assert tc == pytest.approx(3.633, abs=1e-2)
    sv = PluckerVector(rec.trajectory(tc)[4:10]).projection_singular_values()
    assert sv[-1] <= 1e-8
    away = PluckerVector(rec.trajectory(tc - 0.5)[4:10]).projection_singular_values()
    assert away[-1] > 1e-3


def test_exiting_angle_stops_at_gamma(problem, river):
    rec = conjugate_points(problem, river.toward_theta1(0.5), t_end=60.0)
    assert rec.exit_time is not None
    z = rec.trajectory(rec.exit_time)
    assert abs(problem.orbit.crossing(z[0], z[1])[0]) <= 1e-8
    assert rec.index in (0, 1)


def test_mirror_angles_share_conjugate_times(problem, hets):
    th = hets[1].theta
    a = conjugate_points(problem, th, t_end=30.0, stop_at_exit=False)
    b = conjugate_points(problem, math.fmod(th + math.pi, 2 * math.pi), t_end=30.0,
                         stop_at_exit=False)
    assert np.allclose(a.times, b.times, atol=1e-8)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from mpep.dynamics import (
    IntegratorConfig,
    Stops,
    System,
    hamiltonian_lift,
    hamiltonian_value,
    integrate,
    lift_system,
    linearization,
    plane_system,
)
from mpep.heteroclinics import gamma_distance, inward_sign
from mpep.manifolds import compute_local_unstable, grow_unstable, stable_manifold_gamma

TIGHT = IntegratorConfig(rtol=1e-12, atol=1e-14)
angle = st.floats(0, 2 * math.pi, allow_nan=False)


# -- periodic orbit ----------------------------------------------------------

def test_period_and_amplitude(orbit):
    assert orbit.period == pytest.approx(6.663, abs=1e-3)
    assert np.max(np.abs(orbit.samples[:, 0])) == pytest.approx(2.01, abs=0.01)
    assert orbit.star_shaped


def test_orbit_closes(orbit):
    assert np.max(np.abs(orbit.point(orbit.period) - orbit.point(0.0))) <= 1e-9
    # the cycle attracts in reversed time, so the check integrates backward
    tr, _ = integrate(plane_system(orbit.field), orbit.samples[0], (0.0, -orbit.period), TIGHT)
    assert np.max(np.abs(tr(tr.t0) - orbit.samples[0])) <= 1e-9


def test_planar_multipliers(orbit):
    m = np.sort(np.abs(orbit.multipliers2))
    assert m[0] == pytest.approx(1.0, abs=1e-6)
    assert m[1] > 1.0


def test_lift_multiplier_pattern(orbit):
    w = orbit.multipliers4
    assert abs(w[0]) < 1 < abs(w[3])
    assert np.allclose(w[1:3], 1.0, atol=1e-6)
    assert abs(w[0] * w[3] - 1.0) <= 1e-6


def test_stable_direction_leaves_the_plane(orbit):
    assert np.linalg.norm(orbit.xi_s0[2:]) > 0.1


def test_stable_direction_transport(orbit):
    z0 = np.concatenate([orbit.samples[0], [0.0, 0.0], orbit.xi_s0])
    tr, _ = integrate(System(orbit.field, "lift", 1), z0, (0.0, orbit.period), TIGHT)
    lam = orbit.multipliers4[0].real
    assert np.linalg.norm(tr.y[-1, 4:] - lam * orbit.xi_s0) <= 1e-6 * abs(lam)


# -- local unstable manifold -------------------------------------------------

def test_parameterization_residual(manifold):
    assert manifold.order == 25
    assert manifold.residual_on(1.0, 256) <= 1e-8


def test_coefficient_conjugate_symmetry(manifold):
    a = manifold.alpha
    M = manifold.order
    for m in range(M + 1):
        for n in range(M + 1 - m):
            assert np.allclose(a[:, m, n], np.conj(a[:, n, m]), rtol=0, atol=1e-15)
    assert np.all(a[:, 0, 0] == 0)


def test_linear_terms_are_scaled_eigenvectors(field, manifold):
    A = linearization(field, np.zeros(4))
    v = manifold.alpha[:, 1, 0]
    assert np.allclose(A @ v, manifold.mu1 * v, atol=1e-12)
    assert abs(v[0].imag) < 1e-15 and v[0].real > 0
    assert np.linalg.norm(v) == pytest.approx(manifold.scale)


def test_parameterization_is_real(manifold):
    z = np.exp(1j * np.linspace(0, 2 * math.pi, 64)) * np.linspace(0.1, 1, 64)
    assert np.max(np.abs(manifold.evaluate(z, np.conj(z)).imag)) <= 1e-12


def test_truncation_order_convergence(field, manifold):
    res = [compute_local_unstable(field, M, scale=manifold.scale).residual
           for M in (5, 10, 15, 20, 25)]
    assert all(b < a or b < 1e-12 for a, b in zip(res, res[1:]))


@settings(max_examples=40, deadline=None)
@given(angle)
def test_curve_k_periodic_and_on_energy_level(manifold, th):
    assert np.allclose(manifold.point(th), manifold.point(th + 2 * math.pi), atol=1e-14)
    assert abs(hamiltonian_value(manifold.field, manifold.point(th))) <= 1e-7


@settings(max_examples=40, deadline=None)
@given(angle)
def test_curve_k_symmetry(manifold, th):
    assert np.allclose(manifold.point(th + math.pi), -manifold.point(th), atol=1e-12)


def test_backward_shadowing(manifold):
    for th in np.linspace(0, 2 * math.pi, 16, endpoint=False):
        tr, _ = integrate(lift_system(manifold.field), manifold.point(th), (0.0, -10.0), TIGHT)
        ts = np.linspace(-10, 0, 50)
        pred = np.array([manifold.point(th + manifold.mu1.imag * t, math.exp(manifold.mu1.real * t))
                         for t in ts])
        assert np.max(np.abs(tr(ts)[:, :4] - pred)) <= 1e-6


def test_backward_from_k_reaches_origin(manifold):
    for th in np.linspace(0, 2 * math.pi, 8, endpoint=False):
        tr, _ = integrate(lift_system(manifold.field), manifold.point(th), (0.0, -30.0), TIGHT,
                          stops=Stops(blowup=50.0))
        assert tr.t0 == pytest.approx(-30.0)
        assert np.linalg.norm(tr(-30.0)[:4]) <= 1e-5


def test_some_river_angle_crosses_gamma(problem, river):
    tr = grow_unstable(problem.manifold, [river.toward_theta1(0.5)], stop="torus", t_max=200.0,
                       orbit=problem.orbit)[0]
    assert tr.status == "exit"


def test_heteroclinic_angles_approach_gamma(problem, river):
    for th in (river.theta1, river.theta2):
        tr = grow_unstable(problem.manifold, [th], stop="time", t_max=40.0)[0]
        z = tr(np.linspace(0, 40, 4001))
        assert np.all(problem.orbit.crossing(z[:, 0], z[:, 1]) <= 0)
        assert gamma_distance(problem.orbit, z[-1, :4])[0] <= 1e-3


# -- stable manifold of the cycle ---------------------------------------------

@pytest.fixture(scope="module")
def sparse_mesh(orbit):
    return stable_manifold_gamma(orbit, 1e-5, 8.0, sign=inward_sign(orbit), stride=32, nt=200)


def test_mesh_on_energy_level(orbit, sparse_mesh):
    P = sparse_mesh.points.reshape(-1, 4)
    P = P[~np.isnan(P).any(axis=1)]
    assert np.max(np.abs(hamiltonian_value(orbit.field, P))) <= 1e-7


def test_mesh_seeds_offset_by_nu(orbit, sparse_mesh):
    base = np.concatenate([orbit.samples[sparse_mesh.base_index], np.zeros((sparse_mesh.base_index.size, 2))], 1)
    off = np.linalg.norm(sparse_mesh.points[:, 0, :] - base, axis=1)
    assert np.allclose(off, sparse_mesh.nu, rtol=1e-6)


def test_mesh_flows_forward_onto_seeds(orbit, sparse_mesh):
    j = 60
    for z, seed in zip(sparse_mesh.points[::4, j, :], sparse_mesh.points[::4, 0, :]):
        tr, _ = integrate(lift_system(orbit.field), z, (0.0, -sparse_mesh.times[j]), TIGHT)
        assert gamma_distance(orbit, tr(tr.t1)[:4])[0] <= 2 * sparse_mesh.nu
        assert np.linalg.norm(tr(tr.t1)[:4] - seed) <= 1e-7


def _xi_at(orbit, tau):
    x = np.mod(tau, orbit.period) / orbit.period * orbit.n
    i = int(np.floor(x))
    v = (i + 1 - x) * orbit.xi_s[i] + (x - i) * orbit.xi_s[i + 1]
    return v / np.linalg.norm(v)


def test_mesh_nu_halving(orbit):
    """Strips seeded at nu/2 lie on the surface grown from nu-seeds up to O(nu)."""
    nu, sgn, lift = 1e-5, inward_sign(orbit), lift_system(orbit.field)

    def strip(tau, t_f):
        seed = np.concatenate([orbit.point(tau).ravel(), [0.0, 0.0]]) + sgn * nu * _xi_at(orbit, tau)
        return integrate(lift, seed, (0.0, -t_f), TIGHT)[0]

    for k in (0, 200, 500, 800):
        seed = np.concatenate([orbit.samples[k], [0.0, 0.0]]) + sgn * nu / 2 * orbit.xi_s[k]
        b = integrate(lift, seed, (0.0, -8.0), TIGHT)[0]
        # backward time at which the nu/2 strip is nu away from Gamma: match there
        lag = brentq(lambda t: gamma_distance(orbit, b(t)[:4])[0] - nu, -3, 0, xtol=1e-14)
        _, ph = orbit.nearest(b(lag)[None, :2])
        a, ap, am = (strip(ph[0] + dh, 8.0 + lag) for dh in (0.0, 1e-4, -1e-4))
        for t in np.linspace(-7, lag - 0.01, 30):
            za = a(t - lag)[:4]
            T = np.stack([hamiltonian_lift(orbit.field, za), (ap(t - lag) - am(t - lag))[:4]], 1)
            Q, _ = np.linalg.qr(T)
            e = b(t)[:4] - za
            assert np.linalg.norm(e - Q @ (Q.T @ e)) <= nu

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpep import _backend
from mpep.dynamics import (
    DomainError,
    Event,
    IntegratorConfig,
    PolynomialDrift,
    Stops,
    eval_drift,
    hamiltonian_lift,
    hamiltonian_value,
    integrate,
    ivdp,
    lift_system,
    linearization,
    plane_system,
    symmetric_part,
    symmetry_map,
)
from mpep.manifolds import project_to_energy

F = ivdp(0.5)
HO = PolynomialDrift({(0, 1): 1.0}, {(1, 0): -1.0}, name="oscillator")
coord = st.floats(-3, 3, allow_nan=False)
mom = st.floats(-2, 2, allow_nan=False)


def test_drift_at_origin():
    v, jac, _ = eval_drift(F, (0.0, 0.0))
    assert np.allclose(v, [0, 0])
    assert np.allclose(jac, [[0, 1], [-1, -1]])


def test_drift_value_and_jacobian_entry():
    v, _, _ = eval_drift(F, (1.0, 1.0))
    assert np.allclose(v, [1, -1])
    _, jac, _ = eval_drift(F, (2.0, 0.5))
    h = 1e-5
    fd = (F.g(2.0 + h, 0.5) - F.g(2.0 - h, 0.5)) / (2 * h)
    assert jac[1, 0] == pytest.approx(1.0)
    assert fd == pytest.approx(1.0, rel=1e-8)


def test_drift_rejects_nonfinite():
    with pytest.raises(DomainError):
        eval_drift(F, (math.nan, 0.0))
    with pytest.raises(DomainError):
        hamiltonian_lift(F, [0.0, math.inf, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(coord, coord)
def test_derivatives_match_finite_differences(x, y):
    D = F.derivatives(x, y)
    h = 1e-5
    checks = [
        ("fx", "f", (h, 0)), ("fy", "f", (0, h)), ("gx", "g", (h, 0)), ("gy", "g", (0, h)),
        ("gxx", "gx", (h, 0)), ("gxy", "gx", (0, h)), ("gyy", "gy", (0, h)),
    ]
    for name, base, (dx, dy) in checks:
        fd = (F.derivatives(x + dx, y + dy)[base] - F.derivatives(x - dx, y - dy)[base]) / (2 * h)
        assert abs(fd - D[name]) <= 1e-6 * max(1.0, abs(D[name]))


@settings(max_examples=40, deadline=None)
@given(coord, coord)
def test_ivdp_closed_form(x, y):
    D = F.derivatives(x, y)
    assert D["f"] == pytest.approx(y)
    assert D["g"] == pytest.approx(-x + y * (x * x - 1), abs=1e-12)
    assert F.div(x, y) == pytest.approx(x * x - 1, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(coord, coord)
def test_lift_on_deterministic_plane(x, y):
    out = hamiltonian_lift(F, [x, y, 0.0, 0.0])
    assert np.allclose(out, [F.f(x, y), F.g(x, y), 0, 0], atol=1e-12)
    assert hamiltonian_value(F, [x, y, 0.0, 0.0]) == 0.0


def test_lift_examples():
    assert np.allclose(hamiltonian_lift(F, [0, 0, 1, 0]), [1, 0, 0, -1])
    assert np.allclose(hamiltonian_lift(F, [1, 0, 0.2, 0.3]), [0.2, -0.7, 0.3, -0.2])


@settings(max_examples=40, deadline=None)
@given(mom, mom)
def test_hamiltonian_at_origin(p, q):
    assert hamiltonian_value(F, [0, 0, p, q]) == pytest.approx(0.5 * (p * p + q * q))


@settings(max_examples=60, deadline=None)
@given(coord, coord, st.floats(0, 2 * math.pi))
def test_energy_zero_set_is_momentum_circle(x, y, phi):
    f, g = F.f(x, y), F.g(x, y)
    R = math.hypot(f, g)
    z = [x, y, -f + R * math.cos(phi), -g + R * math.sin(phi)]
    assert abs(hamiltonian_value(F, z)) <= 1e-9 * max(1.0, R * R)


def test_linearization_spectrum_at_origin():
    w = np.linalg.eigvals(linearization(F, np.zeros(4)))
    unstable = np.sort_complex(w[w.real > 0])
    assert np.allclose(unstable, [0.5 - 1j * math.sqrt(3) / 2, 0.5 + 1j * math.sqrt(3) / 2])
    stable = np.sort_complex(w[w.real < 0])
    assert np.allclose(stable, [-0.5 - 1j * math.sqrt(3) / 2, -0.5 + 1j * math.sqrt(3) / 2])


def test_symmetric_part_is_symmetric(rng):
    for z in rng.uniform(-2, 2, (100, 4)):
        B = symmetric_part(F, z)
        assert np.array_equal(B, B.T)


def test_linearization_matches_finite_differences(rng):
    h = 1e-6
    for z in rng.uniform(-2, 2, (20, 4)):
        A = linearization(F, z)
        fd = np.stack([(hamiltonian_lift(F, z + h * e) - hamiltonian_lift(F, z - h * e)) / (2 * h)
                       for e in np.eye(4)], axis=1)
        assert np.max(np.abs(fd - A)) <= 1e-6 * max(1.0, np.max(np.abs(A)))


def test_harmonic_oscillator_period():
    tr, _ = integrate(plane_system(HO), [1.0, 0.0], (0.0, 2 * math.pi),
                      IntegratorConfig(rtol=1e-12, atol=1e-14))
    assert np.allclose(tr.y[-1], [1.0, 0.0], atol=1e-8)
    assert np.all(np.diff(tr.t) > 0)


def test_harmonic_oscillator_event():
    ev = Event(lambda t, z: z[0], direction=-1, terminal=True, name="x0")
    tr, recs = integrate(plane_system(HO), [1.0, 0.0], (0.0, 10.0),
                         IntegratorConfig(rtol=1e-12, atol=1e-14), events=[ev])
    assert recs[0].name == "x0"
    assert recs[0].t == pytest.approx(math.pi / 2, abs=1e-8)
    assert tr.t1 == pytest.approx(math.pi / 2, abs=1e-8)


def test_generic_callable_agrees_with_kernel():
    ref, _ = integrate(plane_system(HO), [1.0, 0.0], (0.0, 3.0))
    gen, _ = integrate(lambda t, z: [z[1], -z[0]], [1.0, 0.0], (0.0, 3.0))
    assert np.allclose(gen(3.0), ref(3.0), atol=1e-9)
    assert np.allclose(gen(3.0), [math.cos(3.0), -math.sin(3.0)], atol=1e-9)


def test_convergence_order_on_oscillator():
    tols = np.array([1e-6, 1e-7, 1e-8, 1e-9, 1e-10])
    errs = []
    for tol in tols:
        tr, _ = integrate(plane_system(HO), [1.0, 0.0], (0.0, 2 * math.pi),
                          IntegratorConfig(rtol=tol, atol=tol * 1e-2))
        errs.append(np.max(np.abs(tr.y[-1] - [1.0, 0.0])))
    errs = np.array(errs)
    assert np.all(np.diff(errs) < 0)
    slope = np.polyfit(np.log(tols), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_backward_integration_is_stored_increasing():
    tr, _ = integrate(plane_system(HO), [1.0, 0.0], (0.0, -2.0))
    assert tr.t0 == pytest.approx(-2.0) and tr.t1 == 0.0
    assert np.allclose(tr(-2.0), [math.cos(2.0), math.sin(2.0)], atol=1e-9)


def test_energy_conserved_over_short_window(manifold):
    z0 = project_to_energy(F, manifold.point(0.7))
    tr, _ = integrate(lift_system(F), z0, (0.0, 20.0), IntegratorConfig(rtol=1e-10, atol=1e-12),
                      stops=Stops(blowup=50.0))
    H = hamiltonian_value(F, tr(np.linspace(tr.t0, tr.t1, 4000))[:, :4])
    assert np.max(np.abs(H)) <= 1e-8


def test_energy_conserved_over_window_50(manifold):
    done = 0
    for th in np.linspace(0, 2 * math.pi, 12, endpoint=False):
        z0 = project_to_energy(F, manifold.start_on_circle(th, 0.1))
        assert abs(hamiltonian_value(F, z0)) < 1e-12
        tr, _ = integrate(lift_system(F), z0, (0.0, 50.0), IntegratorConfig(rtol=1e-10),
                          stops=Stops(blowup=50.0))
        H = hamiltonian_value(F, tr(np.linspace(tr.t0, tr.t1, 5000))[:, :4])
        assert np.max(np.abs(H)) <= 1e-7
        done += tr.status == "done"
    assert done >= 2


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2))
def test_deterministic_plane_is_invariant(x, y):
    tr, _ = integrate(lift_system(F), [x, y, 0.0, 0.0], (0.0, 20.0))
    assert np.max(np.abs(tr.y[:, 2:4])) <= 1e-10


def test_symmetry_conjugates_the_flow(rng):
    cfg = IntegratorConfig(rtol=1e-12, atol=1e-14)
    for _ in range(5):
        z0 = project_to_energy(F, np.concatenate([rng.uniform(-0.8, 0.8, 2), rng.uniform(-.3, .3, 2)]))
        a, _ = integrate(lift_system(F), z0, (0.0, 5.0), cfg)
        b, _ = integrate(lift_system(F), symmetry_map(z0), (0.0, 5.0), cfg)
        t = np.linspace(0, 5, 200)
        assert np.max(np.abs(b(t) - symmetry_map(a(t)))) <= 1e-8


@pytest.mark.skipif("compiled" not in _backend.available(), reason="compiled core not built")
def test_backends_agree():
    z0 = [0.3, -0.2, 0.05, 0.1]
    a, _ = integrate(lift_system(F), z0, (0.0, 8.0), backend="compiled")
    b, _ = integrate(lift_system(F), z0, (0.0, 8.0), backend="python")
    assert np.allclose(a(8.0), b(8.0), rtol=1e-8, atol=1e-10)

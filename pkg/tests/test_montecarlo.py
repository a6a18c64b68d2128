import math

import numpy as np
import pytest

from mpep import _backend, _purecore
from mpep.montecarlo import (
    InsufficientDataError,
    SdeParams,
    convergence_check,
    euler_maruyama_path,
    exit_distribution,
    freedman_diaconis_bins,
    histories,
    ou_terminal,
    ou_variance,
    ou_weak_errors,
    polyline_distance,
    run_ensemble,
    symmetry_test,
    time_slice_kde,
    weak_order,
)

SHORT = SdeParams.from_sqrt_eps(0.32, t_max=40.0)


def test_params_validation():
    with pytest.raises(ValueError):
        SdeParams(dt=0.0)
    with pytest.raises(ValueError):
        SdeParams(dt=0.003, t_max=1.0)
    p = SdeParams.from_sqrt_eps(0.32)
    assert p.eps == pytest.approx(0.1024)
    assert p.nsteps == 40000
    assert p.amp == pytest.approx(0.32 * math.sqrt(0.005))


def test_bins_oracle():
    B, edges = freedman_diaconis_bins(np.linspace(0, 1, 1000))
    assert B == 10
    assert np.allclose(edges, np.linspace(0, 1, 11))


def test_bins_degenerate_inputs():
    with pytest.warns(RuntimeWarning):
        B, _ = freedman_diaconis_bins(np.ones(16))
    assert B == 5
    with pytest.raises(InsufficientDataError):
        freedman_diaconis_bins([1.0, 2.0, np.nan])


def test_paths_are_reproducible_by_id(orbit):
    a = run_ensemble(SHORT, 300, orbit=orbit)
    b = run_ensemble(SHORT, 100, orbit=orbit, pid0=200, chunk=7, jobs=2)
    assert np.array_equal(a.status[200:], b.status)
    assert np.array_equal(a.tau[200:], b.tau, equal_nan=True)
    c = run_ensemble(SHORT, 300, orbit=orbit, base_seed=1)
    assert not np.array_equal(a.tau, c.tau, equal_nan=True)


def test_no_noise_stays_at_origin(orbit):
    ens = run_ensemble(SdeParams(eps=0.0, t_max=10.0), 5, orbit=orbit)
    assert ens.n_escaped == 0
    rec, path = euler_maruyama_path(SdeParams(eps=0.0, t_max=1.0), orbit=orbit, keep_path=True)
    assert not rec.escaped
    assert np.all(path == 0.0)


@pytest.mark.skipif("compiled" not in _backend.available(), reason="compiled core not built")
def test_backends_agree(orbit):
    p = SdeParams.from_sqrt_eps(0.5, t_max=10.0)
    a = run_ensemble(p, 40, orbit=orbit)
    b = run_ensemble(p, 40, orbit=orbit, backend=_purecore)
    assert np.array_equal(a.status, b.status)
    assert np.allclose(a.tau, b.tau, equal_nan=True, atol=1e-9)
    assert np.allclose(a.raw, b.raw, equal_nan=True, atol=1e-9)


def test_exit_points_on_gamma(orbit):
    ens = run_ensemble(SdeParams.from_sqrt_eps(0.5, t_max=40.0), 400, orbit=orbit)
    assert ens.n_escaped > 20
    d, _ = orbit.nearest(ens.exits)
    assert np.max(d) <= 1e-9
    assert np.all((ens.s[ens.escaped] >= 0) & (ens.s[ens.escaped] < orbit.circumference))
    raw_c = orbit.crossing(ens.raw[ens.escaped, 0], ens.raw[ens.escaped, 1])
    assert np.max(np.abs(raw_c)) <= 0.05


def test_history_replays_the_crossing(orbit):
    ens = run_ensemble(SdeParams.from_sqrt_eps(0.5, t_max=40.0), 100, orbit=orbit)
    hs = histories(ens, "escaped", orbit=orbit, limit=5)
    assert len(hs) == min(5, ens.n_escaped)
    for pid, P in hs.items():
        k = int(np.nonzero(ens.path_id == pid)[0][0])
        assert len(P) == ens.nexit[k] + 2
        c = orbit.crossing(P[-2:, 0], P[-2:, 1])
        assert c[0] <= 0 < c[1]
    assert histories(ens, "none") == {}
    with pytest.raises(ValueError):
        histories(ens, "some")


def test_convergence_check_on_identical_and_shifted_batches(rng):
    a = rng.normal(size=(2000, 2))
    rep = convergence_check(a, a)
    assert rep.err_x == 0.0 and rep.p_x == pytest.approx(1.0)
    assert rep.verdict == "converged"
    rep = convergence_check(a, a + [0.5, 0.0])
    assert rep.err_x > 0.1 and rep.ks_rejects
    assert rep.verdict == "not converged"
    with pytest.raises(InsufficientDataError):
        convergence_check(a, np.zeros((0, 2)))


def test_exit_distribution_needs_escapes(orbit):
    ens = run_ensemble(SdeParams(eps=0.0, t_max=1.0), 10, orbit=orbit)
    with pytest.raises(InsufficientDataError):
        exit_distribution(ens, orbit)


def test_exit_modes_are_symmetric(orbit, ensembles):
    ens = ensembles(0.32)
    dist = exit_distribution(ens, orbit)
    assert len(dist.modes) >= 2
    assert dist.partner_offset <= 2 * dist.bin_width
    assert symmetry_test(ens, orbit) > 0.01


def test_time_slice_kde_recovers_mode(rng):
    dt = 0.01
    t = np.arange(0, 2, dt)
    paths = [np.stack([t + a, np.full_like(t, c)], 1) for a, c in rng.normal(0, 0.1, (200, 2))]
    out = time_slice_kde(paths, dt, 0.0, times=[1.0, 5.0])
    assert len(out) == 1
    assert np.allclose(out[0].mode, [1.0, 0.0], atol=0.05)
    assert out[0].mass == pytest.approx(1.0, abs=0.02)
    with pytest.raises(InsufficientDataError):
        time_slice_kde(paths, dt, 10.0)


def test_polyline_distance():
    curve = np.stack([np.linspace(0, 1, 1001), np.zeros(1001)], 1)
    assert polyline_distance([[0.5, 0.2], [0.2, -0.4]], curve) == pytest.approx(0.3, abs=1e-9)


def test_ou_exact_variance():
    x = ou_terminal(0.5, 0.01, 1.0, 40000, exact=True)
    var = ou_variance(0.5, 1.0)
    assert np.allclose(x.var(axis=0), var, rtol=0.03)
    assert np.allclose(x.mean(axis=0), 0.0, atol=0.02)


def test_euler_maruyama_weak_order():
    dts = (0.02, 0.01, 0.005, 0.0025)
    errs = ou_weak_errors(dts, n=20000)
    assert np.all(np.diff(errs) < 0)
    assert 0.8 <= weak_order(dts, errs) <= 1.2


def test_low_path_ids_give_independent_uniform_streams():
    from scipy import stats
    n, m = 5000, 200
    keys = _purecore.path_key(0, np.arange(n, dtype=np.uint64))
    s = np.zeros(n)
    with np.errstate(over="ignore"):
        for c in range(m):
            v = _purecore.mix64(keys + np.uint64(c + 1) * np.uint64(_purecore.GOLD))
            s += _purecore._unit(v) - 0.5
    z = s / math.sqrt(m / 12)
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(np.corrcoef(z[:-1], z[1:])[0, 1]) < 5 / math.sqrt(n)

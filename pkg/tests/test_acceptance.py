"""Acceptance criteria 1-9 for the IVDP reference configuration (eta = 0.5).

Each test records one PASS/FAIL line, shown in the terminal summary under
"acceptance criteria", and then asserts. Set MPEP_FULL=1 to run criterion 7
with the full batch size instead of the reduced CI mode.
"""
import math
import os

import numpy as np
import pytest

from mpep.dynamics import IntegratorConfig, Stops, hamiltonian_value, integrate, lift_system
from mpep.manifolds import project_to_energy
from mpep.maslov import PluckerVector, basis_oracle, conjugate_points, frame_at, plucker_rows
from mpep.maslov import plucker_trajectory
from mpep.montecarlo import (
    SdeParams,
    convergence_check,
    exit_distribution,
    ou_weak_errors,
    run_ensemble,
    weak_order,
)
from mpep.pipeline import calibrate
from mpep.river import second_variation_check

from conftest import JOBS, MC_N, record

FULL = os.environ.get("MPEP_FULL", "") not in ("", "0")


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    record(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_criterion_1_heteroclinic_count(pipe, hets):
    pay = pipe.get("heteroclinics").payload
    elapsed = sum(pipe.get(s).payload["elapsed"] for s in ("orbit", "manifold", "heteroclinics"))
    ok = len(hets) == 4 and pay["mirror_pairs"] == 2 and elapsed < 600
    verdict(1, "heteroclinic count", ok,
            f"{len(hets)} connections, {pay['mirror_pairs']} mirror pairs, "
            f"theta = {', '.join(f'{h.theta:.6f}' for h in hets)}, {elapsed:.0f} s")


def test_criterion_2_maslov_indices(pipe, river):
    rows = {r["theta"]: r for r in pipe.get("maslov").payload["rows"] if r["label"]}
    a, b = rows[river.theta1], rows[river.theta2]
    stable = all(r["index"] == r["index_half_tol"] for r in rows.values())
    ok = {a["index"], b["index"]} == {0, 1} and stable
    verdict(2, "Maslov indices", ok,
            f"index {a['index']} at {river.theta1:.6f}, {b['index']} at {river.theta2:.6f}, "
            f"stable under halved tolerance: {stable}")


def test_criterion_3_no_fold_before_collar(pipe):
    rows = pipe.get("river").tables["river"]
    collar = pipe.get("river").payload["collar"]
    margins, bad, zero = [], 0, 0
    for r in rows:
        times = [float(t) for t in r["conjugate_times"].split(";") if t]
        if not times:
            zero += 1
            continue
        if r["collar_time"] is None:
            bad += 1
            continue
        margins.append(times[0] - r["collar_time"])
        bad += times[0] <= r["collar_time"]
    ok = bad == 0
    verdict(3, "no-fold region", ok,
            f"{len(rows)} River samples, collar {collar}: {zero} fold-free, "
            f"{len(margins)} fold after entering the collar (min margin "
            f"{min(margins) if margins else math.nan:.3f}), {bad} violations")


def test_criterion_4_pivot(problem, river, pivot):
    gap = abs(pivot.conj_time - pivot.exit.time)
    frac = np.arange(1, 257) / 257
    thetas = river.theta1 + (pivot.theta - river.theta1) * frac
    idx = [conjugate_points(problem, th, keep_trajectory=False).index for th in thetas]
    nonzero = int(np.count_nonzero(idx))
    ok = gap <= 1e-6 and nonzero == 0
    verdict(4, "pivot", ok,
            f"theta_hat = {pivot.theta:.10f}, |t_conj - t_exit| = {gap:.2e}, "
            f"{nonzero} of 256 samples on (theta1, theta_hat) with nonzero index")


def test_criterion_5_om_minimizer(selections, orbit, ensembles):
    sel = selections[0.1024]
    th = calibrate(sel["theta_min"])
    dist = exit_distribution(ensembles(0.32), orbit)
    d = dist.arc_distance(sel["om_point"]["s"])
    ok_theta = abs(th - 4.44) <= 0.05
    ok_mode = d <= dist.bin_width
    verdict(5, "OM minimizer", ok_theta and ok_mode,
            f"theta_min = {th:.4f} vs 4.44 +- 0.05: {ok_theta}; OM point s = "
            f"{sel['om_point']['s']:.3f}, nearest mode s = "
            f"{dist.nearest_mode(sel['om_point']['s']).s:.3f}, distance {d:.3f} "
            f"<= bin {dist.bin_width:.3f}: {ok_mode}")


def test_criterion_6_escape_fractions(ensembles):
    targets = {0.30: (0.02, 0.01), 0.32: (0.055, 0.01), 0.35: (0.175, 0.02)}
    parts, ok = [], True
    for se, (mid, tol) in targets.items():
        f = ensembles(se).escape_fraction
        hit = abs(f - mid) <= tol
        ok &= hit
        parts.append(f"sqrt_eps {se}: {100 * f:.2f}% vs {100 * mid:.1f} +- {100 * tol:.0f}%")
    verdict(6, "escape fractions", ok, f"N = {MC_N}; " + "; ".join(parts))


def test_criterion_7_convergence(ensembles):
    n = 200_000 if FULL else MC_N
    limit = 0.1 if FULL else 0.15
    rep = convergence_check(ensembles(0.32, n, 0), ensembles(0.32, n, n), level=0.01,
                            threshold=limit)
    ok = rep.err_x < limit and rep.err_y < limit and not rep.ks_rejects
    verdict(7, "convergence protocol", ok,
            f"{'full' if FULL else 'reduced'} mode N = {n}: Err_x = {rep.err_x:.3f}, "
            f"Err_y = {rep.err_y:.3f} (< {limit}), KS p = {rep.p_x:.3f}, {rep.p_y:.3f}")


def test_criterion_8_minimizer_jump(problem, profile, selections):
    hi, lo = selections[0.003], selections[0.0022753]
    w_hi, w_lo = hi["om_point"]["winding"], lo["om_point"]["winding"]
    jump = abs(w_hi - w_lo) > 0.25
    t_hi, t_lo = calibrate(hi["theta_min"]), calibrate(lo["theta_min"])
    near = abs(t_hi - 4.616) <= 0.01 and abs(t_lo - 4.670) <= 0.01
    verdict(8, "minimizer jump", jump and near,
            f"eps 3.000e-3: theta_min {t_hi:.4f} (winding {w_hi:.3f}); eps 2.2753e-3: "
            f"theta_min {t_lo:.4f} (winding {w_lo:.3f}); branch switch: {jump}; "
            f"near 4.616 / 4.670: {near}")


def _energy_drift(problem) -> float:
    worst = 0.0
    cfg = IntegratorConfig(rtol=1e-10)
    for th in np.linspace(0, 2 * math.pi, 12, endpoint=False):
        z0 = project_to_energy(problem.field, problem.manifold.start_on_circle(th, 0.1))
        tr, _ = integrate(lift_system(problem.field), z0, (0.0, 50.0), cfg,
                          stops=Stops(blowup=50.0))
        H = hamiltonian_value(problem.field, tr(np.linspace(tr.t0, tr.t1, 5000))[:, :4])
        worst = max(worst, float(np.max(np.abs(H))))
    return worst


def _lagrangian_and_oracle(problem, river) -> tuple[float, float]:
    lag, orc = 0.0, 0.0
    for th in river.grid(5):
        # River paths leave through Gamma and then blow up; stop at the exit
        tr = plucker_trajectory(problem, th, t_end=20.0)
        for rho in tr(np.linspace(tr.t0, tr.t1, 400))[:, 4:10]:
            p = PluckerVector(rho)
            lag = max(lag, abs(p.lagrangian_defect()) / p.norm())
        frames = basis_oracle(problem, th, t_end=10.0)
        t = np.linspace(max(tr.t0, frames.t0), min(tr.t1, frames.t1), 200)
        a = tr(t)[:, 4:10]
        b = plucker_rows(frame_at(frames, t))
        a /= np.linalg.norm(a, axis=1)[:, None]
        b /= np.linalg.norm(b, axis=1)[:, None]
        a *= np.sign(np.sum(a * b, axis=1))[:, None]
        orc = max(orc, float(np.max(np.linalg.norm(a - b, axis=1))))
    return lag, orc


def _certificates(problem, river, pivot) -> tuple[int, float]:
    granted, worst = 0, math.inf
    for th in river.theta1 + (pivot.theta - river.theta1) * np.arange(1, 11) / 11:
        c = second_variation_check(problem, float(th), n_probes=10)
        if c.granted:
            granted += 1
            scale = max(1.0, max(abs(v) for v in c.probes))
            worst = min(worst, min(c.probes) / scale, min(c.probes_square) / scale)
    return granted, worst


def _reproducible(orbit) -> bool:
    p = SdeParams.from_sqrt_eps(0.35, t_max=50.0, seed=7)
    a = run_ensemble(p, 3000, orbit=orbit)
    b = run_ensemble(p, 3000, orbit=orbit, jobs=max(JOBS, 2), chunk=500)
    return all(np.array_equal(getattr(a, k), getattr(b, k), equal_nan=True)
               for k in ("status", "nexit", "tau", "raw", "s"))


def test_criterion_9_property_suites(problem, manifold, river, pivot, orbit):
    H = _energy_drift(problem)
    lag, orc = _lagrangian_and_oracle(problem, river)
    res = manifold.residual_on(1.0, 256)
    granted, worst = _certificates(problem, river, pivot)
    dts = (0.02, 0.01, 0.005, 0.0025)
    order = weak_order(dts, ou_weak_errors(dts, n=20000))
    rep = _reproducible(orbit)
    checks = {
        f"|H| {H:.1e} <= 1e-7": H <= 1e-7,
        f"Lagrangian {lag:.1e} <= 1e-7": lag <= 1e-7,
        f"Plucker vs basis {orc:.1e} <= 1e-6": orc <= 1e-6,
        f"residual {res:.1e} <= 1e-8 at order {manifold.order}": res <= 1e-8 and manifold.order == 25,
        f"certificates {granted}/10, min probe {worst:.1e}": granted == 10 and worst >= -1e-12,
        f"weak order {order:.3f}": 0.8 <= order <= 1.2,
        f"bitwise reproducible: {rep}": rep,
    }
    verdict(9, "property suites", all(checks.values()),
            "; ".join(k + ("" if v else " [fails]") for k, v in checks.items()))

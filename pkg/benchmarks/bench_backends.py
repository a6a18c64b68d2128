"""Compiled kernels versus the pure-Python twin.

Runs the same workloads through both backends, checks that the outputs
agree and prints wall times. Usage: python3 benchmarks/bench_backends.py
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mpep import _backend, montecarlo as mc
from mpep.dynamics import IntegratorConfig, Stops, System, integrate, ivdp


def timed(fn, repeat=1):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_integrate(backend, t_end):
    field = ivdp(0.5)
    z0 = np.array([0.1, 0.0, 0.05, -0.02, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    cfg = IntegratorConfig(rtol=1e-10, atol=1e-12)
    tr, _ = integrate(System(field, "lift", 2), z0, (0.0, t_end), cfg,
                      stops=Stops(blowup=50.0), backend=backend)
    return tr.y[-1]


def bench_em(backend, n, t_max, orbit):
    params = mc.SdeParams(eps=0.32 ** 2, t_max=t_max)
    return mc.run_ensemble(params, n, orbit=orbit, backend=_backend.load(backend))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--tmax", type=float, default=20.0)
    ap.add_argument("--t-end", type=float, default=20.0)
    args = ap.parse_args(argv)
    names = _backend.available()
    print(f"backends: {', '.join(names)}")
    orbit = mc.orbit_for(0.5)
    res = {}
    for name in names:
        ti, yi = timed(lambda: bench_integrate(name, args.t_end), 3)
        te, ens = timed(lambda: bench_em(name, args.paths, args.tmax, orbit))
        res[name] = (ti, yi, te, ens)
        print(f"{name:>9}: lift+2 columns to t={args.t_end:g}: {ti * 1e3:9.2f} ms   "
              f"EM {args.paths} paths x {int(args.tmax / 0.005)} steps: {te:8.2f} s   "
              f"escapes {ens.n_escaped}")
    if len(res) == 2:
        a, b = res["compiled"], res["python"]
        dy = float(np.max(np.abs(a[1] - b[1])) / np.max(np.abs(a[1])))
        same = bool(np.array_equal(a[3].status, b[3].status)
                    and np.allclose(a[3].tau, b[3].tau, equal_nan=True, rtol=0, atol=1e-9))
        print(f"integrate max relative diff {dy:.2e}; EM records identical: {same}")
        print(f"speedup: integrate x{b[0] / a[0]:.1f}, EM x{b[2] / a[2]:.1f}")


if __name__ == "__main__":
    main()

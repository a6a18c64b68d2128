"""Euler-Maruyama ensembles of the noisy planar system, escape detection
through the cycle, convergence certificates and exit statistics."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats

from . import _backend
from .dynamics import DriftField, ivdp, linear_drift
from .manifolds import PeriodicOrbit, find_periodic_orbit

log = logging.getLogger(__name__)

BLOWUP = 50.0
_ORBITS: dict = {}


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SdeParams:
    eta: float = 0.5
    eps: float = 0.32 ** 2
    dt: float = 0.005
    t_max: float = 200.0
    x0: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        ratio = self.t_max / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ValueError("t_max must be an integer number of steps")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @classmethod
    def from_sqrt_eps(cls, sqrt_eps: float, **kw) -> "SdeParams":
        return cls(eps=float(sqrt_eps) ** 2, **kw)

    @property
    def sqrt_eps(self) -> float:
        return math.sqrt(self.eps)

    @property
    def nsteps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def amp(self) -> float:
        return math.sqrt(self.eps) * math.sqrt(self.dt)

    def drift(self) -> DriftField:
        return ivdp(self.eta)

    def as_dict(self) -> dict:
        return {"eta": self.eta, "eps": self.eps, "sqrt_eps": self.sqrt_eps, "dt": self.dt,
                "t_max": self.t_max, "x0": list(self.x0), "seed": self.seed}


@dataclass
class EscapeRecord:
    path_id: int
    escaped: bool
    tau: float | None = None
    x: float | None = None
    y: float | None = None
    s: float | None = None
    blowup: bool = False


def orbit_for(eta: float) -> PeriodicOrbit:
    """Cached unstable cycle of the IVDP drift."""
    key = round(float(eta), 12)
    if key not in _ORBITS:
        _ORBITS[key] = find_periodic_orbit(ivdp(eta))
    return _ORBITS[key]


@dataclass
class Ensemble:
    params: SdeParams
    path_id: np.ndarray
    status: np.ndarray          # 0 no exit, 1 crossed, 2 blow-up
    nexit: np.ndarray
    tau: np.ndarray             # nan unless crossed
    raw: np.ndarray             # interpolated crossing point, nan unless crossed
    exit_xy: np.ndarray         # projection onto Gamma
    s: np.ndarray               # arc position of exit_xy
    circumference: float
    backend: str = ""
    meta: dict = dc_field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.path_id.size)

    @property
    def escaped(self) -> np.ndarray:
        return self.status == 1

    @property
    def n_escaped(self) -> int:
        return int(np.count_nonzero(self.escaped))

    @property
    def n_blowup(self) -> int:
        return int(np.count_nonzero(self.status == 2))

    @property
    def escape_fraction(self) -> float:
        return self.n_escaped / self.n if self.n else 0.0

    @property
    def exits(self) -> np.ndarray:
        return self.exit_xy[self.escaped]

    def records(self) -> list[EscapeRecord]:
        out = []
        for k in range(self.n):
            if self.status[k] == 1:
                out.append(EscapeRecord(int(self.path_id[k]), True, float(self.tau[k]),
                                        float(self.exit_xy[k, 0]), float(self.exit_xy[k, 1]),
                                        float(self.s[k])))
            else:
                out.append(EscapeRecord(int(self.path_id[k]), False, blowup=bool(self.status[k] == 2)))
        return out

    def summary(self) -> dict:
        return {"params": self.params.as_dict(), "n": self.n, "escaped": self.n_escaped,
                "blowup": self.n_blowup, "escape_fraction": self.escape_fraction,
                "backend": self.backend}


def _kernel_args(params: SdeParams, field: DriftField, orbit: PeriodicOrbit | None):
    if orbit is None:
        return field.terms, field.deg, np.zeros(0), 0.0, 0.0
    if not orbit.star_shaped:
        raise NotImplementedError("escape detection needs a star-shaped cycle")
    return field.terms, field.deg, np.ascontiguousarray(orbit.polar_table), \
        orbit.min_radius, orbit.max_radius


def _chunks(n: int, size: int):
    return [(a, min(size, n - a)) for a in range(0, n, size)]


def simulate(params: SdeParams, n: int, field: DriftField | None = None,
             orbit: PeriodicOrbit | None = None, pid0: int = 0, jobs: int = 1,
             chunk: int = 4096, backend=None) -> tuple:
    """Raw kernel output for paths pid0 .. pid0+n-1, in path-id order."""
    core = backend or _backend.core
    field = field or params.drift()
    terms, deg, tab, rin, rout = _kernel_args(params, field, orbit)
    x0, y0 = params.x0

    def run(job):
        a, m = job
        return core.em_ensemble(terms, deg, x0, y0, params.amp, params.dt, params.nsteps,
                                params.seed, pid0 + a, m, tab, rin, rout, BLOWUP)

    jobs_list = _chunks(n, chunk)
    if jobs > 1 and len(jobs_list) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(run, jobs_list))
    else:
        parts = [run(j) for j in jobs_list]
    return tuple(np.concatenate([np.asarray(p[i]) for p in parts]) for i in range(7))


def run_ensemble(params: SdeParams, n: int, base_seed: int | None = None,
                 orbit: PeriodicOrbit | None = None, pid0: int = 0, jobs: int = 1,
                 chunk: int = 4096, backend=None, field: DriftField | None = None) -> Ensemble:
    """N independent paths from x0 stopped at the first crossing of Gamma."""
    if n < 1:
        raise ValueError("need at least one path")
    if base_seed is not None:
        params = SdeParams(params.eta, params.eps, params.dt, params.t_max, params.x0, base_seed)
    orbit = orbit or orbit_for(params.eta)
    core = backend or _backend.core
    status, nexit, lam, xp, yp, xq, yq = simulate(params, n, field, orbit, pid0, jobs, chunk, core)
    status = status.astype(np.int8)
    hit = status == 1
    tau = np.full(n, np.nan)
    tau[hit] = (nexit[hit] + lam[hit]) * params.dt
    raw = np.full((n, 2), np.nan)
    raw[hit, 0] = xp[hit] + lam[hit] * (xq[hit] - xp[hit])
    raw[hit, 1] = yp[hit] + lam[hit] * (yq[hit] - yp[hit])
    exit_xy = np.full((n, 2), np.nan)
    s = np.full(n, np.nan)
    if hit.any():
        _, phase = orbit.nearest(raw[hit])
        exit_xy[hit] = orbit.point(phase)
        s[hit] = np.mod(orbit.arc_length(phase), orbit.circumference)
    return Ensemble(params, np.arange(pid0, pid0 + n, dtype=np.int64), status,
                    nexit.astype(np.int64), tau, raw, exit_xy, s, orbit.circumference,
                    getattr(core, "BACKEND", "compiled"))


def euler_maruyama_path(params: SdeParams, path_id: int = 0, orbit: PeriodicOrbit | None = None,
                        keep_path: bool = False, backend=None):
    """One path: its EscapeRecord and, if asked, the full (n, 2) state history."""
    ens = run_ensemble(params, 1, orbit=orbit, pid0=path_id, backend=backend)
    rec = ens.records()[0]
    if not keep_path:
        return rec, None
    return rec, history(params, path_id, orbit or orbit_for(params.eta), backend)


def history(params: SdeParams, path_id: int, orbit: PeriodicOrbit | None = None,
            backend=None, field: DriftField | None = None) -> np.ndarray:
    """Replay of one path up to and including its crossing step."""
    core = backend or _backend.core
    field = field or params.drift()
    terms, deg, tab, rin, rout = _kernel_args(params, field, orbit)
    return core.em_history(terms, deg, params.x0[0], params.x0[1], params.amp, params.dt,
                           params.nsteps, params.seed, int(path_id), tab, rin, rout, BLOWUP)


def histories(ens: Ensemble, which: str = "escaped", orbit: PeriodicOrbit | None = None,
              limit: int | None = None, backend=None) -> dict:
    """Replayed state histories keyed by path id ('none', 'escaped' or 'all')."""
    if which == "none":
        return {}
    if which not in ("escaped", "all"):
        raise ValueError(f"unknown selection {which!r}")
    ids = ens.path_id[ens.escaped] if which == "escaped" else ens.path_id
    if limit is not None:
        ids = ids[:limit]
    orbit = orbit or orbit_for(ens.params.eta)
    return {int(i): history(ens.params, int(i), orbit, backend) for i in ids}


# ---------------------------------------------------------------------------
# binning and convergence


def freedman_diaconis_bins(samples) -> tuple[int, np.ndarray]:
    """Bin count and equal-width edges over [min, max] with width 2 IQR K^(-1/3)."""
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < 4:
        raise InsufficientDataError("need at least 4 samples")
    lo, hi = float(x.min()), float(x.max())
    q75, q25 = np.percentile(x, [75, 25])
    iqr = q75 - q25
    if iqr <= 0 or hi <= lo:
        warnings.warn("zero interquartile range; using Sturges' rule", RuntimeWarning,
                      stacklevel=2)
        B = int(math.ceil(math.log2(x.size))) + 1
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        return B, np.linspace(lo, hi, B + 1)
    width = 2.0 * iqr * x.size ** (-1.0 / 3.0)
    B = max(1, int(math.ceil((hi - lo) / width - 1e-9)))
    return B, np.linspace(lo, hi, B + 1)


@dataclass
class ConvergenceReport:
    bins_x: int
    bins_y: int
    D1x: np.ndarray
    D2x: np.ndarray
    D1y: np.ndarray
    D2y: np.ndarray
    err_x: float
    err_y: float
    ks_x: float
    ks_y: float
    p_x: float
    p_y: float
    n1: int
    n2: int
    escapes1: int
    escapes2: int
    level: float = 0.01
    threshold: float = 0.1

    @property
    def ks_rejects(self) -> bool:
        return self.p_x < self.level or self.p_y < self.level

    @property
    def verdict(self) -> str:
        ok = self.err_x < self.threshold and self.err_y < self.threshold and not self.ks_rejects
        return "converged" if ok else "not converged"

    def summary(self) -> dict:
        return {"bins_x": self.bins_x, "bins_y": self.bins_y, "err_x": self.err_x,
                "err_y": self.err_y, "ks_x": self.ks_x, "ks_y": self.ks_y, "p_x": self.p_x,
                "p_y": self.p_y, "n1": self.n1, "n2": self.n2, "escapes1": self.escapes1,
                "escapes2": self.escapes2, "level": self.level, "threshold": self.threshold,
                "verdict": self.verdict}


def _exits_and_size(batch):
    if isinstance(batch, Ensemble):
        return batch.exits, batch.n
    pts = np.asarray(batch, dtype=float).reshape(-1, 2)
    return pts, pts.shape[0]


def _rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


def convergence_check(batch1, batch2, level: float = 0.01,
                      threshold: float = 0.1) -> ConvergenceReport:
    """Histogram distance (batch1's bins) and two-sample KS test on exit x and y."""
    e1, n1 = _exits_and_size(batch1)
    e2, n2 = _exits_and_size(batch2)
    if e1.shape[0] == 0 or e2.shape[0] == 0:
        raise InsufficientDataError("a batch has no escape events")
    out = {}
    for c, name in ((0, "x"), (1, "y")):
        B, edges = freedman_diaconis_bins(e1[:, c])
        D1, _ = np.histogram(e1[:, c], edges)
        D2, _ = np.histogram(e2[:, c], edges)
        ks = stats.ks_2samp(e1[:, c], e2[:, c])
        out[name] = (B, D1.astype(float), D2.astype(float), _rel_err(D1.astype(float), D2),
                     float(ks.statistic), float(ks.pvalue))
    bx, d1x, d2x, ex, kx, px = out["x"]
    by, d1y, d2y, ey, ky, py = out["y"]
    return ConvergenceReport(bx, by, d1x, d2x, d1y, d2y, ex, ey, kx, ky, px, py, n1, n2,
                             e1.shape[0], e2.shape[0], level, threshold)


def convergence_protocol(params: SdeParams, n: int, max_doublings: int = 2, jobs: int = 1,
                         orbit: PeriodicOrbit | None = None, **kw):
    """Two disjoint batches of N paths, doubling N until the check passes.

    Returns (report, batch1, batch2).
    """
    orbit = orbit or orbit_for(params.eta)
    for _ in range(max_doublings + 1):
        b1 = run_ensemble(params, n, orbit=orbit, pid0=0, jobs=jobs)
        # the second batch uses the next block of path ids
        b2 = run_ensemble(params, n, orbit=orbit, pid0=n, jobs=jobs)
        rep = convergence_check(b1, b2, **kw)
        log.info("convergence N=%d: Err_x=%.4f Err_y=%.4f p=(%.3g, %.3g)", n, rep.err_x,
                 rep.err_y, rep.p_x, rep.p_y)
        if rep.verdict == "converged":
            break
        n *= 2
    return rep, b1, b2


# ---------------------------------------------------------------------------
# exit statistics


@dataclass
class Mode:
    s: float
    xy: np.ndarray
    count: float
    region: tuple          # (s_start, s_end) of the modal arc
    compass: str


@dataclass
class ExitDistribution:
    edges: np.ndarray
    counts: np.ndarray
    heat_x: np.ndarray
    heat_y: np.ndarray
    heat: np.ndarray
    modes: list
    circumference: float
    n_escaped: int
    bin_width: float
    partner_offset: float | None = None

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def nearest_mode(self, s: float) -> Mode:
        L = self.circumference
        return min(self.modes, key=lambda m: abs((m.s - s + 0.5 * L) % L - 0.5 * L))

    def arc_distance(self, s: float) -> float:
        L = self.circumference
        return abs((self.nearest_mode(s).s - s + 0.5 * L) % L - 0.5 * L)


def _compass(x: float, y: float) -> str:
    return ("N" if y > 0 else "S") + ("E" if x > 0 else "W")


def _circular_regions(mask: np.ndarray) -> list[np.ndarray]:
    """Index runs of True in a circular boolean array."""
    n = mask.size
    if mask.all():
        return [np.arange(n)]
    start = int(np.argmin(mask))          # a False entry
    rolled = np.roll(mask, -start)
    out, cur = [], []
    for k, v in enumerate(rolled):
        if v:
            cur.append((k + start) % n)
        elif cur:
            out.append(np.array(cur))
            cur = []
    if cur:
        out.append(np.array(cur))
    return out


def exit_distribution(ens: Ensemble, orbit: PeriodicOrbit | None = None, grid: int = 256,
                      level: float = 0.5, min_escapes: int = 100) -> ExitDistribution:
    """Arc-position histogram (Freedman-Diaconis width), (x, y) heatmap and
    modal arcs where the lightly smoothed density exceeds ``level`` times
    its maximum."""
    orbit = orbit or orbit_for(ens.params.eta)
    s = ens.s[ens.escaped]
    xy = ens.raw[ens.escaped]
    if s.size < min_escapes:
        raise InsufficientDataError(f"{s.size} escapes, need {min_escapes}")
    L = orbit.circumference
    _, e = freedman_diaconis_bins(s)
    width = e[1] - e[0]
    B = max(8, int(round(L / width)))
    edges = np.linspace(0.0, L, B + 1)
    counts, _ = np.histogram(s, edges)
    R = 1.05 * orbit.max_radius
    hx = np.linspace(-R, R, grid + 1)
    heat, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], [hx, hx])
    # the s-histogram is periodic; smooth over 3 bins before thresholding
    sm = (np.roll(counts, 1) + counts + np.roll(counts, -1)) / 3.0
    modes = []
    for reg in _circular_regions(sm >= level * sm.max()):
        k = reg[np.argmax(sm[reg])]
        sc = 0.5 * (edges[k] + edges[k + 1])
        p = orbit.point(_tau_at_arc(orbit, sc))[0]
        modes.append(Mode(float(sc), p, float(sm[k]), (float(edges[reg[0]]),
                                                       float(edges[reg[-1] + 1])),
                          _compass(p[0], p[1])))
    modes.sort(key=lambda m: -m.count)
    offset = None
    if len(modes) >= 2:
        # image of the top mode under (x, y) -> (-x, -y), compared with the runner-up
        img = float(orbit.arc_position(-modes[0].xy[None, :])[0])
        offset = float(abs((img - modes[1].s + 0.5 * L) % L - 0.5 * L))
    return ExitDistribution(edges, counts, hx, hx, heat, modes, L, int(s.size), float(L / B),
                            offset)


def _tau_at_arc(orbit: PeriodicOrbit, s: float) -> np.ndarray:
    tt, _ = orbit.fine()
    arc = orbit.arc_length(tt)
    return np.atleast_1d(np.interp(s, arc, tt))


def symmetry_test(ens: Ensemble, orbit: PeriodicOrbit | None = None, bins: int = 64) -> float:
    """Chi-square p-value comparing the s-histogram with that of the
    (x, y) -> (-x, -y) images of the exit points."""
    orbit = orbit or orbit_for(ens.params.eta)
    L = orbit.circumference
    s = ens.s[ens.escaped]
    s_img = orbit.arc_position(-ens.exit_xy[ens.escaped])
    edges = np.linspace(0.0, L, bins + 1)
    a, _ = np.histogram(s, edges)
    b, _ = np.histogram(s_img, edges)
    keep = (a + b) > 0
    table = np.stack([a[keep], b[keep]])
    return float(stats.chi2_contingency(table)[1])


# ---------------------------------------------------------------------------
# time-slice densities


@dataclass
class SliceSummary:
    t: float
    n: int
    mode: np.ndarray
    mass: float


def time_slice_kde(paths, dt: float, start_radius: float, times=None, min_paths: int = 50,
                   grid: int = 96):
    """Gaussian KDE (Silverman bandwidth) of escaping paths at fixed times
    after their first crossing of the start circle; returns slice modes."""
    shifted = []
    for P in (paths.values() if isinstance(paths, dict) else paths):
        P = np.asarray(P)
        r = np.hypot(P[:, 0], P[:, 1])
        k = np.nonzero(r >= start_radius)[0]
        if k.size:
            shifted.append(P[k[0]:])
    if not shifted:
        raise InsufficientDataError("no path reaches the start circle")
    if times is None:
        longest = max(len(P) for P in shifted) * dt
        times = np.arange(0.0, longest, 0.5)
    out = []
    for t in np.atleast_1d(times):
        k = int(round(t / dt))
        pts = np.array([P[k] for P in shifted if k < len(P)])
        if pts.shape[0] < min_paths:
            log.info("time slice t=%.3f dropped: %d paths", t, pts.shape[0])
            continue
        kde = stats.gaussian_kde(pts.T, bw_method="silverman")
        sd = np.sqrt(np.diag(kde.covariance))
        lo = pts.min(axis=0) - 4 * sd
        hi = pts.max(axis=0) + 4 * sd
        gx = np.linspace(lo[0], hi[0], grid)
        gy = np.linspace(lo[1], hi[1], grid)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        Z = kde(np.vstack([X.ravel(), Y.ravel()])).reshape(X.shape)
        mass = float(Z.sum() * (gx[1] - gx[0]) * (gy[1] - gy[0]))
        i, j = np.unravel_index(np.argmax(Z), Z.shape)
        out.append(SliceSummary(float(t), int(pts.shape[0]), np.array([gx[i], gy[j]]), mass))
    return out


def polyline_distance(points, curve) -> float:
    """Mean distance from points to a densely sampled curve."""
    from scipy.spatial import cKDTree
    d, _ = cKDTree(np.asarray(curve)[:, :2]).query(np.asarray(points)[:, :2])
    return float(np.mean(d))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck oracle


def ou_terminal(eps: float, dt: float, t: float, n: int, seed: int = 0, x0: float = 0.0,
                exact: bool = False, jobs: int = 1, backend=None) -> np.ndarray:
    """Terminal states (n, 2) of dx = -x dt + sqrt(eps) dW in both coordinates.

    With ``exact`` the kernel runs the exact one-step recursion
    x <- e^(-dt) x + sqrt(eps (1 - e^(-2 dt)) / 2) Z on the same normals.
    """
    steps = int(round(t / dt))
    if exact:
        a = math.expm1(-dt) / dt
        amp = math.sqrt(eps * -math.expm1(-2 * dt) / 2)
    else:
        a = -1.0
        amp = math.sqrt(eps * dt)
    field = linear_drift(a, a)
    params = SdeParams(eps=eps, dt=dt, t_max=steps * dt, x0=(x0, x0), seed=seed)
    core = backend or _backend.core

    def run(job):
        s, m = job
        return core.em_ensemble(field.terms, field.deg, x0, x0, amp, dt, steps, params.seed,
                                s, m, np.zeros(0), 0.0, 0.0, 1e300)

    parts = _chunks(n, 8192)
    if jobs > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(run, parts))
    else:
        res = [run(j) for j in parts]
    x = np.concatenate([r[3] for r in res])
    y = np.concatenate([r[4] for r in res])
    return np.stack([x, y], axis=1)


def ou_variance(eps: float, t: float) -> float:
    return 0.5 * eps * -math.expm1(-2 * t)


def ou_weak_errors(dts=(0.02, 0.01, 0.005, 0.0025), eps: float = 1.0, t: float = 1.0,
                   n: int = 20000, seed: int = 0, x0: float = 1.0, jobs: int = 1,
                   backend=None) -> np.ndarray:
    """Weak errors |E phi(X_EM) - E phi(X_t)| for phi(x) = x^2, estimated
    against the exact recursion driven by the same normals."""
    errs = []
    for dt in dts:
        em = ou_terminal(eps, dt, t, n, seed, x0, False, jobs, backend)
        ex = ou_terminal(eps, dt, t, n, seed, x0, True, jobs, backend)
        errs.append(abs(float(np.mean(em ** 2 - ex ** 2))))
    return np.array(errs)


def weak_order(dts, errs) -> float:
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])

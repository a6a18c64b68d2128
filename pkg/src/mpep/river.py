"""The River of exit trajectories between the two heteroclinic angles, its
zero-Maslov part, the transition map to the exit torus, the pivot and the
mouth spiral."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dynamics import (
    IntegratorConfig,
    Stops,
    System,
    Trajectory,
    hamiltonian_value,
    integrate,
)
from .heteroclinics import Heteroclinic
from .maslov import (
    ConjugateRecord,
    DegeneracyError,
    basis_oracle,
    conjugate_points,
    frame_at,
    plucker_trajectory,
    find_zeros,
)
from .problem import EscapeProblem

log = logging.getLogger(__name__)
TWO_PI = 2.0 * math.pi


@dataclass
class RiverInterval:
    """Arc of K between theta2 and theta1 whose trajectories exit.

    Angles are stored unwrapped with ``lo < hi``; ``theta1`` is the end
    carrying the zero-index heteroclinic.
    """
    lo: float
    hi: float
    theta1: float
    theta2: float
    heteroclinics: tuple = ()

    @property
    def orientation(self) -> int:
        """+1 when theta1 is the upper end of the arc."""
        return 1 if self.theta1 == self.hi else -1

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, theta) -> np.ndarray:
        th = np.mod(np.asarray(theta, dtype=float) - self.lo, TWO_PI) + self.lo
        return (th > self.lo) & (th < self.hi)

    def grid(self, n: int) -> np.ndarray:
        """n points strictly inside the arc, uniformly spaced."""
        return self.lo + self.width * (np.arange(1, n + 1) / (n + 1))

    def toward_theta1(self, frac) -> np.ndarray:
        """Angle at fractional distance ``frac`` from theta1 across the arc."""
        return self.theta1 - self.orientation * np.asarray(frac) * self.width

    def mirror(self) -> "RiverInterval":
        s = math.pi
        return RiverInterval(self.lo - s, self.hi - s, self.theta1 - s, self.theta2 - s)


def river_from_heteroclinics(problem: EscapeProblem, hets: list[Heteroclinic],
                             maslov: dict | None = None, t_index: float = 30.0) -> RiverInterval:
    """Pick the exit arc whose midpoint lies in [pi, 2 pi) and label its
    ends by Maslov index (theta1: index 0)."""
    hs = sorted(hets, key=lambda h: h.theta)
    arcs = []
    for i, h in enumerate(hs):
        nxt = hs[(i + 1) % len(hs)]
        hi = nxt.theta + (TWO_PI if i + 1 == len(hs) else 0.0)
        if h.exit_side == 1 and nxt.exit_side == -1:
            arcs.append((h, nxt, h.theta, hi))
    if not arcs:
        raise ValueError("no exit arc between the heteroclinics")
    arcs.sort(key=lambda a: (math.pi <= np.mod(0.5 * (a[2] + a[3]), TWO_PI) < TWO_PI), reverse=True)
    a, b, lo, hi = arcs[0]
    idx = {}
    for h in (a, b):
        if h.maslov is None:
            rec = conjugate_points(problem, h.theta, t_end=t_index, stop_at_exit=False,
                                   keep_trajectory=False)
            h.maslov = rec.index
        idx[h.theta] = h.maslov
    if maslov:
        idx.update(maslov)
    if idx[a.theta] == 0 and idx[b.theta] != 0:
        t1, t2 = lo, hi
    elif idx[b.theta] == 0 and idx[a.theta] != 0:
        t1, t2 = hi, lo
    else:
        raise ValueError(f"heteroclinic indices {idx} do not single out theta1")
    a.label = "H1" if t1 == lo else "H2"
    b.label = "H2" if t1 == lo else "H1"
    return RiverInterval(lo, hi, t1, t2, (a, b))


# ---------------------------------------------------------------------------
# transition map


@dataclass
class ExitPoint:
    theta: float
    state: np.ndarray
    time: float
    s: float
    winding: float
    H: float
    gamma_distance: float

    @property
    def cycles(self) -> int:
        return int(math.floor(abs(self.winding)))


@dataclass
class NoExit:
    theta: float
    status: str
    t_end: float


def transition_map_G(problem: EscapeProblem, theta: float, t_max: float = 200.0,
                     config: IntegratorConfig | None = None, keep: bool = False):
    """First outward crossing of Gamma by the trajectory through K(theta)."""
    tr = problem.forward(theta, t_max, exit=True, config=config or problem.precise,
                         start_radius=0.1)
    if tr.status != "exit":
        out = NoExit(float(theta), tr.status, tr.t1)
    else:
        z = tr(tr.t1)[:4]
        d, _ = problem.orbit.nearest(z[None, :2])
        out = ExitPoint(float(theta), z, float(tr.t1),
                        float(problem.orbit.arc_position(z[None, :2])[0]),
                        problem.winding(tr, 0.0, tr.t1),
                        float(hamiltonian_value(problem.field, z)), float(d[0]))
    return (out, tr) if keep else out


def collar_entry_time(orbit, traj: Trajectory, delta: float, n: int = 1500) -> float | None:
    """First time the (x, y) projection is inside Gamma within distance delta of it."""
    ts = np.linspace(traj.t0, traj.t1, n)
    z = traj(ts)
    # points closer to O than min|Gamma| - delta cannot be in the collar
    near = np.nonzero(np.hypot(z[:, 0], z[:, 1]) >= orbit.min_radius - delta)[0]
    d = np.full(n, np.inf)
    if near.size:
        d[near] = orbit.nearest(z[near, :2])[0]
    hit = np.nonzero((d <= delta) & (orbit.crossing(z[:, 0], z[:, 1]) <= 0))[0]
    if hit.size == 0:
        return None
    i = hit[0]
    if i == 0:
        return float(ts[0])
    lo, hi = ts[i - 1], ts[i]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if orbit.nearest(traj(mid)[None, :2])[0][0] <= delta:
            hi = mid
        else:
            lo = mid
    return float(hi)


# ---------------------------------------------------------------------------
# sub-river and pivot


@dataclass
class SubRiver:
    thetas: np.ndarray
    records: list
    retained: np.ndarray
    flags: list = dc_field(default_factory=list)

    def summary(self) -> dict:
        return {"n": int(self.thetas.size), "retained": int(self.retained.sum()),
                "flags": self.flags}


def sub_river(problem: EscapeProblem, thetas, t_max: float = 200.0,
              config: IntegratorConfig | None = None) -> SubRiver:
    """Keep the angles whose trajectories have no conjugate point before exit."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    recs, keep, flags = [], [], []
    for th in thetas:
        try:
            rec = conjugate_points(problem, th, t_max, config=config, keep_trajectory=False)
        except DegeneracyError as exc:
            flags.append((float(th), str(exc)))
            recs.append(None)
            keep.append(False)
            continue
        if any(rec.flagged):
            flags.append((float(th), "tangential zero"))
        recs.append(rec)
        keep.append(rec.exit_time is not None and rec.index == 0)
    return SubRiver(thetas, recs, np.array(keep, dtype=bool), flags)


def _conjugate_before_exit(problem, theta, config=None) -> bool:
    rec = conjugate_points(problem, theta, config=config, keep_trajectory=False)
    return rec.exit_time is not None and rec.index > 0


@dataclass
class Pivot:
    theta: float
    exit: ExitPoint
    conj_time: float
    gap: float
    brackets: list
    bracket: tuple


def pivot_theta(problem: EscapeProblem, river: RiverInterval, n_grid: int = 64,
                tol: float = 1e-10, config: IntegratorConfig | None = None) -> Pivot:
    """Boundary of the conjugate-point-free part of the River adjacent to theta1."""
    frac = (np.arange(1, n_grid + 1) / (n_grid + 1))
    ths = river.toward_theta1(frac)
    pred = [_conjugate_before_exit(problem, t, config) for t in ths]
    brackets = [(float(ths[i]), float(ths[i + 1])) for i in range(n_grid - 1)
                if pred[i] != pred[i + 1]]
    if not brackets:
        raise ValueError("no change of the conjugate-before-exit predicate on the grid")
    if len(brackets) > 1:
        log.warning("non-monotone pivot predicate; brackets %s, keeping the one nearest theta1",
                    brackets)
    a, b = brackets[0]            # nearest theta1: a has no conjugate point
    pa = _conjugate_before_exit(problem, a, config)
    while abs(b - a) > tol:
        m = 0.5 * (a + b)
        if m in (a, b):
            break
        if _conjugate_before_exit(problem, m, config) == pa:
            a = m
        else:
            b = m
    theta = b if pa is False else a
    ex = transition_map_G(problem, theta, config=config)
    tr = plucker_trajectory(problem, theta, ex.time + 1.0, stop_at_exit=False, config=config)
    times, _, _ = find_zeros(tr)
    after = [t for t in times if t > ex.time - 1.0]
    conj = min(after, key=lambda t: abs(t - ex.time)) if after else math.nan
    return Pivot(float(theta), ex, float(conj), float(abs(conj - ex.time)), brackets,
                 (float(min(a, b)), float(max(a, b))))


# ---------------------------------------------------------------------------
# mouth of the river


def _circ_gap(s1, s2, L):
    d = abs(s2 - s1) % L
    return min(d, L - d)


def mouth_of_river(problem: EscapeProblem, river: RiverInterval, pivot_theta: float,
                   n_uniform: int = 64, ratio: float = 0.7, n_geometric: int = 40,
                   max_gap: float = 0.005, max_refine: int = 4000,
                   config: IntegratorConfig | None = None) -> list[ExitPoint]:
    """Exit points for theta between theta1 and the pivot, geometric toward
    theta1, then bisected until neighbouring arc positions are within
    ``max_gap`` of the circumference. Ordered from the pivot toward theta1."""
    L = problem.orbit.circumference
    span = abs(pivot_theta - river.theta1)
    sgn = 1.0 if pivot_theta > river.theta1 else -1.0
    u = np.concatenate([np.linspace(0.0, 1.0, n_uniform + 1)[:-1],
                        ratio ** np.arange(1, n_geometric + 1)])
    offsets = np.unique(u[u > 0])[::-1] * span          # distance from theta1, decreasing
    pts = {}
    for off in offsets:
        ep = transition_map_G(problem, river.theta1 + sgn * off, config=config)
        if isinstance(ep, ExitPoint):
            pts[off] = ep
    dead = set()
    for _ in range(max_refine):
        keys = sorted(pts, reverse=True)
        bad = [(a, b) for a, b in zip(keys[:-1], keys[1:])
               if _circ_gap(pts[a].s, pts[b].s, L) > max_gap * L
               and a - b > 1e-14 * span and 0.5 * (a + b) not in dead]
        if not bad:
            break
        for a, b in bad[:64]:
            m = 0.5 * (a + b)
            ep = transition_map_G(problem, river.theta1 + sgn * m, config=config)
            if isinstance(ep, ExitPoint):
                pts[m] = ep
            else:
                dead.add(m)
    return [pts[k] for k in sorted(pts, reverse=True)]


def mouth_properties(problem: EscapeProblem, mouth: list[ExitPoint]) -> dict:
    L = problem.orbit.circumference
    s = np.array([e.s for e in mouth])
    ss = np.sort(s)
    gaps = np.diff(np.concatenate([ss, [ss[0] + L]]))
    w = np.array([abs(e.winding) for e in mouth])
    viol = int(np.sum(np.diff(w) < -0.5))
    return {"n": len(mouth), "max_gap_fraction": float(gaps.max() / L),
            "max_winding": float(w.max()), "winding_violations": viol}


# ---------------------------------------------------------------------------
# second variation


@dataclass
class Certificate:
    theta: float
    granted: bool
    reason: str
    t_start: float
    t_end: float
    max_condition: float
    symmetry_defect: float
    probes: list
    probes_square: list


def _gauss_nodes(a, b, panels, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * np.diff(edges)[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def _probe(rng, a, b, modes=3):
    coef = rng.standard_normal((2, modes, 2))

    def h(t):
        u = (t - a) / (b - a)
        env = np.sin(np.pi * u) ** 2
        denv = 2 * np.sin(np.pi * u) * np.cos(np.pi * u) * np.pi / (b - a)
        k = np.arange(1, modes + 1)
        ang = 2 * np.pi * np.outer(u, k)
        base = np.einsum("tk,dk->td", np.sin(ang), coef[:, :, 0]) \
            + np.einsum("tk,dk->td", np.cos(ang), coef[:, :, 1])
        dbase = (np.einsum("tk,dk->td", np.cos(ang) * k, coef[:, :, 0])
                 - np.einsum("tk,dk->td", np.sin(ang) * k, coef[:, :, 1])) * 2 * np.pi / (b - a)
        return env[:, None] * base, denv[:, None] * base + env[:, None] * dbase
    return h


def second_variation_check(problem: EscapeProblem, theta: float, n_probes: int = 10,
                           seed: int = 0, t_end: float | None = None, panels: int = 400,
                           singular_tol: float = 1e-8,
                           config: IntegratorConfig | None = None) -> Certificate:
    """Evolve the unstable frame V = (V1; V2), form W = -V2 V1^-1 and
    integrate the second variation of the action on random compactly
    supported perturbations, both directly and as the completed square."""
    config = config or problem.precise
    if t_end is None:
        ex = transition_map_G(problem, theta, config=config)
        if not isinstance(ex, ExitPoint):
            raise ValueError(f"no exit for theta={theta}")
        t_end = ex.time
    tr = basis_oracle(problem, theta, t_end, config=config)
    t0 = tr.t0
    tq, wq = _gauss_nodes(t0, t_end, panels)
    grid = np.unique(np.concatenate([tr.t, tq]))
    V = frame_at(tr, grid)
    V1, V2 = V[:, :2, :], V[:, 2:, :]
    sv = np.linalg.svd(V1, compute_uv=False)
    scale = np.linalg.norm(V, axis=(1, 2))
    cond = sv[:, 0] / np.maximum(sv[:, 1], 1e-300)
    det = np.linalg.det(V1) / scale ** 2
    flips = np.nonzero(np.sign(det[:-1]) != np.sign(det[1:]))[0]
    if flips.size or np.min(np.abs(det)) < singular_tol:
        i = int(flips[0]) if flips.size else int(np.argmin(np.abs(det)))
        return Certificate(float(theta), False, f"V1 singular near t={grid[i]:.6f}", t0, t_end,
                           float(cond.max()), math.nan, [], [])
    W = -V2 @ np.linalg.inv(V1)
    sym = float(np.max(np.linalg.norm(W - np.swapaxes(W, 1, 2), axis=(1, 2))
                       / np.linalg.norm(W, axis=(1, 2))))
    z = tr(tq)
    D = problem.field.eval_array(z[:, 0], z[:, 1], 12)
    B = np.stack([np.stack([D[2], D[3]], -1), np.stack([D[4], D[5]], -1)], -2)
    p, q = z[:, 2], z[:, 3]
    a11 = p * D[6] + q * D[9]
    a12 = p * D[7] + q * D[10]
    a22 = p * D[8] + q * D[11]
    A = np.stack([np.stack([a11, a12], -1), np.stack([a12, a22], -1)], -2)
    Vq = frame_at(tr, tq)
    Wq = -Vq[:, 2:, :] @ np.linalg.inv(Vq[:, :2, :])
    rng = np.random.default_rng(seed)
    direct, square = [], []
    for k in range(n_probes + 1):
        if k == 0:
            h = np.zeros((tq.size, 2))
            dh = np.zeros_like(h)
        else:
            # support inside the open interval, away from the endpoints
            a, b = np.sort(rng.uniform(t0, t_end, 2))
            if b - a < 0.05 * (t_end - t0):
                a, b = t0 + 0.1 * (t_end - t0), t_end - 0.1 * (t_end - t0)
            hf = _probe(rng, a, b)
            h, dh = hf(np.clip(tq, a, b))
            inside = (tq >= a) & (tq <= b)
            h[~inside] = 0.0
            dh[~inside] = 0.0
        r = dh - np.einsum("tij,tj->ti", B, h)
        val = np.sum(wq * (np.sum(r * r, 1) - np.einsum("ti,tij,tj->t", h, A, h)))
        c = dh - np.einsum("tij,tj->ti", B - Wq, h)
        direct.append(float(val))
        square.append(float(np.sum(wq * np.sum(c * c, 1))))
    ok = sym <= 1e-6 and all(v >= -1e-10 * max(1.0, abs(s)) for v, s in zip(direct, square))
    return Certificate(float(theta), bool(ok), "granted" if ok else "negative probe or asymmetry",
                       t0, t_end, float(cond.max()), sym, direct, square)

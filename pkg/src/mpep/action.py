"""Freidlin-Wentzell action and the Onsager-Machlup correction along River
trajectories; action profiles over theta, the OM minimizer and the
epsilon scan for minimizer jumps."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize_scalar

from .dynamics import Event, IntegratorConfig, Trajectory, hamiltonian_value, integrate
from .problem import EscapeProblem
from .river import ExitPoint, RiverInterval

log = logging.getLogger(__name__)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class TruncationError(ValueError):
    """OM integral requested from inside the truncation disk."""


class RangeError(ValueError):
    pass


def step_quadrature(traj: Trajectory, integrand, t_start=None, t_end=None) -> float:
    """Gauss-Legendre (8 nodes) per dense-output step over [t_start, t_end];
    exact for polynomial integrands of degree <= 15 in the step variable."""
    t_start = traj.t0 if t_start is None else t_start
    t_end = traj.t1 if t_end is None else t_end
    if t_end <= t_start:
        return 0.0
    edges = traj.t[(traj.t > t_start) & (traj.t < t_end)]
    edges = np.concatenate([[t_start], edges, [t_end]])
    a, b = edges[:-1, None], edges[1:, None]
    tq = 0.5 * (a + b) + 0.5 * (b - a) * _GL_X
    wq = 0.5 * (b - a) * _GL_W
    z = traj(tq.ravel())
    return float(np.sum(wq.ravel() * integrand(z)))


def fw_action(traj: Trajectory, t_start=None, t_end=None, field=None, h_tol: float = 1e-6) -> float:
    """1/2 integral of p^2 + q^2 (the FW action of a lift solution)."""
    if field is not None:
        for t in (traj.t0 if t_start is None else t_start, traj.t1 if t_end is None else t_end):
            h = abs(float(hamiltonian_value(field, traj(t)[:4])))
            if h > h_tol:
                warnings.warn(f"trajectory off H=0 (|H|={h:.2e})", RuntimeWarning)
    return 0.5 * step_quadrature(traj, lambda z: z[:, 2] ** 2 + z[:, 3] ** 2, t_start, t_end)


def om_correction(field, traj: Trajectory, t_start=None, t_end=None) -> float:
    """Integral of div F along the path."""
    return step_quadrature(traj, lambda z: field.div(z[:, 0], z[:, 1]), t_start, t_end)


def param_radius(problem: EscapeProblem, t: float) -> float:
    """Radius on the parameter disk of W^u(O) at time t (t = 0 on K)."""
    return math.exp(problem.manifold.mu1.real * min(t, 0.0)) if t <= 0 else 1.0


# ---------------------------------------------------------------------------
# truncated paths


@dataclass
class PathValues:
    theta: float
    S: float
    C: float
    t_start: float
    t_end: float
    exited: bool
    exit_s: float
    winding: float

    def total(self, eps: float) -> float:
        return self.S + eps * self.C


def truncated_path(problem: EscapeProblem, theta: float, r0: float = 0.1, delta_b: float = 0.0,
                   t_max: float = 200.0, config: IntegratorConfig | None = None):
    """Trajectory from the r0 parameter circle to the exit (delta_b = 0) or
    to the point at radial distance delta_b inside Gamma."""
    config = config or problem.precise
    if delta_b <= 0.0:
        tr = problem.forward(theta, t_max, exit=True, config=config, start_radius=r0)
        return tr, tr.status == "exit"
    orbit = problem.orbit
    ev = Event(lambda t, z: float(orbit.crossing(z[0], z[1])[0]) + delta_b, direction=1,
               terminal=True, name="border")
    z0 = problem.manifold.start_on_circle(theta, r0)
    t0 = -problem.manifold.time_from_circle(r0)
    from .dynamics import Stops
    tr, recs = integrate(problem.lift(), z0, (t0, t_max), config, events=[ev],
                         stops=Stops(exit_table=orbit.polar_table, blowup=problem.blowup),
                         label=float(theta))
    return tr, tr.status == "border"


def path_values(problem: EscapeProblem, theta: float, r0: float = 0.1, delta_b: float = 0.0,
                t_max: float = 200.0, config: IntegratorConfig | None = None,
                r0_min: float | None = None) -> PathValues:
    if r0_min is not None and r0 < 0.5 * r0_min:
        raise TruncationError(f"start radius {r0} is inside half the truncation radius {r0_min}")
    tr, ok = truncated_path(problem, theta, r0, delta_b, t_max, config)
    S = fw_action(tr)
    C = om_correction(problem.field, tr)
    s = float(problem.orbit.arc_position(tr(tr.t1)[None, :2])[0]) if ok else math.nan
    return PathValues(float(theta), S, C, tr.t0, tr.t1, ok, s, problem.winding(tr, 0.0, tr.t1))


def fw_tail(problem: EscapeProblem, theta: float, r0: float = 0.1, r_min: float = 1e-9,
            panels: int = 64) -> float:
    """FW action of the piece from O to the r0 circle, read off the local
    parameterization where the flow is r -> r e^(Re mu t); the integrand
    decays like r^2, so the piece inside r_min is dropped."""
    man = problem.manifold
    s_min = math.log(r_min / r0) / man.mu1.real
    edges = np.linspace(s_min, 0.0, panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    s = (0.5 * (a + b) + 0.5 * (b - a) * _GL_X).ravel()
    w = (0.5 * (b - a) * _GL_W).ravel()
    z = np.array([man.start_on_circle(theta, r0 * math.exp(man.mu1.real * t)) for t in s])
    return float(0.5 * np.sum(w * (z[:, 2] ** 2 + z[:, 3] ** 2)))


def heteroclinic_action(problem: EscapeProblem, het, r0: float = 0.1) -> float:
    """FW action of a heteroclinic from the r0 circle up to its closest approach to Gamma."""
    t_r0 = -problem.manifold.time_from_circle(r0)
    return fw_action(het.trajectory, t_r0, het.t_min_d_gamma)


# ---------------------------------------------------------------------------
# profiles


@dataclass
class ActionProfile:
    thetas: np.ndarray
    S: np.ndarray
    C: np.ndarray
    exited: np.ndarray
    exit_s: np.ndarray
    winding: np.ndarray
    r0: float
    delta_b: float
    theta1: float | None = None
    theta2: float | None = None
    eps: float = 0.0

    def total(self, eps: float | None = None) -> np.ndarray:
        eps = self.eps if eps is None else eps
        return self.S + eps * self.C

    @property
    def I(self) -> np.ndarray:
        return self.total()

    def local_minima(self, eps: float | None = None) -> list[int]:
        v = np.where(self.exited, self.total(eps), np.inf)
        return [i for i in range(1, v.size - 1) if v[i] <= v[i - 1] and v[i] <= v[i + 1]
                and np.isfinite(v[i])]

    def rows(self, eps: float | None = None) -> list[dict]:
        tot = self.total(eps)
        return [{"theta": float(t), "S": float(s), "C": float(c), "I": float(i),
                 "exited": bool(e), "exit_s": float(es), "winding": float(w)}
                for t, s, c, i, e, es, w in zip(self.thetas, self.S, self.C, tot, self.exited,
                                                self.exit_s, self.winding)]


def action_profile(problem: EscapeProblem, thetas, eps: float = 0.0, r0: float = 0.1,
                   delta_b: float = 0.0, t_max: float = 200.0,
                   config: IntegratorConfig | None = None, river: RiverInterval | None = None,
                   jobs: int = 1) -> ActionProfile:
    thetas = np.sort(np.atleast_1d(np.asarray(thetas, dtype=float)))

    def one(th):
        return path_values(problem, th, r0, delta_b, t_max, config)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as ex:
            vals = list(ex.map(one, thetas))
    else:
        vals = [one(t) for t in thetas]
    return ActionProfile(
        thetas, np.array([v.S for v in vals]), np.array([v.C for v in vals]),
        np.array([v.exited for v in vals]), np.array([v.exit_s for v in vals]),
        np.array([v.winding for v in vals]), r0, delta_b,
        river.theta1 if river else None, river.theta2 if river else None, eps)


def river_grid(river: RiverInterval, lo_theta: float, n_uniform: int = 256,
               n_geometric: int = 0, ratio: float = 0.7) -> np.ndarray:
    """Uniform grid between lo_theta and theta1 plus geometric points toward theta1."""
    a, b = sorted((lo_theta, river.theta1))
    g = np.linspace(a, b, n_uniform + 2)[1:-1]
    if n_geometric:
        span = b - a
        off = span * ratio ** np.arange(1, n_geometric + 1)
        g = np.concatenate([g, river.theta1 - river.orientation * off])
    return np.unique(g)


# ---------------------------------------------------------------------------
# OM selection


@dataclass
class OmSelection:
    eps: float
    theta_min: float
    value: float
    local_minima: list
    boundary: bool
    om_point: ExitPoint | None = None
    trajectory: Trajectory | None = dc_field(default=None, repr=False)

    def summary(self) -> dict:
        p = self.om_point
        return {"eps": self.eps, "sqrt_eps": math.sqrt(self.eps), "theta_min": self.theta_min,
                "value": self.value, "boundary": self.boundary,
                "local_minima": [[float(a), float(b)] for a, b in self.local_minima],
                "om_point": None if p is None else {
                    "x": float(p.state[0]), "y": float(p.state[1]), "s": p.s,
                    "time": p.time, "winding": p.winding}}


def _refine_min(problem, th, prof, i, eps, r0, delta_b, tol, config):
    lo = prof.thetas[max(i - 1, 0)]
    hi = prof.thetas[min(i + 1, prof.thetas.size - 1)]

    def f(t):
        v = path_values(problem, t, r0, delta_b, config=config)
        return v.total(eps) if v.exited else np.inf

    res = minimize_scalar(f, bracket=(lo, th, hi), method="golden",
                          options={"xtol": tol / max(abs(th), 1.0)})
    if not (lo <= res.x <= hi) or res.fun > prof.total(eps)[i]:
        return float(th), float(prof.total(eps)[i])
    return float(res.x), float(res.fun)


def om_minimizer(problem: EscapeProblem, profile: ActionProfile, eps: float | None = None,
                 tol: float = 1e-7, refine: bool = True,
                 config: IntegratorConfig | None = None) -> OmSelection:
    """Global grid minimizer of I_eps, refined by golden-section search."""
    from .river import transition_map_G

    eps = profile.eps if eps is None else eps
    v = np.where(profile.exited, profile.total(eps), np.inf)
    i = int(np.argmin(v))
    boundary = i == 0 or i == v.size - 1
    mins = [(float(profile.thetas[j]), float(v[j])) for j in profile.local_minima(eps)]
    th, val = float(profile.thetas[i]), float(v[i])
    if refine and not boundary:
        th, val = _refine_min(problem, th, profile, i, eps, profile.r0, profile.delta_b, tol,
                              config)
    if boundary:
        log.warning("OM minimum at the grid boundary (theta=%.6f); selection flagged", th)
    ep, tr = transition_map_G(problem, th, keep=True, config=config)
    return OmSelection(float(eps), th, val, mins, boundary,
                       ep if isinstance(ep, ExitPoint) else None, tr)


@dataclass
class JumpScan:
    eps: np.ndarray
    theta_min: np.ndarray
    values: np.ndarray
    winding: np.ndarray
    jumps: list
    competitors: list

    def rows(self) -> list[dict]:
        return [{"eps": float(e), "theta_min": float(t), "value": float(v), "winding": float(w)}
                for e, t, v, w in zip(self.eps, self.theta_min, self.values, self.winding)]


def om_jump_scan(problem: EscapeProblem, profile: ActionProfile, eps_grid,
                 jump_winding: float = 0.25, refine: bool = True,
                 min_winding_span: float = 0.5,
                 config: IntegratorConfig | None = None) -> JumpScan:
    """Global OM minimizer for each epsilon over one (extended) profile.

    The minimizer drifts continuously along one branch of the profile; a
    jump is a switch between branches, i.e. consecutive minimizers whose
    windings before exit differ by more than ``jump_winding`` turns.
    """
    ok = profile.exited
    if np.ptp(np.abs(profile.winding[ok])) < min_winding_span:
        raise RangeError("theta range covers less than half a wind; extend the profile "
                         "toward theta1 (geometric refinement)")
    eps_grid = np.asarray(eps_grid, dtype=float)
    order = np.argsort(eps_grid)[::-1]
    th = np.empty(eps_grid.size)
    val = np.empty(eps_grid.size)
    wind = np.empty(eps_grid.size)
    comp = []
    for k in order:
        sel = om_minimizer(problem, profile, eps_grid[k], refine=refine, config=config)
        th[k], val[k] = sel.theta_min, sel.value
        wind[k] = sel.om_point.winding if sel.om_point is not None else math.nan
        best = sorted(sel.local_minima, key=lambda m: m[1])[:3]
        comp.append((float(eps_grid[k]), best))
    jumps = []
    for a, b in zip(order[:-1], order[1:]):
        if abs(wind[a] - wind[b]) > jump_winding:
            jumps.append({"eps_hi": float(eps_grid[a]), "eps_lo": float(eps_grid[b]),
                          "theta_hi": float(th[a]), "theta_lo": float(th[b]),
                          "winding_hi": float(wind[a]), "winding_lo": float(wind[b])})
    return JumpScan(eps_grid, th, val, wind, jumps, comp)

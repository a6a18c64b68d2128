"""Connections from the origin to the repelling cycle inside the energy
surface H = 0, and the exit torus over the cycle."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import (
    IntegrationError,
    IntegratorConfig,
    Stops,
    System,
    Trajectory,
    hamiltonian_lift,
    hamiltonian_value,
    integrate,
    symmetry_map,
)
from .manifolds import PeriodicOrbit, StableManifoldMesh, stable_manifold_gamma
from .maslov import plucker_from_basis
from .problem import EscapeProblem

log = logging.getLogger(__name__)
TWO_PI = 2.0 * math.pi


class RefinementError(RuntimeError):
    pass


class TransversalityWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# exit torus


@dataclass
class ExitTorus:
    orbit: PeriodicOrbit
    centers: np.ndarray     # (N+1, 2) momentum-circle centers (-f, -g)
    radii: np.ndarray       # (N+1,)

    def point(self, k, phi) -> np.ndarray:
        """Torus point over Gamma_k at momentum angle phi."""
        k = np.asarray(k)
        phi = np.asarray(phi, dtype=float)
        xy = self.orbit.samples[k]
        pq = self.centers[k] + self.radii[k][..., None] * np.stack([np.cos(phi), np.sin(phi)], -1)
        return np.concatenate([xy, pq], axis=-1)

    def grid(self, n_phi: int = 64, stride: int = 1) -> np.ndarray:
        k = np.arange(0, self.orbit.n + 1, stride)
        K, P = np.meshgrid(k, np.linspace(0, TWO_PI, n_phi, endpoint=False), indexing="ij")
        return self.point(K, P)

    def crossing(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return self.orbit.crossing(z[:, 0], z[:, 1])

    def distance(self, z) -> np.ndarray:
        """Distance from states to the torus (base distance to Gamma plus
        momentum distance to the circle over the nearest base point)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        d, tau = self.orbit.nearest(z[:, :2])
        G = self.orbit.point(tau)
        f, g = self.orbit.field.eval(G[:, 0], G[:, 1], 2)
        c = np.stack([-f, -g], -1)
        rho = np.linalg.norm(z[:, 2:4] - c, axis=1) - np.hypot(f, g)
        return np.hypot(d, rho)

    def first_exit(self, traj: Trajectory) -> float | None:
        """Time of the first outward crossing of Gamma along a trajectory."""
        for ev in getattr(traj, "events", []) or []:
            if ev.name == "exit":
                return ev.t
        z = traj.y[:, :2]
        c = self.orbit.crossing(z[:, 0], z[:, 1])
        idx = np.nonzero((c[:-1] <= 0) & (c[1:] > 0))[0]
        if idx.size == 0:
            return None
        i = idx[0]
        lo, hi = traj.t[i], traj.t[i + 1]
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            zm = traj(mid)
            if self.orbit.crossing(zm[0], zm[1])[0] <= 0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        return 0.5 * (lo + hi)


def build_exit_torus(field, orbit: PeriodicOrbit) -> ExitTorus:
    f, g = field.eval(orbit.samples[:, 0], orbit.samples[:, 1], 2)
    return ExitTorus(orbit, np.stack([-f, -g], -1), np.hypot(f, g))


# ---------------------------------------------------------------------------
# stable manifold of the cycle, inner branch


def inward_sign(orbit: PeriodicOrbit, nu: float = 1e-5, t_f: float = 12.0) -> int:
    """Sign of the seed offset whose backward growth enters the cycle's interior."""
    best, sign = None, 1
    for s in (1, -1):
        seed = np.concatenate([orbit.samples[0], [0.0, 0.0]]) + s * nu * orbit.xi_s[0]
        try:
            tr, _ = integrate(System(orbit.field, "lift"), seed, (0.0, -t_f),
                              IntegratorConfig(rtol=1e-10, atol=1e-12), stops=Stops(blowup=50.0))
        except IntegrationError:
            continue
        z = tr.y[:, :2]
        r = float(np.min(np.hypot(z[:, 0], z[:, 1])))
        if best is None or r < best:
            best, sign = r, s
    return sign


def inner_stable_mesh(orbit: PeriodicOrbit, nu: float = 1e-5, t_f: float = 12.0,
                      stride: int = 2, nt: int = 400) -> StableManifoldMesh:
    return stable_manifold_gamma(orbit, nu, t_f, sign=inward_sign(orbit, nu, t_f),
                                 stride=stride, nt=nt)


# ---------------------------------------------------------------------------
# coarse search


@dataclass
class Candidate:
    theta: float
    time: float
    distance: float
    point_u: np.ndarray
    point_s: np.ndarray
    mesh_index: tuple


def sample_unstable(problem: EscapeProblem, thetas, t_max: float = 12.0, dt: float = 0.01,
                    config: IntegratorConfig | None = None) -> list:
    """W^u(O) trajectories from K(theta) up to their first exit or return
    (or t_max), resampled on a uniform time grid: list of (theta, t, z)."""
    out = []
    for th in np.atleast_1d(thetas):
        try:
            tr = problem.forward(float(th), t_max, exit=True, ret=True,
                                 config=config or problem.sweep)
        except IntegrationError:
            continue
        ts = np.arange(0.0, tr.t1, dt)
        out.append((float(th), ts, tr(ts)[:, :4]))
    return out


def coarse_intersections(unstable: list, mesh: StableManifoldMesh,
                         threshold: float = 1e-2) -> list[Candidate]:
    """Per W^u trajectory, the locally minimal distances to the W^s(Gamma)
    mesh that fall below the threshold."""
    P = mesh.points.reshape(-1, 4)
    ok = ~np.isnan(P).any(axis=1)
    flat = np.nonzero(ok)[0]
    tree = cKDTree(P[ok])
    nt = mesh.times.size
    out = []
    for th, ts, z in unstable:
        if len(ts) < 3:
            continue
        d, idx = tree.query(z)
        loc = np.nonzero((d[1:-1] <= d[:-2]) & (d[1:-1] <= d[2:]) & (d[1:-1] < threshold))[0] + 1
        for i in loc:
            j = flat[idx[i]]
            out.append(Candidate(th, float(ts[i]), float(d[i]), z[i], P[j],
                                 (int(mesh.base_index[j // nt]), int(j % nt))))
    return out


def cluster_candidates(cands: list[Candidate], dtheta: float = 0.05) -> list[list[Candidate]]:
    """Merge candidates whose theta labels are within dtheta (circularly)."""
    if not cands:
        return []
    order = sorted(cands, key=lambda c: c.theta)
    groups = [[order[0]]]
    for c in order[1:]:
        if c.theta - groups[-1][-1].theta < dtheta:
            groups[-1].append(c)
        else:
            groups.append([c])
    if len(groups) > 1 and groups[0][0].theta + TWO_PI - groups[-1][-1].theta < dtheta:
        groups[0] = groups.pop() + groups[0]
    return groups


# ---------------------------------------------------------------------------
# refinement


@dataclass
class Heteroclinic:
    theta: float
    exit_side: int                  # +1: trajectories just above theta exit
    trajectory: Trajectory          # from the origin neighborhood to the forward horizon
    d_origin: float
    d_gamma: float                  # 4D distance to Gamma at the forward horizon
    horizon: float
    min_d_gamma: float
    t_min_d_gamma: float
    crosses_gamma: bool
    maslov: int | None = None
    label: str = ""
    meta: dict = dc_field(default_factory=dict)

    def certified(self, d_origin_tol=1e-6, d_gamma_tol=1e-4) -> bool:
        return (self.d_origin <= d_origin_tol and self.d_gamma <= d_gamma_tol
                and not self.crosses_gamma)

    def summary(self) -> dict:
        return {
            "label": self.label, "theta": self.theta, "exit_side": self.exit_side,
            "d_origin": self.d_origin, "d_gamma": self.d_gamma, "horizon": self.horizon,
            "min_d_gamma": self.min_d_gamma, "t_min_d_gamma": self.t_min_d_gamma,
            "crosses_gamma": self.crosses_gamma, "maslov": self.maslov, **self.meta,
        }


def gamma_distance(orbit: PeriodicOrbit, z) -> np.ndarray:
    """4D distance from lift states to Gamma embedded at p = q = 0."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d, _ = orbit.nearest(z[:, :2])
    return np.hypot(d, np.hypot(z[:, 2], z[:, 3]))


def _bracket(problem: EscapeProblem, guess: float, config, width: float = 0.1, n: int = 21):
    ths = guess + np.linspace(-width, width, n)
    cls = [problem.classify(t, config=config)[0] for t in ths]
    best = None
    for i in range(n - 1):
        a, b = cls[i], cls[i + 1]
        if {a, b} == {"exit", "return"}:
            mid = 0.5 * (ths[i] + ths[i + 1])
            if best is None or abs(mid - guess) < abs(0.5 * sum(best[:2]) - guess):
                best = (ths[i], ths[i + 1], a)
    if best is None:
        raise RefinementError(f"no exit/return sign change near theta={guess:.6f}")
    return best


def refine_heteroclinic(problem: EscapeProblem, theta_guess: float, tol: float = 1e-12,
                        horizon: float = 40.0, d_origin: float = 1e-6,
                        config: IntegratorConfig | None = None) -> Heteroclinic:
    """Bisection on the exit/return dichotomy down to |dtheta| <= tol."""
    config = config or problem.precise
    lo, hi, cls_lo = _bracket(problem, theta_guess, config)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if problem.classify(mid, config=config)[0] == cls_lo:
            lo = mid
        else:
            hi = mid
    # keep the non-exit side so the forward piece does not leave
    theta = hi if cls_lo == "exit" else lo
    side = -1 if cls_lo == "exit" else 1
    return heteroclinic_at(problem, float(theta), side, horizon, d_origin, config,
                           bracket=(lo, hi))


def heteroclinic_at(problem: EscapeProblem, theta: float, side: int, horizon: float = 40.0,
                    d_origin: float = 1e-6, config: IntegratorConfig | None = None,
                    bracket=None) -> Heteroclinic:
    config = config or problem.precise
    lift = problem.lift()
    # the forward leg starts where the classifier does, so it inherits the
    # bisection accuracy; the leg from the origin neighborhood is prepended
    fwd = problem.forward(theta, horizon, exit=False, config=config, start_radius=0.1)
    zs, t_rel = problem.start_near_origin(theta, d_origin)
    back, _ = integrate(lift, zs, (t_rel, fwd.t0), config)
    back.y[-1, :4] = fwd.y[0, :4]
    traj = Trajectory.join(back, fwd)
    traj.label = theta
    do = float(np.linalg.norm(zs))
    ts = np.linspace(0.0, fwd.t1, int(40 * max(fwd.t1, 1.0)) + 1)
    z = fwd(ts)
    dg = gamma_distance(problem.orbit, z)
    cr = problem.orbit.crossing(z[:, 0], z[:, 1])
    i = int(np.argmin(dg))
    meta = {"backward_time": float(-back.t0)}
    if bracket is not None:
        meta["bracket"] = [float(bracket[0]), float(bracket[1])]
    below = np.nonzero(dg <= 1e-4)[0]
    meta["first_time_within_1e-4"] = float(ts[below[0]]) if below.size else None
    meta["last_time_within_1e-4"] = float(ts[below[-1]]) if below.size else None
    meta["crosses_before_closest"] = bool(np.any(cr[: i + 1] > 0))
    return Heteroclinic(theta, side, traj, do, float(dg[-1]) if fwd.t1 >= horizon else math.inf,
                        horizon, float(dg[i]), float(ts[i]), bool(np.any(cr > 0)), meta=meta)


def find_heteroclinics(problem: EscapeProblem, n_theta: int = 256, threshold: float = 1e-2,
                       dtheta: float = 0.05, mesh: StableManifoldMesh | None = None,
                       t_u: float = 12.0, tol: float = 1e-12) -> tuple[list[Heteroclinic], dict]:
    """Coarse search, clustering, then bisection refinement per cluster."""
    mesh = mesh or inner_stable_mesh(problem.orbit)
    thetas = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)
    cands = coarse_intersections(sample_unstable(problem, thetas, t_u), mesh, threshold)
    groups = cluster_candidates(cands, dtheta)
    out = []
    for grp in groups:
        best = min(grp, key=lambda c: c.distance)
        het = refine_heteroclinic(problem, best.theta, tol)
        het.theta = float(np.mod(het.theta, TWO_PI))
        het.meta["coarse_distance"] = best.distance
        het.meta["cluster_size"] = len(grp)
        out.append(het)
    out.sort(key=lambda h: h.theta)
    info = {"n_candidates": len(cands), "n_clusters": len(groups), "mesh": mesh}
    return out, info


# ---------------------------------------------------------------------------
# transversality


def _unit(v):
    return v / np.linalg.norm(v)


def unstable_tangent(problem: EscapeProblem, theta: float, t: float, h: float = 1e-6,
                     config: IntegratorConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """State and the theta-derivative of the W^u(O) trajectory at time t."""
    dK = (problem.K(theta + h) - problem.K(theta - h)) / (2 * h)
    tr = problem.forward(theta, t, exit=False, config=config or problem.precise, extra=[dK])
    z = tr(t)
    return z[:4], z[4:8]


def stable_tangent(mesh: StableManifoldMesh, z: np.ndarray) -> tuple[np.ndarray, float]:
    """Finite-difference tangent of the mesh across base points at the mesh
    node nearest z, and the distance to that node."""
    P = mesh.points
    nk, nt = P.shape[:2]
    d = np.linalg.norm(P - z, axis=-1)
    d = np.where(np.isnan(d), np.inf, d)
    k, j = np.unravel_index(np.argmin(d), d.shape)
    a, b = P[(k - 1) % nk, j], P[(k + 1) % nk, j]
    return b - a, float(d[k, j])


def stable_tangent_variational(orbit: PeriodicOrbit, mesh: StableManifoldMesh, z: np.ndarray,
                               config: IntegratorConfig | None = None) -> tuple[np.ndarray, float]:
    """Tangent plane of W^s(Gamma) at the mesh node nearest z: the seed's
    tangent pair (F(Gamma_k), xi_k) transported by the variational flow."""
    config = config or IntegratorConfig(rtol=1e-10, atol=1e-12)
    P = mesh.points
    d = np.linalg.norm(P - z, axis=-1)
    d = np.where(np.isnan(d), np.inf, d)
    r, j = np.unravel_index(np.argmin(d), d.shape)
    k = int(mesh.base_index[r])
    base = np.concatenate([orbit.samples[k], [0.0, 0.0]])
    seed = base + mesh.sign * mesh.nu * orbit.xi_s[k]
    F = hamiltonian_lift(orbit.field, base)
    y0 = np.concatenate([seed, F, orbit.xi_s[k]])
    t_end = float(mesh.times[j])
    if t_end == 0.0:
        return np.stack([F, orbit.xi_s[k]], axis=1), float(d[r, j])
    tr, _ = integrate(System(orbit.field, "lift", 2), y0, (0.0, t_end), config)
    zz = tr(t_end)
    return np.stack([zz[4:8], zz[8:12]], axis=1), float(d[r, j])


def plane_angle(F, u, v) -> float:
    """Angle between the planes span{F, u} and span{F, v} across their
    common line F (the nontrivial principal angle)."""
    Fh = _unit(F)
    a = _unit(u - (u @ Fh) * Fh)
    b = _unit(v - (v @ Fh) * Fh)
    c = abs(float(a @ b))
    return math.acos(min(1.0, c))


def principal_angles(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Principal angles (ascending) between the column spans of U and V."""
    from scipy.linalg import subspace_angles
    return np.sort(subspace_angles(U, V))


def transversality_check(problem: EscapeProblem, het: Heteroclinic, mesh: StableManifoldMesh,
                         t_mid: float | None = None, warn_below: float = 1e-3) -> dict:
    """Angle between W^u(O) and W^s(Gamma) along the connection, inside H = 0.

    Both planes contain the flow direction, so their smaller principal angle
    vanishes; transversality is measured by the other one. The W^s tangent
    comes from the variational flow (``angle``) and from mesh finite
    differences (``angle_fd``).
    """
    import warnings

    if t_mid is None:
        # the stretch of the connection best covered by the mesh
        ts = np.linspace(0.5, min(8.0, het.horizon), 80)
        P = mesh.points.reshape(-1, 4)
        tree = cKDTree(P[~np.isnan(P).any(axis=1)])
        d, _ = tree.query(het.trajectory(ts)[:, :4])
        t_mid = float(ts[int(np.argmin(d))])
    z, du = unstable_tangent(problem, het.theta, t_mid)
    F = hamiltonian_lift(problem.field, z)
    Vs, dist = stable_tangent_variational(problem.orbit, mesh, z)
    ds_fd, _ = stable_tangent(mesh, z)
    Vu = np.stack([F, du], axis=1)
    ang = principal_angles(Vu, Vs)
    rho_u = plucker_from_basis(F, du)
    rho_s = plucker_from_basis(Vs[:, 0], Vs[:, 1])
    out = {
        "t_mid": t_mid, "angle": float(ang[-1]), "flow_angle": float(ang[0]),
        "angle_fd": plane_angle(F, du, ds_fd), "mesh_distance": dist,
        "lagrangian_u": abs(rho_u.lagrangian_defect()) / rho_u.norm(),
        "lagrangian_s": abs(rho_s.lagrangian_defect()) / rho_s.norm(),
        "H": float(hamiltonian_value(problem.field, z)),
    }
    if out["angle"] < warn_below:
        warnings.warn(f"heteroclinic at theta={het.theta:.6f} nearly tangential "
                      f"(angle {out['angle']:.2e})", TransversalityWarning)
    return out


# ---------------------------------------------------------------------------
# properties of the whole family


def mirror_check(problem: EscapeProblem, het: Heteroclinic, tol: float = 1e-12) -> dict:
    """Re-refine at the mirror angle and compare against the symmetry image."""
    mir = refine_heteroclinic(problem, float(np.mod(het.theta + math.pi, TWO_PI)), tol)
    t = np.linspace(0.0, min(10.0, mir.trajectory.t1, het.trajectory.t1), 200)
    err = np.max(np.abs(mir.trajectory(t)[:, :4] - symmetry_map(het.trajectory(t)[:, :4])))
    dth = float(np.mod(mir.theta - het.theta - math.pi + math.pi, TWO_PI) - math.pi)
    return {"theta": mir.theta, "dtheta_from_shift": dth, "max_state_error": float(err)}


def torus_winding(problem: EscapeProblem, radius: float = 1.0, n: int = 512,
                  config: IntegratorConfig | None = None) -> dict:
    """Trace W^u(O) on the torus over the circle r = radius and accumulate
    its toroidal (base angle) and poloidal (momentum angle) windings."""
    config = config or problem.sweep
    pts = []
    for th in np.linspace(0.0, TWO_PI, n + 1):
        z0 = problem.manifold.start_on_circle(th, 0.1)
        tr, _ = integrate(problem.lift(), z0, (0.0, 200.0), config,
                          stops=Stops(radius=radius, blowup=None))
        pts.append(tr(tr.t1)[:4])
    pts = np.array(pts)
    f, g = problem.field.eval(pts[:, 0], pts[:, 1], 2)
    tor = np.unwrap(np.arctan2(pts[:, 1], pts[:, 0]))
    pol = np.unwrap(np.arctan2(pts[:, 3] + g, pts[:, 2] + f))
    return {
        "toroidal": float((tor[-1] - tor[0]) / TWO_PI),
        "poloidal": float((pol[-1] - pol[0]) / TWO_PI),
        "closure": float(np.linalg.norm(pts[-1] - pts[0])),
        "points": pts,
    }

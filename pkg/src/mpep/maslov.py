"""Tangent 2-planes of lift trajectories in Plucker coordinates, conjugate
points (vertical tangents over the (x, y) plane) and the Maslov index."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _purecore
from .dynamics import (
    DomainError,
    IntegratorConfig,
    Stops,
    System,
    Trajectory,
    integrate,
    linearization,
)

PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
NAMES = ("r12", "r13", "r14", "r23", "r24", "r34")
_INDEX = {p: i for i, p in enumerate(PAIRS)}


class DegeneratePlaneError(ValueError):
    pass


class DegeneracyError(RuntimeError):
    """rho12 stays at zero over a whole interval."""


@dataclass(frozen=True)
class PluckerVector:
    rho: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rho, dtype=float).reshape(6)
        if not np.all(np.isfinite(r)):
            raise DomainError("non-finite Plucker coordinates")
        object.__setattr__(self, "rho", r)

    def __getattr__(self, name):
        if name in NAMES:
            return float(self.rho[NAMES.index(name)])
        raise AttributeError(name)

    def norm(self) -> float:
        return float(np.linalg.norm(self.rho))

    def normalized(self) -> "PluckerVector":
        return PluckerVector(self.rho / self.norm())

    def relation(self) -> float:
        """rho12 rho34 - rho13 rho24 + rho14 rho23 (zero iff decomposable)."""
        r = self.rho
        return float(r[0] * r[5] - r[1] * r[4] + r[2] * r[3])

    def lagrangian_defect(self) -> float:
        """rho13 + rho24 (zero iff the plane is Lagrangian)."""
        return float(self.rho[1] + self.rho[4])

    def matrix(self) -> np.ndarray:
        M = np.zeros((4, 4))
        for (i, j), v in zip(PAIRS, self.rho):
            M[i, j] = v
            M[j, i] = -v
        return M

    def basis(self) -> np.ndarray:
        """Orthonormal 4x2 basis of the plane (column space of the bivector)."""
        U, _, _ = np.linalg.svd(self.matrix())
        return U[:, :2]

    def projection_singular_values(self) -> np.ndarray:
        """Singular values of the plane's projection onto (x, y)."""
        return np.linalg.svd(self.basis()[:2, :], compute_uv=False)


def plucker_from_basis(v1, v2) -> PluckerVector:
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    rho = np.array([v1[i] * v2[j] - v1[j] * v2[i] for i, j in PAIRS])
    if np.linalg.norm(rho) < 1e-12 * np.linalg.norm(v1) * np.linalg.norm(v2):
        raise DegeneratePlaneError("basis vectors are (nearly) dependent")
    return PluckerVector(rho)


def plucker_rows(V) -> np.ndarray:
    """Plucker coordinates of many frames V (..., 4, 2) at once."""
    V = np.asarray(V)
    return np.stack([V[..., i, 0] * V[..., j, 1] - V[..., j, 0] * V[..., i, 1] for i, j in PAIRS],
                    axis=-1)


def plucker_matrix(A: np.ndarray) -> np.ndarray:
    """6x6 generator of the induced flow on 2-vectors: d/dt (v1 ^ v2) for
    v1' = A v1, v2' = A v2."""
    Bm = np.zeros((6, 6))
    for a, (i, j) in enumerate(PAIRS):
        for k in range(4):
            # rho_ij' = sum_k A_ik rho_kj + A_jk rho_ik
            for (p, q), c in (((k, j), A[i, k]), ((i, k), A[j, k])):
                if p == q or c == 0.0:
                    continue
                if p < q:
                    Bm[a, _INDEX[(p, q)]] += c
                else:
                    Bm[a, _INDEX[(q, p)]] -= c
    return Bm


def plucker_flow(field, trajectory: Trajectory, initial: PluckerVector, t0=None, t1=None,
                 config: IntegratorConfig | None = None) -> Trajectory:
    """Integrate the 6x6 linear flow along a given trajectory, evaluating
    the linearization on its dense output; renormalizes outside [1e-3, 1e3]."""
    config = config or IntegratorConfig()
    t0 = trajectory.t0 if t0 is None else t0
    t1 = trajectory.t1 if t1 is None else t1
    lo, hi = trajectory.t0, trajectory.t1
    if not (lo - 1e-12 <= min(t0, t1) and max(t0, t1) <= hi + 1e-12):
        raise DomainError("requested span leaves the trajectory")

    def fun(t, r):
        z = trajectory(min(max(t, lo), hi))[:4]
        return plucker_matrix(linearization(field, z)) @ r

    def post(ynew, klast):
        nr = float(np.linalg.norm(ynew))
        if nr < 1e-3 or nr > 1e3:
            ynew /= nr
            klast /= nr

    hmax = config.max_step if math.isfinite(config.max_step) else 1e300
    t, y, c, st, nfev = _purecore.dp45(fun, t0, np.array(initial.rho, float), t1, config.rtol,
                                       config.atol, hmax, 0.0, config.max_steps, None, post)
    return Trajectory.from_kernel(t, y, c, status="done", kind="plucker6", nfev=nfev)


def unstable_plane_at(manifold, state=None, tol: float = 1e-5) -> PluckerVector:
    """Plucker coordinates of the unstable eigenplane of the linearization at O."""
    if state is not None and np.linalg.norm(np.asarray(state, float)[:4]) > tol * (1 + 1e-9):
        raise DomainError("state is outside the backward horizon around O")
    xi = manifold.xi
    return plucker_from_basis(xi.real, xi.imag).normalized()


def unstable_frame_at(manifold) -> np.ndarray:
    xi = manifold.xi
    return np.stack([xi.real, xi.imag], axis=1)


@dataclass
class ConjugateRecord:
    theta: float
    times: list
    multiplicities: list
    flagged: list
    index: int
    t_start: float
    t_end: float
    exit_time: float | None = None
    trajectory: Trajectory | None = dc_field(default=None, repr=False)

    @property
    def first(self) -> float | None:
        return self.times[0] if self.times else None

    def summary(self) -> dict:
        return {"theta": self.theta, "times": list(self.times),
                "multiplicities": list(self.multiplicities), "flagged": list(self.flagged),
                "index": self.index, "exit_time": self.exit_time}


def _rho12_normalized(traj: Trajectory, t):
    z = traj(t)
    r = z[..., 4:10]
    return r[..., 0] / np.linalg.norm(r, axis=-1)


def find_zeros(traj: Trajectory, sub: int = 8, tol: float = 1e-12, tangential: float = 1e-8,
               degenerate_span: float = 1e-2):
    """Zeros of rho12 on a Plucker-carrying lift trajectory.

    Returns (times, multiplicities, flagged). Sign changes count 1; local
    minima of |rho12|/|rho| below ``tangential`` without a sign change
    count 2 and are flagged.
    """
    t = traj.t
    grid = np.unique(np.concatenate([
        t, (t[:-1, None] + np.diff(t)[:, None] * (np.arange(1, sub) / sub)).ravel()]))
    r = _rho12_normalized(traj, grid)
    small = np.abs(r) < tangential
    if small.any():
        # contiguous stretches of vanishing rho12
        edges = np.diff(np.concatenate([[0], small.astype(int), [0]]))
        starts, ends = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0] - 1
        for a, b in zip(starts, ends):
            if grid[b] - grid[a] > degenerate_span:
                raise DegeneracyError(f"rho12 vanishes on [{grid[a]:.4f}, {grid[b]:.4f}]")
    times, mult, flag = [], [], []
    for i in range(grid.size - 1):
        a, b = r[i], r[i + 1]
        if a == 0.0 and i > 0:
            continue
        if (a < 0 < b) or (a > 0 > b) or (b == 0.0 and i + 2 < grid.size and r[i] * r[i + 2] < 0):
            lo, hi, flo = grid[i], grid[i + 1], a
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                fm = _rho12_normalized(traj, mid)
                if (fm < 0) == (flo < 0) and fm != 0.0:
                    lo, flo = mid, fm
                else:
                    hi = mid
                if hi - lo < tol:
                    break
            times.append(0.5 * (lo + hi))
            mult.append(1)
            flag.append(False)
    # tangential touches
    ar = np.abs(r)
    for i in range(1, grid.size - 1):
        if ar[i] <= ar[i - 1] and ar[i] <= ar[i + 1] and ar[i] < tangential \
                and r[i - 1] * r[i + 1] > 0:
            if not any(abs(grid[i] - s) < 1e-6 for s in times):
                times.append(float(grid[i]))
                mult.append(2)
                flag.append(True)
    order = np.argsort(times)
    return [times[k] for k in order], [mult[k] for k in order], [flag[k] for k in order]


def plucker_trajectory(problem, theta: float, t_end: float = 200.0, horizon: float = 1e-5,
                       stop_at_exit: bool = True, config: IntegratorConfig | None = None):
    """Lift + Plucker trajectory through K(theta), started at distance
    ``horizon`` from O with the exact unstable eigenplane."""
    config = config or problem.precise
    z0, t_rel = problem.start_near_origin(theta, horizon)
    rho0 = unstable_plane_at(problem.manifold, z0, horizon)
    stops = Stops(exit_table=problem.orbit.polar_table if stop_at_exit else None,
                  blowup=problem.blowup)
    tr, _ = integrate(System(problem.field, "plucker", renorm=True),
                      np.concatenate([z0, rho0.rho]), (t_rel, t_end), config, stops=stops,
                      label=float(theta))
    return tr


def conjugate_points(problem, theta: float, t_end: float = 200.0, horizon: float = 1e-5,
                     stop_at_exit: bool = True, config: IntegratorConfig | None = None,
                     keep_trajectory: bool = True) -> ConjugateRecord:
    """Conjugate times of the W^u(O) trajectory through K(theta), time 0 at K."""
    tr = plucker_trajectory(problem, theta, t_end, horizon, stop_at_exit, config)
    times, mult, flag = find_zeros(tr)
    exit_time = tr.t1 if tr.status == "exit" else None
    return ConjugateRecord(float(theta), times, mult, flag, int(sum(mult)), tr.t0, tr.t1,
                           exit_time, tr if keep_trajectory else None)


def basis_oracle(problem, theta: float, t_end: float = 20.0, horizon: float = 1e-5,
                 config: IntegratorConfig | None = None) -> Trajectory:
    """Lift with the two unstable eigenvectors as variational columns."""
    config = config or problem.precise
    z0, t_rel = problem.start_near_origin(theta, horizon)
    V = unstable_frame_at(problem.manifold)
    tr, _ = integrate(System(problem.field, "lift", 2),
                      np.concatenate([z0, V[:, 0], V[:, 1]]), (t_rel, t_end), config,
                      stops=Stops(blowup=problem.blowup), label=float(theta))
    return tr


def frame_at(traj: Trajectory, t) -> np.ndarray:
    """(…, 4, 2) frame from a lift trajectory carrying two columns."""
    z = traj(t)
    return np.stack([z[..., 4:8], z[..., 8:12]], axis=-1)

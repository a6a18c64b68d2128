"""Shared context for escape computations: drift, cycle, W^u(O) and the
trajectory helpers every downstream stage uses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dynamics import (
    SWEEP,
    DriftField,
    IntegrationError,
    IntegratorConfig,
    Stops,
    System,
    Trajectory,
    integrate,
)
from .manifolds import (
    LocalUnstableManifold,
    PeriodicOrbit,
    compute_local_unstable,
    find_periodic_orbit,
    monodromy_and_stable_direction,
)

PRECISE = IntegratorConfig(rtol=1e-10, atol=1e-12)


@dataclass
class EscapeProblem:
    field: DriftField
    orbit: PeriodicOrbit
    manifold: LocalUnstableManifold
    sweep: IntegratorConfig = SWEEP
    precise: IntegratorConfig = PRECISE
    blowup: float = 50.0
    _memo: dict = dc_field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, field: DriftField, order: int = 25, n: int = 1024, **kw) -> "EscapeProblem":
        orbit = find_periodic_orbit(field, n=n)
        monodromy_and_stable_direction(orbit)
        manifold = compute_local_unstable(field, order)
        return cls(field, orbit, manifold, **kw)

    @property
    def return_radius(self) -> float:
        return 0.5 * self.orbit.min_radius

    @property
    def arm_radius(self) -> float:
        # hysteresis: K itself pokes outside the return disk
        return 0.75 * self.orbit.min_radius

    def K(self, theta) -> np.ndarray:
        return self.manifold.point(theta)

    def lift(self, ncols=0) -> System:
        return System(self.field, "lift", ncols)

    def forward(self, theta: float, t_max: float = 200.0, exit: bool = True,
                ret: bool = False, config: IntegratorConfig | None = None,
                start_radius: float = 1.0, kind: str = "lift", extra=None) -> Trajectory:
        """Lift trajectory through K(theta), started on the parameter circle
        of radius ``start_radius`` (time 0 at K when start_radius = 1)."""
        config = config or self.precise
        stops = Stops(exit_table=self.orbit.polar_table if exit else None,
                      return_radius=self.return_radius if ret else None,
                      arm_radius=self.arm_radius, blowup=self.blowup)
        z0 = self.manifold.start_on_circle(theta, start_radius) if start_radius != 1.0 \
            else self.K(theta)
        t0 = -self.manifold.time_from_circle(start_radius) if start_radius != 1.0 else 0.0
        if kind == "plucker":
            y0 = np.concatenate([z0, extra])
            sysm = System(self.field, "plucker")
        elif kind == "lift" and extra is not None:
            y0 = np.concatenate([z0, np.ravel(extra)])
            sysm = System(self.field, "lift", len(extra))
        else:
            y0 = z0
            sysm = self.lift()
        tr, _ = integrate(sysm, y0, (t0, t_max), config, stops=stops, label=float(theta))
        return tr

    def classify(self, theta: float, t_max: float = 200.0,
                 config: IntegratorConfig | None = None) -> tuple[str, Trajectory]:
        """'exit' (outward Gamma crossing), 'return' (re-enters the core disk
        of radius half the minimal cycle radius), or 'none' within t_max."""
        # start well inside the core disk so that "re-entering" is unambiguous
        tr = self.forward(theta, t_max, exit=True, ret=True, config=config or self.sweep,
                          start_radius=0.1)
        st = tr.status
        if st == "blowup":
            st = "exit"
        return ("none" if st == "done" else st), tr

    def start_near_origin(self, theta: float, distance: float = 1e-5) -> tuple[np.ndarray, float]:
        """Point of the trajectory through K(theta) at the given 4D distance
        from O, and its time relative to the K crossing (negative)."""
        man = self.manifold
        lo, hi = 1e-12, 1.0
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            d = np.linalg.norm(man.start_on_circle(theta, mid))
            if d > distance:
                hi = mid
            else:
                lo = mid
            if hi / lo < 1 + 1e-14:
                break
        r = math.sqrt(lo * hi)
        return man.start_on_circle(theta, r), -man.time_from_circle(r)

    def crossing_function(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return self.orbit.crossing(pts[:, 0], pts[:, 1])

    def winding(self, traj: Trajectory, t0=None, t1=None, per_step: int = 4) -> float:
        """Signed number of revolutions of the (x, y) projection about O."""
        t0 = traj.t0 if t0 is None else t0
        t1 = traj.t1 if t1 is None else t1
        sel = traj.t[(traj.t > t0) & (traj.t < t1)]
        grid = np.concatenate([[t0], sel, [t1]])
        fine = np.unique(np.concatenate([
            grid, (grid[:-1, None] + np.diff(grid)[:, None] * np.linspace(0, 1, per_step + 1)[1:-1]).ravel()
        ]))
        z = traj(fine)
        ang = np.unwrap(np.arctan2(z[:, 1], z[:, 0]))
        return float((ang[-1] - ang[0]) / (2 * math.pi))


def ivdp_problem(eta: float = 0.5, order: int = 25) -> EscapeProblem:
    from .dynamics import ivdp
    return EscapeProblem.build(ivdp(eta), order)

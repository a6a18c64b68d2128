"""Periodic orbit, its Floquet data and stable manifold in the lift, and the
local unstable manifold of the origin by the parameterization method."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from .dynamics import (
    DriftField,
    IntegrationError,
    IntegratorConfig,
    Stops,
    System,
    Trajectory,
    hamiltonian_value,
    integrate,
    linearization,
)

TWO_PI = 2.0 * math.pi


class StructureError(RuntimeError):
    """A structural assumption (cycle, Floquet pattern, resonance) failed."""


# ---------------------------------------------------------------------------
# periodic orbit


@dataclass
class PeriodicOrbit:
    field: DriftField
    period: float
    samples: np.ndarray            # (N+1, 2), Gamma(tau_k), tau_k = k T / N
    monodromy2: np.ndarray
    multipliers2: np.ndarray
    polar_table: np.ndarray        # r_Gamma at phi_j = -pi + 2 pi j / M
    star_shaped: bool
    orientation: int               # +1 counter-clockwise, -1 clockwise in forward time
    monodromy4: np.ndarray | None = None
    multipliers4: np.ndarray | None = None
    xi_s0: np.ndarray | None = None
    xi_s: np.ndarray | None = None  # (N+1, 4) transported stable directions
    _fine: dict = dc_field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def taus(self) -> np.ndarray:
        return np.linspace(0.0, self.period, self.n + 1)

    @property
    def min_radius(self) -> float:
        return float(np.min(np.hypot(self.samples[:, 0], self.samples[:, 1])))

    @property
    def max_radius(self) -> float:
        return float(np.max(np.hypot(self.samples[:, 0], self.samples[:, 1])))

    # smooth interpolation through the Fourier series of the samples
    def _coeffs(self):
        if "c" not in self._fine:
            self._fine["c"] = np.fft.rfft(self.samples[:-1], axis=0) / self.n
        return self._fine["c"]

    def point(self, tau, deriv: int = 0) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        c = self._coeffs()
        n = self.n
        k = np.arange(c.shape[0])
        w = TWO_PI * k / self.period
        wt = np.exp(1j * np.outer(tau, w))
        fac = (1j * w) ** deriv
        wts = np.full(k.size, 2.0)
        wts[0] = 1.0
        if n % 2 == 0:
            wts[-1] = 1.0
        out = np.real(wt @ (c * (fac * wts)[:, None]))
        return out

    def fine(self, m: int = 8192) -> tuple[np.ndarray, np.ndarray]:
        key = ("fine", m)
        if key not in self._fine:
            tt = np.linspace(0.0, self.period, m, endpoint=False)
            self._fine[key] = (tt, self.point(tt))
        return self._fine[key]

    @property
    def circumference(self) -> float:
        return float(self._arc()[1])

    def _arc(self):
        if "arc" not in self._fine:
            n = self.n
            v = np.linalg.norm(self.field.vector(self.samples[:-1, 0], self.samples[:-1, 1]), axis=1)
            V = np.fft.rfft(v) / n
            L = float(V[0].real * self.period)
            self._fine["arc"] = (V, L)
        return self._fine["arc"]

    def arc_length(self, tau) -> np.ndarray:
        """Arc length from Gamma(0) to Gamma(tau) along the flow direction."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        V, L = self._arc()
        n = self.n
        k = np.arange(1, V.size)
        w = TWO_PI * k / self.period
        wts = np.full(k.size, 2.0)
        if n % 2 == 0:
            wts[-1] = 1.0
        ph = np.exp(1j * np.outer(tau, w)) - 1.0
        per = np.floor(tau / self.period)
        base = V[0].real * tau
        return base + np.real(ph @ (V[1:] * wts / (1j * w)))

    def crossing(self, x, y) -> np.ndarray:
        """Signed crossing function: negative inside Gamma, positive outside."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.star_shaped:
            from ._purecore import polar_eval
            return polar_eval(self.polar_table, x, y)
        inside = self.inside_polygon(x, y)
        d, _ = self.nearest(np.stack([x, y], axis=-1))
        return np.where(inside, -d, d)

    def inside_polygon(self, x, y) -> np.ndarray:
        """Crossing-number point-in-polygon test against the sample polygon."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        P = self.samples[:-1]
        Q = np.roll(P, -1, axis=0)
        inside = np.zeros(x.shape, dtype=bool)
        for (x1, y1), (x2, y2) in zip(P, Q):
            cond = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cond & (x < xc)
        return inside

    def contains(self, x, y) -> np.ndarray:
        return self.crossing(x, y) < 0

    def nearest(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Distance to Gamma and the phase tau of the nearest point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))[:, :2]
        if "tree" not in self._fine:
            tt, G = self.fine()
            self._fine["tree"] = cKDTree(G)
        tt, _ = self.fine()
        _, idx = self._fine["tree"].query(pts)
        tau = tt[idx]
        for _ in range(4):
            G = self.point(tau)
            d1 = self.point(tau, 1)
            d2 = self.point(tau, 2)
            r = G - pts
            num = np.sum(r * d1, axis=1)
            den = np.sum(d1 * d1, axis=1) + np.sum(r * d2, axis=1)
            step = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            tau = tau - np.clip(step, -0.01, 0.01)
        tau = np.mod(tau, self.period)
        d = np.linalg.norm(self.point(tau) - pts, axis=1)
        return d, tau

    def arc_position(self, pts) -> np.ndarray:
        """Arc-length position s in [0, L) of the nearest point of Gamma."""
        _, tau = self.nearest(pts)
        return np.mod(self.arc_length(tau), self.circumference)

    def project(self, pts) -> np.ndarray:
        _, tau = self.nearest(pts)
        return self.point(tau)

    def stops(self, **kw) -> Stops:
        return Stops(exit_table=self.polar_table, **kw)


def _poincare_return(field, x0, config, t_max):
    """Backward flight from (x0, 0) to the next crossing of y = 0 with x > 0."""
    def ev(t, z):
        return z[1]
    stops = Stops(blowup=1e3)
    traj, recs = integrate(System(field, "plane", 1), np.array([x0, 0.0, 1.0, 0.0]),
                           (0.0, -t_max), config, stops=stops)
    # y = 0 crossings with x > 0, same direction as at the start
    from .dynamics import Event, locate_events
    evs = locate_events(traj, [Event(ev, name="y0")], config.event_tol, forward=False)
    evs = [e for e in evs if e.state[0] > 0 and abs(e.t) > 1e-6]
    f0 = field.vector(x0, 0.0)
    for e in evs:
        fe = field.vector(e.state[0], 0.0)
        if np.sign(fe[1]) == np.sign(f0[1]):
            return e, traj
    raise StructureError("no Poincare return found")


def find_periodic_orbit(field: DriftField, start=(0.5, 0.0), t_relax: float = 120.0,
                        n: int = 1024, config: IntegratorConfig | None = None,
                        table_size: int = 4096, newton_tol: float = 1e-10) -> PeriodicOrbit:
    """Unstable cycle found by backward relaxation and a Poincare-Newton solve.

    The section is y = 0, x > 0; Gamma(0) is its section point.
    """
    config = config or IntegratorConfig(rtol=1e-12, atol=1e-13)
    plane = System(field, "plane")
    try:
        traj, _ = integrate(plane, np.asarray(start, float), (0.0, -t_relax), config,
                            stops=Stops(blowup=1e3))
    except IntegrationError as exc:
        raise StructureError(f"backward relaxation failed: {exc}") from exc
    if traj.status != "done":
        raise StructureError("no cycle found within the backward relaxation time")
    # land on the section: last crossing of y = 0 with x > 0
    z = traj.y[0]
    from .dynamics import Event, locate_events
    evs = locate_events(traj, [Event(lambda t, zz: zz[1], name="y0")], config.event_tol,
                        forward=False)
    evs = [e for e in evs if e.state[0] > 0]
    if not evs:
        raise StructureError("relaxed orbit does not cross the section y = 0, x > 0")
    x0 = float(evs[-1].state[0])
    # Newton on x0 using the backward return map (contracting direction)
    T = None
    for it in range(30):
        e, tr = _poincare_return(field, x0, config, 50.0)
        x1 = float(e.state[0])
        T = -e.t
        # derivative of the return map from the variational column
        v = e.state[2:4]
        fe = field.vector(e.state[0], e.state[1])
        # correct for the time shift to stay on the section
        dP = v[0] - fe[0] * v[1] / fe[1]
        res = x1 - x0
        if abs(res) < newton_tol:
            break
        x0 = x0 - res / (dP - 1.0)
    else:
        raise StructureError(f"Poincare-Newton did not converge (residual {res:.2e})")
    # samples: Gamma(tau) = phi_{-(T - tau)}(Gamma(0))
    tr, _ = integrate(System(field, "plane", 2), np.array([x0, 0.0, 1.0, 0.0, 0.0, 1.0]),
                      (0.0, -T), config)
    taus = np.linspace(0.0, T, n + 1)
    S = tr(np.clip(taus - T, -T, 0.0))[:, :2]
    S[0] = [x0, 0.0]
    closure = float(np.linalg.norm(tr.y[0, :2] - np.array([x0, 0.0])))
    if closure > 1e-9:
        raise StructureError(f"orbit does not close: {closure:.2e}")
    S[-1] = S[0]
    # deterministic monodromy (forward time) from the backward one
    Mb = tr.y[0, 2:].reshape(2, 2).T
    M2 = np.linalg.inv(Mb)
    mult = np.linalg.eigvals(M2)
    # orientation and star-shape test
    F = field.vector(S[:-1, 0], S[:-1, 1])
    cross = S[:-1, 0] * F[:, 1] - S[:-1, 1] * F[:, 0]
    star = bool(np.all(cross > 0) or np.all(cross < 0))
    orient = 1 if np.mean(cross) > 0 else -1
    orbit = PeriodicOrbit(field, float(T), S, M2, mult, np.zeros(0), star, orient)
    if star:
        orbit.polar_table = _polar_table(orbit, table_size)
    return orbit


def _polar_table(orbit: PeriodicOrbit, m: int) -> np.ndarray:
    tt, G = orbit.fine(16 * orbit.n)
    phi = np.unwrap(np.arctan2(G[:, 1], G[:, 0]))
    if orbit.orientation < 0:
        tt = tt[::-1]
        phi = phi[::-1]
    targets = -math.pi + TWO_PI * np.arange(m) / m
    # shift targets into the unwrapped range
    base = phi[0]
    tq = base + np.mod(targets - base, TWO_PI)
    tau = np.interp(tq, phi, tt)
    for _ in range(4):
        P = orbit.point(tau)
        D = orbit.point(tau, 1)
        ph = np.arctan2(P[:, 1], P[:, 0])
        dph = (P[:, 0] * D[:, 1] - P[:, 1] * D[:, 0]) / np.sum(P * P, axis=1)
        err = np.angle(np.exp(1j * (ph - targets)))
        tau = tau - err / dph
    P = orbit.point(tau)
    return np.ascontiguousarray(np.hypot(P[:, 0], P[:, 1]))


def monodromy_and_stable_direction(orbit: PeriodicOrbit, config: IntegratorConfig | None = None,
                                   tol: float = 1e-4) -> PeriodicOrbit:
    """Lift monodromy at Gamma(0), stable eigenvector and its transport.

    Fills ``monodromy4``, ``multipliers4``, ``xi_s0`` and ``xi_s`` in place
    and returns the orbit.
    """
    config = config or IntegratorConfig(rtol=1e-12, atol=1e-14)
    field = orbit.field
    T = orbit.period
    z0 = np.array([orbit.samples[0, 0], orbit.samples[0, 1], 0.0, 0.0])
    y0 = np.concatenate([z0, np.eye(4).ravel()])
    tr, _ = integrate(System(field, "lift", 4), y0, (0.0, T), config)
    M = tr.y[-1, 4:].reshape(4, 4).T
    w, V = np.linalg.eig(M)
    order = np.argsort(np.abs(w))
    w = w[order]
    V = V[:, order]
    ws, wu = w[0], w[-1]
    neutral = w[1:3]
    if not (abs(ws) < 1 - tol and abs(wu) > 1 + tol and np.all(np.abs(neutral - 1) < 1e-3)):
        raise StructureError(f"lift multipliers {w} do not follow the {{lambda,1,1,1/lambda}} pattern")
    xi = np.real(V[:, 0] * np.exp(-1j * np.angle(V[np.argmax(np.abs(V[:, 0])), 0])))
    xi /= np.linalg.norm(xi)
    # transport xi along Gamma
    tr1, _ = integrate(System(field, "lift", 1), np.concatenate([z0, xi]), (0.0, T), config)
    cols = tr1(orbit.taus)[:, 4:]
    cols /= np.linalg.norm(cols, axis=1)[:, None]
    orbit.monodromy4 = M
    orbit.multipliers4 = w
    orbit.xi_s0 = xi
    orbit.xi_s = cols
    orbit._fine["xi_transport_end"] = tr1.y[-1, 4:]
    return orbit


# ---------------------------------------------------------------------------
# parameterization method for W^u(O)


def _series_poly(coeffs: dict, X, Y, M, cache):
    """Power series of sum c x^i y^j for series X, Y truncated at order M."""
    out = np.zeros((M + 1, M + 1), dtype=complex)
    for (i, j), c in coeffs.items():
        key = (i, j)
        if key not in cache:
            s = np.zeros((M + 1, M + 1), dtype=complex)
            s[0, 0] = 1.0
            for _ in range(i):
                s = _mul(s, X, M)
            for _ in range(j):
                s = _mul(s, Y, M)
            cache[key] = s
        out = out + c * cache[key]
    return out


def _mul(a, b, M):
    return convolve2d(a, b)[: M + 1, : M + 1]


def _mask(M):
    m = np.arange(M + 1)
    return (m[:, None] + m[None, :]) <= M


def _lift_series(field, a, M):
    """Lift vector field applied to the series a (4, M+1, M+1)."""
    from .dynamics import _poly_derivative
    X, Y, Pp, Qq = a
    cache = {}
    f = _series_poly(field.f_coeffs, X, Y, M, cache)
    g = _series_poly(field.g_coeffs, X, Y, M, cache)
    fx = _series_poly(_poly_derivative(field.f_coeffs, 0), X, Y, M, cache)
    fy = _series_poly(_poly_derivative(field.f_coeffs, 1), X, Y, M, cache)
    gx = _series_poly(_poly_derivative(field.g_coeffs, 0), X, Y, M, cache)
    gy = _series_poly(_poly_derivative(field.g_coeffs, 1), X, Y, M, cache)
    return np.array([
        f + Pp,
        g + Qq,
        -_mul(fx, Pp, M) - _mul(gx, Qq, M),
        -_mul(fy, Pp, M) - _mul(gy, Qq, M),
    ]) * _mask(M)


@dataclass
class LocalUnstableManifold:
    field: DriftField
    order: int
    alpha: np.ndarray          # (4, M+1, M+1) complex, already scaled
    mu1: complex
    mu2: complex
    scale: float
    residual: float
    xi: np.ndarray             # unit eigenvector of mu1 (before scaling)

    @property
    def validity_radius(self) -> float:
        return 1.0

    @property
    def rotation(self) -> float:
        """Im mu / Re mu: angle gained per unit log-radius along trajectories."""
        return self.mu1.imag / self.mu1.real

    def evaluate(self, z1, z2) -> np.ndarray:
        """P-hat(z1, z2) for arrays z1, z2; returns (..., 4) complex."""
        z1 = np.asarray(z1, dtype=complex)
        z2 = np.asarray(z2, dtype=complex)
        M = self.order
        p1 = z1[..., None] ** np.arange(M + 1)
        p2 = z2[..., None] ** np.arange(M + 1)
        return np.einsum("kmn,...m,...n->...k", self.alpha, p1, p2)

    def point(self, theta, radius: float = 1.0) -> np.ndarray:
        """Real point P(r e^{i theta}) on W^u(O); radius 1 is the curve K."""
        th = np.asarray(theta, dtype=float)
        z = radius * np.exp(1j * th)
        return np.real(self.evaluate(z, np.conj(z)))

    def start_on_circle(self, theta, r0: float) -> np.ndarray:
        """Point where the trajectory through K(theta) crosses the radius-r0 circle.

        Backward flight time from there to K is log(1/r0) / Re mu.
        """
        th = np.asarray(theta, dtype=float) - self.rotation * math.log(1.0 / r0)
        return self.point(th, r0)

    def time_from_circle(self, r0: float) -> float:
        return math.log(1.0 / r0) / self.mu1.real

    def residual_on(self, radius: float = 1.0, n: int = 256) -> float:
        return _residual(self.field, self.alpha, self.mu1, self.mu2, radius, n)


def _residual(field, alpha, mu1, mu2, radius, n):
    M = alpha.shape[1] - 1
    th = np.linspace(0.0, TWO_PI, n, endpoint=False)
    z = radius * np.exp(1j * th)
    m = np.arange(M + 1)
    p1 = z[:, None] ** m
    p2 = np.conj(z)[:, None] ** m
    P = np.einsum("kmn,tm,tn->tk", alpha, p1, p2)
    lam = m[:, None] * mu1 + m[None, :] * mu2
    DPR = np.einsum("kmn,tm,tn->tk", alpha * lam, p1, p2)
    from .dynamics import hamiltonian_lift
    FP = np.real(hamiltonian_lift(field, np.real(P)))
    return float(np.max(np.linalg.norm(FP - np.real(DPR), axis=1)))


def compute_local_unstable(field: DriftField, order: int = 25, target: float = 1e-8,
                           resonance_tol: float = 1e-8, scale: float | None = None
                           ) -> LocalUnstableManifold:
    """Order-by-order solution of the invariance equation F(P) = DP R.

    Eigenvector phase: x-component of alpha_10 real and positive. The
    eigenvector scale is the largest value (by bisection) for which the
    residual on the unit circle is at most ``target``, unless ``scale``
    is given.
    """
    if not hasattr(field, "f_coeffs"):
        raise TypeError("the parameterization method needs a polynomial drift")
    A = linearization(field, np.zeros(4))
    w, V = np.linalg.eig(A)
    unst = [i for i in range(4) if w[i].real > 0]
    if len(unst) != 2 or abs(w[unst[0]].imag) < 1e-12:
        raise StructureError("origin needs a complex-conjugate unstable pair")
    i1 = [i for i in unst if w[i].imag > 0][0]
    mu1 = complex(w[i1])
    mu2 = mu1.conjugate()
    xi = V[:, i1] / np.linalg.norm(V[:, i1])
    xi = xi * np.exp(-1j * np.angle(xi[0]))
    M = order
    a = np.zeros((4, M + 1, M + 1), dtype=complex)
    a[:, 1, 0] = xi
    a[:, 0, 1] = np.conj(xi)
    for k in range(2, M + 1):
        N = _lift_series(field, a, M) - np.einsum("ij,jmn->imn", A, a)
        for m in range(k + 1):
            nn = k - m
            lam = m * mu1 + nn * mu2
            if np.min(np.abs(lam - w)) < resonance_tol:
                raise StructureError(f"resonance at order ({m},{nn})")
            a[:, m, nn] = np.linalg.solve(lam * np.eye(4) - A, N[:, m, nn])
    # enforce exact conjugate symmetry
    a = 0.5 * (a + np.conj(np.transpose(a, (0, 2, 1))))
    mm = np.arange(M + 1)
    deg = mm[:, None] + mm[None, :]

    def res(s):
        return _residual(field, a * s ** deg, mu1, mu2, 1.0, 256)

    if scale is None:
        lo, hi = 1e-3, 1.0
        if res(hi) <= target:
            lo = hi
        else:
            while res(lo) > target:
                lo /= 2
                if lo < 1e-8:
                    raise StructureError("no eigenvector scale meets the residual target")
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if res(mid) <= target:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-12:
                    break
        scale = lo
    alpha = a * scale ** deg
    return LocalUnstableManifold(field, M, alpha, mu1, mu2, float(scale),
                                 _residual(field, alpha, mu1, mu2, 1.0, 256), xi)


def curve_K(manifold: LocalUnstableManifold, theta: float):
    from .dynamics import PhaseState4
    return PhaseState4.from_array(manifold.point(theta))


# ---------------------------------------------------------------------------
# growth of the manifolds


def grow_unstable(manifold: LocalUnstableManifold, thetas, stop: str = "time",
                  t_max: float = 40.0, radius: float | None = None,
                  orbit: PeriodicOrbit | None = None,
                  config: IntegratorConfig | None = None) -> list:
    """Forward lift trajectories from K(theta) with a stop rule.

    stop: "time" (up to t_max), "radius" (first time r reaches ``radius``) or
    "torus" (first outward crossing of Gamma). Failures are recorded in place
    of the trajectory as the exception instance.
    """
    config = config or IntegratorConfig(rtol=1e-10, atol=1e-12)
    if stop == "torus":
        if orbit is None:
            raise ValueError("torus stop needs the periodic orbit")
        stops = orbit.stops(blowup=1e3)
    elif stop == "radius":
        stops = Stops(radius=radius, blowup=1e3)
    else:
        stops = Stops(blowup=1e3)
    out = []
    for th in np.atleast_1d(thetas):
        try:
            tr, _ = integrate(System(manifold.field, "lift"), manifold.point(th), (0.0, t_max),
                              config, stops=stops, label=float(th))
            out.append(tr)
        except IntegrationError as exc:
            out.append(exc)
    return out


@dataclass
class StableManifoldMesh:
    nu: float
    sign: int
    t_f: float
    times: np.ndarray              # (nt,) backward times 0 .. -t_f
    points: np.ndarray             # (N, nt, 4)
    base_index: np.ndarray

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k, j = np.meshgrid(self.base_index, np.arange(self.times.size), indexing="ij")
        return self.points.reshape(-1, 4), k.ravel(), self.times[j.ravel()]


def project_to_energy(field, z, direction=None, tol=1e-14):
    """Move (p, q) radially on the momentum circle so that H = 0 exactly."""
    z = np.array(z, dtype=float)
    f, g = field.eval(z[0], z[1], 2)
    c = np.array([-f, -g])
    R = math.hypot(f, g)
    v = z[2:4] - c
    nv = np.linalg.norm(v)
    if nv == 0 or R == 0:
        raise StructureError("cannot project onto the energy circle")
    z[2:4] = c + R * v / nv
    return z


def stable_manifold_gamma(orbit: PeriodicOrbit, nu: float = 1e-5, t_f: float = 12.0,
                          sign: int = 1, stride: int = 1, nt: int = 400,
                          config: IntegratorConfig | None = None) -> StableManifoldMesh:
    """Seeds Gamma_k + sign nu xi_k integrated backward over [0, t_f]."""
    if orbit.xi_s is None:
        monodromy_and_stable_direction(orbit)
    if nu > 1e-4:
        raise ValueError("offset nu must be at most 1e-4")
    config = config or IntegratorConfig(rtol=1e-10, atol=1e-12)
    field = orbit.field
    idx = np.arange(0, orbit.n, stride)
    times = -np.linspace(0.0, t_f, nt)
    pts = np.full((idx.size, nt, 4), np.nan)
    for r, k in enumerate(idx):
        seed = np.concatenate([orbit.samples[k], [0.0, 0.0]]) + sign * nu * orbit.xi_s[k]
        if abs(hamiltonian_value(field, seed)) > 1e-6 * nu:
            seed = project_to_energy(field, seed)
        try:
            tr, _ = integrate(System(field, "lift"), seed, (0.0, -t_f), config,
                              stops=Stops(blowup=50.0))
        except IntegrationError:
            continue
        ok = times >= tr.t0
        pts[r, ok] = tr(times[ok])[:, :4]
    return StableManifoldMesh(nu, sign, t_f, times, pts, idx)

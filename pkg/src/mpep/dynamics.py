"""Drift fields, the Hamiltonian lift and an adaptive integrator with events."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import _backend, _purecore

# order of the derivative table shared with the kernels
FUNCS = ("f", "g", "fx", "fy", "gx", "gy", "fxx", "fxy", "fyy", "gxx", "gxy", "gyy")

STATUS = {
    0: "done", 1: "exit", 2: "return", 4: "blowup", 8: "radius", 16: "origin",
    -1: "max_steps", -2: "underflow", -3: "nonfinite",
}
_CODE = {v: k for k, v in STATUS.items()}


class DomainError(ValueError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory

    @property
    def last_state(self):
        return None if self.trajectory is None else self.trajectory.y[-1]


# ---------------------------------------------------------------------------
# drift fields


class DriftField:
    """Planar drift (f, g) with first and second partial derivatives.

    Subclasses implement ``eval(x, y, nfun)`` returning the first ``nfun``
    entries of ``FUNCS`` (scalars or arrays broadcast with x, y).
    """

    name = "drift"
    params: dict = {}

    def eval(self, x, y, nfun=12):
        raise NotImplementedError

    def derivatives(self, x, y):
        return dict(zip(FUNCS, self.eval(x, y, 12)))

    def eval_array(self, x, y, nfun=12) -> np.ndarray:
        """``eval`` stacked into an (nfun, ...) array broadcast against x, y."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.stack([np.broadcast_to(v, x.shape) for v in self.eval(x, y, nfun)])

    def f(self, x, y):
        return self.eval(x, y, 1)[0]

    def g(self, x, y):
        return self.eval(x, y, 2)[1]

    def div(self, x, y):
        D = self.eval(x, y, 6)
        return D[2] + D[5]

    def vector(self, x, y):
        f, g = self.eval(x, y, 2)
        return np.stack(np.broadcast_arrays(f, g), axis=-1)

    @property
    def compiled(self) -> bool:
        return False

    def describe(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


def _poly_derivative(coeffs: dict, var: int) -> dict:
    out = {}
    for (i, j), c in coeffs.items():
        k = (i, j)[var]
        if k == 0:
            continue
        key = (i - 1, j) if var == 0 else (i, j - 1)
        out[key] = out.get(key, 0.0) + k * c
    return out


class PolynomialDrift(DriftField):
    """Polynomial drift given as coefficient tables {(i, j): c} for x^i y^j."""

    def __init__(self, f_coeffs: dict, g_coeffs: dict, name="polynomial", params=None):
        self.name = name
        self.params = dict(params or {})
        self.f_coeffs = {tuple(map(int, k)): float(v) for k, v in f_coeffs.items() if v != 0}
        self.g_coeffs = {tuple(map(int, k)): float(v) for k, v in g_coeffs.items() if v != 0}
        fx = _poly_derivative(self.f_coeffs, 0)
        fy = _poly_derivative(self.f_coeffs, 1)
        gx = _poly_derivative(self.g_coeffs, 0)
        gy = _poly_derivative(self.g_coeffs, 1)
        tables = [
            self.f_coeffs, self.g_coeffs, fx, fy, gx, gy,
            _poly_derivative(fx, 0), _poly_derivative(fx, 1), _poly_derivative(fy, 1),
            _poly_derivative(gx, 0), _poly_derivative(gx, 1), _poly_derivative(gy, 1),
        ]
        rows = []
        for fid, tab in enumerate(tables):
            for (i, j) in sorted(tab):
                if tab[(i, j)] != 0:
                    rows.append((fid, i, j, tab[(i, j)]))
        self.terms = np.ascontiguousarray(np.array(rows, dtype=float).reshape(-1, 4))
        degs = [i + j for t in tables for (i, j) in t] or [0]
        self.deg = max(max(i for t in tables for (i, _) in t) if rows else 0,
                       max(j for t in tables for (_, j) in t) if rows else 0, 1)
        self.total_degree = max(degs)
        self._eval = _purecore._Drift(self.terms, self.deg)

    def eval(self, x, y, nfun=12):
        return self._eval.eval(x, y, nfun)

    @property
    def compiled(self) -> bool:
        return True

    def describe(self) -> dict:
        d = super().describe()
        d["f"] = [[i, j, c] for (i, j), c in sorted(self.f_coeffs.items())]
        d["g"] = [[i, j, c] for (i, j), c in sorted(self.g_coeffs.items())]
        return d


def ivdp(eta: float = 0.5) -> PolynomialDrift:
    """Inverted van der Pol drift: f = y, g = -x + 2 eta y (x^2 - 1)."""
    return PolynomialDrift(
        {(0, 1): 1.0},
        {(1, 0): -1.0, (0, 1): -2.0 * eta, (2, 1): 2.0 * eta},
        name="ivdp",
        params={"eta": float(eta)},
    )


def linear_drift(a: float = -1.0, b: float = -1.0) -> PolynomialDrift:
    """Decoupled linear drift (a x, b y); with a = b = -1 two OU processes."""
    return PolynomialDrift({(1, 0): a}, {(0, 1): b}, name="linear", params={"a": a, "b": b})


class CallableDrift(DriftField):
    """User-supplied drift; derivatives by central finite differences."""

    def __init__(self, f: Callable, g: Callable, h1=1e-6, h2=1e-4, name="callable"):
        self._f = f
        self._g = g
        self.h1 = h1
        self.h2 = h2
        self.name = name
        self.params = {}

    def eval(self, x, y, nfun=12):
        f, g, h1, h2 = self._f, self._g, self.h1, self.h2
        out = [f(x, y), g(x, y)]
        if nfun > 2:
            for fn in (f, g):
                out.append((fn(x + h1, y) - fn(x - h1, y)) / (2 * h1))
                out.append((fn(x, y + h1) - fn(x, y - h1)) / (2 * h1))
        if nfun > 6:
            for fn in (f, g):
                c = fn(x, y)
                out.append((fn(x + h2, y) - 2 * c + fn(x - h2, y)) / h2**2)
                out.append((fn(x + h2, y + h2) - fn(x + h2, y - h2)
                            - fn(x - h2, y + h2) + fn(x - h2, y - h2)) / (4 * h2**2))
                out.append((fn(x, y + h2) - 2 * c + fn(x, y - h2)) / h2**2)
        return out[:nfun]


def drift_from_config(name: str, params: dict | None = None, f=None, g=None) -> DriftField:
    params = dict(params or {})
    if name == "ivdp":
        return ivdp(params.get("eta", 0.5))
    if name == "linear":
        return linear_drift(params.get("a", -1.0), params.get("b", -1.0))
    if name == "polynomial":
        if f is None or g is None:
            raise ValueError("polynomial drift needs f and g coefficient tables")
        fc = {(int(i), int(j)): float(c) for i, j, c in f}
        gc = {(int(i), int(j)): float(c) for i, j, c in g}
        return PolynomialDrift(fc, gc, params=params)
    raise ValueError(f"unknown drift {name!r}")


# ---------------------------------------------------------------------------
# states


@dataclass(frozen=True)
class PhaseState4:
    x: float
    y: float
    p: float = 0.0
    q: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.p, self.q, self.t)):
            raise DomainError("non-finite phase state")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.p, self.q])

    @classmethod
    def from_array(cls, z, t=0.0):
        z = np.asarray(z, dtype=float)
        return cls(float(z[0]), float(z[1]), float(z[2]), float(z[3]), float(t))


def _as_array(state) -> np.ndarray:
    if isinstance(state, PhaseState4):
        return state.array
    z = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("non-finite state")
    return z


def eval_drift(field: DriftField, point):
    """Value (f, g), Jacobian [[fx, fy], [gx, gy]] and Hessians of f and g."""
    x, y = (float(v) for v in point)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DomainError("non-finite point")
    D = field.eval(x, y, 12)
    value = np.array([D[0], D[1]])
    jac = np.array([[D[2], D[3]], [D[4], D[5]]])
    hf = np.array([[D[6], D[7]], [D[7], D[8]]])
    hg = np.array([[D[9], D[10]], [D[10], D[11]]])
    return value, jac, (hf, hg)


def hamiltonian_lift(field: DriftField, state) -> np.ndarray:
    """(f+p, g+q, -f_x p - g_x q, -f_y p - g_y q); vectorized over leading axes."""
    z = _as_array(state)
    x, y, p, q = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    f, g, fx, fy, gx, gy = field.eval(x, y, 6)
    return np.stack([f + p, g + q, -fx * p - gx * q, -fy * p - gy * q], axis=-1)


def hamiltonian_value(field: DriftField, state):
    z = _as_array(state)
    x, y, p, q = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    f, g = field.eval(x, y, 2)
    return f * p + g * q + 0.5 * (p * p + q * q)


J4 = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])


def symmetric_part(field: DriftField, state) -> np.ndarray:
    """Symmetric matrix B with linearization A = J B (Hessian of H)."""
    x, y, p, q = _as_array(state)
    D = field.eval(x, y, 12)
    a11 = p * D[6] + q * D[9]
    a12 = p * D[7] + q * D[10]
    a22 = p * D[8] + q * D[11]
    return np.array([
        [a11, a12, D[2], D[4]],
        [a12, a22, D[3], D[5]],
        [D[2], D[3], 1.0, 0.0],
        [D[4], D[5], 0.0, 1.0],
    ])


def linearization(field: DriftField, state) -> np.ndarray:
    """Jacobian of the lift at ``state``."""
    return J4 @ symmetric_part(field, state)


# ---------------------------------------------------------------------------
# trajectories


def _reverse_poly(y0, coef):
    """Re-expand a step polynomial around its other endpoint."""
    c = np.concatenate([y0[None], coef], axis=0)  # c[k] multiplies s^k
    y1 = c.sum(axis=0)
    out = np.zeros_like(coef)
    for k in range(1, 5):
        acc = 0.0
        for j in range(k, 5):
            acc = acc + math.comb(j, k) * c[j]
        out[k - 1] = (-1) ** k * acc
    return y1, out


class Trajectory:
    """Time-stamped solution with piecewise quartic dense output.

    Times are strictly increasing. On step i the state is
    ``y[i] + sum_k coef[i, k] * s**(k+1)`` with ``s = (t - t[i]) / (t[i+1] - t[i])``.
    """

    def __init__(self, t, y, coef, status="done", label=None, kind="plane", nfev=0,
                 events=None, meta=None):
        self.t = np.asarray(t, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.coef = np.asarray(coef, dtype=float)
        self.status = status
        self.label = label
        self.kind = kind
        self.nfev = nfev
        self.events = list(events or [])
        self.meta = dict(meta or {})
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    @classmethod
    def from_kernel(cls, t, y, coef, **kw):
        t = np.asarray(t)
        if t.size > 1 and t[-1] < t[0]:
            nstep = coef.shape[0]
            rc = np.empty_like(coef)
            for i in range(nstep):
                _, rc[i] = _reverse_poly(y[i], coef[i])
            return cls(t[::-1].copy(), y[::-1].copy(), rc[::-1].copy(), **kw)
        return cls(t, y, coef, **kw)

    def __len__(self):
        return self.t.size

    @property
    def t0(self):
        return float(self.t[0])

    @property
    def t1(self):
        return float(self.t[-1])

    @property
    def dim(self):
        return self.y.shape[1]

    def __call__(self, tq):
        tq = np.asarray(tq, dtype=float)
        scalar = tq.ndim == 0
        tq = np.atleast_1d(tq)
        lo, hi = self.t[0], self.t[-1]
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(tq < lo - tol) or np.any(tq > hi + tol):
            raise DomainError("time outside trajectory span")
        if self.t.size == 1:
            out = np.repeat(self.y[:1], tq.size, axis=0)
            return out[0] if scalar else out
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, self.t.size - 2)
        h = self.t[i + 1] - self.t[i]
        s = np.clip((tq - self.t[i]) / h, 0.0, 1.0)
        c = self.coef[i]
        out = self.y[i] + s[:, None] * (c[:, 0] + s[:, None] * (c[:, 1] + s[:, None] * (
            c[:, 2] + s[:, None] * c[:, 3])))
        return out[0] if scalar else out

    def derivative(self, tq):
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, self.t.size - 2)
        h = self.t[i + 1] - self.t[i]
        s = np.clip((tq - self.t[i]) / h, 0.0, 1.0)[:, None]
        c = self.coef[i]
        return (c[:, 0] + s * (2 * c[:, 1] + s * (3 * c[:, 2] + s * 4 * c[:, 3])))/h[:, None]

    def truncate(self, t_end):
        """Copy ending exactly at ``t_end`` (rescales the last step polynomial)."""
        if t_end >= self.t[-1]:
            return self
        k = int(np.searchsorted(self.t, t_end, side="right") - 1)
        k = max(k, 0)
        lam = (t_end - self.t[k]) / (self.t[k + 1] - self.t[k])
        coef = self.coef[: k + 1].copy()
        coef[k] = coef[k] * (lam ** np.arange(1, 5))[:, None]
        if lam <= 0:
            t = self.t[: k + 1]
            y = self.y[: k + 1]
            coef = coef[:k]
        else:
            t = np.append(self.t[: k + 1], t_end)
            y = np.vstack([self.y[: k + 1], self(t_end)])
        return Trajectory(t, y, coef, status=self.status, label=self.label, kind=self.kind,
                          nfev=self.nfev, events=self.events, meta=self.meta)

    def shifted(self, dt):
        return Trajectory(self.t + dt, self.y, self.coef, status=self.status, label=self.label,
                          kind=self.kind, nfev=self.nfev, events=self.events, meta=self.meta)

    @staticmethod
    def join(first: "Trajectory", second: "Trajectory") -> "Trajectory":
        """Concatenate two pieces sharing the junction time."""
        if abs(first.t[-1] - second.t[0]) > 1e-12 * max(1.0, abs(second.t[0])):
            raise ValueError("pieces do not meet")
        n = min(first.dim, second.dim)
        t = np.concatenate([first.t, second.t[1:]])
        y = np.vstack([first.y[:, :n], second.y[1:, :n]])
        c = np.concatenate([first.coef[:, :, :n], second.coef[:, :, :n]], axis=0)
        return Trajectory(t, y, c, status=second.status, label=second.label, kind=second.kind,
                          nfev=first.nfev + second.nfev, meta={**first.meta, **second.meta})

    def states(self) -> list[PhaseState4]:
        return [PhaseState4.from_array(z[:4], t) for z, t in zip(self.y, self.t)]

    def resample(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        tt = np.linspace(self.t[0], self.t[-1], n)
        return tt, self(tt)


# ---------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    max_step: float = math.inf
    event_tol: float = 1e-10
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0 and self.max_step > 0 and self.event_tol > 0):
            raise ValueError("integrator tolerances must be positive")


SWEEP = IntegratorConfig(rtol=1e-8, atol=1e-10)


@dataclass(frozen=True)
class Event:
    """Scalar event g(t, y) = 0; direction +1 rising, -1 falling, 0 both."""
    fun: Callable
    direction: int = 0
    terminal: bool = False
    name: str = "event"


@dataclass(frozen=True)
class EventRecord:
    name: str
    t: float
    state: np.ndarray
    direction: int
    located: bool = True


@dataclass(frozen=True)
class Stops:
    """Built-in terminal conditions evaluated inside the kernels.

    exit_table: polar radius table of a star-shaped cycle (outward crossing);
    return_radius: re-entry into the disk after having passed arm_radius
    (defaults to return_radius);
    radius: first time r reaches this value; origin: distance of the base
    state to the origin falls to this value; blowup: any base component
    exceeds this magnitude.
    """
    exit_table: np.ndarray | None = None
    return_radius: float | None = None
    arm_radius: float | None = None
    radius: float | None = None
    origin: float | None = None
    blowup: float | None = 1e3

    def mask(self) -> int:
        m = 0
        if self.exit_table is not None:
            m |= 1
        if self.return_radius is not None:
            m |= 2
        if self.blowup is not None:
            m |= 4
        if self.radius is not None:
            m |= 8
        if self.origin is not None:
            m |= 16
        return m

    def params(self) -> np.ndarray:
        return np.array([
            self.return_radius or 0.0,
            self.blowup if self.blowup is not None else 0.0,
            self.radius or 0.0,
            self.origin or 0.0,
            self.arm_radius or 0.0,
        ])

    def function(self, name: str, base: int) -> Callable | None:
        """Scalar function whose zero is the stop event (for bisection)."""
        if name == "exit":
            tab = self.exit_table

            def fn(z):
                return float(_purecore.polar_eval(tab, z[0:1], z[1:2])[0])
            return fn
        if name == "return":
            return lambda z: math.hypot(z[0], z[1]) - self.return_radius
        if name == "radius":
            return lambda z: math.hypot(z[0], z[1]) - self.radius
        if name == "origin":
            return lambda z: float(np.linalg.norm(z[:base])) - self.origin
        return None


KINDS = {"plane": 0, "lift": 1, "plucker": 2}


@dataclass(frozen=True)
class System:
    """A built-in system over a drift: planar flow, lift, or lift + Plucker.

    ``ncols`` tangent columns are appended for the plane and lift kinds.
    """
    field: DriftField
    kind: str = "lift"
    ncols: int = 0
    renorm: bool = True

    @property
    def dim(self) -> int:
        return _purecore._state_dim(KINDS[self.kind], self.ncols)

    @property
    def base(self) -> int:
        return 2 if self.kind == "plane" else 4

    def rhs(self, z):
        return _purecore._make_rhs(KINDS[self.kind], self.ncols, self.field)(np.asarray(z, float))


def _bisect_event(traj: Trajectory, fn, ta, tb, tol, fa=None, fb=None):
    if fa is None:
        fa = fn(ta, traj(ta))
    if fb is None:
        fb = fn(tb, traj(tb))
    if fa == 0:
        return ta, True
    if fa * fb > 0:
        return tb, False
    a, b = ta, tb
    for _ in range(200):
        if abs(b - a) <= tol:
            break
        m = 0.5 * (a + b)
        fm = fn(m, traj(m))
        if fm == 0:
            return m, True
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b) if abs(b - a) > 0 else b, True


def locate_events(traj: Trajectory, events: Sequence[Event], tol: float, forward=True):
    """All crossings of each event on the node grid, refined by bisection."""
    records = []
    for ev in events:
        vals = np.array([ev.fun(t, z) for t, z in zip(traj.t, traj.y)])
        idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
        for i in idx:
            if vals[i] == 0 and i > 0:
                continue
            d = 1 if vals[i + 1] > vals[i] else -1
            if ev.direction and d != ev.direction * (1 if forward else -1):
                continue
            te, ok = _bisect_event(traj, ev.fun, traj.t[i], traj.t[i + 1], tol,
                                   vals[i], vals[i + 1])
            records.append(EventRecord(ev.name, float(te), traj(te), d, ok))
    records.sort(key=lambda r: r.t if forward else -r.t)
    return records


def integrate(vectorfield, initial, t_span, config: IntegratorConfig = IntegratorConfig(),
              events: Sequence[Event] = (), stops: Stops | None = None, label=None,
              backend=None) -> tuple[Trajectory, list[EventRecord]]:
    """Adaptive Dormand-Prince 5(4) integration with dense output.

    ``vectorfield`` is a ``System`` (kernel-backed for polynomial drifts) or
    a callable ``f(t, y)``. ``t_span = (t0, t1)``; t1 < t0 integrates
    backward. Returns the trajectory (always stored with increasing time)
    and located event records in integration order. A built-in stop
    truncates the trajectory exactly at the located stop time.
    """
    t0, t1 = (float(v) for v in t_span)
    y0 = _as_array(initial)
    forward = t1 >= t0
    core = _backend.load(backend) if backend else _backend.core
    stops = stops or Stops(blowup=None)
    hmax = config.max_step if math.isfinite(config.max_step) else 1e300
    if isinstance(vectorfield, System):
        sysc = KINDS[vectorfield.kind]
        if y0.shape[0] != vectorfield.dim:
            raise ValueError(f"initial state must have dimension {vectorfield.dim}")
        tab = np.ascontiguousarray(stops.exit_table if stops.exit_table is not None else np.zeros(0))
        fld = vectorfield.field
        if fld.compiled:
            t, y, c, st, nfev = core.integrate(
                sysc, vectorfield.ncols, fld.terms, fld.deg, t0, np.ascontiguousarray(y0), t1,
                config.rtol, config.atol, hmax, 0.0, config.max_steps, stops.mask(),
                stops.params(), tab, int(vectorfield.renorm))
        else:
            t, y, c, st, nfev = _purecore.integrate(
                sysc, vectorfield.ncols, fld, 0, t0, y0, t1, config.rtol, config.atol, hmax,
                0.0, config.max_steps, stops.mask(), stops.params(), tab,
                int(vectorfield.renorm))
        kind = vectorfield.kind
        base = vectorfield.base
    else:
        # generic callables run the pure driver; terminal events cut afterwards
        fun = vectorfield
        t, y, c, st, nfev = _purecore.dp45(lambda tt, zz: np.asarray(fun(tt, zz), float),
                                           t0, y0, t1, config.rtol, config.atol, hmax, 0.0,
                                           config.max_steps, None)
        kind = "generic"
        base = y0.shape[0]
    status = STATUS.get(int(st), str(st))
    traj = Trajectory.from_kernel(t, y, c, status=status, label=label, kind=kind, nfev=nfev)
    if status in ("underflow", "nonfinite", "max_steps"):
        raise IntegrationError(f"integration failed: {status}", traj)
    stop_rec = None
    if status in ("exit", "return", "radius", "origin"):
        fn = stops.function(status, base)
        # the stop was detected on the last step
        ta, tb = (traj.t[-2], traj.t[-1]) if forward else (traj.t[1], traj.t[0])
        te, ok = _bisect_event(traj, lambda tt, zz: fn(zz), ta, tb, config.event_tol)
        stop_rec = EventRecord(status, float(te), traj(te), 1 if forward else -1, ok)
        traj = _cut(traj, te, forward)
    recs = locate_events(traj, events, config.event_tol, forward) if events else []
    term = [r for r in recs if any(e.terminal and e.name == r.name for e in events)]
    if term:
        te = term[0].t
        traj = _cut(traj, te, forward)
        traj.status = term[0].name
        recs = [r for r in recs if (r.t <= te if forward else r.t >= te)]
    if stop_rec is not None:
        recs.append(stop_rec)
    traj.events = recs
    return traj, recs


def _cut(traj: Trajectory, te: float, forward: bool) -> Trajectory:
    if forward:
        return traj.truncate(te)
    # backward integration: drop the part earlier than te
    rev = Trajectory(-traj.t[::-1], traj.y[::-1], _reversed_coefs(traj), status=traj.status,
                     label=traj.label, kind=traj.kind, nfev=traj.nfev)
    rev = rev.truncate(-te)
    return Trajectory(-rev.t[::-1], rev.y[::-1], _reversed_coefs(rev), status=traj.status,
                      label=traj.label, kind=traj.kind, nfev=traj.nfev)


def _reversed_coefs(traj: Trajectory) -> np.ndarray:
    n = traj.coef.shape[0]
    out = np.empty_like(traj.coef)
    for i in range(n):
        _, out[n - 1 - i] = _reverse_poly(traj.y[i], traj.coef[i])
    return out


def lift_system(field: DriftField, ncols: int = 0) -> System:
    return System(field, "lift", ncols)


def plane_system(field: DriftField, ncols: int = 0) -> System:
    return System(field, "plane", ncols)


def symmetry_map(z):
    """(x, y, p, q) -> (-x, -y, -p, -q), the odd-drift symmetry."""
    return -np.asarray(z, dtype=float)

"""Pure-Python twin of the compiled kernels.

Same function names, signatures and algorithms as ``_core``. Used when the
extension is unavailable or when ``MPEP_BACKEND=python`` is set. The
Dormand-Prince driver here also accepts arbitrary Python right-hand sides.
"""
from __future__ import annotations

import math

import numpy as np

BACKEND = "python"

ST_DONE, ST_EXIT, ST_RETURN, ST_BLOWUP, ST_RADIUS, ST_ORIGIN = 0, 1, 2, 4, 8, 16
ST_MAXSTEPS, ST_UNDERFLOW, ST_NONFINITE = -1, -2, -3

NFUN = 12
_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

# ---------------------------------------------------------------------------
# drift tables


class _Drift:
    def __init__(self, terms, deg):
        terms = np.asarray(terms, dtype=float)
        self.deg = int(deg)
        self.groups = [[] for _ in range(NFUN)]
        for fid, i, j, c in terms:
            fid = int(fid)
            if fid < 0 or fid >= NFUN:
                raise ValueError("bad term table")
            self.groups[fid].append((int(i), int(j), float(c)))

    def eval(self, x, y, nfun):
        xp = [1.0]
        yp = [1.0]
        for _ in range(self.deg):
            xp.append(xp[-1] * x)
            yp.append(yp[-1] * y)
        out = []
        for fid in range(nfun):
            acc = 0.0
            for i, j, c in self.groups[fid]:
                acc = acc + c * xp[i] * yp[j]
            out.append(acc)
        return out


def _lift_matrix(D, p, q):
    a11 = p * D[6] + q * D[9]
    a12 = p * D[7] + q * D[10]
    a22 = p * D[8] + q * D[11]
    return np.array([
        [D[2], D[3], 1.0, 0.0],
        [D[4], D[5], 0.0, 1.0],
        [-a11, -a12, -D[2], -D[4]],
        [-a12, -a22, -D[3], -D[5]],
    ])


def _state_dim(system, ncols):
    if system == 0:
        return 2 + 2 * ncols
    if system == 1:
        return 4 + 4 * ncols
    return 10


def _make_rhs(system, ncols, drift):
    """Right-hand side of a built-in system; ``drift`` needs ``eval(x, y, nfun)``."""
    if system == 0:
        def fun(z):
            D = drift.eval(z[0], z[1], 6 if ncols > 0 else 2)
            out = np.empty(2 + 2 * ncols)
            out[0], out[1] = D[0], D[1]
            if ncols:
                J = np.array([[D[2], D[3]], [D[4], D[5]]])
                out[2:] = (J @ z[2:].reshape(ncols, 2).T).T.ravel()
            return out
        return fun

    def fun(z):
        D = drift.eval(z[0], z[1], NFUN)
        out = np.empty(_state_dim(system, ncols))
        out[0] = D[0] + z[2]
        out[1] = D[1] + z[3]
        out[2] = -D[2] * z[2] - D[4] * z[3]
        out[3] = -D[3] * z[2] - D[5] * z[3]
        A = _lift_matrix(D, z[2], z[3])
        if system == 1:
            if ncols:
                out[4:] = (A @ z[4:].reshape(ncols, 4).T).T.ravel()
            return out
        R = np.zeros((4, 4))
        for a, (i, j) in enumerate(_PAIRS):
            R[i, j] = z[4 + a]
            R[j, i] = -z[4 + a]
        M = A @ R + R @ A.T
        for a, (i, j) in enumerate(_PAIRS):
            out[4 + a] = M[i, j]
        return out
    return fun


def rhs_eval(system, ncols, terms, deg, z):
    return _make_rhs(system, ncols, _Drift(terms, deg))(np.asarray(z, dtype=float))


# ---------------------------------------------------------------------------
# Gamma polar table


def _polar_r(tab, phi):
    m = tab.shape[0]
    u = (phi + math.pi) / (2.0 * math.pi) * m
    fl = np.floor(u)
    t = u - fl
    j = np.mod(fl.astype(np.int64) if isinstance(fl, np.ndarray) else int(fl), m)
    jm = (j - 1 + m) % m
    j1 = (j + 1) % m
    j2 = (j + 2) % m
    return (-t * (t - 1.0) * (t - 2.0) / 6.0 * tab[jm]
            + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * tab[j]
            - (t + 1.0) * t * (t - 2.0) / 2.0 * tab[j1]
            + (t + 1.0) * t * (t - 1.0) / 6.0 * tab[j2])


def polar_eval(tab, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.sqrt(x * x + y * y) - _polar_r(np.asarray(tab), np.arctan2(y, x))


def _cross_scalar(tab, x, y):
    return math.sqrt(x * x + y * y) - float(_polar_r(tab, math.atan2(y, x)))


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def dp45(fun, t0, y0, t1, rtol, atol, hmax, h0=0.0, max_steps=10**6,
         stop=None, post_step=None):
    """Adaptive Dormand-Prince driver for ``fun(t, y)``.

    ``stop(y_prev, y_new)`` returns a status code (0 = continue).
    ``post_step(y_new, k_last)`` may rescale parts of the state in place.
    Returns (t, y, coef, status, nfev) with the same dense-output layout as
    the compiled kernel.
    """
    y = np.array(y0, dtype=float)
    n = y.size
    direction = 1.0 if t1 >= t0 else -1.0
    ts = [t0]
    ys = [y.copy()]
    cs = []
    K = np.empty((7, n))
    K[0] = fun(t0, y)
    nfev = 1
    t = t0
    status = ST_DONE
    if t1 == t0:
        return np.array(ts), np.array(ys), np.empty((0, 4, n)), status, nfev
    if h0 > 0:
        h = h0
    else:
        sc = atol + rtol * np.abs(y)
        d0 = math.sqrt(np.sum((y / sc) ** 2) / n)
        d1 = math.sqrt(np.sum((K[0] / sc) ** 2) / n)
        h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        h = min(h, hmax)
        f1 = fun(t0 + direction * h, y + direction * h * K[0])
        nfev += 1
        d2 = math.sqrt(np.sum(((f1 - K[0]) / sc) ** 2) / n) / h
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
        h = min(100 * h, h1)
    h = min(h, hmax)
    nstep = 0
    while True:
        if nstep >= max_steps:
            status = ST_MAXSTEPS
            break
        h = min(h, abs(t1 - t))
        rejected = False
        while True:
            if h < 1e-14 * (abs(t) + 1.0):
                status = ST_UNDERFLOW
                break
            for s in range(1, 7):
                acc = np.zeros(n)
                for j, a in enumerate(_A[s]):
                    acc = acc + a * K[j]
                ytmp = y + direction * h * acc
                K[s] = fun(t + direction * h * _C[s], ytmp)
            ynew = ytmp
            nfev += 6
            err = direction * h * (_E @ K)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(ynew))
            en = math.sqrt(np.sum((err / scale) ** 2) / n)
            if en != en:
                en = 1e10
            if en <= 1.0:
                fac = 10.0 if en == 0.0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
                if rejected:
                    fac = min(fac, 1.0)
                break
            h = h * max(0.2, 0.9 * en ** -0.2)
            rejected = True
        if status == ST_UNDERFLOW:
            break
        tnew = t + direction * h
        if abs(t1 - tnew) < 1e-13 * (abs(t1) + 1.0):
            tnew = t1
        coef = direction * h * (_P.T @ K)
        st = stop(y, ynew) if stop is not None else ST_DONE
        ynew = ynew.copy()
        if post_step is not None:
            post_step(ynew, K[6])
        ts.append(tnew)
        ys.append(ynew.copy())
        cs.append(coef)
        nstep += 1
        t = tnew
        y = ynew
        K[0] = K[6]
        if st != ST_DONE:
            status = st
            break
        if t == t1:
            break
        h = min(h * fac, hmax)
    coefs = np.array(cs) if cs else np.empty((0, 4, n))
    return np.array(ts), np.array(ys), coefs, status, nfev


def _make_stop(mask, par, tab, base):
    par = list(par) + [0.0] * (5 - len(par))
    par[4] = max(par[4], par[0])
    armed = [False]

    def stop(zp, zn):
        if not np.all(np.isfinite(zn[:base])):
            return ST_NONFINITE
        if mask & ST_BLOWUP and np.any(np.abs(zn[:base]) > par[1]):
            return ST_BLOWUP
        rn = math.sqrt(zn[0] * zn[0] + zn[1] * zn[1])
        rp = math.sqrt(zp[0] * zp[0] + zp[1] * zp[1])
        if mask & ST_EXIT:
            cp = rp - float(_polar_r(tab, math.atan2(zp[1], zp[0])))
            cn = rn - float(_polar_r(tab, math.atan2(zn[1], zn[0])))
            if cp <= 0.0 and cn > 0.0:
                return ST_EXIT
        if mask & ST_RETURN:
            if armed[0] and rn < par[0]:
                return ST_RETURN
            if rn > par[4]:
                armed[0] = True
        if mask & ST_RADIUS and rp < par[2] <= rn:
            return ST_RADIUS
        if mask & ST_ORIGIN:
            dp = float(np.sum(zp[:base] ** 2))
            dn = float(np.sum(zn[:base] ** 2))
            if dp > par[3] ** 2 >= dn:
                return ST_ORIGIN
        return ST_DONE
    return stop


def _renorm(ynew, klast):
    nr = float(np.sqrt(np.sum(ynew[4:10] ** 2)))
    if nr < 1e-3 or nr > 1e3:
        ynew[4:10] /= nr
        klast[4:10] /= nr


def integrate(system, ncols, terms, deg, t0, y0, t1, rtol, atol, hmax, h0,
              max_steps, stop_mask, stop_par, polar_tab, renorm):
    n = _state_dim(system, ncols)
    y0 = np.asarray(y0, dtype=float)
    if y0.shape[0] != n:
        raise ValueError("initial state has wrong dimension")
    tab = np.asarray(polar_tab, dtype=float)
    if tab.size == 0 and stop_mask & ST_EXIT:
        raise ValueError("exit stop requires a polar table")
    rhs = _make_rhs(system, ncols, terms if hasattr(terms, "eval") else _Drift(terms, deg))

    def fun(t, z):
        return rhs(z)

    stop = _make_stop(stop_mask, stop_par, tab, 2 if system == 0 else 4)
    post = _renorm if (system == 2 and renorm) else None
    return dp45(fun, t0, y0, t1, rtol, atol, hmax, h0, max_steps, stop, post)


# ---------------------------------------------------------------------------
# counter-based RNG and ziggurat normals

_M64 = 0xFFFFFFFFFFFFFFFF
GOLD = 0x9E3779B97F4A7C15
GOLD2 = 0xD1B54A32D192ED03
ZIG_R = 3.442619855899
ZIG_V = 9.91256303526217e-3
_U53 = 1.0 / 9007199254740992.0


def zig_tables():
    """Ziggurat layer abscissae and ratios for 128 blocks."""
    zx = np.zeros(129)
    f = math.exp(-0.5 * ZIG_R * ZIG_R)
    zx[0] = ZIG_V / f
    zx[1] = ZIG_R
    for i in range(2, 128):
        zx[i] = math.sqrt(-2.0 * math.log(ZIG_V / zx[i - 1] + f))
        f = math.exp(-0.5 * zx[i] * zx[i])
    zx[128] = 0.0
    zr = zx[1:] / zx[:-1]
    return zx, zr


ZX, ZR = zig_tables()


def _set_tables(zx, zr):
    pass


def mix64(z):
    """splitmix64 finalizer on Python ints or uint64 arrays."""
    if isinstance(z, np.ndarray):
        z = z.astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
    z &= _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def path_key(seed, pid):
    if isinstance(pid, np.ndarray):
        a = np.uint64(mix64((int(seed) + GOLD) & _M64))
        with np.errstate(over="ignore"):
            return mix64(a + (pid.astype(np.uint64) + np.uint64(1)) * np.uint64(GOLD2))
    return mix64((mix64((int(seed) + GOLD) & _M64) + (int(pid) + 1) * GOLD2) & _M64)


class _Streams:
    """Vectorized per-path draw counters."""

    def __init__(self, keys):
        self.keys = keys
        self.ctr = np.zeros(keys.shape[0], dtype=np.uint64)

    def draw(self, idx):
        with np.errstate(over="ignore"):
            v = mix64(self.keys[idx] + (self.ctr[idx] + np.uint64(1)) * np.uint64(GOLD))
        self.ctr[idx] += np.uint64(1)
        return v


def _unit(v):
    return (v >> np.uint64(11)).astype(np.float64) * _U53


def _unit_pos(v):
    return ((v >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U53


def _znorm(streams, idx):
    out = np.empty(idx.shape[0])
    pending = np.arange(idx.shape[0])
    while pending.size:
        sub = idx[pending]
        v = streams.draw(sub)
        i = (v & np.uint64(0x7F)).astype(np.int64)
        u = 2.0 * _unit(v) - 1.0
        fast = np.abs(u) < ZR[i]
        out[pending[fast]] = u[fast] * ZX[i[fast]]
        slow = np.nonzero(~fast)[0]
        keep = []
        for k in slow:
            # slow paths are rare; handle them one at a time with libm
            p = pending[k]
            s = sub[k : k + 1]
            ik = int(i[k])
            uk = float(u[k])
            if ik == 0:
                while True:
                    x = math.log(float(_unit_pos(streams.draw(s))[0])) / ZIG_R
                    yy = math.log(float(_unit_pos(streams.draw(s))[0]))
                    if not (-2.0 * yy < x * x):
                        break
                out[p] = x - ZIG_R if uk < 0 else ZIG_R - x
                continue
            x = uk * ZX[ik]
            f0 = math.exp(-0.5 * (ZX[ik] * ZX[ik] - x * x))
            f1 = math.exp(-0.5 * (ZX[ik + 1] * ZX[ik + 1] - x * x))
            if f1 + float(_unit(streams.draw(s))[0]) * (f0 - f1) < 1.0:
                out[p] = x
            else:
                keep.append(p)
        pending = np.array(keep, dtype=np.int64)
    return out


def normals(seed, pid, n):
    st = _Streams(np.array([path_key(seed, pid)], dtype=np.uint64))
    idx = np.zeros(1, dtype=np.int64)
    return np.array([_znorm(st, idx)[0] for _ in range(n)])


# ---------------------------------------------------------------------------
# Euler-Maruyama


def _drift2(drift, x, y):
    return drift.eval(x, y, 2)


def em_ensemble(terms, deg, x0, y0, amp, dt, nsteps, seed, pid0, npaths,
                polar_tab, rin, rout, blowup):
    drift = _Drift(terms, deg)
    tab = np.asarray(polar_tab, dtype=float)
    check = tab.size > 0
    pids = np.arange(pid0, pid0 + npaths, dtype=np.int64)
    streams = _Streams(path_key(seed, pids))
    status = np.zeros(npaths, dtype=np.int8)
    nexit = np.full(npaths, nsteps, dtype=np.int64)
    lam = np.zeros(npaths)
    x = np.full(npaths, float(x0))
    y = np.full(npaths, float(y0))
    xp = x.copy()
    yp = y.copy()
    xq = x.copy()
    yq = y.copy()
    active = np.arange(npaths)
    for n in range(nsteps):
        if active.size == 0:
            break
        xa = x[active]
        ya = y[active]
        f, g = _drift2(drift, xa, ya)
        # draws alternate x then y per step, as in the compiled loop
        n1 = _znorm(streams, active)
        n2 = _znorm(streams, active)
        xn = xa + f * dt + amp * n1
        yn = ya + g * dt + amp * n2
        blow = ~((np.abs(xn) <= blowup) & (np.abs(yn) <= blowup))
        done = blow.copy()
        hit = np.zeros_like(blow)
        if check:
            r2 = xn * xn + yn * yn
            cand = (~blow) & (r2 >= rin * rin)
            if np.any(cand):
                c1 = polar_eval(tab, xn[cand], yn[cand])
                hit[cand] = (r2[cand] > rout * rout) | (c1 > 0.0)
            done |= hit
        if np.any(done):
            ids = active[done]
            status[ids] = np.where(blow[done], 2, 1)
            nexit[ids] = n
            xp[ids] = xa[done]
            yp[ids] = ya[done]
            xq[ids] = xn[done]
            yq[ids] = yn[done]
            hid = active[hit]
            if hid.size:
                c0 = polar_eval(tab, xa[hit], ya[hit])
                c1 = polar_eval(tab, xn[hit], yn[hit])
                den = c0 - c1
                lam[hid] = np.where(den != 0, c0 / np.where(den != 0, den, 1.0), 1.0)
        keep = ~done
        x[active[keep]] = xn[keep]
        y[active[keep]] = yn[keep]
        active = active[keep]
    if active.size:
        xp[active] = x[active]
        yp[active] = y[active]
        xq[active] = x[active]
        yq[active] = y[active]
    return status, nexit, lam, xp, yp, xq, yq


def em_history(terms, deg, x0, y0, amp, dt, nsteps, seed, pid, polar_tab,
               rin, rout, blowup):
    drift = _Drift(terms, deg)
    tab = np.asarray(polar_tab, dtype=float)
    check = tab.size > 0
    streams = _Streams(np.array([path_key(seed, pid)], dtype=np.uint64))
    idx = np.zeros(1, dtype=np.int64)
    out = [(float(x0), float(y0))]
    x, y = float(x0), float(y0)
    for _ in range(nsteps):
        f, g = drift.eval(x, y, 2)
        xn = x + f * dt + amp * float(_znorm(streams, idx)[0])
        yn = y + g * dt + amp * float(_znorm(streams, idx)[0])
        out.append((xn, yn))
        if not (abs(xn) <= blowup and abs(yn) <= blowup):
            break
        if check:
            r2 = xn * xn + yn * yn
            if r2 >= rin * rin and (r2 > rout * rout or _cross_scalar(tab, xn, yn) > 0.0):
                break
        x, y = xn, yn
    return np.array(out)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: polynomial drift evaluation, Dormand-Prince 5(4) with
dense output and built-in stop conditions, and the Euler-Maruyama ensemble.

The pure-Python twin lives in ``_purecore``; both expose the same functions
and produce the same numbers up to floating-point summation order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, exp, log, atan2, floor, isfinite, M_PI
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport uint64_t, int64_t
from libc.string cimport memcpy

cnp.import_array()

BACKEND = "compiled"

cdef enum:
    NFUN = 12
    MAXDEG = 16
    MAXDIM = 64

# --------------------------------------------------------------------------
# drift tables

cdef struct Drift:
    int deg
    int off[NFUN + 1]
    int* ti
    int* tj
    double* tc


cdef int drift_init(Drift* d, double[:, ::1] terms, int deg) except -1:
    cdef Py_ssize_t n = terms.shape[0], k
    cdef int fid
    if deg >= MAXDEG:
        raise ValueError("polynomial degree too large")
    d.deg = deg
    d.ti = <int*> malloc((n + 1) * sizeof(int))
    d.tj = <int*> malloc((n + 1) * sizeof(int))
    d.tc = <double*> malloc((n + 1) * sizeof(double))
    for fid in range(NFUN + 1):
        d.off[fid] = 0
    for k in range(n):
        fid = <int> terms[k, 0]
        if fid < 0 or fid >= NFUN:
            raise ValueError("bad term table")
        d.off[fid + 1] += 1
    for fid in range(NFUN):
        d.off[fid + 1] += d.off[fid]
    # terms are required to be sorted by function id
    for k in range(n):
        d.ti[k] = <int> terms[k, 1]
        d.tj[k] = <int> terms[k, 2]
        d.tc[k] = terms[k, 3]
    return 0


cdef void drift_free(Drift* d) noexcept nogil:
    free(d.ti)
    free(d.tj)
    free(d.tc)


cdef inline void drift_eval(Drift* d, double x, double y, double* out, int nfun) noexcept nogil:
    cdef double xp[MAXDEG]
    cdef double yp[MAXDEG]
    cdef int k, fid
    cdef double acc
    xp[0] = 1.0
    yp[0] = 1.0
    for k in range(1, d.deg + 1):
        xp[k] = xp[k - 1] * x
        yp[k] = yp[k - 1] * y
    for fid in range(nfun):
        acc = 0.0
        for k in range(d.off[fid], d.off[fid + 1]):
            acc = acc + d.tc[k] * xp[d.ti[k]] * yp[d.tj[k]]
        out[fid] = acc


# --------------------------------------------------------------------------
# right-hand sides

cdef inline void lift_matrix(double* D, double p, double q, double* A) noexcept nogil:
    # D = (f, g, fx, fy, gx, gy, fxx, fxy, fyy, gxx, gxy, gyy)
    cdef double a11 = p * D[6] + q * D[9]
    cdef double a12 = p * D[7] + q * D[10]
    cdef double a22 = p * D[8] + q * D[11]
    A[0] = D[2];  A[1] = D[3];  A[2] = 1.0;   A[3] = 0.0
    A[4] = D[4];  A[5] = D[5];  A[6] = 0.0;   A[7] = 1.0
    A[8] = -a11;  A[9] = -a12;  A[10] = -D[2]; A[11] = -D[4]
    A[12] = -a12; A[13] = -a22; A[14] = -D[3]; A[15] = -D[5]


cdef int PI_[6]
cdef int PJ_[6]
PI_[:] = [0, 0, 0, 1, 1, 2]
PJ_[:] = [1, 2, 3, 2, 3, 3]


cdef void rhs(int system, int ncols, Drift* d, double* z, double* out) noexcept nogil:
    cdef double D[NFUN]
    cdef double A[16]
    cdef double R[16]
    cdef int c, i, j, k, a
    cdef double s
    if system == 0:
        drift_eval(d, z[0], z[1], D, 6 if ncols > 0 else 2)
        out[0] = D[0]
        out[1] = D[1]
        for c in range(ncols):
            out[2 + 2 * c] = D[2] * z[2 + 2 * c] + D[3] * z[3 + 2 * c]
            out[3 + 2 * c] = D[4] * z[2 + 2 * c] + D[5] * z[3 + 2 * c]
        return
    drift_eval(d, z[0], z[1], D, NFUN)
    out[0] = D[0] + z[2]
    out[1] = D[1] + z[3]
    out[2] = -D[2] * z[2] - D[4] * z[3]
    out[3] = -D[3] * z[2] - D[5] * z[3]
    lift_matrix(D, z[2], z[3], A)
    if system == 1:
        for c in range(ncols):
            for i in range(4):
                s = 0.0
                for k in range(4):
                    s = s + A[4 * i + k] * z[4 + 4 * c + k]
                out[4 + 4 * c + i] = s
        return
    # Plucker: rho_ij' = sum_k A_ik rho_kj + A_jk rho_ik
    for i in range(16):
        R[i] = 0.0
    for a in range(6):
        i = PI_[a]
        j = PJ_[a]
        R[4 * i + j] = z[4 + a]
        R[4 * j + i] = -z[4 + a]
    for a in range(6):
        i = PI_[a]
        j = PJ_[a]
        s = 0.0
        for k in range(4):
            s = s + A[4 * i + k] * R[4 * k + j] + A[4 * j + k] * R[4 * i + k]
        out[4 + a] = s


# --------------------------------------------------------------------------
# Gamma polar table

cdef inline double polar_r(double* tab, int m, double phi) noexcept nogil:
    cdef double u = (phi + M_PI) / (2.0 * M_PI) * m
    cdef double fl = floor(u)
    cdef double t = u - fl
    cdef int j = <int> fl
    cdef int jm, j1, j2
    j = ((j % m) + m) % m
    jm = (j - 1 + m) % m
    j1 = (j + 1) % m
    j2 = (j + 2) % m
    return (-t * (t - 1.0) * (t - 2.0) / 6.0 * tab[jm]
            + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * tab[j]
            - (t + 1.0) * t * (t - 2.0) / 2.0 * tab[j1]
            + (t + 1.0) * t * (t - 1.0) / 6.0 * tab[j2])


def polar_eval(double[::1] tab, double[::1] x, double[::1] y):
    """Signed crossing function r - r_Gamma(phi) at the given points."""
    cdef Py_ssize_t n = x.shape[0], k
    cdef int m = tab.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for k in range(n):
        o[k] = sqrt(x[k] * x[k] + y[k] * y[k]) - polar_r(&tab[0], m, atan2(y[k], x[k]))
    return out


# --------------------------------------------------------------------------
# Dormand-Prince 5(4)

cdef double C_[7]
cdef double A_[7][6]
cdef double B_[7]
cdef double E_[7]
cdef double P_[7][4]

C_[:] = [0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0]
A_[1][:] = [1.0 / 5, 0, 0, 0, 0, 0]
A_[2][:] = [3.0 / 40, 9.0 / 40, 0, 0, 0, 0]
A_[3][:] = [44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0]
A_[4][:] = [19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0]
A_[5][:] = [9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0]
A_[6][:] = [35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84]
B_[:] = [35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0]
E_[:] = [71.0 / 57600, 0, -71.0 / 16695, 71.0 / 1920, -17253.0 / 339200, 22.0 / 525, -1.0 / 40]
P_[0][:] = [1.0, -8048581381.0 / 2820520608, 8663915743.0 / 2820520608, -12715105075.0 / 11282082432]
P_[1][:] = [0.0, 0.0, 0.0, 0.0]
P_[2][:] = [0.0, 131558114200.0 / 32700410799, -68118460800.0 / 10900136933, 87487479700.0 / 32700410799]
P_[3][:] = [0.0, -1754552775.0 / 470086768, 14199869525.0 / 1410260304, -10690763975.0 / 1880347072]
P_[4][:] = [0.0, 127303824393.0 / 49829197408, -318862633887.0 / 49829197408, 701980252875.0 / 199316789632]
P_[5][:] = [0.0, -282668133.0 / 205662961, 2019193451.0 / 616988883, -1453857185.0 / 822651844]
P_[6][:] = [0.0, 40617522.0 / 29380423, -110615467.0 / 29380423, 69997945.0 / 29380423]

# status codes shared with the Python side
cdef enum:
    ST_DONE = 0
    ST_EXIT = 1
    ST_RETURN = 2
    ST_BLOWUP = 4
    ST_RADIUS = 8
    ST_ORIGIN = 16
    ST_MAXSTEPS = -1
    ST_UNDERFLOW = -2
    ST_NONFINITE = -3


cdef struct Buf:
    Py_ssize_t cap
    Py_ssize_t n
    int dim
    double* t
    double* y
    double* c


cdef int buf_push(Buf* b, double t, double* y, double* c) noexcept nogil:
    cdef Py_ssize_t newcap
    if b.n == b.cap:
        newcap = b.cap * 2
        b.t = <double*> realloc(b.t, newcap * sizeof(double))
        b.y = <double*> realloc(b.y, newcap * b.dim * sizeof(double))
        b.c = <double*> realloc(b.c, newcap * 4 * b.dim * sizeof(double))
        if b.t == NULL or b.y == NULL or b.c == NULL:
            return -1
        b.cap = newcap
    b.t[b.n] = t
    memcpy(&b.y[b.n * b.dim], y, b.dim * sizeof(double))
    if c != NULL:
        memcpy(&b.c[b.n * 4 * b.dim], c, 4 * b.dim * sizeof(double))
    b.n += 1
    return 0


cdef inline double err_norm(double* err, double* y0, double* y1, int n, double rtol, double atol) noexcept nogil:
    cdef double s = 0.0, sc, e
    cdef int i
    for i in range(n):
        sc = atol + rtol * (fabs(y0[i]) if fabs(y0[i]) > fabs(y1[i]) else fabs(y1[i]))
        e = err[i] / sc
        s = s + e * e
    return sqrt(s / n)


cdef inline int stop_check(int mask, double* par, double* tab, int m, int base,
                           double* zp, double* zn, int* armed) noexcept nogil:
    # par = (r_return, blowup, r_target, d_origin, r_arm)
    cdef double rp, rn, cp, cn, dp, dn
    cdef int i
    for i in range(base):
        if not isfinite(zn[i]):
            return ST_NONFINITE
    if mask & ST_BLOWUP:
        for i in range(base):
            if fabs(zn[i]) > par[1]:
                return ST_BLOWUP
    rn = sqrt(zn[0] * zn[0] + zn[1] * zn[1])
    rp = sqrt(zp[0] * zp[0] + zp[1] * zp[1])
    if mask & ST_EXIT:
        cp = rp - polar_r(tab, m, atan2(zp[1], zp[0]))
        cn = rn - polar_r(tab, m, atan2(zn[1], zn[0]))
        if cp <= 0.0 and cn > 0.0:
            return ST_EXIT
    if mask & ST_RETURN:
        if armed[0] and rn < par[0]:
            return ST_RETURN
        if rn > par[4]:
            armed[0] = 1
    if mask & ST_RADIUS:
        if rp < par[2] and rn >= par[2]:
            return ST_RADIUS
    if mask & ST_ORIGIN:
        dp = 0.0
        dn = 0.0
        for i in range(base):
            dp = dp + zp[i] * zp[i]
            dn = dn + zn[i] * zn[i]
        if dp > par[3] * par[3] and dn <= par[3] * par[3]:
            return ST_ORIGIN
    return ST_DONE


cdef int state_dim(int system, int ncols):
    if system == 0:
        return 2 + 2 * ncols
    if system == 1:
        return 4 + 4 * ncols
    return 10


def integrate(int system, int ncols, double[:, ::1] terms, int deg,
              double t0, double[::1] y0, double t1,
              double rtol, double atol, double hmax, double h0,
              long max_steps, int stop_mask, double[::1] stop_par,
              double[::1] polar_tab, int renorm):
    """Integrate one of the built-in systems.

    system: 0 planar drift (+ ncols tangent columns), 1 lift (+ ncols columns),
    2 lift with a Plucker 6-vector. Returns (t, y, coef, status, nfev) where
    the dense output on step i is y_i + sum_k coef[i, k] * s**(k+1), s in [0,1].
    """
    cdef int n = state_dim(system, ncols)
    cdef int base = 2 if system == 0 else 4
    cdef Drift d
    cdef Buf b
    cdef double K[7][MAXDIM]
    cdef double ytmp[MAXDIM]
    cdef double ynew[MAXDIM]
    cdef double yc[MAXDIM]
    cdef double errv[MAXDIM]
    cdef double cf[4 * MAXDIM]
    cdef double t = t0, h, hab, tnew, en, fac, d0, d1, d2, h1, sc, nr
    cdef double direction = 1.0 if t1 >= t0 else -1.0
    cdef long nstep = 0
    cdef long nfev = 0
    cdef int i, s, j, k, status = ST_DONE, armed = 0, st
    cdef double* tab = NULL
    cdef int m = polar_tab.shape[0]
    cdef double par[5]
    cdef bint rejected
    if n > MAXDIM:
        raise ValueError("state dimension too large")
    if y0.shape[0] != n:
        raise ValueError("initial state has wrong dimension")
    if m > 0:
        tab = &polar_tab[0]
    elif stop_mask & ST_EXIT:
        raise ValueError("exit stop requires a polar table")
    for i in range(5):
        par[i] = stop_par[i] if i < stop_par.shape[0] else 0.0
    if par[4] < par[0]:
        par[4] = par[0]
    drift_init(&d, terms, deg)
    b.cap = 256
    b.n = 0
    b.dim = n
    b.t = <double*> malloc(b.cap * sizeof(double))
    b.y = <double*> malloc(b.cap * n * sizeof(double))
    b.c = <double*> malloc(b.cap * 4 * n * sizeof(double))
    for i in range(n):
        yc[i] = y0[i]
    with nogil:
        buf_push(&b, t, yc, NULL)
        rhs(system, ncols, &d, yc, K[0])
        nfev += 1
        if t1 == t0:
            status = ST_DONE
        else:
            if h0 > 0:
                h = h0
            else:
                d0 = 0.0
                d1 = 0.0
                for i in range(n):
                    sc = atol + rtol * fabs(yc[i])
                    d0 = d0 + (yc[i] / sc) ** 2
                    d1 = d1 + (K[0][i] / sc) ** 2
                d0 = sqrt(d0 / n)
                d1 = sqrt(d1 / n)
                h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
                if h > hmax:
                    h = hmax
                for i in range(n):
                    ytmp[i] = yc[i] + direction * h * K[0][i]
                rhs(system, ncols, &d, ytmp, K[1])
                nfev += 1
                d2 = 0.0
                for i in range(n):
                    sc = atol + rtol * fabs(yc[i])
                    d2 = d2 + ((K[1][i] - K[0][i]) / sc) ** 2
                d2 = sqrt(d2 / n) / h
                if d1 <= 1e-15 and d2 <= 1e-15:
                    h1 = h * 1e-3 if h * 1e-3 > 1e-6 else 1e-6
                else:
                    h1 = (0.01 / (d1 if d1 > d2 else d2)) ** 0.2
                h = 100 * h if 100 * h < h1 else h1
            if h > hmax:
                h = hmax
            while True:
                if nstep >= max_steps:
                    status = ST_MAXSTEPS
                    break
                hab = fabs(t1 - t)
                if h > hab:
                    h = hab
                rejected = False
                while True:
                    if h < 1e-14 * (fabs(t) + 1.0):
                        status = ST_UNDERFLOW
                        break
                    for s in range(1, 7):
                        for i in range(n):
                            sc = 0.0
                            for j in range(s):
                                sc = sc + A_[s][j] * K[j][i]
                            ytmp[i] = yc[i] + direction * h * sc
                        rhs(system, ncols, &d, ytmp, K[s])
                    # stage 6 evaluated at the 5th-order solution gives FSAL
                    for i in range(n):
                        ynew[i] = ytmp[i]
                    nfev += 6
                    for i in range(n):
                        sc = 0.0
                        for j in range(7):
                            sc = sc + E_[j] * K[j][i]
                        errv[i] = direction * h * sc
                    en = err_norm(errv, yc, ynew, n, rtol, atol)
                    if en != en:
                        en = 1e10
                    if en <= 1.0:
                        if en == 0.0:
                            fac = 10.0
                        else:
                            fac = 0.9 * en ** -0.2
                            if fac > 10.0:
                                fac = 10.0
                            if fac < 0.2:
                                fac = 0.2
                        if rejected and fac > 1.0:
                            fac = 1.0
                        break
                    fac = 0.9 * en ** -0.2
                    if fac < 0.2:
                        fac = 0.2
                    h = h * fac
                    rejected = True
                if status == ST_UNDERFLOW:
                    break
                tnew = t + direction * h
                if fabs(t1 - tnew) < 1e-13 * (fabs(t1) + 1.0):
                    tnew = t1
                for k in range(4):
                    for i in range(n):
                        sc = 0.0
                        for j in range(7):
                            sc = sc + K[j][i] * P_[j][k]
                        cf[k * n + i] = direction * h * sc
                st = stop_check(stop_mask, par, tab, m, base, yc, ynew, &armed)
                if system == 2 and renorm:
                    nr = 0.0
                    for i in range(4, 10):
                        nr = nr + ynew[i] * ynew[i]
                    nr = sqrt(nr)
                    if nr < 1e-3 or nr > 1e3:
                        for i in range(4, 10):
                            ynew[i] = ynew[i] / nr
                            K[6][i] = K[6][i] / nr
                if buf_push(&b, tnew, ynew, cf) != 0:
                    status = ST_NONFINITE
                    break
                nstep += 1
                t = tnew
                for i in range(n):
                    yc[i] = ynew[i]
                    K[0][i] = K[6][i]
                if st != ST_DONE:
                    status = st
                    break
                if t == t1:
                    status = ST_DONE
                    break
                h = h * fac
                if h > hmax:
                    h = hmax
    drift_free(&d)
    ts = np.empty(b.n)
    ys = np.empty((b.n, n))
    cs = np.empty((max(b.n - 1, 0), 4, n))
    cdef double[::1] tv = ts
    cdef double[:, ::1] yv = ys
    cdef double[:, :, ::1] cv = cs
    for k in range(b.n):
        tv[k] = b.t[k]
        for i in range(n):
            yv[k, i] = b.y[k * n + i]
    for k in range(b.n - 1):
        for j in range(4):
            for i in range(n):
                cv[k, j, i] = b.c[(k + 1) * 4 * n + j * n + i]
    free(b.t)
    free(b.y)
    free(b.c)
    return ts, ys, cs, status, nfev


def rhs_eval(int system, int ncols, double[:, ::1] terms, int deg, double[::1] z):
    """Evaluate a built-in right-hand side once (used by tests)."""
    cdef Drift d
    cdef int n = state_dim(system, ncols)
    cdef double out[MAXDIM]
    cdef int i
    drift_init(&d, terms, deg)
    rhs(system, ncols, &d, &z[0], out)
    drift_free(&d)
    return np.array([out[i] for i in range(n)])


# --------------------------------------------------------------------------
# counter-based RNG and ziggurat normals

cdef double ZX[129]
cdef double ZR[128]
cdef double ZIG_R = 3.442619855899
cdef uint64_t GOLD = 0x9E3779B97F4A7C15ULL
cdef uint64_t GOLD2 = 0xD1B54A32D192ED03ULL


def _set_tables(double[::1] zx, double[::1] zr):
    cdef int i
    for i in range(129):
        ZX[i] = zx[i]
    for i in range(128):
        ZR[i] = zr[i]


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t path_key(uint64_t seed, uint64_t pid) noexcept nogil:
    return mix64(mix64(seed + GOLD) + (pid + 1) * GOLD2)


cdef inline uint64_t draw(uint64_t key, uint64_t* ctr) noexcept nogil:
    cdef uint64_t v = mix64(key + (ctr[0] + 1) * GOLD)
    ctr[0] += 1
    return v


cdef inline double unit(uint64_t v) noexcept nogil:
    return <double> (v >> 11) * (1.0 / 9007199254740992.0)


cdef inline double unit_pos(uint64_t v) noexcept nogil:
    return <double> ((v >> 11) + 1) * (1.0 / 9007199254740992.0)


cdef double znorm(uint64_t key, uint64_t* ctr) noexcept nogil:
    cdef uint64_t v
    cdef int i
    cdef double u, x, yy, f0, f1
    while True:
        v = draw(key, ctr)
        i = <int> (v & 0x7F)
        u = 2.0 * unit(v) - 1.0
        if fabs(u) < ZR[i]:
            return u * ZX[i]
        if i == 0:
            while True:
                x = log(unit_pos(draw(key, ctr))) / ZIG_R
                yy = log(unit_pos(draw(key, ctr)))
                if not (-2.0 * yy < x * x):
                    break
            return x - ZIG_R if u < 0 else ZIG_R - x
        x = u * ZX[i]
        f0 = exp(-0.5 * (ZX[i] * ZX[i] - x * x))
        f1 = exp(-0.5 * (ZX[i + 1] * ZX[i + 1] - x * x))
        if f1 + unit(draw(key, ctr)) * (f0 - f1) < 1.0:
            return x


def normals(unsigned long long seed, long long pid, long n):
    """First n standard normals of the stream of path ``pid``."""
    out = np.empty(n)
    cdef double[::1] o = out
    cdef uint64_t key = path_key(seed, pid)
    cdef uint64_t ctr = 0
    cdef long k
    for k in range(n):
        o[k] = znorm(key, &ctr)
    return out


# --------------------------------------------------------------------------
# Euler-Maruyama

cdef inline double cross_fn(double* tab, int m, double x, double y) noexcept nogil:
    return sqrt(x * x + y * y) - polar_r(tab, m, atan2(y, x))


def em_ensemble(double[:, ::1] terms, int deg, double x0, double y0,
                double amp, double dt, long nsteps,
                unsigned long long seed, long long pid0, long npaths,
                double[::1] polar_tab, double rin, double rout, double blowup):
    """Simulate paths pid0..pid0+npaths-1 until the first outward crossing.

    amp = sqrt(eps) * sqrt(dt). With an empty polar table no crossing test is
    made and the paths run for nsteps. Returns (status, nexit, lam, xprev,
    yprev, xnew, ynew): status 0 none, 1 crossed, 2 blow-up; the crossing lies
    at fraction lam of step nexit between (xprev, yprev) and (xnew, ynew).
    """
    cdef Drift d
    cdef int m = polar_tab.shape[0]
    cdef double* tab = NULL
    cdef long ip, n
    cdef uint64_t key, ctr
    cdef double x, y, xn, yn, r2, rin2 = rin * rin, rout2 = rout * rout, c0, c1
    cdef double D[2]
    cdef bint crossed, check = m > 0
    status = np.zeros(npaths, dtype=np.int8)
    nexit = np.full(npaths, nsteps, dtype=np.int64)
    lam = np.zeros(npaths)
    xp = np.empty(npaths)
    yp = np.empty(npaths)
    xq = np.empty(npaths)
    yq = np.empty(npaths)
    cdef signed char[::1] sv = status
    cdef int64_t[::1] nv = nexit
    cdef double[::1] lv = lam, xpv = xp, ypv = yp, xqv = xq, yqv = yq
    if check:
        tab = &polar_tab[0]
    drift_init(&d, terms, deg)
    with nogil:
        for ip in range(npaths):
            key = path_key(seed, <uint64_t> (pid0 + ip))
            ctr = 0
            x = x0
            y = y0
            xn = x
            yn = y
            for n in range(nsteps):
                drift_eval(&d, x, y, D, 2)
                xn = x + D[0] * dt + amp * znorm(key, &ctr)
                yn = y + D[1] * dt + amp * znorm(key, &ctr)
                if not (fabs(xn) <= blowup and fabs(yn) <= blowup):
                    sv[ip] = 2
                    nv[ip] = n
                    break
                if check:
                    r2 = xn * xn + yn * yn
                    if r2 >= rin2:
                        crossed = r2 > rout2 or cross_fn(tab, m, xn, yn) > 0.0
                        if crossed:
                            c0 = cross_fn(tab, m, x, y)
                            c1 = cross_fn(tab, m, xn, yn)
                            sv[ip] = 1
                            nv[ip] = n
                            lv[ip] = c0 / (c0 - c1) if c1 != c0 else 1.0
                            break
                x = xn
                y = yn
            xpv[ip] = x
            ypv[ip] = y
            xqv[ip] = xn
            yqv[ip] = yn
    drift_free(&d)
    return status, nexit, lam, xp, yp, xq, yq


def em_history(double[:, ::1] terms, int deg, double x0, double y0,
               double amp, double dt, long nsteps,
               unsigned long long seed, long long pid,
               double[::1] polar_tab, double rin, double rout, double blowup):
    """Replay one path and return its states up to and including the crossing step."""
    cdef Drift d
    cdef int m = polar_tab.shape[0]
    cdef double* tab = NULL
    cdef long n, last = nsteps
    cdef uint64_t key = path_key(seed, <uint64_t> pid)
    cdef uint64_t ctr = 0
    cdef double x = x0, y = y0, xn, yn, r2
    cdef double D[2]
    cdef bint check = m > 0
    out = np.empty((nsteps + 1, 2))
    cdef double[:, ::1] o = out
    if check:
        tab = &polar_tab[0]
    drift_init(&d, terms, deg)
    o[0, 0] = x
    o[0, 1] = y
    with nogil:
        for n in range(nsteps):
            drift_eval(&d, x, y, D, 2)
            xn = x + D[0] * dt + amp * znorm(key, &ctr)
            yn = y + D[1] * dt + amp * znorm(key, &ctr)
            o[n + 1, 0] = xn
            o[n + 1, 1] = yn
            if not (fabs(xn) <= blowup and fabs(yn) <= blowup):
                last = n + 1
                break
            if check:
                r2 = xn * xn + yn * yn
                if r2 >= rin * rin and (r2 > rout * rout or cross_fn(tab, m, xn, yn) > 0.0):
                    last = n + 1
                    break
            x = xn
            y = yn
    drift_free(&d)
    return out[:last + 1].copy()

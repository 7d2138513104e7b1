"""Compiled numerical kernels.

Everything in here is written for numba and works on plain arrays and
tuples.  The public modules wrap these kernels in dataclasses.

Metric tuple layout ``M = (kind, fp, pp, cheb2, cheb1, coarse)``:

* ``kind``: 0 conformal (round / bumped round), 1 ellipsoid, 2 patched.
* ``fp``: base parameters.  Conformal: ``[R, nb, (cx, cy, cz, rho, amp) * nb]``;
  ellipsoid: ``[a, b, c]``.
* ``pp``: patch parameters (see ``_P_*`` indices), dummy otherwise.
* ``cheb2``: (6, nt, ns) Chebyshev tables of the Fermi map and its partials.
* ``cheb1``: (2, n1) Chebyshev tables of f1 and K along the window.
* ``coarse``: (nc, 4) table of (t, s, u, v) used to seed Newton inversion.

State vector (length 9): ``u, v, du, dv, f1, f1', f2, f2', I`` where
``(f1, f2)`` is the fundamental Jacobi pair and ``I = int ds / f1^2`` is
only integrated on request.
"""

import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

R_DOM = 2.0
R_SWITCH = 1.6

CONFORMAL = 0
ELLIPSOID = 1
PATCHED = 2

NSTATE = 9

# patch parameter indices
_P_BASE = 0
_P_CHART = 1
_P_TLO = 2
_P_THI = 3
_P_SDOM = 4
_P_TA = 5
_P_TB = 6
_P_SMAX = 7
_P_AMP = 8
_P_UMIN = 9
_P_UMAX = 10
_P_VMIN = 11
_P_VMAX = 12
_P_FD = 13
_P_LEN = 14

_NS = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[:_NS])
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)


# ----------------------------------------------------------------------------
# atlas
# ----------------------------------------------------------------------------

@njit(cache=True)
def chart_sign(chart):
    return 1.0 if chart == 0 else -1.0


@njit(cache=True)
def to_sphere(chart, u, v):
    P = 1.0 / (1.0 + u * u + v * v)
    out = np.empty(3)
    out[0] = 2.0 * u * P
    out[1] = 2.0 * v * P
    out[2] = chart_sign(chart) * (2.0 * P - 1.0)
    return out


@njit(cache=True)
def from_sphere(chart, x, y, z):
    d = 1.0 + chart_sign(chart) * z
    return x / d, y / d


@njit(cache=True)
def flip_chart(u, v, du, dv):
    """Transition w -> w/|w|^2 applied to a point and a tangent vector."""
    r2 = u * u + v * v
    r4 = r2 * r2
    j00 = (r2 - 2.0 * u * u) / r4
    j01 = -2.0 * u * v / r4
    j11 = (r2 - 2.0 * v * v) / r4
    return u / r2, v / r2, j00 * du + j01 * dv, j01 * du + j11 * dv


@njit(cache=True)
def flip_jacobian(u, v):
    r2 = u * u + v * v
    r4 = r2 * r2
    J = np.empty((2, 2))
    J[0, 0] = (r2 - 2.0 * u * u) / r4
    J[0, 1] = -2.0 * u * v / r4
    J[1, 0] = J[0, 1]
    J[1, 1] = (r2 - 2.0 * v * v) / r4
    return J


@njit(cache=True)
def sphere_jet(chart, u, v):
    """sigma(w) on the unit sphere with derivatives up to order three."""
    w = np.array([u, v])
    P = 1.0 / (1.0 + u * u + v * v)
    P1 = np.empty(2)
    P2 = np.empty((2, 2))
    P3 = np.empty((2, 2, 2))
    for i in range(2):
        P1[i] = -2.0 * w[i] * P * P
    for i in range(2):
        for j in range(2):
            dij = 1.0 if i == j else 0.0
            P2[i, j] = -2.0 * dij * P * P + 8.0 * w[i] * w[j] * P ** 3
            for k in range(2):
                dik = 1.0 if i == k else 0.0
                djk = 1.0 if j == k else 0.0
                P3[i, j, k] = (8.0 * (dij * w[k] + dik * w[j] + djk * w[i]) * P ** 3
                               - 48.0 * w[i] * w[j] * w[k] * P ** 4)
    sg = chart_sign(chart)
    S0 = np.empty(3)
    S1 = np.empty((3, 2))
    S2 = np.empty((3, 2, 2))
    S3 = np.empty((3, 2, 2, 2))
    for a in range(2):
        S0[a] = 2.0 * w[a] * P
        for i in range(2):
            dai = 1.0 if a == i else 0.0
            S1[a, i] = 2.0 * (dai * P + w[a] * P1[i])
            for j in range(2):
                daj = 1.0 if a == j else 0.0
                S2[a, i, j] = 2.0 * (dai * P1[j] + daj * P1[i] + w[a] * P2[i, j])
                for k in range(2):
                    dak = 1.0 if a == k else 0.0
                    S3[a, i, j, k] = 2.0 * (dai * P2[j, k] + daj * P2[i, k]
                                            + dak * P2[i, j] + w[a] * P3[i, j, k])
    S0[2] = sg * (2.0 * P - 1.0)
    for i in range(2):
        S1[2, i] = 2.0 * sg * P1[i]
        for j in range(2):
            S2[2, i, j] = 2.0 * sg * P2[i, j]
            for k in range(2):
                S3[2, i, j, k] = 2.0 * sg * P3[i, j, k]
    return S0, S1, S2, S3


# ----------------------------------------------------------------------------
# base metric jets
# ----------------------------------------------------------------------------

@njit(cache=True)
def _conformal_jet(fp, chart, u, v):
    S0, S1, S2, _ = sphere_jet(chart, u, v)
    R = fp[0]
    nb = int(fp[1])
    P = 1.0 / (1.0 + u * u + v * v)
    w = np.array([u, v])
    psi = math.log(2.0 * R * P)
    psi1 = np.empty(2)
    psi2 = np.empty((2, 2))
    for i in range(2):
        psi1[i] = -2.0 * w[i] * P
        for j in range(2):
            dij = 1.0 if i == j else 0.0
            psi2[i, j] = -2.0 * dij * P + 4.0 * w[i] * w[j] * P * P
    for b in range(nb):
        o = 2 + 5 * b
        cx = fp[o]
        cy = fp[o + 1]
        cz = fp[o + 2]
        rho = fp[o + 3]
        amp = fp[o + 4]
        dot = S0[0] * cx + S0[1] * cy + S0[2] * cz
        q = (2.0 - 2.0 * dot) / (rho * rho)
        if q >= 1.0:
            continue
        om = 1.0 - q
        Bq = math.exp(1.0 - 1.0 / om)
        if Bq == 0.0:
            continue
        B1 = -Bq / (om * om)
        B2 = Bq / om ** 4 - 2.0 * Bq / om ** 3
        q1 = np.empty(2)
        for i in range(2):
            q1[i] = -2.0 * (S1[0, i] * cx + S1[1, i] * cy + S1[2, i] * cz) / (rho * rho)
        psi += amp * Bq
        for i in range(2):
            psi1[i] += amp * B1 * q1[i]
            for j in range(2):
                qij = -2.0 * (S2[0, i, j] * cx + S2[1, i, j] * cy + S2[2, i, j] * cz) / (rho * rho)
                psi2[i, j] += amp * (B2 * q1[i] * q1[j] + B1 * qij)
    e2 = math.exp(2.0 * psi)
    g = np.zeros((2, 2))
    dg = np.zeros((2, 2, 2))
    d2g = np.zeros((2, 2, 2, 2))
    for i in range(2):
        g[i, i] = e2
        for k in range(2):
            dg[k, i, i] = 2.0 * psi1[k] * e2
            for l in range(2):
                d2g[k, l, i, i] = (4.0 * psi1[k] * psi1[l] + 2.0 * psi2[k, l]) * e2
    return g, dg, d2g


@njit(cache=True)
def _ellipsoid_jet(fp, chart, u, v):
    _, S1, S2, S3 = sphere_jet(chart, u, v)
    X1 = np.empty((3, 2))
    X2 = np.empty((3, 2, 2))
    X3 = np.empty((3, 2, 2, 2))
    for a in range(3):
        sa = fp[a]
        for i in range(2):
            X1[a, i] = sa * S1[a, i]
            for j in range(2):
                X2[a, i, j] = sa * S2[a, i, j]
                for k in range(2):
                    X3[a, i, j, k] = sa * S3[a, i, j, k]
    g = np.zeros((2, 2))
    dg = np.zeros((2, 2, 2))
    d2g = np.zeros((2, 2, 2, 2))
    for a in range(3):
        for i in range(2):
            for j in range(2):
                g[i, j] += X1[a, i] * X1[a, j]
                for k in range(2):
                    dg[k, i, j] += X2[a, k, i] * X1[a, j] + X1[a, i] * X2[a, k, j]
                    for l in range(2):
                        d2g[k, l, i, j] += (X3[a, k, l, i] * X1[a, j] + X2[a, k, i] * X2[a, l, j]
                                            + X2[a, l, i] * X2[a, k, j] + X1[a, i] * X3[a, k, l, j])
    return g, dg, d2g


@njit(cache=True)
def base_jet(kind, fp, chart, u, v):
    if kind == ELLIPSOID:
        return _ellipsoid_jet(fp, chart, u, v)
    return _conformal_jet(fp, chart, u, v)


# ----------------------------------------------------------------------------
# Chebyshev helpers and the Fermi patch
# ----------------------------------------------------------------------------

@njit(cache=True)
def _cheb_basis(x, n):
    T = np.empty(n)
    T[0] = 1.0
    if n > 1:
        T[1] = x
    for k in range(2, n):
        T[k] = 2.0 * x * T[k - 1] - T[k - 2]
    return T


@njit(cache=True)
def cheb1_eval(coef, x):
    T = _cheb_basis(x, coef.size)
    s = 0.0
    for k in range(coef.size):
        s += coef[k] * T[k]
    return s


@njit(cache=True)
def fermi_eval(pp, cheb2, t, s):
    """Fermi map (u, v) and its partials at (t, s) in the patch chart."""
    xt = (2.0 * t - pp[_P_TLO] - pp[_P_THI]) / (pp[_P_THI] - pp[_P_TLO])
    xs = s / pp[_P_SDOM]
    nt = cheb2.shape[1]
    ns = cheb2.shape[2]
    Tt = _cheb_basis(xt, nt)
    Ts = _cheb_basis(xs, ns)
    out = np.zeros(6)
    for c in range(6):
        acc = 0.0
        for i in range(nt):
            row = 0.0
            for j in range(ns):
                row += cheb2[c, i, j] * Ts[j]
            acc += Tt[i] * row
        out[c] = acc
    return out


@njit(cache=True)
def fermi_invert(pp, cheb2, coarse, U, V):
    """Newton inversion of the Fermi map; returns (ok, t, s, F)."""
    best = 0
    bd = 1e300
    for i in range(coarse.shape[0]):
        d = (coarse[i, 2] - U) ** 2 + (coarse[i, 3] - V) ** 2
        if d < bd:
            bd = d
            best = i
    t = coarse[best, 0]
    s = coarse[best, 1]
    F = fermi_eval(pp, cheb2, t, s)
    ok = False
    for it in range(40):
        r0 = F[0] - U
        r1 = F[1] - V
        a = F[2]
        b = F[3]
        c = F[4]
        d = F[5]
        det = a * d - b * c
        if det == 0.0:
            break
        dt = (d * r0 - b * r1) / det
        ds = (-c * r0 + a * r1) / det
        t -= dt
        s -= ds
        if abs(t - 0.5 * (pp[_P_TLO] + pp[_P_THI])) > 0.6 * (pp[_P_THI] - pp[_P_TLO]):
            break
        if abs(s) > 1.2 * pp[_P_SDOM]:
            break
        F = fermi_eval(pp, cheb2, t, s)
        if abs(dt) + abs(ds) < 1e-12:
            ok = True
            break
    return ok, t, s, F


@njit(cache=True)
def bump(r):
    """Standard bump exp(1 - 1/(1-r^2)) and its first two derivatives."""
    if abs(r) >= 1.0:
        return 0.0, 0.0, 0.0
    q = 1.0 - r * r
    b = math.exp(1.0 - 1.0 / q)
    b1 = -2.0 * r * b / (q * q)
    b2 = -2.0 * b / (q * q) - 8.0 * r * r * b / q ** 3 + 4.0 * r * r * b / q ** 4
    return b, b1, b2


@njit(cache=True)
def profile_h(pp, t):
    """Tangential profile h(t) with h'' (bump centred in the support)."""
    ta = pp[_P_TA]
    tb = pp[_P_TB]
    c = 0.5 * (ta + tb)
    w = 0.5 * (tb - ta)
    b, _, b2 = bump((t - c) / w)
    return pp[_P_AMP] * b, pp[_P_AMP] * b2 / (w * w)


@njit(cache=True)
def profile_k(pp, cheb1, t):
    """k(t) = -(h'' + K h)/(f1 + h) from the tabulated f1 and K."""
    if t <= pp[_P_TA] or t >= pp[_P_TB]:
        return 0.0
    h, h2 = profile_h(pp, t)
    if h == 0.0 and h2 == 0.0:
        return 0.0
    x = (2.0 * t - pp[_P_TLO] - pp[_P_THI]) / (pp[_P_THI] - pp[_P_TLO])
    f1 = cheb1_eval(cheb1[0], x)
    K = cheb1_eval(cheb1[1], x)
    return -(h2 + K * h) / (f1 + h)


@njit(cache=True)
def _delta_patch(pp, cheb2, cheb1, coarse, U, V):
    """Metric increment in patch-chart coordinates."""
    out = np.zeros((2, 2))
    if U < pp[_P_UMIN] or U > pp[_P_UMAX] or V < pp[_P_VMIN] or V > pp[_P_VMAX]:
        return out
    ok, t, s, F = fermi_invert(pp, cheb2, coarse, U, V)
    if not ok:
        return out
    smax = pp[_P_SMAX]
    if t <= pp[_P_TA] or t >= pp[_P_TB] or abs(s) >= smax:
        return out
    k = profile_k(pp, cheb1, t)
    bs, _, _ = bump(s / smax)
    phi = k * bs * s * s
    if phi == 0.0:
        return out
    det = F[2] * F[5] - F[3] * F[4]
    tu = F[5] / det
    tv = -F[3] / det
    out[0, 0] = -phi * tu * tu
    out[0, 1] = -phi * tu * tv
    out[1, 0] = out[0, 1]
    out[1, 1] = -phi * tv * tv
    return out


@njit(cache=True)
def delta_metric(pp, cheb2, cheb1, coarse, chart, u, v):
    """Metric increment expressed in the requested chart."""
    pc = int(pp[_P_CHART])
    if chart == pc:
        return _delta_patch(pp, cheb2, cheb1, coarse, u, v)
    r2 = u * u + v * v
    if r2 < 1.0 / (R_DOM * R_DOM):
        return np.zeros((2, 2))
    U = u / r2
    V = v / r2
    d = _delta_patch(pp, cheb2, cheb1, coarse, U, V)
    if d[0, 0] == 0.0 and d[0, 1] == 0.0 and d[1, 1] == 0.0:
        return d
    J = flip_jacobian(u, v)
    return J.T @ d @ J


@njit(cache=True)
def _stencil_outside(pp, chart, u, v, h):
    """True when the whole finite-difference stencil misses the patch box."""
    pc = int(pp[_P_CHART])
    umin = pp[_P_UMIN]
    umax = pp[_P_UMAX]
    vmin = pp[_P_VMIN]
    vmax = pp[_P_VMAX]
    if chart == pc:
        return u + h < umin or u - h > umax or v + h < vmin or v - h > vmax
    # conservative test in the other chart: map the stencil corners
    for a in (-h, h):
        for b in (-h, h):
            x = u + a
            y = v + b
            r2 = x * x + y * y
            if r2 == 0.0:
                continue
            U = x / r2
            V = y / r2
            if umin - 4 * h <= U <= umax + 4 * h and vmin - 4 * h <= V <= vmax + 4 * h:
                return False
    return True


@njit(cache=True)
def _delta_jet(pp, cheb2, cheb1, coarse, chart, u, v):
    """Value and two derivatives of the increment by Richardson-extrapolated
    central differences (two levels, 17 evaluations)."""
    h = pp[_P_FD]
    g0 = delta_metric(pp, cheb2, cheb1, coarse, chart, u, v)
    dg = np.zeros((2, 2, 2))
    d2g = np.zeros((2, 2, 2, 2))
    D1 = np.zeros((2, 2, 2, 2))   # level, axis, i, j
    D2 = np.zeros((2, 2, 2, 2))
    X = np.zeros((2, 2, 2))        # level, i, j mixed
    for lev in range(2):
        hh = h if lev == 0 else 0.5 * h
        for ax in range(2):
            du = hh if ax == 0 else 0.0
            dv = hh if ax == 1 else 0.0
            gp = delta_metric(pp, cheb2, cheb1, coarse, chart, u + du, v + dv)
            gm = delta_metric(pp, cheb2, cheb1, coarse, chart, u - du, v - dv)
            for i in range(2):
                for j in range(2):
                    D1[lev, ax, i, j] = (gp[i, j] - gm[i, j]) / (2.0 * hh)
                    D2[lev, ax, i, j] = (gp[i, j] - 2.0 * g0[i, j] + gm[i, j]) / (hh * hh)
        gpp = delta_metric(pp, cheb2, cheb1, coarse, chart, u + hh, v + hh)
        gpm = delta_metric(pp, cheb2, cheb1, coarse, chart, u + hh, v - hh)
        gmp = delta_metric(pp, cheb2, cheb1, coarse, chart, u - hh, v + hh)
        gmm = delta_metric(pp, cheb2, cheb1, coarse, chart, u - hh, v - hh)
        for i in range(2):
            for j in range(2):
                X[lev, i, j] = (gpp[i, j] - gpm[i, j] - gmp[i, j] + gmm[i, j]) / (4.0 * hh * hh)
    for i in range(2):
        for j in range(2):
            for ax in range(2):
                dg[ax, i, j] = (4.0 * D1[1, ax, i, j] - D1[0, ax, i, j]) / 3.0
                d2g[ax, ax, i, j] = (4.0 * D2[1, ax, i, j] - D2[0, ax, i, j]) / 3.0
            m = (4.0 * X[1, i, j] - X[0, i, j]) / 3.0
            d2g[0, 1, i, j] = m
            d2g[1, 0, i, j] = m
    return g0, dg, d2g


@njit(cache=True)
def metric_jet(M, chart, u, v):
    kind = M[0]
    if kind != PATCHED:
        return base_jet(kind, M[1], chart, u, v)
    pp = M[2]
    bk = int(pp[_P_BASE])
    g, dg, d2g = base_jet(bk, M[1], chart, u, v)
    if _stencil_outside(pp, chart, u, v, pp[_P_FD]):
        return g, dg, d2g
    e0, e1, e2 = _delta_jet(pp, M[3], M[4], M[5], chart, u, v)
    return g + e0, dg + e1, d2g + e2


# ----------------------------------------------------------------------------
# Christoffel symbols and curvature
# ----------------------------------------------------------------------------

@njit(cache=True)
def christoffel(g, dg):
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    gi = np.empty((2, 2))
    gi[0, 0] = g[1, 1] / det
    gi[1, 1] = g[0, 0] / det
    gi[0, 1] = -g[0, 1] / det
    gi[1, 0] = gi[0, 1]
    G = np.zeros((2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                acc = 0.0
                for l in range(2):
                    acc += gi[i, l] * (dg[j, l, k] + dg[k, l, j] - dg[l, j, k])
                G[i, j, k] = 0.5 * acc
    return G


@njit(cache=True)
def brioschi(g, dg, d2g):
    E = g[0, 0]
    F = g[0, 1]
    Gm = g[1, 1]
    Eu = dg[0, 0, 0]
    Ev = dg[1, 0, 0]
    Fu = dg[0, 0, 1]
    Fv = dg[1, 0, 1]
    Gu = dg[0, 1, 1]
    Gv = dg[1, 1, 1]
    Evv = d2g[1, 1, 0, 0]
    Fuv = d2g[0, 1, 0, 1]
    Guu = d2g[0, 0, 1, 1]
    a11 = -0.5 * Evv + Fuv - 0.5 * Guu
    a12 = 0.5 * Eu
    a13 = Fu - 0.5 * Ev
    a21 = Fv - 0.5 * Gu
    a31 = 0.5 * Gv
    detA = (a11 * (E * Gm - F * F) - a12 * (a21 * Gm - F * a31) + a13 * (a21 * F - E * a31))
    b12 = 0.5 * Ev
    b13 = 0.5 * Gu
    detB = -b12 * (b12 * Gm - F * b13) + b13 * (b12 * F - E * b13)
    W = E * Gm - F * F
    return (detA - detB) / (W * W)


@njit(cache=True)
def geo_terms(M, chart, u, v):
    g, dg, d2g = metric_jet(M, chart, u, v)
    return g, christoffel(g, dg), brioschi(g, dg, d2g)


# ----------------------------------------------------------------------------
# vector field and stepping
# ----------------------------------------------------------------------------

@njit(cache=True)
def rhs(M, chart, y, want_int, out):
    _, G, K = geo_terms(M, chart, y[0], y[1])
    du = y[2]
    dv = y[3]
    out[0] = du
    out[1] = dv
    for i in range(2):
        out[2 + i] = -(G[i, 0, 0] * du * du + 2.0 * G[i, 0, 1] * du * dv + G[i, 1, 1] * dv * dv)
    out[4] = y[5]
    out[5] = -K * y[4]
    out[6] = y[7]
    out[7] = -K * y[6]
    if want_int:
        out[8] = 1.0 / (y[4] * y[4])
    else:
        out[8] = 0.0


@njit(cache=True)
def normalize(M, chart, y):
    g, _, _ = metric_jet(M, chart, y[0], y[1])
    n2 = g[0, 0] * y[2] * y[2] + 2.0 * g[0, 1] * y[2] * y[3] + g[1, 1] * y[3] * y[3]
    n = math.sqrt(n2)
    y[2] /= n
    y[3] /= n


@njit(cache=True)
def dop_step(M, chart, y, h, want_int, K):
    n = y.size
    rhs(M, chart, y, want_int, K[0])
    tmp = np.empty(n)
    for s in range(1, _NS):
        for c in range(n):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, c]
            tmp[c] = y[c] + h * acc
        rhs(M, chart, tmp, want_int, K[s])
    ynew = np.empty(n)
    for c in range(n):
        acc = 0.0
        for j in range(_NS):
            acc += _B[j] * K[j, c]
        ynew[c] = y[c] + h * acc
    rhs(M, chart, ynew, want_int, K[_NS])
    return ynew


@njit(cache=True)
def error_norm(y, ynew, h, K, tol, ncomp):
    e5 = 0.0
    e3 = 0.0
    for c in range(ncomp):
        sc = tol + max(abs(y[c]), abs(ynew[c])) * tol
        a5 = 0.0
        a3 = 0.0
        for j in range(_NS + 1):
            a5 += _E5[j] * K[j, c]
            a3 += _E3[j] * K[j, c]
        e5 += (a5 / sc) ** 2
        e3 += (a3 / sc) ** 2
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    denom = e5 + 0.01 * e3
    return abs(h) * e5 / math.sqrt(denom * ncomp)


@njit(cache=True)
def maybe_switch(chart, y):
    if y[0] * y[0] + y[1] * y[1] > R_SWITCH * R_SWITCH:
        u, v, du, dv = flip_chart(y[0], y[1], y[2], y[3])
        y[0] = u
        y[1] = v
        y[2] = du
        y[3] = dv
        return 1 - chart
    return chart


# ----------------------------------------------------------------------------
# closed curve on the unit sphere (piecewise quintic Hermite) for section events
# curve tuple: (positions (Mc,3), velocities (Mc,3), accelerations (Mc,3), [L, band])
# ----------------------------------------------------------------------------

@njit(cache=True)
def curve_eval(curve, t):
    """Quintic Hermite interpolant of the closed curve: position and two
    derivatives at arclength t."""
    S = curve[0]
    V = curve[1]
    A = curve[2]
    L = curve[3][0]
    Mc = S.shape[0]
    h = L / Mc
    x = (t % L) / h
    j = int(math.floor(x))
    if j >= Mc:
        j = Mc - 1
    s = x - j
    j1 = (j + 1) % Mc
    s2 = s * s
    s3 = s2 * s
    s4 = s3 * s
    s5 = s4 * s
    H0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5
    H1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5
    H2 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5
    H3 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5
    H4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5
    H5 = 0.5 * s3 - s4 + 0.5 * s5
    D0 = -30.0 * s2 + 60.0 * s3 - 30.0 * s4
    D1 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4
    D2 = s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4
    D3 = -D0
    D4 = -12.0 * s2 + 28.0 * s3 - 15.0 * s4
    D5 = 1.5 * s2 - 4.0 * s3 + 2.5 * s4
    E0 = -60.0 * s + 180.0 * s2 - 120.0 * s3
    E1 = -36.0 * s + 96.0 * s2 - 60.0 * s3
    E2 = 1.0 - 9.0 * s + 18.0 * s2 - 10.0 * s3
    E3 = -E0
    E4 = -24.0 * s + 84.0 * s2 - 60.0 * s3
    E5 = 3.0 * s - 12.0 * s2 + 10.0 * s3
    p = np.empty(3)
    d1 = np.empty(3)
    d2 = np.empty(3)
    for c in range(3):
        a0 = S[j, c]
        v0 = h * V[j, c]
        w0 = h * h * A[j, c]
        a1 = S[j1, c]
        v1 = h * V[j1, c]
        w1 = h * h * A[j1, c]
        p[c] = a0 * H0 + v0 * H1 + w0 * H2 + a1 * H3 + v1 * H4 + w1 * H5
        d1[c] = (a0 * D0 + v0 * D1 + w0 * D2 + a1 * D3 + v1 * D4 + w1 * D5) / h
        d2[c] = (a0 * E0 + v0 * E1 + w0 * E2 + a1 * E3 + v1 * E4 + w1 * E5) / (h * h)
    return p, d1, d2


@njit(cache=True)
def curve_nearest(curve, p):
    S = curve[0]
    best = 0
    bd = 1e300
    for j in range(S.shape[0]):
        d = (S[j, 0] - p[0]) ** 2 + (S[j, 1] - p[1]) ** 2 + (S[j, 2] - p[2]) ** 2
        if d < bd:
            bd = d
            best = j
    return best, math.sqrt(bd)


@njit(cache=True)
def curve_offset(curve, p, j0):
    """Signed ambient offset of p from the curve and the foot parameter."""
    L = curve[3][0]
    Mc = curve[0].shape[0]
    t = j0 * L / Mc
    for it in range(12):
        c, c1, c2 = curve_eval(curve, t)
        r0 = c[0] - p[0]
        r1 = c[1] - p[1]
        r2 = c[2] - p[2]
        phi = r0 * c1[0] + r1 * c1[1] + r2 * c1[2]
        dphi = (c1[0] ** 2 + c1[1] ** 2 + c1[2] ** 2) + r0 * c2[0] + r1 * c2[1] + r2 * c2[2]
        dt = phi / dphi
        t -= dt
        if abs(dt) < 1e-15 * L:
            break
    c, c1, _ = curve_eval(curve, t)
    n0 = c[1] * c1[2] - c[2] * c1[1]
    n1 = c[2] * c1[0] - c[0] * c1[2]
    n2 = c[0] * c1[1] - c[1] * c1[0]
    nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
    s = ((p[0] - c[0]) * n0 + (p[1] - c[1]) * n1 + (p[2] - c[2]) * n2) / nn
    t = t % L
    return s, t


@njit(cache=True)
def _signed(M, curve, chart, y, sgn):
    p = to_sphere(chart, y[0], y[1])
    j, d = curve_nearest(curve, p)
    if d > curve[3][1]:
        return False, 0.0
    s, _ = curve_offset(curve, p, j)
    return True, sgn * s


# ----------------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------------

@njit(cache=True)
def integrate(M, chart, y0, t_end, tol, hmax, want_int, out_times,
              curve, ev_sign, ev_mode, max_steps):
    """Adaptive DOP853 integration.

    ev_mode 0: integrate to ``t_end`` recording states at ``out_times``.
    ev_mode 1: stop at the first crossing of ``curve`` from the negative to
    the positive side (after having visited the negative side), or at
    ``t_end``.

    Returns (status, t, chart, y, out_chart, out_y, nsteps, minf1, sign_change)
    with status 0 = reached t_end, 1 = event, 2 = step underflow,
    3 = too many steps.
    """
    n = NSTATE
    ncomp = 9 if want_int else 8
    y = y0.copy()
    K = np.empty((_NS + 1, n))
    nout = out_times.size
    out_y = np.zeros((nout, n))
    out_c = np.zeros(nout, dtype=np.int64)
    io = 0
    while io < nout and out_times[io] <= 0.0:
        out_y[io] = y
        out_c[io] = chart
        io += 1
    t = 0.0
    h = min(0.02, hmax, t_end)
    status = 0
    steps = 0
    minf1 = abs(y[4])
    f1sign = 1.0 if y[4] >= 0 else -1.0
    sign_change = False
    visited = False
    prev_valid = False
    prev_s = 0.0
    while t < t_end:
        if steps >= max_steps:
            status = 3
            break
        last = False
        if t + h >= t_end:
            h = t_end - t
            last = True
        ynew = dop_step(M, chart, y, h, want_int, K)
        err = error_norm(y, ynew, h, K, tol, ncomp)
        if not (err <= 1.0):
            if err != err:
                fac = 0.2
            else:
                fac = max(0.2, 0.9 * err ** (-1.0 / 8.0))
            h *= fac
            if h < 1e-14 * max(1.0, t):
                status = 2
                break
            continue
        steps += 1
        normalize(M, chart, ynew)
        # outputs inside (t, t + h]
        while io < nout and out_times[io] <= t + h:
            tau = out_times[io] - t
            if last and out_times[io] >= t_end:
                yo = ynew.copy()
            else:
                Ktmp = np.empty((_NS + 1, n))
                yo = dop_step(M, chart, y, tau, want_int, Ktmp)
                normalize(M, chart, yo)
            out_y[io] = yo
            out_c[io] = chart
            io += 1
        if ynew[4] * f1sign <= 0.0:
            sign_change = True
        if abs(ynew[4]) < minf1:
            minf1 = abs(ynew[4])
        if ev_mode == 1:
            valid, snew = _signed(M, curve, chart, ynew, ev_sign)
            if valid:
                if prev_valid and visited and prev_s < 0.0 and snew >= 0.0:
                    # locate the crossing inside the step by Illinois iteration
                    a0 = 0.0
                    fa = prev_s
                    b0 = h
                    fb = snew
                    Kl = np.empty((_NS + 1, n))
                    ybest = ynew.copy()
                    tbest = h
                    for it in range(80):
                        cc = b0 - fb * (b0 - a0) / (fb - fa)
                        if cc <= min(a0, b0) or cc >= max(a0, b0):
                            cc = 0.5 * (a0 + b0)
                        yc = dop_step(M, chart, y, cc, want_int, Kl)
                        normalize(M, chart, yc)
                        ok, fc = _signed(M, curve, chart, yc, ev_sign)
                        if not ok:
                            fc = fb
                        ybest = yc
                        tbest = cc
                        if fc == 0.0 or abs(b0 - a0) < 1e-15:
                            break
                        if fc * fb < 0.0:
                            a0 = b0
                            fa = fb
                        else:
                            fa *= 0.5
                        b0 = cc
                        fb = fc
                        if abs(fc) < 1e-15:
                            break
                    y = ybest
                    t = t + tbest
                    status = 1
                    break
                if snew < 0.0:
                    visited = True
                prev_s = snew
                prev_valid = True
            else:
                prev_valid = False
        t = t + h
        y = ynew
        chart = maybe_switch(chart, y)
        if err == 0.0:
            fac = 10.0
        else:
            fac = min(10.0, 0.9 * err ** (-1.0 / 8.0))
        h = min(h * fac, hmax)
        if last:
            t = t_end
            break
    return status, t, chart, y, out_c, out_y, steps, minf1, sign_change

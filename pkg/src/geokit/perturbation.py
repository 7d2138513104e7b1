"""Trace perturbation of a closed geodesic in Fermi coordinates.

Given a closed geodesic gamma of length T with fundamental Jacobi solution
f1, a bump h supported in (T - 2 eps, T - eps) defines f1_hat = f1 + h and
the curvature K_hat = -f1_hat''/f1_hat along gamma.  In Fermi coordinates
(t, s) around gamma the metric component g11 is replaced by

    g11_hat(t, s) = g11(t, s) - k(t) b(s) s^2,     k = K_hat - K,

with b a normal bump, b(0) = 1.  gamma stays a geodesic, its curvature
becomes K_hat, and the trace changes by

    dTr = f1'(T) * int (1/(f1 + h)^2 - 1/f1^2) dt   over the window.

The Fermi map is tabulated as a 2D Chebyshev interpolant of normal
geodesics.  Atlas evaluation of the patched metric inverts that map by
Newton's method and differentiates the increment numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import quad, solve_ivp

from . import _kernels as _k
from .closed_geodesics import (ClosedGeodesic, geodesic_from_state, refine_closed,
                               trace_via_f1_profile)
from .errors import (AmplitudeError, ConstructionViolationError, FormulaInapplicableError,
                     MainCaseViolationError, NotSimpleError, PatchError, PreconditionError)
from .geodesic_flow import (UnitTangentState, advance, flow, normal_vector, run,
                            state_distance)
from .metric_core import (MetricField, PatchTables, SurfacePoint, curvature_bounds,
                          eval_metric, transition)

FD_STEP = 1e-5


# ----------------------------------------------------------------------------
# profiles
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BumpProfile:
    """h(t) = amplitude * exp(1 - 1/(1 - r^2)), r = (t - centre)/halfwidth,
    supported on ``support``; b(s) the same bump in s / s_max."""

    support: tuple
    amplitude: float
    s_max: float
    c2_norm: float

    @property
    def centre(self) -> float:
        return 0.5 * (self.support[0] + self.support[1])

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.support[1] - self.support[0])

    def h(self, t):
        return self._eval(t, 0)

    def h1(self, t):
        return self._eval(t, 1)

    def h2(self, t):
        return self._eval(t, 2)

    def _eval(self, t, order):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        w = self.halfwidth
        for idx, tt in np.ndenumerate(t):
            b = _k.bump((tt - self.centre) / w)
            out[idx] = self.amplitude * b[order] / w ** order
        return out if out.ndim else float(out)

    def b(self, s):
        s = np.asarray(s, dtype=float)
        out = np.array([_k.bump(x / self.s_max)[0] for x in np.atleast_1d(s)])
        return out.reshape(s.shape) if s.ndim else float(out[0])


def _c2_norm(support, amplitude):
    a, b = support
    w = 0.5 * (b - a)
    r = np.linspace(-1, 1, 20001)[1:-1]
    vals = np.array([_k.bump(x) for x in r])
    return float(abs(amplitude) * (np.max(np.abs(vals[:, 0])) + np.max(np.abs(vals[:, 1])) / w
                                   + np.max(np.abs(vals[:, 2])) / w ** 2))


def design_bump(gamma, epsilon: float, amplitude: float, s_max: float = 0.1,
                f1=None) -> BumpProfile:
    """Bump profile supported on (T - 2 eps, T - eps).

    ``gamma`` is a ClosedGeodesic or a period T.  If ``f1`` (a callable on
    the window) is given, f1 must be positive there and f1 + h must not
    vanish.
    """
    T = gamma.period if isinstance(gamma, ClosedGeodesic) else float(gamma)
    if not (0 < 2 * epsilon < T):
        raise PreconditionError(f"need 0 < 2 eps < T, got eps = {epsilon}, T = {T}")
    if amplitude < 0:
        raise AmplitudeError("amplitude must be non-negative")
    support = (T - 2 * epsilon, T - epsilon)
    prof = BumpProfile(support, float(amplitude), float(s_max), _c2_norm(support, amplitude))
    if f1 is not None:
        ts = np.linspace(*support, 801)
        fv = np.array([f1(t) for t in ts])
        if np.min(fv) <= 0:
            raise PreconditionError("f1 must be positive on the support window")
        if np.min(fv + prof.h(ts)) <= 0:
            raise AmplitudeError("f1 + h vanishes on the support")
    return prof


# ----------------------------------------------------------------------------
# Fermi patch
# ----------------------------------------------------------------------------

def _cheb_nodes(n):
    return np.cos(np.pi * np.arange(n) / (n - 1))[::-1]


@dataclass(frozen=True, eq=False)
class FermiPatch:
    gamma: ClosedGeodesic
    t_window: tuple
    halfwidth: float
    epsilon: float
    chart: int
    t_domain: tuple
    s_domain: float
    tables: np.ndarray = field(repr=False)       # (6, nt, ns)
    jacobi_tables: np.ndarray = field(repr=False)  # (2, nt): f1, K
    f1d_table: np.ndarray = field(repr=False)
    coarse: np.ndarray = field(repr=False)
    bbox: tuple = ()
    checks: dict = field(default_factory=dict)

    def _pp(self, amplitude=0.0, support=None):
        pp = np.zeros(_k._P_LEN)
        base = self.gamma.metric
        pp[_k._P_BASE] = base.packed[0]
        pp[_k._P_CHART] = self.chart
        pp[_k._P_TLO], pp[_k._P_THI] = self.t_domain
        pp[_k._P_SDOM] = self.s_domain
        pp[_k._P_TA], pp[_k._P_TB] = support or self.t_window
        pp[_k._P_SMAX] = self.halfwidth
        pp[_k._P_AMP] = amplitude
        pp[_k._P_UMIN:_k._P_VMAX + 1] = self.bbox
        pp[_k._P_FD] = FD_STEP
        return pp

    def forward(self, t: float, s: float) -> SurfacePoint:
        F = _k.fermi_eval(self._pp(), self.tables, float(t), float(s))
        return SurfacePoint(self.chart, (F[0], F[1]))

    def inverse(self, p: SurfacePoint):
        q = p if p.chart == self.chart else transition(p, self.chart)
        ok, t, s, _ = _k.fermi_invert(self._pp(), self.tables, self.coarse, q.u, q.v)
        if not ok:
            raise PatchError(f"point {p.coords} is not in the Fermi patch")
        return t, s

    def jacobian(self, t: float, s: float) -> np.ndarray:
        F = _k.fermi_eval(self._pp(), self.tables, float(t), float(s))
        return np.array([[F[2], F[3]], [F[4], F[5]]])

    def f1(self, t):
        return self._c1(0, t)

    def curvature(self, t):
        return self._c1(1, t)

    def f1dot(self, t):
        x = self._x(t)
        return C.chebval(x, self.f1d_table)

    def _x(self, t):
        lo, hi = self.t_domain
        return (2 * np.asarray(t, dtype=float) - lo - hi) / (hi - lo)

    def _c1(self, row, t):
        return C.chebval(self._x(t), self.jacobi_tables[row])

    def fermi_metric(self, m: MetricField, t: float, s: float) -> np.ndarray:
        """Pull-back of ``m`` to Fermi coordinates at (t, s)."""
        p = self.forward(t, s)
        D = self.jacobian(t, s)
        return D.T @ eval_metric(m, p).g @ D


def fermi_frame(m: MetricField, gamma: ClosedGeodesic, window, s_max: float, *,
                nt: int = 40, ns: int = 24, tol: float = 1e-13) -> FermiPatch:
    """Tabulate Fermi coordinates (t, s) -> exp_{gamma(t)}(s N(t)) over the window.

    Checks the normalisations g11 = g22 = 1, g12 = 0, d_s g11 = 0 and
    d_s^2 g11 = -2K along gamma and records the residuals in ``checks``.
    """
    a, b = map(float, window)
    T = gamma.period
    if not (0 <= a < b <= T):
        raise PreconditionError(f"window {window} not inside [0, {T}]")
    _, kmax = curvature_bounds(m, 24)
    focal = math.pi / (2 * math.sqrt(max(kmax, 1e-300)))
    if not s_max < focal:
        raise PatchError(f"s_max = {s_max} exceeds the focal bound {focal:.4g}")
    margin = 0.15 * (b - a)
    lo, hi = a - margin, b + margin
    if lo < 0 or hi > T:
        raise PreconditionError("the window and its margin must lie inside (0, T)")
    s_dom = 1.3 * s_max
    xt = _cheb_nodes(nt)
    xs = _cheb_nodes(ns)
    tn = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xt
    sn = s_dom * xs
    arc = flow(m, gamma.init, T, tol, times=np.concatenate([[0.0], tn, [T]]))
    st = {i: (arc.state(i + 1), arc.jacobi[i + 1]) for i in range(nt)}
    mid_state = st[nt // 2][0]
    chart = 0 if mid_state.point.to_sphere()[2] >= 0 else 1
    F = np.zeros((2, nt, ns))
    f1v = np.zeros(nt)
    f1dv = np.zeros(nt)
    Kv = np.zeros(nt)
    pos = ns // 2
    for i in range(nt):
        s0, jac = st[i]
        f1v[i] = jac[0]
        f1dv[i] = jac[1]
        Kv[i] = eval_metric(m, s0.point).curvature
        N = normal_vector(m, s0)
        for sign in (1.0, -1.0):
            sel = [j for j in range(ns) if (sn[j] > 0 if sign > 0 else sn[j] < 0)]
            times = np.abs(sn[sel])
            ordr = np.argsort(times)
            nrm = UnitTangentState(s0.point, sign * N)
            a_ = flow(m, nrm, float(times[ordr[-1]]), tol,
                      times=np.concatenate([[0.0], times[ordr]]))
            for q, jj in enumerate(ordr):
                p = a_.state(q + 1).point
                p = p if p.chart == chart else transition(p, chart)
                F[:, i, sel[jj]] = p.coords
        p0 = s0.point if s0.point.chart == chart else transition(s0.point, chart)
        for j in range(ns):
            if sn[j] == 0.0:
                F[:, i, j] = p0.coords
    Vt = C.chebvander(xt, nt - 1)
    Vs = C.chebvander(xs, ns - 1)
    Vti = np.linalg.inv(Vt)
    Vsi = np.linalg.inv(Vs)
    coef = np.array([Vti @ F[c] @ Vsi.T for c in range(2)])
    tscale = 2.0 / (hi - lo)
    sscale = 1.0 / s_dom
    tables = np.zeros((6, nt, ns))
    tables[0] = coef[0]
    tables[1] = coef[1]
    tables[2, :nt - 1] = C.chebder(coef[0], axis=0) * tscale
    tables[3, :, :ns - 1] = C.chebder(coef[0], axis=1) * sscale
    tables[4, :nt - 1] = C.chebder(coef[1], axis=0) * tscale
    tables[5, :, :ns - 1] = C.chebder(coef[1], axis=1) * sscale
    jt = np.array([Vti @ f1v, Vti @ Kv])
    f1d = Vti @ f1dv
    # coarse inversion table and bounding box of the support
    gt = np.linspace(lo, hi, 25)
    gs = np.linspace(-s_dom, s_dom, 9)
    pp = np.zeros(_k._P_LEN)
    pp[_k._P_TLO], pp[_k._P_THI], pp[_k._P_SDOM] = lo, hi, s_dom
    coarse = []
    for t in gt:
        for s in gs:
            P = _k.fermi_eval(pp, tables, t, s)
            coarse.append([t, s, P[0], P[1]])
    coarse = np.array(coarse)
    box = []
    for t in np.linspace(a, b, 41):
        for s in np.linspace(-s_max, s_max, 11):
            P = _k.fermi_eval(pp, tables, t, s)
            box.append(P[:2])
    box = np.array(box)
    pad = 0.02 * s_max + 4 * FD_STEP
    bbox = (box[:, 0].min() - pad, box[:, 0].max() + pad, box[:, 1].min() - pad,
            box[:, 1].max() + pad)
    if max(abs(x) for x in bbox) >= 1.6 * 1.2:
        raise PatchError("patch too close to the chart boundary")
    _check_simple_window(m, gamma, (lo, hi), s_max, T)
    patch = FermiPatch(gamma, (a, b), float(s_max), float(T - a) / 2.0, chart, (lo, hi), s_dom,
                       tables, jt, f1d, coarse, bbox)
    _check_embedded(patch)
    checks = fermi_checks(m, patch)
    object.__setattr__(patch, "checks", checks)
    return patch


def _check_simple_window(m, gamma, dom, s_max, T):
    """No other strand of gamma may come near the patch."""
    lo, hi = dom
    arc = flow(m, gamma.init, T, 1e-10, sample_dt=min(0.02, 0.5 * s_max))
    P = np.array([arc.state(i).point.to_sphere() for i in range(len(arc))])
    tt = arc.times
    inside = (tt >= lo) & (tt <= hi)
    if inside.sum() == 0 or (~inside).sum() == 0:
        return
    d = np.linalg.norm(P[inside][:, None, :] - P[~inside][None, :, :], axis=2)
    # exclude the strands adjacent to the window ends
    far = np.abs(tt[~inside][None, :] - tt[inside][:, None])
    far = np.minimum(far, T - far) > 4 * s_max + (hi - lo)
    if far.any() and d[far].min() * m.length_scale < 3 * s_max:
        raise NotSimpleError("another strand of the geodesic enters the patch")


def _check_embedded(patch):
    lo, hi = patch.t_window
    dets = [np.linalg.det(patch.jacobian(t, s))
            for t in np.linspace(lo, hi, 21) for s in np.linspace(-patch.halfwidth,
                                                                  patch.halfwidth, 9)]
    if min(dets) * max(dets) <= 0:
        raise PatchError("Fermi map is not an embedding on the patch")


def fermi_checks(m: MetricField, patch: FermiPatch, n: int = 21) -> dict:
    """Residuals of the five Fermi normalisations along the window."""
    h = 1e-3
    r = {"g11": 0.0, "g12": 0.0, "g22": 0.0, "ds_g11": 0.0, "ds2_g11": 0.0}
    for t in np.linspace(*patch.t_window, n):
        G0 = patch.fermi_metric(m, t, 0.0)
        g1 = [patch.fermi_metric(m, t, s)[0, 0] for s in (-2 * h, -h, h, 2 * h)]
        d1 = (8 * (g1[2] - g1[1]) - (g1[3] - g1[0])) / (12 * h)
        d2 = (-g1[3] + 16 * g1[2] - 30 * G0[0, 0] + 16 * g1[1] - g1[0]) / (12 * h * h)
        K = eval_metric(m, patch.forward(t, 0.0)).curvature
        r["g11"] = max(r["g11"], abs(G0[0, 0] - 1))
        r["g12"] = max(r["g12"], abs(G0[0, 1]))
        r["g22"] = max(r["g22"], abs(G0[1, 1] - 1))
        r["ds_g11"] = max(r["ds_g11"], abs(d1))
        r["ds2_g11"] = max(r["ds2_g11"], abs(d2 + 2 * K))
    return r


# ----------------------------------------------------------------------------
# records and prediction
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PerturbationRecord:
    patch: FermiPatch
    bump: BumpProfile
    k_table: np.ndarray          # rows (t, k)
    predicted_delta_trace: float | None
    f1_data: np.ndarray          # rows (t, f1, f1')
    f1_T: float = 0.0
    f1dot_T: float = 0.0

    @property
    def gamma(self) -> ClosedGeodesic:
        return self.patch.gamma

    def k(self, t):
        pp = self.patch._pp(self.bump.amplitude, self.bump.support)
        return np.vectorize(lambda x: _k.profile_k(pp, self.patch.jacobi_tables, x))(t)

    def curvature_hat(self, t):
        """Designed curvature -(f1 + h)''/(f1 + h) along gamma."""
        return self.patch.curvature(t) + self.k(t)

    def to_dict(self) -> dict:
        g = self.gamma
        return {
            "gamma": {"init": {"chart": g.init.chart.name.lower(),
                               "coords": list(g.init.point.coords),
                               "direction": g.init.direction.tolist()},
                      "period": g.period},
            "window": list(self.patch.t_window),
            "epsilon": self.patch.epsilon,
            "amplitude": self.bump.amplitude,
            "s_max": self.bump.s_max,
            "predicted_delta_trace": self.predicted_delta_trace,
            "k_table": self.k_table.tolist(),
        }


def make_record(m: MetricField, gamma: ClosedGeodesic, epsilon: float, amplitude: float,
                s_max: float = 0.1, *, predict: bool = True) -> PerturbationRecord:
    """Frame, profile and prediction for a bump on the window (T-2eps, T-eps)."""
    T = gamma.period
    patch = fermi_frame(m, gamma, (T - 2 * epsilon, T - epsilon), s_max)
    bump = design_bump(T, epsilon, amplitude, s_max, f1=lambda t: float(patch.f1(t)))
    r = run(m, gamma.init, T, 1e-13)
    ts = np.linspace(*bump.support, 201)
    f1_data = np.column_stack([ts, patch.f1(ts), patch.f1dot(ts)])
    rec = PerturbationRecord(patch, bump, np.zeros((0, 2)), None, f1_data,
                             float(r.y[4]), float(r.y[5]))
    kt = np.column_stack([ts, rec.k(ts)])
    object.__setattr__(rec, "k_table", kt)
    if predict:
        object.__setattr__(rec, "predicted_delta_trace", predicted_trace_delta(rec))
    return rec


MAIN_CASE_FLOOR = 1e-9


def predicted_trace_delta(record: PerturbationRecord) -> float:
    """f1'(T) * int_window (1/(f1+h)^2 - 1/f1^2) dt by adaptive quadrature."""
    bump = record.bump
    a, b = bump.support
    if record.gamma is not None:
        ts = np.linspace(a, record.gamma.period, 801)
        fv = record.patch.f1(ts[ts <= record.patch.t_domain[1]])
        if np.min(fv) <= 0:
            raise FormulaInapplicableError("f1 vanishes on the window")
    f1T, f1dT = record.f1_T, record.f1dot_T
    if abs(f1T) < MAIN_CASE_FLOOR or abs(f1dT) < MAIN_CASE_FLOOR:
        raise MainCaseViolationError(
            f"f1(T) f1'(T) = {f1T * f1dT:.3g}: the single-bump construction needs both "
            "factors nonzero (the two-step variant is not implemented)")
    if bump.amplitude == 0.0:
        return 0.0
    f1 = record.patch.f1

    def integrand(t):
        f = float(f1(t))
        h = bump.h(t)
        if f + h <= 0:
            raise FormulaInapplicableError("f1 + h vanishes on the window")
        return -h * (2 * f + h) / (f * f * (f + h) ** 2)

    val, err = quad(integrand, a, b, epsabs=0.0, epsrel=1e-11, limit=400)
    return f1dT * val


def admissible_shift(m: MetricField, gamma: ClosedGeodesic, epsilon: float,
                     n: int = 64, tol: float = 1e-12) -> ClosedGeodesic:
    """Move the base point so that f1 > 0 on [T - 2 eps, T] and both f1(T)
    and f1'(T) stay away from zero."""
    T = gamma.period
    best = None
    for t0 in np.linspace(0.0, T, n, endpoint=False):
        g = gamma.shifted(t0, tol) if t0 > 0 else gamma
        times = np.linspace(T - 2 * epsilon, T, 200)
        arc = flow(m, g.init, T, tol, times=np.concatenate([[0.0], times]))
        f1 = arc.jacobi[1:, 0]
        if f1.min() <= 0:
            continue
        score = min(abs(arc.jacobi[-1, 0]), abs(arc.jacobi[-1, 1]))
        if best is None or score > best[0]:
            best = (score, g)
    if best is None:
        raise PreconditionError("no base point gives f1 > 0 on the final stretch")
    return best[1]


# ----------------------------------------------------------------------------
# patched metric
# ----------------------------------------------------------------------------

def apply_perturbation(m: MetricField, record: PerturbationRecord) -> MetricField:
    """Metric with g11 replaced by g11 - k b s^2 in the Fermi patch."""
    patch = record.patch
    pp = patch._pp(record.bump.amplitude, record.bump.support)
    tables = PatchTables(pp, patch.tables, patch.jacobi_tables, patch.coarse, record)
    mh = MetricField("fermi_patched", {}, base=m, patch=tables)
    # k peaks sharply near the ends of the support, so sample t densely
    for t in np.linspace(*record.bump.support, 201)[1:-1]:
        for s in np.linspace(-0.99 * patch.halfwidth, 0.99 * patch.halfwidth, 17):
            p = patch.forward(t, s)
            g = eval_metric(m, p).g
            # value-only check; eval_metric on the patched metric raises if not PD
            G = _k.metric_jet(mh.packed, int(p.chart), p.u, p.v)[0]
            if not (G[0, 0] > 0 and np.linalg.det(G) > 0):
                raise AmplitudeError("perturbed metric loses positivity; lower the amplitude")
    return mh


def geodesic_residual(mh: MetricField, gamma: ClosedGeodesic, n: int = 400) -> float:
    """max |Gamma_hat(v, v) - Gamma(v, v)| along the stored arc of gamma: the
    residual of the geodesic equation of the new metric on the old curve."""
    m = gamma.metric
    ts = np.linspace(0, gamma.period, n)
    arc = flow(m, gamma.init, gamma.period, 1e-12, times=ts)
    worst = 0.0
    for i in range(len(arc)):
        s = arc.state(i)
        j0 = eval_metric(m, s.point)
        j1 = eval_metric(mh, s.point)
        d = np.einsum("ijk,j,k->i", j1.christoffel - j0.christoffel, s.direction, s.direction)
        worst = max(worst, float(math.sqrt(d @ j0.g @ d)))
    return worst


def _orbit_distance(m, gamma, s):
    """Distance from s to the orbit of gamma (chart max-norm)."""
    ts = np.linspace(0, gamma.period, 801)
    arc = flow(m, gamma.init, gamma.period, 1e-12, times=ts)
    d = [state_distance(s, arc.state(i)) for i in range(len(arc))]
    i = int(np.argmin(d))
    # refine by interpolation between neighbouring samples
    best = d[i]
    for x in np.linspace(-1, 1, 41):
        t = ts[i] + x * (ts[1] - ts[0])
        u, _ = advance(m, gamma.init, t % gamma.period, 1e-12) if t > 0 else (gamma.init, None)
        best = min(best, state_distance(s, u))
    return best


def verify_perturbation(m: MetricField, record: PerturbationRecord, tol: float = 1e-12,
                        mh: MetricField | None = None) -> dict:
    """Measure the trace change of gamma under the patched metric."""
    mh = mh or apply_perturbation(m, record)
    gamma0 = record.gamma
    base = geodesic_from_state(m, gamma0.init, gamma0.period, tol)
    new = refine_closed(mh, gamma0.init, tol, period=gamma0.period)
    drift = _orbit_distance(m, gamma0, new.init)
    if drift > 1e-6:
        raise ConstructionViolationError(f"gamma moved by {drift:.3g} under the new metric")
    measured = new.trace - base.trace
    predicted = record.predicted_delta_trace
    rel = abs(measured - predicted) / abs(predicted) if predicted else abs(measured - (predicted or 0))
    ts = np.linspace(*record.bump.support, 41)
    khat_err = 0.0
    for t in ts:
        p = record.patch.forward(t, 0.0)
        K1 = eval_metric(mh, p).curvature
        khat_err = max(khat_err, abs(K1 - float(record.curvature_hat(t))))
    return {
        "trace_base": base.trace,
        "trace_perturbed": new.trace,
        "measured_delta_trace": measured,
        "predicted_delta_trace": predicted,
        "relative_discrepancy": rel,
        "absolute_discrepancy": abs(measured - (predicted or 0.0)),
        "period_change": abs(new.period - gamma0.period),
        "orbit_drift": drift,
        "geodesic_residual": geodesic_residual(mh, gamma0),
        "curvature_design_error": khat_err,
        "amplitude": record.bump.amplitude,
        "c2_norm": record.bump.c2_norm,
        "classification_base": base.classification.tag,
        "classification_perturbed": new.classification.tag,
    }


# ----------------------------------------------------------------------------
# Hill-equation level helpers (synthetic curvature profiles)
# ----------------------------------------------------------------------------

def hill_monodromy(K, T: float, rtol: float = 1e-12) -> np.ndarray:
    """Monodromy of f'' + K(t) f = 0 over [0, T]."""
    def rhs(t, y):
        k = K(t)
        return [y[1], -k * y[0], y[3], -k * y[2]]
    sol = solve_ivp(rhs, (0.0, T), [1.0, 0.0, 0.0, 1.0], method="DOP853", rtol=rtol, atol=rtol)
    f1, f1d, f2, f2d = sol.y[:, -1]
    return np.array([[f1, f2], [f1d, f2d]])


def perturbed_profile(K, T: float, bump: BumpProfile, rtol: float = 1e-12):
    """K_hat = K - (h'' + K h)/(f1 + h) for a synthetic profile K."""
    ts = np.linspace(0.0, T, 4001)

    def rhs(t, y):
        return [y[1], -K(t) * y[0]]
    sol = solve_ivp(rhs, (0.0, T), [1.0, 0.0], method="DOP853", rtol=rtol, atol=rtol,
                    dense_output=True)

    def Khat(t):
        h = bump.h(t)
        h2 = bump.h2(t)
        if h == 0.0 and h2 == 0.0:
            return K(t)
        f1 = sol.sol(t)[0]
        return K(t) - (h2 + K(t) * h) / (f1 + h)
    return Khat

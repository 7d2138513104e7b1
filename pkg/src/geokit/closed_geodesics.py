"""Closed geodesics: shortening, Newton shooting, monodromy and classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (DomainError, FormulaInapplicableError, IntegrationError,
                     NoConvergenceError, PreconditionError)
from .geodesic_flow import (DEFAULT_TOL, UnitTangentState, advance, flow,
                            full_linearization, geodesic_acceleration, linearized_return,
                            normal_vector, run, state_distance,
                            state_transition_jacobian)
from .metric_core import (MetricField, SurfacePoint, SWITCH_RADIUS, chart_orientation,
                          curvature_bounds, eval_metric)

PARABOLIC_BAND = 1e-6
CLOSURE_TOL = 1e-8


# ----------------------------------------------------------------------------
# classification
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DiophantineReport:
    rho: float
    c: float
    tau: float
    Q: int
    passed: bool
    first_violation: tuple | None
    violations: tuple = ()


@dataclass(frozen=True)
class Classification:
    tag: str
    trace: float
    lam: float | None = None
    rho: float | None = None
    diophantine_report: DiophantineReport | None = None

    @property
    def rotation_matrix(self) -> np.ndarray | None:
        if self.rho is None:
            return None
        a = 2 * math.pi * self.rho
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def classify(monodromy, band: float = PARABOLIC_BAND) -> Classification:
    """Stability type from a 2x2 unimodular matrix.

    The matrix is taken in an orthonormal frame (Jacobi coordinates
    ``(f, f')``), so the sign of the lower-left entry picks the branch of
    the rotation number.
    """
    M = np.asarray(monodromy, dtype=float)
    tr = float(M[0, 0] + M[1, 1])
    if abs(abs(tr) - 2.0) < band:
        return Classification("parabolic", tr)
    if abs(tr) > 2.0:
        disc = math.sqrt(tr * tr - 4.0)
        lam = 0.5 * (tr + math.copysign(disc, tr))
        return Classification("hyperbolic", tr, lam=lam)
    base = math.acos(tr / 2.0) / (2.0 * math.pi)
    rho = base if M[1, 0] > 0 else 1.0 - base
    return Classification("elliptic", tr, rho=rho)


def check_diophantine(rho: float, c: float, tau: float, Q: int, max_report: int = 20) -> DiophantineReport:
    """Finite check of |rho - m/n| >= c / n^(2 + tau) for 1 <= n <= Q."""
    if Q < 2:
        raise PreconditionError(f"Q must be at least 2, got {Q}")
    n = np.arange(1, int(Q) + 1)
    m = np.clip(np.rint(rho * n), 0, n).astype(np.int64)
    gap = np.abs(rho - m / n)
    bound = c / n.astype(float) ** (2.0 + tau)
    bad = np.nonzero(gap < bound)[0]
    viol = []
    for i in bad[:max_report]:
        g = math.gcd(int(m[i]), int(n[i]))
        viol.append((int(m[i]) // g, int(n[i]) // g))
    viol = tuple(dict.fromkeys(viol))
    return DiophantineReport(rho, c, tau, int(Q), passed=bad.size == 0,
                             first_violation=viol[0] if viol else None, violations=viol)


# ----------------------------------------------------------------------------
# closed geodesics
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClosedGeodesic:
    init: UnitTangentState
    period: float
    monodromy: np.ndarray
    classification: Classification
    closure_defect: float
    tolerance: float = DEFAULT_TOL
    metric: MetricField = field(default=None, repr=False)

    @property
    def trace(self) -> float:
        return float(np.trace(self.monodromy))

    def arc(self, tol: float | None = None, **kw):
        return flow(self.metric, self.init, self.period, tol or self.tolerance, **kw)

    def reversed(self) -> "ClosedGeodesic":
        """The same orbit traversed backwards (re-measured)."""
        return geodesic_from_state(self.metric, self.init.flipped(), self.period, self.tolerance)

    def shifted(self, t0: float, tol: float | None = None) -> "ClosedGeodesic":
        """The same orbit with base point moved forward by ``t0``."""
        s, _ = advance(self.metric, self.init, t0, tol or self.tolerance)
        return geodesic_from_state(self.metric, s, self.period, tol or self.tolerance)

    def record(self) -> dict:
        return {
            "init": {"chart": self.init.chart.name.lower(),
                     "coords": list(self.init.point.coords),
                     "direction": self.init.direction.tolist()},
            "period": self.period,
            "monodromy": self.monodromy.tolist(),
            "trace": self.trace,
            "classification": _class_record(self.classification),
            "closure_defect": self.closure_defect,
            "tolerance": self.tolerance,
        }


def _class_record(c: Classification) -> dict:
    out = {"tag": c.tag, "trace": c.trace}
    if c.lam is not None:
        out["lambda"] = c.lam
    if c.rho is not None:
        out["rho"] = c.rho
    return out


def monodromy_of(m: MetricField, s: UnitTangentState, T: float, tol: float):
    arc = flow(m, s, T, tol, times=np.array([0.0, T]))
    defect = state_distance(arc.initial, arc.final)
    if defect < CLOSURE_TOL:
        M = linearized_return(m, arc)
    else:
        f1, f1d, f2, f2d = arc.jacobi[-1]
        M = np.array([[f1, f2], [f1d, f2d]])
    return M, defect


def geodesic_from_state(m: MetricField, s: UnitTangentState, T: float,
                        tol: float = DEFAULT_TOL) -> ClosedGeodesic:
    """Measure monodromy and closure of a state assumed to be periodic."""
    M, defect = monodromy_of(m, s, T, tol)
    return ClosedGeodesic(s, float(T), M, classify(M), defect, tol, m)


def _recentre(s: UnitTangentState) -> UnitTangentState:
    u, v = s.point.coords
    if u * u + v * v > SWITCH_RADIUS ** 2:
        return s.in_chart(1 - int(s.chart))
    return s


def refine_closed(m: MetricField, seed, tol: float = 1e-12, *, period: float | None = None,
                  max_iter: int = 50, basin: float = 0.1) -> ClosedGeodesic:
    """Newton shooting for a periodic orbit.

    Unknowns are the initial state and the period; the residual is the
    closure mismatch ``phi_T(s) - s``.  The linearization comes from the
    co-integrated Jacobi fields.  The system is underdetermined (any point
    on the orbit works), so each step is the minimum-norm least-squares
    solution; this also copes with degenerate families such as great circles.
    """
    if isinstance(seed, LoopCurve):
        s, T = loop_seed_state(m, seed, min(1e-10, 100 * tol))
    else:
        if period is None:
            raise PreconditionError("a unit tangent seed needs a period guess")
        s, T = seed, float(period)
    s = _recentre(UnitTangentState.unit(m, seed_point(s), s.direction))
    best = None
    res = math.inf
    for it in range(max_iter):
        r0 = run(m, s, T, tol)
        e = r0.final_state()
        C = np.eye(4)
        if e.chart != s.chart:
            try:
                C = state_transition_jacobian(e)
                e_s = e.in_chart(s.chart)
            except DomainError:
                raise NoConvergenceError("orbit end left the seed chart", residual=res)
        else:
            e_s = e
        r = e_s.vector() - s.vector()
        res = float(np.max(np.abs(r)))
        if it == 0 and res > basin:
            raise PreconditionError(
                f"seed residual {res:.3g} exceeds the Newton basin bound {basin}")
        if best is None or res < best[0]:
            best = (res, s, T)
        if res < 20 * tol or (res < 1e-10 and it > 6):
            break
        D = C @ full_linearization(m, s, e, r0.jacobi, T)
        dT = C @ np.concatenate([e.direction, geodesic_acceleration(m, e)])
        Bu = unit_bundle_basis(m, s)
        A = np.column_stack([(D - np.eye(4)) @ Bu, dT])
        z = np.linalg.lstsq(A, -r, rcond=1e-10)[0]
        vec = s.vector() + Bu @ z[:3]
        z = np.concatenate([z[:3], [0.0], z[3:]])
        try:
            s = UnitTangentState.unit(m, SurfacePoint(s.chart, (vec[0], vec[1])), vec[2:])
        except DomainError:
            raise NoConvergenceError("Newton step left the chart domain", residual=res)
        s = _recentre(s)
        T += z[4]
        if not T > 0:
            raise NoConvergenceError("period became non-positive", residual=res)
    res, s, T = best
    if not res < CLOSURE_TOL:
        raise NoConvergenceError(f"Newton shooting stalled at residual {res:.3g}", residual=res)
    return geodesic_from_state(m, s, T, tol)


def seed_point(s: UnitTangentState) -> SurfacePoint:
    return s.point


def unit_bundle_basis(m: MetricField, s: UnitTangentState) -> np.ndarray:
    """4x3 basis of perturbations tangent to the unit tangent bundle at s:
    moves of the base point (with the speed correction) and turning of v."""
    j = eval_metric(m, s.point)
    v = s.direction
    N = normal_vector(m, s)
    B = np.zeros((4, 3))
    for c in range(2):
        B[c, c] = 1.0
        dn = j.dg[c] @ v @ v
        B[2:, c] = -0.5 * dn * v
    B[2:, 2] = N
    return B


def trace_powers(gamma, k: int) -> float:
    """Trace of the k-th power of the monodromy."""
    if k < 1:
        raise PreconditionError(f"k must be at least 1, got {k}")
    M = gamma.monodromy if isinstance(gamma, ClosedGeodesic) else np.asarray(gamma, dtype=float)
    return float(np.trace(np.linalg.matrix_power(M, int(k))))


def trace_formula(f1_T: float, f1d_T: float, integral: float) -> float:
    return f1_T + 1.0 / f1_T + f1d_T * integral


F1_FLOOR = 1e-8


def trace_via_f1(m: MetricField, gamma: ClosedGeodesic, tol: float | None = None) -> float:
    """Trace from f1 alone: f1(T) + 1/f1(T) + f1'(T) * int_0^T ds / f1^2.

    Refuses when f1 changes sign (or nearly vanishes) on [0, T].
    """
    tol = tol or gamma.tolerance
    probe = run(m, gamma.init, gamma.period, tol)
    if probe.f1_sign_change or probe.min_abs_f1 < F1_FLOOR:
        raise FormulaInapplicableError(
            f"f1 vanishes on [0, T] (min |f1| = {probe.min_abs_f1:.3g}); "
            "use the monodromy trace instead")
    r = run(m, gamma.init, gamma.period, tol, want_integral=True)
    return trace_formula(r.y[4], r.y[5], r.y[8])


def trace_via_f1_profile(K, T: float, rtol: float = 1e-12) -> float:
    """The same formula for a synthetic curvature profile ``K(t)`` on [0, T]."""
    f1T = [None]

    def rhs(t, y):
        k = K(t)
        return [y[1], -k * y[0], 1.0 / (y[0] * y[0])]

    def zero(t, y):
        return y[0]

    zero.terminal = True
    sol = solve_ivp(rhs, (0.0, T), [1.0, 0.0, 0.0], method="DOP853", rtol=rtol,
                    atol=rtol, events=zero)
    if sol.status == 1 or np.min(np.abs(sol.y[0])) < F1_FLOOR:
        raise FormulaInapplicableError("f1 vanishes on [0, T]")
    f1T[0] = sol.y[:, -1]
    return trace_formula(f1T[0][0], f1T[0][1], f1T[0][2])


# ----------------------------------------------------------------------------
# loops and shortening
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LoopCurve:
    """Closed polygon of surface points (stored as unit-sphere vectors)."""

    vertices: np.ndarray
    length: float | None = None
    collapsed: bool = False
    converged: bool = False
    lengths: tuple = ()

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        V = V / np.linalg.norm(V, axis=1, keepdims=True)
        object.__setattr__(self, "vertices", V)

    def __len__(self):
        return len(self.vertices)

    def points(self) -> list:
        return [SurfacePoint.from_sphere(x) for x in self.vertices]

    @classmethod
    def from_points(cls, pts) -> "LoopCurve":
        return cls(np.array([p.to_sphere() for p in pts]))


def geodesic_bvp(m: MetricField, p: SurfacePoint, q: SurfacePoint, tol: float = 1e-11,
                 max_iter: int = 30):
    """Short geodesic from p to q: returns (unit initial state at p, length)."""
    # work in the chart centred nearest to the segment
    xm = p.to_sphere() + q.to_sphere()
    chart = 0 if xm[2] >= 0 else 1
    p = p if p.chart == chart else _to_chart(p, chart)
    qq = q if q.chart == chart else _to_chart(q, chart)
    d = np.array(qq.coords) - np.array(p.coords)
    # Simpson estimate of the chart-segment length as the starting guess
    ell = 0.0
    for wgt, x in ((1.0, 0.0), (4.0, 0.5), (1.0, 1.0)):
        g = eval_metric(m, SurfacePoint(chart, tuple(np.array(p.coords) + x * d))).g
        ell += wgt * math.sqrt(d @ g @ d) / 6.0
    if ell == 0.0:
        raise DomainError("coincident points have no unique geodesic")
    ang = math.atan2(d[1], d[0])
    target = np.array(qq.coords)
    for it in range(max_iter):
        s = UnitTangentState.from_angle(m, p, ang)
        r0 = run(m, s, ell, tol)
        e = r0.final_state()
        C = np.eye(4)
        if e.chart != p.chart:
            try:
                C = state_transition_jacobian(e)
                e = e.in_chart(p.chart)
            except DomainError:
                ell *= 0.5
                continue
        res = e.vector()[:2] - target
        Nend = normal_vector(m, r0.final_state())
        # derivative wrt angle: Jacobi field with J(0) = 0, J'(0) = |d direction/d angle|_g N
        ds_dang = _angle_speed(m, p, ang)
        # the chart angle turns towards the chart's own left, which is -N in
        # a negatively oriented chart
        col_a = (C[:2, :2] @ (r0.y[6] * Nend)) * ds_dang * chart_orientation(p.chart)
        col_l = e.direction
        A = np.column_stack([col_a, col_l])
        step = np.linalg.solve(A, -res)
        ang += step[0]
        ell += step[1]
        if np.max(np.abs(res)) < 1e-13 or np.max(np.abs(step)) < 1e-15:
            break
    if not ell > 0:
        raise NoConvergenceError("geodesic boundary problem failed")
    return UnitTangentState.from_angle(m, p, ang), ell


def _angle_speed(m, p, ang):
    """g-angle swept per unit chart angle (1 for conformal charts)."""
    h = 1e-6
    a = UnitTangentState.from_angle(m, p, ang - h).direction
    b = UnitTangentState.from_angle(m, p, ang + h).direction
    g = eval_metric(m, p).g
    d = (b - a) / (2 * h)
    return math.sqrt(d @ g @ d)


def _to_chart(q: SurfacePoint, chart) -> SurfacePoint:
    from .metric_core import transition
    return transition(q, chart)


def geodesic_midpoint(m: MetricField, p: SurfacePoint, q: SurfacePoint, tol: float = 1e-11):
    s, ell = geodesic_bvp(m, p, q, tol)
    mid, _ = advance(m, s, 0.5 * ell, tol)
    return mid.point, ell


def loop_length(m: MetricField, loop: LoopCurve, tol: float = 1e-11) -> float:
    pts = loop.points()
    n = len(pts)
    return float(sum(geodesic_bvp(m, pts[i], pts[(i + 1) % n], tol)[1] for i in range(n)))


def max_segment_bound(m: MetricField) -> float:
    _, kmax = curvature_bounds(m, 24)
    return math.pi / (2.0 * math.sqrt(max(kmax, 1e-300)))


def loop_seed_state(m: MetricField, loop: LoopCurve, tol: float = 1e-11):
    """Initial state at vertex 0 heading for vertex 1, and the loop length."""
    pts = loop.points()
    s, _ = geodesic_bvp(m, pts[0], pts[1], tol)
    L = loop.length if loop.length is not None else loop_length(m, loop, tol)
    return s, L


def shorten_loop(m: MetricField, loop0: LoopCurve, iters: int = 100, tol: float = 1e-10,
                 *, collapse_fraction: float = 0.05, bvp_tol: float = 1e-11) -> LoopCurve:
    """Birkhoff midpoint shortening.

    Each sweep replaces the even vertices by geodesic midpoints of their
    neighbours, then the odd ones.  Every replacement lowers the length of
    the two adjacent segments to the length of a single geodesic, so the
    total length cannot increase.  The loop is flagged collapsed when its
    length drops below ``collapse_fraction`` of the initial length.
    """
    n = len(loop0)
    if n < 4 or n % 2:
        raise PreconditionError(f"shortening needs an even number (>= 4) of vertices, got {n}")
    pts = loop0.points()
    bound = max_segment_bound(m)
    seg = [geodesic_bvp(m, pts[i], pts[(i + 1) % n], bvp_tol)[1] for i in range(n)]
    if max(seg) >= bound:
        raise PreconditionError(
            f"segment length {max(seg):.3g} exceeds the spacing bound {bound:.3g}")
    L0 = float(sum(seg))
    lengths = [L0]
    collapsed = False
    converged = False
    for sweep in range(iters):
        for parity in (0, 1):
            new = list(pts)
            for i in range(parity, n, 2):
                a, b = pts[i - 1], pts[(i + 1) % n]
                mid, _ = geodesic_midpoint(m, a, b, bvp_tol)
                new[i] = _normal_chart(mid)
            pts = new
        L = float(sum(geodesic_bvp(m, pts[i], pts[(i + 1) % n], bvp_tol)[1] for i in range(n)))
        lengths.append(L)
        if L < collapse_fraction * L0:
            collapsed = True
            break
        if lengths[-2] - L < tol:
            converged = True
            break
    V = np.array([p.to_sphere() for p in pts])
    return LoopCurve(V, lengths[-1], collapsed, converged, tuple(lengths))


def _normal_chart(p: SurfacePoint) -> SurfacePoint:
    return SurfacePoint.from_sphere(p.to_sphere())


# ----------------------------------------------------------------------------
# seeds for specific surfaces
# ----------------------------------------------------------------------------

_PLANES = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}


def plane_loop(plane: str, n: int = 16, wobble: float = 0.0, mode: int = 2) -> LoopCurve:
    """Loop near the coordinate-plane great circle ``plane`` of the unit
    sphere, displaced off the plane by ``wobble * sin(mode * phi)``."""
    i, j, k = _PLANES[plane]
    phi = 2 * math.pi * np.arange(n) / n
    V = np.zeros((n, 3))
    V[:, i] = np.cos(phi)
    V[:, j] = np.sin(phi)
    V[:, k] = wobble * np.sin(mode * phi)
    return LoopCurve(V)


def circle_loop(colatitude: float, n: int = 16) -> LoopCurve:
    phi = 2 * math.pi * np.arange(n) / n
    st = math.sin(colatitude)
    V = np.column_stack([st * np.cos(phi), st * np.sin(phi), np.full(n, math.cos(colatitude))])
    return LoopCurve(V)


def principal_geodesic(m: MetricField, plane: str, tol: float = 1e-12, *, n: int = 16,
                       wobble: float = 0.02, sweeps: int = 30) -> ClosedGeodesic:
    """Closed geodesic near a coordinate plane found by a short shortening
    run followed by Newton shooting.

    The wobble seed is kept symmetric under the half-turn about the first
    axis of the plane; that symmetry class does not contain the unstable
    "slide off" mode of the shortest ellipse, so a few sweeps are safe.
    """
    loop = shorten_loop(m, plane_loop(plane, n, wobble), iters=sweeps, tol=1e-12)
    return refine_closed(m, loop, tol)


def plane_geodesic(m: MetricField, plane: str, tol: float = 1e-12) -> ClosedGeodesic:
    """Closed geodesic through the first axis point of a coordinate plane,
    tangent to it, refined by shooting from the plane's great circle.

    Suited to metrics with a reflection symmetry in the plane, where the
    plane curve itself is a geodesic."""
    if plane not in _PLANES:
        raise PreconditionError(f"plane must be one of {sorted(_PLANES)}, got {plane!r}")
    i, j, _ = _PLANES[plane]
    x = np.zeros(3)
    x[i] = 1.0
    d = np.zeros(3)
    d[j] = 1.0
    s = UnitTangentState.from_sphere(m, x, d)
    T = loop_length(m, plane_loop(plane, 64, 0.0))
    return refine_closed(m, s, tol, period=T)


def ellipse_length(p: float, q: float) -> float:
    """Perimeter of an ellipse with semi-axes p, q by quadrature."""
    from scipy.integrate import quad
    val, _ = quad(lambda t: math.sqrt(p * p * math.sin(t) ** 2 + q * q * math.cos(t) ** 2),
                  0.0, 2 * math.pi, epsabs=1e-13, epsrel=1e-13, limit=400)
    return val

"""Geodesic flow on the unit tangent bundle with co-integrated Jacobi fields.

The integrator is an adaptive DOP853 scheme compiled with numba.  Along
with the position and velocity it carries the fundamental solutions of the
scalar Jacobi equation ``f'' + K f = 0``: ``f1`` with ``(f1, f1') = (1, 0)``
and ``f2`` with ``(f2, f2') = (0, 1)`` at time zero.  After every accepted
step the velocity is rescaled to unit length and, when the position gets
within 20% of the chart boundary, the state moves to the other chart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import DomainError, IntegrationError, PreconditionError
from .metric_core import (Chart, MetricField, SurfacePoint, chart_orientation,
                          eval_metric, tangent_from_sphere, transition)

DEFAULT_TOL = 1e-10

_NO_CURVE = (np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), np.array([1.0, 0.0]))
_NO_TIMES = np.zeros(0)


@dataclass(frozen=True, eq=False)
class UnitTangentState:
    """A point with a unit tangent direction (chart components)."""

    point: SurfacePoint
    direction: np.ndarray

    def __post_init__(self):
        d = np.array(self.direction, dtype=float).reshape(2)
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)

    @classmethod
    def from_vector(cls, chart, vec) -> "UnitTangentState":
        return cls(SurfacePoint(chart, (vec[0], vec[1])), np.array([vec[2], vec[3]]))

    @classmethod
    def unit(cls, m: MetricField, point: SurfacePoint, direction) -> "UnitTangentState":
        """Rescale ``direction`` to unit length under ``m``."""
        d = np.asarray(direction, dtype=float)
        g = eval_metric(m, point).g
        n = math.sqrt(d @ g @ d)
        if n == 0:
            raise DomainError("zero direction vector")
        return cls(point, d / n)

    @classmethod
    def from_angle(cls, m: MetricField, point: SurfacePoint, angle: float) -> "UnitTangentState":
        """Unit vector at ``angle`` from the chart's first coordinate axis."""
        return cls.unit(m, point, [math.cos(angle), math.sin(angle)])

    @classmethod
    def from_sphere(cls, m: MetricField, x, dx) -> "UnitTangentState":
        """From a unit-sphere position and an ambient tangent direction."""
        p = SurfacePoint.from_sphere(x)
        return cls.unit(m, p, tangent_from_sphere(p, dx))

    @property
    def chart(self) -> Chart:
        return self.point.chart

    def vector(self) -> np.ndarray:
        return np.array([self.point.u, self.point.v, self.direction[0], self.direction[1]])

    def in_chart(self, chart) -> "UnitTangentState":
        chart = Chart(chart)
        if chart == self.chart:
            return self
        q = transition(self.point, chart)
        _, _, du, dv = _k.flip_chart(self.point.u, self.point.v, *self.direction)
        return UnitTangentState(q, np.array([du, dv]))

    def flipped(self) -> "UnitTangentState":
        return UnitTangentState(self.point, -self.direction)

    def speed_defect(self, m: MetricField) -> float:
        g = eval_metric(m, self.point).g
        return abs(self.direction @ g @ self.direction - 1.0)

    def sphere(self) -> np.ndarray:
        return self.point.to_sphere()


def normal_vector(m: MetricField, s: UnitTangentState) -> np.ndarray:
    """Unit normal N with (v, N) positively oriented (N points to the left)."""
    g = eval_metric(m, s.point).g
    return _normal(g, s.direction, chart_orientation(s.chart))


def _normal(g, v, sign):
    gv = g @ v
    det = g[0, 0] * g[1, 1] - g[0, 1] ** 2
    return sign * np.array([-gv[1], gv[0]]) / math.sqrt(det)


def state_distance(a: UnitTangentState, b: UnitTangentState) -> float:
    """Max-norm distance of two states, compared in the chart of ``a``."""
    try:
        bb = b.in_chart(a.chart)
    except DomainError:
        return math.inf
    return float(np.max(np.abs(a.vector() - bb.vector())))


@dataclass(frozen=True, eq=False)
class JacobiScalarState:
    f: float
    fdot: float


@dataclass(frozen=True, eq=False)
class GeodesicArc:
    """Samples of a unit-speed geodesic together with its Jacobi basis.

    ``states[i]`` holds ``(u, v, du, dv)`` in chart ``charts[i]`` and
    ``jacobi[i]`` holds ``(f1, f1', f2, f2')`` at ``times[i]``.
    """

    times: np.ndarray
    charts: np.ndarray
    states: np.ndarray
    jacobi: np.ndarray
    tolerance: float
    metric: MetricField = field(repr=False, default=None)

    @property
    def t_span(self) -> tuple:
        return (0.0, float(self.times[-1]))

    @property
    def initial(self) -> UnitTangentState:
        return self.state(0)

    @property
    def final(self) -> UnitTangentState:
        return self.state(len(self.times) - 1)

    def state(self, i: int) -> UnitTangentState:
        return UnitTangentState.from_vector(int(self.charts[i]), self.states[i])

    @property
    def samples(self) -> list:
        return [(float(t), self.state(i)) for i, t in enumerate(self.times)]

    def __len__(self):
        return len(self.times)

    def interpolate(self, t: float) -> UnitTangentState:
        """Cubic Hermite interpolation of position (velocity from the
        derivative of the same cubic)."""
        i = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2))
        a = self.state(i)
        b = self.state(i + 1).in_chart(a.chart)
        t0, t1 = self.times[i], self.times[i + 1]
        h = t1 - t0
        x = (t - t0) / h
        p0, p1 = a.vector()[:2], b.vector()[:2]
        m0, m1 = a.vector()[2:] * h, b.vector()[2:] * h
        h00 = 2 * x**3 - 3 * x**2 + 1
        h10 = x**3 - 2 * x**2 + x
        h01 = -2 * x**3 + 3 * x**2
        h11 = x**3 - x**2
        pos = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        d00 = 6 * x**2 - 6 * x
        d10 = 3 * x**2 - 4 * x + 1
        d01 = -6 * x**2 + 6 * x
        d11 = 3 * x**2 - 2 * x
        vel = (d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1) / h
        return UnitTangentState(SurfacePoint(a.chart, tuple(pos)), vel)

    def wronskian(self) -> np.ndarray:
        j = self.jacobi
        return j[:, 0] * j[:, 3] - j[:, 1] * j[:, 2]


# ----------------------------------------------------------------------------
# low-level driver
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RawRun:
    status: int
    t: float
    chart: int
    y: np.ndarray
    out_charts: np.ndarray
    out_y: np.ndarray
    steps: int
    min_abs_f1: float
    f1_sign_change: bool

    def final_state(self) -> UnitTangentState:
        return UnitTangentState.from_vector(self.chart, self.y)

    @property
    def jacobi(self) -> np.ndarray:
        return self.y[4:8].copy()


def default_hmax(m: MetricField) -> float:
    return 0.1 * m.length_scale


def run(m: MetricField, s0: UnitTangentState, t_end: float, tol: float = DEFAULT_TOL, *,
        out_times=None, want_integral=False, curve=None, event_sign=1.0,
        hmax=None, max_steps=None) -> RawRun:
    """Call the compiled integrator and translate failures into exceptions."""
    y0 = np.zeros(_k.NSTATE)
    y0[:4] = s0.vector()
    y0[4] = 1.0
    y0[7] = 1.0
    ot = _NO_TIMES if out_times is None else np.ascontiguousarray(out_times, dtype=float)
    if hmax is None:
        hmax = default_hmax(m)
    if max_steps is None:
        max_steps = int(200 * t_end / hmax) + 200000
    res = _k.integrate(m.packed, int(s0.chart), y0, float(t_end), float(tol), float(hmax),
                       bool(want_integral), ot,
                       _NO_CURVE if curve is None else curve,
                       float(event_sign), 0 if curve is None else 1, int(max_steps))
    status, t, chart, y, oc, oy, steps, minf1, sc = res
    if status in (2, 3):
        why = "step-size underflow" if status == 2 else "step budget exhausted"
        raise IntegrationError(
            f"{why} at t = {t:.6g}, chart {Chart(chart).name.lower()}, "
            f"coords ({y[0]:.6g}, {y[1]:.6g})")
    if not np.all(np.isfinite(y)):
        raise IntegrationError(f"non-finite state at t = {t:.6g}")
    return RawRun(int(status), float(t), int(chart), y, oc, oy, int(steps), float(minf1), bool(sc))


def sample_spacing(tol: float) -> float:
    """Spacing for which cubic Hermite interpolation error stays below tol."""
    return min(0.05, (38.4 * tol) ** 0.25)


def _check_tol(tol):
    if not (1e-13 <= tol <= 1e-5):
        raise PreconditionError(f"tolerance must lie in [1e-13, 1e-5], got {tol}")


def flow(m: MetricField, s0: UnitTangentState, t_end: float, tol: float = DEFAULT_TOL, *,
         sample_dt: float | None = None, times=None) -> GeodesicArc:
    """Integrate the geodesic through ``s0`` for time ``t_end``.

    Samples are returned on a uniform grid fine enough for cubic
    interpolation at the requested tolerance, or at ``times`` if given.
    """
    if not t_end > 0:
        raise PreconditionError(f"t_end must be positive, got {t_end}")
    _check_tol(tol)
    if times is None:
        dt = sample_spacing(tol) if sample_dt is None else float(sample_dt)
        n = max(2, int(math.ceil(t_end / dt)) + 1)
        times = np.linspace(0.0, t_end, n)
    else:
        times = np.asarray(times, dtype=float)
        if times[0] != 0.0:
            times = np.concatenate([[0.0], times])
        if times[-1] != t_end:
            times = np.concatenate([times, [t_end]])
    r = run(m, s0, t_end, tol, out_times=times)
    return GeodesicArc(times=times, charts=r.out_charts.copy(), states=r.out_y[:, :4].copy(),
                       jacobi=r.out_y[:, 4:8].copy(), tolerance=tol, metric=m)


def advance(m: MetricField, s0: UnitTangentState, t: float, tol: float = DEFAULT_TOL):
    """End state and Jacobi basis ``(f1, f1', f2, f2')`` after time ``t``."""
    r = run(m, s0, t, tol)
    return r.final_state(), r.jacobi


def jacobi_propagate(m: MetricField, arc: GeodesicArc, j0: JacobiScalarState) -> JacobiScalarState:
    """Orthogonal Jacobi field at the end of ``arc`` from initial data ``j0``.

    The arc already carries the fundamental pair, co-integrated with the
    geodesic, so the result is the corresponding linear combination.
    """
    f1, f1d, f2, f2d = arc.jacobi[-1]
    return JacobiScalarState(j0.f * f1 + j0.fdot * f2, j0.f * f1d + j0.fdot * f2d)


CLOSURE_TOL = 1e-8


def linearized_return(m: MetricField, arc: GeodesicArc, basis=None) -> np.ndarray:
    """2x2 linearized return map on the orthogonal Jacobi plane.

    Columns are the propagated images of the columns of ``basis``
    (identity by default).
    """
    d = state_distance(arc.initial, arc.final)
    if not d < CLOSURE_TOL:
        raise PreconditionError(f"arc does not close: endpoint mismatch {d:.3g}")
    B = np.eye(2) if basis is None else np.asarray(basis, dtype=float)
    cols = []
    for i in range(2):
        j = jacobi_propagate(m, arc, JacobiScalarState(B[0, i], B[1, i]))
        cols.append([j.f, j.fdot])
    return np.array(cols).T


def full_linearization(m: MetricField, s0: UnitTangentState, end: UnitTangentState,
                       jac, T: float) -> np.ndarray:
    """4x4 derivative of the time-T flow map in chart components.

    Built from the Jacobi data: a perturbation of the initial state splits
    into tangential parts (shift and speed, which propagate trivially) and
    normal parts, which propagate by the Jacobi pair.  Covariant derivatives
    convert between chart velocity increments and Jacobi field derivatives.
    The result maps (dx, dv) at ``s0`` to (dx, dv) at ``end`` with both in
    their own charts.
    """
    j0 = eval_metric(m, s0.point)
    j1 = eval_metric(m, end.point)
    v0 = s0.direction
    v1 = end.direction
    N0 = _normal(j0.g, v0, chart_orientation(s0.chart))
    N1 = _normal(j1.g, v1, chart_orientation(end.chart))
    f1, f1d, f2, f2d = jac
    D = np.zeros((4, 4))
    for c in range(4):
        e = np.zeros(4)
        e[c] = 1.0
        dx = e[:2]
        dv = e[2:]
        Dv = dv + np.einsum("ijk,j,k->i", j0.christoffel, dx, v0)
        alpha = dx @ j0.g @ v0
        a = dx @ j0.g @ N0
        beta = Dv @ j0.g @ v0
        b = Dv @ j0.g @ N0
        dx1 = (alpha + beta * T) * v1 + (a * f1 + b * f2) * N1
        Dv1 = beta * v1 + (a * f1d + b * f2d) * N1
        dv1 = Dv1 - np.einsum("ijk,j,k->i", j1.christoffel, dx1, v1)
        D[:2, c] = dx1
        D[2:, c] = dv1
    return D


def geodesic_acceleration(m: MetricField, s: UnitTangentState) -> np.ndarray:
    G = eval_metric(m, s.point).christoffel
    return -np.einsum("ijk,j,k->i", G, s.direction, s.direction)


def state_transition_jacobian(s: UnitTangentState) -> np.ndarray:
    """4x4 derivative of the chart change applied to ``s`` (point and vector)."""
    u, v = s.point.u, s.point.v
    w = np.array([u, v])
    r2 = u * u + v * v
    J = _k.flip_jacobian(u, v)
    dJ = np.zeros((2, 2, 2))  # dJ[k, i, j] = d J_ij / d w_k
    for k in range(2):
        for i in range(2):
            for j in range(2):
                dij = 1.0 if i == j else 0.0
                dik = 1.0 if i == k else 0.0
                djk = 1.0 if j == k else 0.0
                dJ[k, i, j] = (2 * dij * w[k] - 2 * dik * w[j] - 2 * w[i] * djk) / r2**2 \
                    - 4 * w[k] * (dij * r2 - 2 * w[i] * w[j]) / r2**3
    C = np.zeros((4, 4))
    C[:2, :2] = J
    C[2:, 2:] = J
    C[2:, :2] = np.einsum("kij,j->ik", dJ, s.direction)
    return C

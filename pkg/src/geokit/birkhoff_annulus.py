"""Birkhoff annulus over a simple closed geodesic and its return map.

Coordinates on the annulus are ``(t, theta)``: ``t`` is arclength along
the base geodesic (mod its length L) and ``theta`` the angle from the
geodesic's velocity to the state's velocity.  States in the annulus point
into D+, the disk on the left of the base geodesic (the side its normal N
points to).  The lift is

    v = cos(theta) T(t) + sin(theta) N(t).

Section crossings are located with the signed offset of the position from
the base curve along the left normal (computed on the unit sphere from a
piecewise quintic Hermite interpolant of the curve).  A return is the first
crossing from the right side to the left side after the orbit has visited
the right side.

Jacobian of the return map.  Write ``j = a f1 + b f2`` for the normal
Jacobi field, where a perturbation ``dt`` gives ``a = -sin(theta) dt`` and
``dtheta`` gives ``b = dtheta``.  Solving for the displaced crossing gives

    dt'     = -j / sin(theta'),        dtheta' = a f1' + b f2',

hence ``J = [[sin(th) f1/sin(th'), -f2/sin(th')], [-sin(th) f1', f2']]``
and ``sin(th') det J / sin(th)`` equals the Wronskian, which is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .closed_geodesics import ClosedGeodesic, LoopCurve, refine_closed
from .errors import (DomainError, GrazingError, NoConvergenceError, NoReturnError,
                     NotSimpleError, PreconditionError, GeokitError)
from .geodesic_flow import (DEFAULT_TOL, UnitTangentState, default_hmax, flow,
                            geodesic_acceleration,
                            normal_vector, run)
from .metric_core import MetricField, SurfacePoint, eval_metric, tangent_from_sphere

THETA_MIN = 1e-3
DEDUP_TOL = 1e-6


@dataclass(frozen=True)
class AnnulusState:
    t: float
    theta: float

    def __post_init__(self):
        if not (0.0 < self.theta < math.pi):
            raise DomainError(f"theta must lie in (0, pi), got {self.theta}")

    def array(self) -> np.ndarray:
        return np.array([self.t, self.theta])


@dataclass(frozen=True, eq=False)
class AnnulusReturn:
    image: AnnulusState
    return_time: float
    jacobian: np.ndarray
    source_theta: float
    within_bounds: bool = True
    jacobi: np.ndarray = field(default=None, repr=False)

    @property
    def weighted_determinant(self) -> float:
        """sin(theta') det(J) / sin(theta): the invariance of sin(theta) dt dtheta."""
        return (math.sin(self.image.theta) * float(np.linalg.det(self.jacobian))
                / math.sin(self.source_theta))


@dataclass(frozen=True)
class PeriodicPoint:
    state: AnnulusState
    n: int
    m: int
    trace_n: float
    degenerate_flag: bool
    residual: float = 0.0
    jacobian: tuple = ()

    @property
    def k(self) -> int:
        return self.n // self.m

    @property
    def hyperbolic(self) -> bool:
        return abs(self.trace_n) > 2.0 + 1e-6


@dataclass(frozen=True)
class DegenerateAnnulusReport:
    n: int
    max_displacement: float
    samples: int
    message: str = "return map is the identity on the sampled grid"


def check_simple(points: np.ndarray, factor: float = 0.5) -> None:
    """Raise NotSimpleError if a closed polyline on the sphere comes back
    closer to itself than ``factor`` times its typical spacing."""
    P = np.asarray(points, dtype=float)
    n = len(P)
    h = np.median(np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=1))
    d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
    idx = np.arange(n)
    gap = np.abs(idx[:, None] - idx[None, :])
    gap = np.minimum(gap, n - gap)
    mask = gap >= 3
    dmin = float(d[mask].min()) if mask.any() else math.inf
    if dmin < factor * h * 3:
        i, j = np.argwhere(mask & (d == d[mask].min()))[0]
        raise NotSimpleError(
            f"curve is not simple: samples {i} and {j} are {dmin:.3g} apart "
            f"(spacing {h:.3g})")


@dataclass(frozen=True, eq=False)
class AnnulusContext:
    """Everything needed to evaluate the return map over ``gamma``.

    ``side`` records the convention: "left" means D+ is the side N points to.
    """

    metric: MetricField
    gamma: ClosedGeodesic
    L: float
    curve: tuple = field(repr=False)
    theta_min: float = THETA_MIN
    t_bounds: tuple = (0.0, math.inf)
    tol: float = DEFAULT_TOL
    side: str = "left"
    curve_error: float = 0.0
    hmax: float = 0.1

    # -- geometry of the base curve -------------------------------------
    def base(self, t: float):
        """Chart point, unit tangent and left normal of the base curve at t."""
        c, c1, _ = _k.curve_eval(self.curve, float(t) % self.L)
        p = SurfacePoint.from_sphere(c)
        T = tangent_from_sphere(p, c1)
        g = eval_metric(self.metric, p).g
        T = T / math.sqrt(T @ g @ T)
        N = normal_vector(self.metric, UnitTangentState(p, T))
        return p, T, N, g

    def lift(self, s: AnnulusState) -> UnitTangentState:
        p, T, N, _ = self.base(s.t)
        return UnitTangentState(p, math.cos(s.theta) * T + math.sin(s.theta) * N)

    def project(self, u: UnitTangentState) -> AnnulusState:
        """Annulus coordinates of a unit vector based on the curve."""
        x = u.point.to_sphere()
        j, _ = _k.curve_nearest(self.curve, x)
        _, t = _k.curve_offset(self.curve, x, j)
        p, T, N, g = self.base(t)
        v = u.in_chart(p.chart).direction
        return AnnulusState(t, math.atan2(v @ g @ N, v @ g @ T))

    def wrap(self, t: float) -> float:
        return t % self.L

    def t_distance(self, a: float, b: float) -> float:
        d = (a - b) % self.L
        return min(d, self.L - d)


def _ambient_jet(m: MetricField, st: UnitTangentState):
    """Position, velocity and acceleration of a geodesic on the unit sphere."""
    p = st.point
    S0, S1, S2, _ = _k.sphere_jet(int(p.chart), p.u, p.v)
    w1 = st.direction
    w2 = geodesic_acceleration(m, st)
    return S0, S1 @ w1, np.einsum("aij,i,j->a", S2, w1, w1) + S1 @ w2


def _hermite_curve(m: MetricField, states, L: float, band: float):
    Mc = len(states)
    S = np.zeros((Mc, 3))
    V = np.zeros((Mc, 3))
    A = np.zeros((Mc, 3))
    for i, st in enumerate(states):
        S[i], V[i], A[i] = _ambient_jet(m, st)
    return (S, V, A, np.array([L, band]))


def build_annulus(m: MetricField, gamma_g, *, tol: float = DEFAULT_TOL,
                  theta_min: float = THETA_MIN, t_bounds=None,
                  samples: int | None = None) -> AnnulusContext:
    """Annulus context over a simple closed geodesic (or a loop that is
    first refined to one)."""
    if isinstance(gamma_g, LoopCurve):
        check_simple(gamma_g.vertices)
        gamma_g = refine_closed(m, gamma_g)
    if not isinstance(gamma_g, ClosedGeodesic):
        raise PreconditionError("build_annulus needs a ClosedGeodesic or a LoopCurve")
    L = gamma_g.period
    hmax = default_hmax(m)
    band = max(0.2, 6.0 * hmax / m.length_scale)
    Mc = samples or 256
    err = math.inf
    while True:
        ts = L * np.arange(2 * Mc) / (2 * Mc)
        arc = flow(m, gamma_g.init, L, min(tol, 1e-12), times=np.append(ts, L))
        P = np.array([arc.state(i).point.to_sphere() for i in range(1, 2 * Mc, 2)])
        curve = _hermite_curve(m, [arc.state(i) for i in range(0, 2 * Mc, 2)], L, band)
        mid = np.array([_k.curve_eval(curve, t)[0] for t in ts[1::2]])
        err = float(np.max(np.abs(mid - P)))
        if err < 1e-12 or Mc >= 4096 or samples:
            break
        Mc *= 2
    check_simple(curve[0])
    if t_bounds is None:
        t_bounds = (0.05 * L, 50.0 * L)
    return AnnulusContext(m, gamma_g, L, curve, theta_min, tuple(t_bounds), tol,
                          "left", err, hmax)


# ----------------------------------------------------------------------------
# return map
# ----------------------------------------------------------------------------

def _crossing(ctx: AnnulusContext, r, sign: float):
    """Annulus coordinates of the event state of a run."""
    y = r.y
    st = UnitTangentState.from_vector(r.chart, y)
    x = st.point.to_sphere()
    j, _ = _k.curve_nearest(ctx.curve, x)
    _, t1 = _k.curve_offset(ctx.curve, x, j)
    p, T, N, g = ctx.base(t1)
    v = sign * st.in_chart(p.chart).direction
    th = math.atan2(v @ g @ N, v @ g @ T)
    return t1, th


def return_map(ctx: AnnulusContext, s: AnnulusState, tol: float | None = None) -> AnnulusReturn:
    """One application of the first-return map with its Jacobian."""
    tol = tol or ctx.tol
    tm = ctx.theta_min
    if not (tm < s.theta < math.pi - tm):
        raise DomainError(f"theta = {s.theta} outside the guard band ({tm}, pi - {tm})")
    u = ctx.lift(s)
    r = run(ctx.metric, u, ctx.t_bounds[1], tol, curve=ctx.curve, event_sign=1.0,
            hmax=ctx.hmax)
    if r.status != 1:
        raise NoReturnError(f"no return to the section before t = {ctx.t_bounds[1]:.4g} "
                            f"from (t, theta) = ({s.t:.6g}, {s.theta:.6g})")
    t1, th1 = _crossing(ctx, r, 1.0)
    if not (tm < th1 < math.pi - tm):
        raise GrazingError(f"tangential crossing with theta' = {th1:.3g}")
    f1, f1d, f2, f2d = r.jacobi
    s0 = math.sin(s.theta)
    s1 = math.sin(th1)
    J = np.array([[s0 * f1 / s1, -f2 / s1], [-s0 * f1d, f2d]])
    ok = ctx.t_bounds[0] <= r.t <= ctx.t_bounds[1]
    return AnnulusReturn(AnnulusState(t1, th1), r.t, J, s.theta, ok, r.jacobi)


def inverse_return_map(ctx: AnnulusContext, s: AnnulusState, tol: float | None = None) -> AnnulusState:
    """Preimage under the return map (flow backwards to the previous crossing)."""
    tol = tol or ctx.tol
    tm = ctx.theta_min
    if not (tm < s.theta < math.pi - tm):
        raise DomainError(f"theta = {s.theta} outside the guard band")
    u = ctx.lift(s).flipped()
    r = run(ctx.metric, u, ctx.t_bounds[1], tol, curve=ctx.curve, event_sign=-1.0,
            hmax=ctx.hmax)
    if r.status != 1:
        raise NoReturnError("no backward return to the section before the time cap")
    t0, th0 = _crossing(ctx, r, -1.0)
    if not (tm < th0 < math.pi - tm):
        raise GrazingError(f"tangential backward crossing with theta = {th0:.3g}")
    return AnnulusState(t0, th0)


def iterate(ctx: AnnulusContext, s: AnnulusState, n: int, tol: float | None = None):
    """n-fold return with the chained Jacobian; returns (state, jacobian, time)."""
    J = np.eye(2)
    T = 0.0
    for _ in range(n):
        r = return_map(ctx, s, tol)
        J = r.jacobian @ J
        T += r.return_time
        s = r.image
    return s, J, T


def displacement(ctx: AnnulusContext, a: AnnulusState, b: AnnulusState) -> np.ndarray:
    dt = (b.t - a.t + 0.5 * ctx.L) % ctx.L - 0.5 * ctx.L
    return np.array([dt, b.theta - a.theta])


def fd_jacobian(ctx: AnnulusContext, s: AnnulusState, h: float = 1e-5, tol: float | None = None):
    """Central-difference Jacobian of the return map (test oracle)."""
    J = np.zeros((2, 2))
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        p = return_map(ctx, AnnulusState(s.t + e[0], s.theta + e[1]), tol).image
        q = return_map(ctx, AnnulusState(s.t - e[0], s.theta - e[1]), tol).image
        J[:, c] = displacement(ctx, q, p) / (2 * h)
    return J


def phase_portrait(ctx: AnnulusContext, grid, tol: float | None = None, workers: int = 1):
    """Rows (t, theta, t', theta', return_time, within_bounds) over a grid.

    States where the return fails are reported with NaN images.
    """
    nt, nth = _grid_shape(grid)
    ts = ctx.L * np.arange(nt) / nt
    margin = max(ctx.theta_min, 1e-2)
    ths = np.linspace(margin, math.pi - margin, nth + 2)[1:-1]
    jobs = [(t, th) for t in ts for th in ths]

    def one(job):
        try:
            r = return_map(ctx, AnnulusState(*job), tol)
            return (job[0], job[1], r.image.t, r.image.theta, r.return_time, float(r.within_bounds))
        except GeokitError:
            return (job[0], job[1], math.nan, math.nan, math.nan, 0.0)

    rows = _ordered_map(one, jobs, workers)
    return np.array(rows)


def _ordered_map(fn, jobs, workers):
    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _grid_shape(grid):
    if isinstance(grid, int):
        return grid, grid
    return int(grid[0]), int(grid[1])


# ----------------------------------------------------------------------------
# periodic points
# ----------------------------------------------------------------------------

def _newton_periodic(ctx, s, n, tol, max_iter=30):
    res = math.inf
    for it in range(max_iter):
        img, J, _ = iterate(ctx, s, n, tol)
        r = displacement(ctx, s, img)
        res = float(np.max(np.abs(r)))
        if res < 1e-11:
            break
        step = np.linalg.lstsq(J - np.eye(2), -r, rcond=1e-12)[0]
        lim = 0.05
        sc = min(1.0, lim / max(np.max(np.abs(step)), 1e-300))
        th = s.theta + sc * step[1]
        if not (ctx.theta_min < th < math.pi - ctx.theta_min):
            raise NoConvergenceError("Newton left the guard band", residual=res)
        s = AnnulusState(ctx.wrap(s.t + sc * step[0]), th)
    img, J, _ = iterate(ctx, s, n, tol)
    res = float(np.max(np.abs(displacement(ctx, s, img))))
    return s, J, res


def _polish(ctx, s, n, tol, cell, steps=3):
    """A few Gauss-Newton steps on the displacement, each kept inside one
    grid cell; returns the smallest displacement seen and its state."""
    best = (math.inf, s)
    for _ in range(steps + 1):
        try:
            img, J, _ = iterate(ctx, s, n, tol)
        except GeokitError:
            break
        r = displacement(ctx, s, img)
        d = float(np.linalg.norm(r))
        if d < best[0]:
            best = (d, s)
        step = np.linalg.lstsq(J - np.eye(2), -r, rcond=1e-12)[0]
        sc = min(1.0, cell[0] / max(abs(step[0]), 1e-300), cell[1] / max(abs(step[1]), 1e-300))
        th = s.theta + sc * step[1]
        if not (ctx.theta_min < th < math.pi - ctx.theta_min):
            break
        s = AnnulusState(ctx.wrap(s.t + sc * step[0]), th)
    return best


def _same(ctx, a: AnnulusState, b: AnnulusState, tol=DEDUP_TOL):
    return ctx.t_distance(a.t, b.t) < tol and abs(a.theta - b.theta) < tol


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def find_periodic(ctx: AnnulusContext, n: int, grid=16, tol: float | None = None,
                  workers: int = 1, seed_threshold: float = 0.1):
    """Fixed points of the n-th power of the return map.

    Returns a list of :class:`PeriodicPoint` (one representative per orbit)
    or a :class:`DegenerateAnnulusReport` when the map is the identity on
    the whole grid.
    """
    if n < 1:
        raise PreconditionError(f"n must be at least 1, got {n}")
    nt, nth = _grid_shape(grid)
    if nt < 16 or nth < 16:
        raise PreconditionError("grid density must be at least 16 x 16")
    tol = tol or ctx.tol
    ts = ctx.L * np.arange(nt) / nt
    margin = max(ctx.theta_min, 1e-2)
    ths = np.linspace(margin, math.pi - margin, nth + 2)[1:-1]

    def disp(job):
        try:
            s = AnnulusState(*job)
            img, _, _ = iterate(ctx, s, n, tol)
            return float(np.linalg.norm(displacement(ctx, s, img)))
        except GeokitError:
            return math.inf

    jobs = [(t, th) for t in ts for th in ths]
    D = np.array(_ordered_map(disp, jobs, workers)).reshape(nt, nth)
    finite = D[np.isfinite(D)]
    if finite.size == D.size and float(finite.max()) < 1e-7:
        return DegenerateAnnulusReport(n, float(finite.max()), int(D.size))
    seeds = []
    for i in range(nt):
        for j in range(nth):
            d = D[i, j]
            if not np.isfinite(d):
                continue
            nb = [D[(i + a) % nt, j + b] for a in (-1, 0, 1) for b in (-1, 0, 1)
                  if (a or b) and 0 <= j + b < nth]
            if all(d <= x for x in nb):
                seeds.append((d, AnnulusState(ts[i], ths[j])))
    # polish the discrete minima within one grid cell before thresholding
    cell = (ctx.L / nt, ths[1] - ths[0])
    polished = []
    for d, s0 in seeds:
        d1, s1 = _polish(ctx, s0, n, tol, cell)
        if d1 < seed_threshold:
            polished.append((d1, s1))
    seeds = polished
    seeds.sort(key=lambda x: x[0])
    found: list[PeriodicPoint] = []
    orbits: list[list[AnnulusState]] = []
    for _, s0 in seeds:
        try:
            s, J, res = _newton_periodic(ctx, s0, n, tol)
        except GeokitError:
            continue
        if not res < 1e-8:
            continue
        if any(any(_same(ctx, s, o) for o in orb) for orb in orbits):
            continue
        m = n
        for d in _divisors(n):
            try:
                img, _, _ = iterate(ctx, s, d, tol)
            except GeokitError:
                continue
            if np.max(np.abs(displacement(ctx, s, img))) < 1e-7:
                m = d
                break
        orb = [s]
        x = s
        for _ in range(m - 1):
            x = return_map(ctx, x, tol).image
            orb.append(x)
        rep = min(orb, key=lambda a: (round(a.t, 6), a.theta))
        if rep is not s:
            rep, J, res = _newton_periodic(ctx, rep, n, tol)
        tr = float(np.trace(J))
        orbits.append(orb)
        found.append(PeriodicPoint(rep, n, m, tr, abs(tr - 2.0) < 1e-6, res,
                                   tuple(map(tuple, J))))
    found.sort(key=lambda p: (p.state.t, p.state.theta))
    return found


def periodic_point_geodesic(ctx: AnnulusContext, p: PeriodicPoint, tol: float = 1e-12) -> ClosedGeodesic:
    """Closed geodesic through a periodic point, refined by shooting."""
    _, _, T = iterate(ctx, p.state, p.n, tol)
    return refine_closed(ctx.metric, ctx.lift(p.state), tol, period=T)

"""Stable and unstable manifolds of hyperbolic fixed points of planar maps.

The maps are area-preserving planar maps, typically an even power
f = F^(2n) of the annulus return map so that all four branches of a
hyperbolic periodic point are invariant.  Synthetic maps (a linear saddle
and the standard map) share the same interface and serve as fixtures.

Branches are grown by iterating a fundamental segment.  Every polyline
point carries a label (k, s): it is the k-th image of the seed point
p + side * delta0 * lambda^s * e at parameter s in [0, 1].  Crossings
between a stable and an unstable polyline are refined on these exact
preimages, which keeps the residual far below the polyline sagitta.
Lengths and angles use the flat metric dt^2 + dtheta^2 of the annulus
coordinates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .birkhoff_annulus import (AnnulusContext, AnnulusState, PeriodicPoint, inverse_return_map,
                               iterate, return_map)
from .errors import ClassificationError, GeokitError, PreconditionError

DELTA0 = 1e-6
ANGLE_TOL = 1e-4
SAGITTA = 1e-6
RESIDUAL_TOL = 1e-7
MERGE_TOL = 1e-6


# ----------------------------------------------------------------------------
# planar maps
# ----------------------------------------------------------------------------

class PlanarMap:
    """Interface: ``forward``, ``backward`` and ``jacobian`` on 2-vectors.

    ``period`` is the period of the first coordinate (None for the plane).
    Maps raise a GeokitError where they are undefined.
    """

    period: float | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def delta(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """b - a, with the first coordinate reduced modulo the period."""
        d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        if self.period:
            d[0] = (d[0] + 0.5 * self.period) % self.period - 0.5 * self.period
        return d

    def distance(self, a, b) -> float:
        return float(np.linalg.norm(self.delta(a, b)))

    def lift_near(self, x: np.ndarray, ref: np.ndarray) -> np.ndarray:
        """The lift of x closest to ref."""
        x = np.array(x, dtype=float)
        if self.period:
            x[0] += self.period * round((ref[0] - x[0]) / self.period)
        return x


class LinearMap(PlanarMap):
    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.Ai = np.linalg.inv(self.A)

    def forward(self, x):
        return self.A @ x

    def backward(self, x):
        return self.Ai @ x

    def jacobian(self, x):
        return self.A.copy()


class StandardMap(PlanarMap):
    """y' = y + k sin x, x' = x + y' on the cylinder (x mod 2 pi)."""

    def __init__(self, k: float):
        self.k = float(k)
        self.period = 2 * math.pi

    def forward(self, x):
        y = x[1] + self.k * math.sin(x[0])
        return np.array([x[0] + y, y])

    def backward(self, x):
        xp = x[0] - x[1]
        return np.array([xp, x[1] - self.k * math.sin(xp)])

    def jacobian(self, x):
        c = self.k * math.cos(x[0])
        return np.array([[1.0 + c, 1.0], [c, 1.0]])


class PowerMap(PlanarMap):
    """The q-th power of another planar map."""

    def __init__(self, base: PlanarMap, q: int):
        self.base, self.q = base, int(q)
        self.period = base.period

    def forward(self, x):
        for _ in range(self.q):
            x = self.base.forward(x)
        return x

    def backward(self, x):
        for _ in range(self.q):
            x = self.base.backward(x)
        return x

    def jacobian(self, x):
        J = np.eye(2)
        for _ in range(self.q):
            J = self.base.jacobian(x) @ J
            x = self.base.forward(x)
        return J


class AnnulusMap(PlanarMap):
    """F^q on annulus coordinates (t, theta)."""

    def __init__(self, ctx: AnnulusContext, q: int, tol: float | None = None):
        self.ctx, self.q = ctx, int(q)
        self.tol = tol or ctx.tol
        self.period = ctx.L

    def _state(self, x):
        return AnnulusState(self.ctx.wrap(float(x[0])), float(x[1]))

    def forward(self, x):
        s, _, _ = iterate(self.ctx, self._state(x), self.q, self.tol)
        return s.array()

    def backward(self, x):
        s = self._state(x)
        for _ in range(self.q):
            s = inverse_return_map(self.ctx, s, self.tol)
        return s.array()

    def jacobian(self, x):
        return iterate(self.ctx, self._state(x), self.q, self.tol)[1]


def annulus_map(ctx: AnnulusContext, p: PeriodicPoint, tol: float | None = None) -> AnnulusMap:
    """f = F^(2n) for a point of P_n, so every branch is invariant."""
    return AnnulusMap(ctx, 2 * p.n, tol)


# ----------------------------------------------------------------------------
# saddles and branches
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Saddle:
    """Hyperbolic fixed point of f with its eigen-data."""

    point: np.ndarray
    jacobian: np.ndarray
    lam: float
    e_unstable: np.ndarray
    e_stable: np.ndarray
    label: str = "p"

    @property
    def eigenvalue_product(self) -> float:
        return self.lam * self._mu

    @property
    def _mu(self) -> float:
        return float(np.linalg.det(self.jacobian) / self.lam)


def saddle(fmap: PlanarMap, p, J: np.ndarray | None = None, label: str = "p") -> Saddle:
    """Eigen-decomposition of the Jacobian of f at p; refuses non-hyperbolic p."""
    if isinstance(p, PeriodicPoint):
        x = p.state.array()
        Jn = np.asarray(p.jacobian, dtype=float)
        J = Jn @ Jn if (isinstance(fmap, AnnulusMap) and fmap.q == 2 * p.n) else fmap.jacobian(x)
    else:
        x = np.asarray(p, dtype=float)
        J = fmap.jacobian(x) if J is None else np.asarray(J, dtype=float)
    tr = float(np.trace(J))
    if not abs(tr) > 2 + 1e-6:
        raise ClassificationError(f"fixed point is not hyperbolic (trace {tr:.8g})")
    w, V = np.linalg.eig(J)
    w = w.real
    V = V.real
    iu = int(np.argmax(np.abs(w)))
    lam = float(w[iu])
    if lam < 0:
        raise ClassificationError("negative eigenvalues flip the branches; use an even power")
    eu = V[:, iu] / np.linalg.norm(V[:, iu])
    es = V[:, 1 - iu] / np.linalg.norm(V[:, 1 - iu])
    # deterministic orientation: first nonzero component positive
    eu = eu if eu[np.argmax(np.abs(eu) > 1e-14)] > 0 else -eu
    es = es if es[np.argmax(np.abs(es) > 1e-14)] > 0 else -es
    return Saddle(x, J, lam, eu, es, label)


@dataclass(eq=False)
class ManifoldBranch:
    owner: Saddle
    kind: str                      # "stable" or "unstable"
    side: int                      # +1 or -1
    points: np.ndarray             # (N, 2), continuous lift
    labels: np.ndarray             # (N, 2): iteration k, seed parameter s
    arc_length: float = 0.0
    exited: bool = False
    warning: str | None = None
    segment_lengths: list = field(default_factory=list)
    delta0: float = DELTA0

    @property
    def name(self) -> str:
        return f"{self.owner.label}:{self.kind}{'+' if self.side > 0 else '-'}"

    @property
    def direction(self) -> np.ndarray:
        return self.owner.e_unstable if self.kind == "unstable" else self.owner.e_stable

    def seed(self, s: float) -> np.ndarray:
        return self.owner.point + self.side * self.delta0 * self.owner.lam ** s * self.direction

    def growth_ratio(self, count: int = 3) -> float:
        """Geometric mean of successive fundamental segment length ratios."""
        L = np.asarray(self.segment_lengths[:count + 1])
        if L.size < 2:
            return math.nan
        return float(np.exp(np.mean(np.diff(np.log(L)))))


def local_branches(fmap, p, label: str = "p") -> list:
    """Four branch seeds (unstable +/-, stable +/-) at the hyperbolic point p.

    ``fmap`` may be an AnnulusContext, in which case f = F^(2n).  The seed
    segment runs from delta0 to lambda * delta0 along the eigendirection;
    its distance from the manifold is O(delta0^2).
    """
    if isinstance(fmap, AnnulusContext):
        fmap = annulus_map(fmap, p)
    sd = p if isinstance(p, Saddle) else saddle(fmap, p, label=label)
    out = []
    for kind in ("unstable", "stable"):
        for side in (1, -1):
            b = ManifoldBranch(sd, kind, side, np.zeros((0, 2)), np.zeros((0, 2)))
            s = np.linspace(0.0, 1.0, 9)
            b.points = np.array([b.seed(x) for x in s])
            b.labels = np.column_stack([np.zeros_like(s), s])
            b.arc_length = _polyline_length(b.points)
            b.segment_lengths = [b.arc_length]
            out.append(b)
    return out


def _polyline_length(P):
    return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1))) if len(P) > 1 else 0.0


def _sagitta(A, M, B):
    d = B - A
    n = np.linalg.norm(d)
    if n == 0:
        return float(np.linalg.norm(M - A))
    return abs(d[0] * (M[1] - A[1]) - d[1] * (M[0] - A[0])) / n


DEFAULT_POLICY = {"sagitta": SAGITTA, "max_segment": 0.02, "max_points": 40000,
                  "max_iterations": 200, "max_depth": 30}


def grow_branch(fmap, branch: ManifoldBranch, arc_budget: float, step_policy: dict | None = None
                ) -> ManifoldBranch:
    """Iterate the last fundamental segment until ``arc_budget`` is reached.

    Points are inserted wherever the image of a segment midpoint lies more
    than the sagitta bound off the image chord.  A failure of the map
    (leaving the guard band, grazing) stops the branch with a warning.
    """
    if not arc_budget > 0:
        raise PreconditionError("arc_budget must be positive")
    pol = dict(DEFAULT_POLICY, **(step_policy or {}))
    g = fmap.forward if branch.kind == "unstable" else fmap.backward
    # always regrow from the seed segment, so budgets give nested prefixes
    seed = branch.labels[:, 0] == 0
    P = [x for x in branch.points[seed]]
    Lb = [x for x in branch.labels[seed]]
    arc = _polyline_length(np.array(P))
    seglens = [arc]
    branch.exited, branch.warning = False, None
    src = list(zip(P, Lb))
    try:
        for _ in range(pol["max_iterations"]):
            if arc >= arc_budget or len(P) >= pol["max_points"]:
                break
            new = [(fmap.lift_near(g(src[0][0]), P[-1]), _next_label(src[0][1]))]
            seg_start = len(P)
            for i in range(1, len(src)):
                pieces = _image_segment(g, fmap, src[i - 1], src[i], new, pol)
                for x, l in pieces:
                    new.append((x, l))
                    arc += float(np.linalg.norm(x - P[-1]))
                    P.append(x)
                    Lb.append(l)
                if arc >= arc_budget:
                    break
            seglens.append(_polyline_length(np.array([new[0][0]] + P[seg_start:])))
            src = new
    except GeokitError as e:
        branch.exited, branch.warning = True, f"branch left the domain: {e}"
    branch.points = np.array(P)
    branch.labels = np.array(Lb)
    branch.arc_length = arc
    branch.segment_lengths = seglens
    if branch.exited:
        warnings.warn(f"{branch.name}: {branch.warning}", RuntimeWarning, stacklevel=2)
    return _truncate(branch, arc_budget)


def _next_label(l):
    return np.array([l[0] + 1, l[1]])


def _circle_curvature(P0, P1, P2):
    a = np.linalg.norm(P1 - P0)
    b = np.linalg.norm(P2 - P1)
    c = np.linalg.norm(P2 - P0)
    if a * b * c == 0:
        return math.inf
    cross = abs((P1[0] - P0[0]) * (P2[1] - P0[1]) - (P1[1] - P0[1]) * (P2[0] - P0[0]))
    return 2.0 * cross / (a * b * c)


def _image_segment(g, fmap, pa, pb, new, pol, depth=0, known_mid=None):
    """Image points after new[-1] up to the image of pb, refined so that
    every chord stays within the sagitta bound of the image curve.

    The sagitta of a chord is predicted from the circle through the last
    two accepted points and the chord end; where the prediction is not
    safely small the midpoint is mapped and the true sagitta used."""
    (a, la), (b, lb) = pa, pb
    A = new[-1][0]
    B = fmap.lift_near(g(b), A)
    return _split(g, fmap, a, la, b, lb, A, B, new[-2][0] if len(new) > 1 else None, pol, depth)


def _split(g, fmap, a, la, b, lb, A, B, Aprev, pol, depth):
    tol = pol["sagitta"]
    L = float(np.linalg.norm(B - A))
    if Aprev is not None and L <= pol["max_segment"]:
        pred = _circle_curvature(Aprev, A, B) * L * L / 8.0
        if pred < 0.25 * tol:
            return [(B, _next_label(lb))]
    mid = 0.5 * (a + b)
    lm = 0.5 * (la + lb)
    M = fmap.lift_near(g(mid), A)
    if (_sagitta(A, M, B) <= tol and L <= pol["max_segment"]) or depth >= pol["max_depth"]:
        return [(B, _next_label(lb))]
    left = _split(g, fmap, a, la, mid, lm, A, M, Aprev, pol, depth + 1)
    right = _split(g, fmap, mid, lm, b, lb, M, B, left[-2][0] if len(left) > 1 else A, pol,
                   depth + 1)
    return left + right


def _truncate(branch: ManifoldBranch, budget: float) -> ManifoldBranch:
    P = branch.points
    d = np.linalg.norm(np.diff(P, axis=0), axis=1)
    c = np.concatenate([[0.0], np.cumsum(d)])
    if c[-1] <= budget:
        branch.arc_length = float(c[-1])
        return branch
    i = int(np.searchsorted(c, budget))
    w = (budget - c[i - 1]) / d[i - 1]
    end = P[i - 1] + w * (P[i] - P[i - 1])
    lab = branch.labels[i].copy()
    lab[1] = branch.labels[i - 1][1] + w * (branch.labels[i][1] - branch.labels[i - 1][1]) \
        if branch.labels[i][0] == branch.labels[i - 1][0] else lab[1]
    branch.points = np.vstack([P[:i], end])
    branch.labels = np.vstack([branch.labels[:i], lab])
    branch.arc_length = float(budget)
    return branch


def branch_point(fmap, branch: ManifoldBranch, k: int, s: float) -> np.ndarray:
    """Exact k-th image of the seed at parameter s (unwrapped)."""
    g = fmap.forward if branch.kind == "unstable" else fmap.backward
    x = branch.seed(s)
    for _ in range(int(k)):
        x = fmap.lift_near(g(x), x)
    return x


# ----------------------------------------------------------------------------
# intersections
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class HomoclinicPoint:
    state: np.ndarray
    branches: tuple
    crossing_angle: float
    residual: float
    labels: tuple = ()
    angle_tol: float = ANGLE_TOL

    @property
    def transverse(self) -> bool:
        return abs(self.crossing_angle) > self.angle_tol

    @property
    def heteroclinic(self) -> bool:
        a, b = self.branches
        return a.split(":")[0] != b.split(":")[0]


def _segment_cross(a0, a1, b0, b1):
    """Parameters (u, v) of the crossing of [a0,a1] and [b0,b1], or None."""
    da = a1 - a0
    db = b1 - b0
    den = da[0] * db[1] - da[1] * db[0]
    if den == 0.0:
        return None
    w = b0 - a0
    u = (w[0] * db[1] - w[1] * db[0]) / den
    v = (w[0] * da[1] - w[1] * da[0]) / den
    if 0.0 <= u < 1.0 and 0.0 <= v < 1.0:
        return u, v
    return None


def _candidate_pairs(P: np.ndarray, Q: np.ndarray, period, swap: bool = False):
    """Segment pairs whose boxes share a hash cell (Q shifted by periods)."""
    segP = np.stack([P[:-1], P[1:]], axis=1)
    segQ = np.stack([Q[:-1], Q[1:]], axis=1)
    if len(segP) == 0 or len(segQ) == 0:
        return []
    h = max(float(np.max(np.abs(segP[:, 1] - segP[:, 0]))),
            float(np.max(np.abs(segQ[:, 1] - segQ[:, 0]))), 1e-9)
    if swap:
        segP, segQ = segQ, segP
    table: dict = {}

    def cells(seg, shift=0.0):
        lo = np.minimum(seg[0], seg[1])
        hi = np.maximum(seg[0], seg[1])
        x0 = lo[0] + shift
        x1 = hi[0] + shift
        if period:
            base = math.floor(x0 / period) * period
            x0, x1 = x0 - base, x1 - base
        for i in range(int(math.floor(x0 / h)), int(math.floor(x1 / h)) + 1):
            for j in range(int(math.floor(lo[1] / h)), int(math.floor(hi[1] / h)) + 1):
                if period:
                    nper = max(1, int(round(period / h)))
                    yield (i % nper, j)
                else:
                    yield (i, j)

    for j, s in enumerate(segQ):
        for c in cells(s):
            table.setdefault(c, []).append(j)
    pairs = set()
    for i, s in enumerate(segP):
        for c in cells(s):
            for j in table.get(c, ()):
                pairs.add((i, j) if not swap else (j, i))
    return sorted(pairs)


def _shift_to(period, ref, seg):
    if not period:
        return seg
    k = round((ref[0] - seg[0][0]) / period)
    return seg + np.array([k * period, 0.0])


def detect_intersections(b_stable: ManifoldBranch, b_unstable: ManifoldBranch, fmap=None, *,
                         angle_tol: float = ANGLE_TOL, swap_axes: bool = False,
                         refine: bool = True) -> list:
    """Crossings of a stable and an unstable polyline, refined on exact preimages."""
    if b_stable.kind != "stable" or b_unstable.kind != "unstable":
        raise PreconditionError("need a stable and an unstable branch")
    period = fmap.period if fmap is not None else None
    S, U = b_stable.points, b_unstable.points
    found = []
    for i, j in _candidate_pairs(S, U, period, swap=swap_axes):
        s0, s1 = S[i], S[i + 1]
        u0, u1 = _shift_to(period, s0, np.array([U[j], U[j + 1]]))
        c = _segment_cross(s0, s1, u0, u1)
        if c is None:
            continue
        found.append((i, j, s0 + c[0] * (s1 - s0)))
    out: list[HomoclinicPoint] = []
    for i, j, x in found:
        if refine and fmap is not None:
            hp = _refine_crossing(fmap, b_stable, b_unstable, i, j, angle_tol)
            if hp is None:
                continue
        else:
            ts = S[i + 1] - S[i]
            tu = U[j + 1] - U[j]
            ang = _angle(ts, tu)
            hp = HomoclinicPoint(_wrap(period, x), (b_stable.name, b_unstable.name), ang, 0.0,
                                 (), angle_tol)
        if any(_dist(period, hp.state, q.state) < MERGE_TOL for q in out):
            continue
        out.append(hp)
    out.sort(key=lambda q: (round(float(q.state[0]), 9), round(float(q.state[1]), 9)))
    return out


def _wrap(period, x):
    x = np.array(x, dtype=float)
    if period:
        x[0] = x[0] % period
    return x


def _dist(period, a, b):
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    if period:
        d[0] = (d[0] + 0.5 * period) % period - 0.5 * period
    return float(np.linalg.norm(d))


def _angle(ts, tu):
    """Signed angle between two lines, in (-pi/2, pi/2]."""
    a = math.atan2(ts[0] * tu[1] - ts[1] * tu[0], ts[0] * tu[0] + ts[1] * tu[1])
    if a > math.pi / 2:
        a -= math.pi
    elif a <= -math.pi / 2:
        a += math.pi
    return a


def _label_param(labels, i):
    """Global curve parameter k + s of polyline point i."""
    return float(labels[i][0] + labels[i][1])


def _curve_at(fmap, branch, tau):
    k = int(math.floor(tau))
    s = tau - k
    if s == 0.0 and k > 0:
        k, s = k - 1, 1.0
    return branch_point(fmap, branch, k, s)


def _line_params(A, B, C, D):
    """Parameters (u, v) with A + u (B - A) = C + v (D - C), or None."""
    da = B - A
    db = D - C
    den = da[0] * db[1] - da[1] * db[0]
    if den == 0.0:
        return None
    w = C - A
    return ((w[0] * db[1] - w[1] * db[0]) / den, (w[0] * da[1] - w[1] * da[0]) / den)


def _refine_crossing(fmap, bs, bu, i, j, angle_tol, max_iter=40):
    """Secant iteration on the exact curves: intersect the two local chords,
    evaluate both curves at the predicted parameters, repeat.  The residual
    is the distance between the two curve points at the final parameters."""
    period = fmap.period
    try:
        # chords of the exact curves near polyline segments i and j
        ts_lo, ts_hi = _label_param(bs.labels, i), _label_param(bs.labels, i + 1)
        S0, S1 = _curve_at(fmap, bs, ts_lo), _curve_at(fmap, bs, ts_hi)
        r = _bracket(fmap, bu, j, S0, S1)
        if r is None:
            return None
        b0, b1, U0, U1 = r
        r = _bracket(fmap, bs, i, U0, U1)
        if r is None:
            return None
        a0, a1, S0, S1 = r
        best = (math.inf, None)
        for _ in range(max_iter):
            A = S0
            c = _line_params(A, fmap.lift_near(S1, A), fmap.lift_near(U0, A),
                             fmap.lift_near(U1, A))
            if c is None or not (-1.0 < c[0] < 2.0 and -1.0 < c[1] < 2.0):
                break   # chords degenerate at the noise floor, or diverging
            a = a0 + c[0] * (a1 - a0)
            b = b0 + c[1] * (b1 - b0)
            Sa, Ub = _curve_at(fmap, bs, a), _curve_at(fmap, bu, b)
            res = fmap.distance(Sa, Ub)
            if res < best[0]:
                best = (res, (a, b, Sa, Ub))
            a0, S0, a1, S1 = a1, S1, a, Sa
            b0, U0, b1, U1 = b1, U1, b, Ub
            if res < 1e-13 or a1 == a0 or b1 == b0:
                break
        res = best[0]
        if not res < RESIDUAL_TOL:
            return None
        a, b, Sa, Ub = best[1]
        x = 0.5 * (Sa + fmap.lift_near(Ub, Sa))
        h = 1e-5
        ts = fmap.delta(_curve_at(fmap, bs, max(a - h, 0.0)), _curve_at(fmap, bs, a + h))
        tu = fmap.delta(_curve_at(fmap, bu, max(b - h, 0.0)), _curve_at(fmap, bu, b + h))
    except GeokitError:
        return None
    ang = _angle(ts, tu)
    return HomoclinicPoint(_wrap(period, x), (bs.name, bu.name), ang, float(res),
                           (("stable", a), ("unstable", b)), angle_tol)


def _side(fmap, P, A, B):
    P = fmap.lift_near(P, A)
    B = fmap.lift_near(B, A)
    d = B - A
    return d[0] * (P[1] - A[1]) - d[1] * (P[0] - A[0])


def _bracket(fmap, branch, idx, A, B, reach=24):
    """Parameter bracket of the exact curve around polyline index idx that
    straddles the line through A and B.  The polyline labels are only
    approximate (inserted points are chord midpoints), so the search
    widens over neighbouring labels, nearest first."""
    n = len(branch.labels)
    cache = {}

    def pt(k):
        if k not in cache:
            cache[k] = (_label_param(branch.labels, k),
                        _curve_at(fmap, branch, _label_param(branch.labels, k)))
        return cache[k]

    order = [idx]
    for d in range(1, reach + 1):
        order += [idx + d, idx - d]
    for k in order:
        if not (0 <= k < n - 1):
            continue
        (t0, P0), (t1, P1) = pt(k), pt(k + 1)
        if t1 <= t0:
            continue
        if _side(fmap, P0, A, B) * _side(fmap, P1, A, B) <= 0:
            return t0, t1, P0, P1
    return None


# ----------------------------------------------------------------------------
# shadowing
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ShadowReport:
    certified: bool
    forward: np.ndarray
    backward: np.ndarray
    forward_ratio: float
    backward_ratio: float
    lam: float
    threshold: float
    steps: int
    message: str = ""
    lam_backward: float | None = None

    def ratios_match(self, rel: float = 0.05) -> bool:
        """Forward ratio within rel of 1/lam (stable owner) and backward
        ratio within rel of 1/lam_backward (unstable owner)."""
        lb = self.lam if self.lam_backward is None else self.lam_backward
        return (abs(self.forward_ratio * self.lam - 1) < rel
                and abs(self.backward_ratio * lb - 1) < rel)


def _decays(d: np.ndarray, threshold: float) -> tuple:
    """Does the sequence fall below the threshold, decreasing monotonically
    from its last local maximum before that?  Returns (ok, index)."""
    below = np.nonzero(d < threshold)[0]
    if below.size == 0:
        return False, -1
    k = int(below[0])
    if k == 0:
        return True, 0
    i = k
    while i > 0 and d[i - 1] > d[i]:
        i -= 1
    return i < k, k


def _ratio(d: np.ndarray, k: int, lo: float = 1e-7, hi: float = 1e-2) -> float:
    """Geometric decay ratio over the linear regime before index k."""
    idx = [i for i in range(1, k + 1) if lo < d[i] < hi and lo < d[i - 1] < hi]
    if not idx:
        idx = [k] if k >= 1 else []
    if not idx:
        return math.nan
    r = [d[i] / d[i - 1] for i in idx]
    return float(np.exp(np.mean(np.log(r))))


def shadow_verify(fmap, h, owner: Saddle, steps: int = 30, threshold: float = 1e-4, *,
                  unstable_owner: Saddle | None = None) -> ShadowReport:
    """Iterate h forward and backward and watch the distance to the owner.

    For a heteroclinic point pass the owner of the stable branch as
    ``owner`` (forward target) and the owner of the unstable branch as
    ``unstable_owner`` (backward target).
    """
    x0 = np.asarray(h.state if isinstance(h, HomoclinicPoint) else h, dtype=float)
    back = owner if unstable_owner is None else unstable_owner
    seq = {}
    for name, g, p in (("forward", fmap.forward, owner.point),
                       ("backward", fmap.backward, back.point)):
        d = [fmap.distance(x0, p)]
        x = x0
        for _ in range(steps):
            try:
                x = g(x)
            except GeokitError:
                d.append(math.inf)
                break
            d.append(fmap.distance(x, p))
            if d[-1] < 1e-13:
                break
        seq[name] = np.array(d)
    okf, kf = _decays(seq["forward"], threshold)
    okb, kb = _decays(seq["backward"], threshold)
    rf = _ratio(seq["forward"], kf) if okf else math.nan
    rb = _ratio(seq["backward"], kb) if okb else math.nan
    msg = "" if okf and okb else ("forward orbit does not converge" if not okf else
                                  "backward orbit does not converge")
    return ShadowReport(bool(okf and okb), seq["forward"], seq["backward"], rf, rb,
                        owner.lam, threshold, steps, msg, back.lam)


@dataclass
class HomoclinicSearch:
    certified: list
    quarantine: list
    reports: list
    branches: list


def search(fmap, owner: Saddle | None, branches, arc_budget: float, *, steps: int = 30,
           angle_tol: float = ANGLE_TOL, policy: dict | None = None) -> HomoclinicSearch:
    """Grow the given branches, intersect every stable/unstable pair and
    certify transverse crossings by shadowing.

    Branches may belong to several saddles of the same map; a pair with
    different owners yields heteroclinic points, shadowed forward to the
    stable owner and backward to the unstable one.  ``arc_budget`` is a
    number or a mapping from branch name to budget.  ``owner`` is kept for
    the single-saddle call and may be None.
    """
    def budget(b):
        return arc_budget.get(b.name, 0.0) if isinstance(arc_budget, dict) else arc_budget
    grown = [grow_branch(fmap, b, budget(b), policy) if budget(b) > 0 else b for b in branches]
    st = [b for b in grown if b.kind == "stable"]
    un = [b for b in grown if b.kind == "unstable"]
    cert, quar, reps = [], [], []
    for bs in st:
        for bu in un:
            for hp in detect_intersections(bs, bu, fmap, angle_tol=angle_tol):
                if not hp.transverse:
                    quar.append((hp, "near-tangency"))
                    continue
                rep = shadow_verify(fmap, hp, bs.owner, steps, unstable_owner=bu.owner)
                reps.append((hp, rep))
                if rep.certified:
                    cert.append(hp)
                else:
                    quar.append((hp, rep.message))
    return HomoclinicSearch(cert, quar, reps, grown)

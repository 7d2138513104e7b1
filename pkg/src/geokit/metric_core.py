"""Metrics on the two-sphere in a two-chart stereographic atlas.

The atlas has a north chart (``w = 0`` at the north pole, projection from
the south pole) and a south chart (``w = 0`` at the south pole).  Both map a
chart point ``w = (u, v)`` to the unit sphere; the transition between them is
``w -> w / |w|^2``.  Each chart domain is the open disk ``|w| < 2``.

Orientation: the north chart is positively oriented with respect to the
outward normal, the south chart negatively.  :func:`chart_orientation`
returns that sign; it is used to make "left of the velocity" a global notion.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as _k
from .errors import DomainError, MetricError, PreconditionError

CHART_RADIUS = _k.R_DOM
SWITCH_RADIUS = _k.R_SWITCH


class Chart(enum.IntEnum):
    NORTH = 0
    SOUTH = 1


def chart_orientation(chart) -> float:
    return 1.0 if Chart(chart) == Chart.NORTH else -1.0


@dataclass(frozen=True)
class SurfacePoint:
    """A point of S^2 in one chart of the atlas."""

    chart: Chart
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "chart", Chart(self.chart))
        u, v = (float(c) for c in self.coords)
        object.__setattr__(self, "coords", (u, v))
        if not (math.isfinite(u) and math.isfinite(v)):
            raise DomainError(f"non-finite chart coordinates {self.coords}")
        if u * u + v * v >= CHART_RADIUS ** 2:
            raise DomainError(
                f"coordinates {self.coords} outside the {self.chart.name.lower()} chart "
                f"domain |w| < {CHART_RADIUS}")

    @property
    def u(self) -> float:
        return self.coords[0]

    @property
    def v(self) -> float:
        return self.coords[1]

    def to_sphere(self) -> np.ndarray:
        """Position on the unit sphere."""
        return _k.to_sphere(int(self.chart), self.u, self.v)

    @classmethod
    def from_sphere(cls, x, chart=None) -> "SurfacePoint":
        """Chart point for a unit vector; picks the chart centred nearest."""
        x = np.asarray(x, dtype=float)
        x = x / np.linalg.norm(x)
        if chart is None:
            chart = Chart.NORTH if x[2] >= 0 else Chart.SOUTH
        u, v = _k.from_sphere(int(chart), x[0], x[1], x[2])
        return cls(chart, (u, v))


def sphere_differential(p: SurfacePoint) -> np.ndarray:
    """3x2 derivative of the chart-to-sphere map at ``p``."""
    _, S1, _, _ = _k.sphere_jet(int(p.chart), p.u, p.v)
    return S1


def tangent_from_sphere(p: SurfacePoint, dx) -> np.ndarray:
    """Chart components of an ambient tangent vector of the unit sphere."""
    S1 = sphere_differential(p)
    # the stereographic map is conformal, so S1^T S1 is a multiple of I
    return S1.T @ np.asarray(dx, dtype=float) / (S1[:, 0] @ S1[:, 0])


def transition(p: SurfacePoint, target) -> SurfacePoint:
    """Express ``p`` in the ``target`` chart."""
    target = Chart(target)
    if target == p.chart:
        return p
    r2 = p.u * p.u + p.v * p.v
    if r2 * CHART_RADIUS ** 2 <= 1.0:
        raise DomainError(
            f"point {p.coords} of the {p.chart.name.lower()} chart is not in the "
            f"{target.name.lower()} chart domain")
    return SurfacePoint(target, (p.u / r2, p.v / r2))


def transition_jacobian(p: SurfacePoint) -> np.ndarray:
    """Derivative of the transition map out of ``p.chart`` at ``p``."""
    return _k.flip_jacobian(p.u, p.v)


# ----------------------------------------------------------------------------
# metric fields
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Bump:
    """Radial bump ``amplitude * exp(1 - 1/(1 - r^2))`` added to the log
    conformal factor; ``r`` is the chordal distance to ``center`` on the unit
    sphere divided by ``radius``."""

    center: tuple
    radius: float
    amplitude: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        n = np.linalg.norm(c)
        if c.shape != (3,) or not n > 0:
            raise MetricError(f"bump center must be a nonzero 3-vector, got {self.center}")
        object.__setattr__(self, "center", tuple(float(x) for x in c / n))
        if not (self.radius > 0 and self.radius <= 2.0):
            raise MetricError(f"bump radius must lie in (0, 2], got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "amplitude", float(self.amplitude))


@dataclass(frozen=True, eq=False)
class PatchTables:
    """Compiled representation of a Fermi-coordinate metric patch."""

    pp: np.ndarray
    cheb2: np.ndarray
    cheb1: np.ndarray
    coarse: np.ndarray
    record: object = None


_DUMMY_PP = np.zeros(_k._P_LEN)
_DUMMY_C2 = np.zeros((6, 1, 1))
_DUMMY_C1 = np.zeros((2, 1))
_DUMMY_CO = np.zeros((1, 4))

KINDS = ("round", "ellipsoid", "bumped_round", "fermi_patched")


@dataclass(frozen=True, eq=False)
class MetricField:
    """A metric on S^2.

    Use the constructors :meth:`round`, :meth:`ellipsoid`,
    :meth:`bumped_round`; patched metrics come from
    :func:`geokit.perturbation.apply_perturbation`.
    """

    kind: str
    params: dict
    base: "MetricField | None" = None
    patch: PatchTables | None = None
    packed: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MetricError(f"unknown metric kind {self.kind!r}")
        object.__setattr__(self, "packed", self._pack())

    @classmethod
    def round(cls, radius: float = 1.0) -> "MetricField":
        if not radius > 0:
            raise MetricError(f"radius must be positive, got {radius}")
        return cls("round", {"radius": float(radius)})

    @classmethod
    def ellipsoid(cls, a: float, b: float, c: float) -> "MetricField":
        for name, val in (("a", a), ("b", b), ("c", c)):
            if not val > 0:
                raise MetricError(f"semi-axis {name} must be positive, got {val}")
        return cls("ellipsoid", {"a": float(a), "b": float(b), "c": float(c)})

    @classmethod
    def bumped_round(cls, radius: float, bumps) -> "MetricField":
        if not radius > 0:
            raise MetricError(f"radius must be positive, got {radius}")
        bumps = tuple(b if isinstance(b, Bump) else Bump(**b) for b in bumps)
        return cls("bumped_round", {"radius": float(radius), "bumps": bumps})

    def _pack(self):
        if self.kind in ("round", "bumped_round"):
            bumps = self.params.get("bumps", ())
            fp = [self.params["radius"], float(len(bumps))]
            for b in bumps:
                fp.extend([*b.center, b.radius, b.amplitude])
            return (0, np.array(fp), _DUMMY_PP, _DUMMY_C2, _DUMMY_C1, _DUMMY_CO)
        if self.kind == "ellipsoid":
            fp = np.array([self.params["a"], self.params["b"], self.params["c"]])
            return (1, fp, _DUMMY_PP, _DUMMY_C2, _DUMMY_C1, _DUMMY_CO)
        if self.base is None or self.patch is None:
            raise MetricError("fermi_patched metric needs a base metric and a patch")
        if self.base.kind == "fermi_patched":
            raise MetricError("patching an already patched metric is not supported")
        bp = self.base.packed
        pt = self.patch
        return (2, bp[1], pt.pp, pt.cheb2, pt.cheb1, pt.coarse)

    @property
    def length_scale(self) -> float:
        """Lower bound for |dX|/|dsigma| (metric length per unit-sphere length)."""
        if self.kind == "fermi_patched":
            return 0.9 * self.base.length_scale
        if self.kind == "ellipsoid":
            return min(self.params["a"], self.params["b"], self.params["c"])
        damp = sum(abs(b.amplitude) for b in self.params.get("bumps", ()))
        return self.params["radius"] * math.exp(-damp)

    def embedding(self, x) -> np.ndarray:
        """Ambient picture of unit-sphere points (isometric for round and
        ellipsoid kinds, the underlying round sphere otherwise)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ellipsoid":
            return x * np.array([self.params["a"], self.params["b"], self.params["c"]])
        if self.kind == "fermi_patched":
            return self.base.embedding(x)
        return x * self.params["radius"]

    def describe(self) -> dict:
        """Plain-data description used for serialization."""
        if self.kind == "bumped_round":
            return {"kind": self.kind, "parameters": {
                "radius": self.params["radius"],
                "bumps": [{"center": list(b.center), "radius": b.radius,
                           "amplitude": b.amplitude} for b in self.params["bumps"]]}}
        if self.kind == "fermi_patched":
            return {"kind": self.kind, "base": self.base.describe()}
        return {"kind": self.kind, "parameters": dict(self.params)}


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetricJet:
    g: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray
    christoffel: np.ndarray
    curvature: float


def eval_metric(m: MetricField, p: SurfacePoint) -> MetricJet:
    """Metric components, two derivatives, Christoffel symbols and K at p.

    ``dg[k, i, j]`` is the k-th partial of ``g_ij``; ``d2g[k, l, i, j]`` the
    mixed second partial; ``christoffel[i, j, k]`` is Gamma^i_jk.
    """
    g, dg, d2g = _k.metric_jet(m.packed, int(p.chart), p.u, p.v)
    if not (g[0, 0] > 0 and g[0, 0] * g[1, 1] - g[0, 1] ** 2 > 0):
        raise MetricError(f"metric not positive definite at {p.chart.name} {p.coords}")
    G = _k.christoffel(g, dg)
    K = _k.brioschi(g, dg, d2g)
    return MetricJet(g, dg, d2g, G, float(K))


@njit(cache=True)
def _curvature_many(M, charts, us, vs):
    out = np.empty(us.size)
    for i in range(us.size):
        g, dg, d2g = _k.metric_jet(M, charts[i], us[i], vs[i])
        out[i] = _k.brioschi(g, dg, d2g)
    return out


@dataclass(frozen=True, eq=False)
class CurvatureReport:
    K_min: float
    K_max: float
    argmin: SurfacePoint
    argmax: SurfacePoint
    samples: np.ndarray  # columns chart, u, v, K
    convex: bool

    @property
    def nonconvex(self) -> bool:
        return not self.convex


def curvature_grid(grid_density: int):
    """Sample points covering S^2: a square grid on each chart's unit disk."""
    n = int(grid_density)
    xs = np.linspace(-1.0, 1.0, n)
    U, V = np.meshgrid(xs, xs, indexing="ij")
    keep = U ** 2 + V ** 2 <= 1.0 + 1e-12
    u = U[keep]
    v = V[keep]
    charts = np.concatenate([np.zeros(u.size, dtype=np.int64), np.ones(u.size, dtype=np.int64)])
    return charts, np.concatenate([u, u]), np.concatenate([v, v])


def curvature_report(m: MetricField, grid_density: int = 32) -> CurvatureReport:
    """Grid-based curvature range; flags the metric non-convex if K_min <= 0."""
    if grid_density < 8:
        raise PreconditionError(f"grid_density must be at least 8, got {grid_density}")
    charts, us, vs = curvature_grid(grid_density)
    K = _curvature_many(m.packed, charts, us, vs)
    i0 = int(np.argmin(K))
    i1 = int(np.argmax(K))
    samples = np.column_stack([charts.astype(float), us, vs, K])
    return CurvatureReport(
        K_min=float(K[i0]), K_max=float(K[i1]),
        argmin=SurfacePoint(int(charts[i0]), (us[i0], vs[i0])),
        argmax=SurfacePoint(int(charts[i1]), (us[i1], vs[i1])),
        samples=samples, convex=bool(K[i0] > 0))


def curvature_bounds(m: MetricField, grid_density: int = 24) -> tuple:
    rep = curvature_report(m, grid_density)
    return rep.K_min, rep.K_max

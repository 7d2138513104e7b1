"""Shared fixtures; expensive objects are built once per session."""

import math

import numpy as np
import pytest

from geokit.closed_geodesics import principal_geodesic, plane_geodesic
from geokit.metric_core import Bump, MetricField

ELLIPSOID = (1.0, 1.1, 1.3)


def dumbbell(amplitude=0.8, radius=1.8, extra=None):
    """Two equal bumps on the x-axis; optionally a third, symmetry-breaking one
    given as (angle in the xy-plane, radius, amplitude)."""
    bumps = [Bump((1.0, 0.0, 0.0), radius, amplitude), Bump((-1.0, 0.0, 0.0), radius, amplitude)]
    if extra is not None:
        ang, r, a = extra
        bumps.append(Bump((math.cos(ang), math.sin(ang), 0.0), r, a))
    return MetricField.bumped_round(1.0, bumps)


@pytest.fixture(scope="session")
def round_metric():
    return MetricField.round(1.0)


@pytest.fixture(scope="session")
def ellipsoid():
    return MetricField.ellipsoid(*ELLIPSOID)


@pytest.fixture(scope="session")
def principal(ellipsoid):
    """The three principal ellipses of the (1, 1.1, 1.3) ellipsoid."""
    return {p: principal_geodesic(ellipsoid, p) for p in ("xy", "xz", "yz")}


@pytest.fixture(scope="session")
def round_equator(round_metric):
    return plane_geodesic(round_metric, "xy")


@pytest.fixture(scope="session")
def neck():
    """Hyperbolic neck of the A = 0.8 dumbbell (f1 has no zero)."""
    m = dumbbell()
    return m, plane_geodesic(m, "yz")


@pytest.fixture(scope="session")
def waist_annulus(ellipsoid, principal):
    from geokit.birkhoff_annulus import build_annulus
    return build_annulus(ellipsoid, principal["xy"], tol=1e-11)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20261014)


def transported_shift(m, s0, h):
    """State at signed distance h along the normal geodesic from s0, with the
    direction parallel transported: the normal geodesic's velocity turned
    back by a right angle."""
    from geokit.geodesic_flow import UnitTangentState, advance, normal_vector
    N = normal_vector(m, s0)
    q, _ = advance(m, UnitTangentState(s0.point, N * math.copysign(1.0, h)), abs(h), 1e-14)
    w = q.direction * math.copysign(1.0, h)
    return UnitTangentState.unit(m, q.point, -normal_vector(m, UnitTangentState(q.point, w)))


def turned(m, s, angle):
    """s with its direction rotated by ``angle`` towards the normal."""
    from geokit.geodesic_flow import UnitTangentState, normal_vector
    N = normal_vector(m, s)
    return UnitTangentState.unit(m, s.point, math.cos(angle) * s.direction + math.sin(angle) * N)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from geokit.errors import PreconditionError
from geokit.geodesic_flow import (JacobiScalarState, UnitTangentState, advance, flow,
                                  jacobi_propagate, linearized_return, normal_vector,
                                  state_distance)
from geokit.metric_core import MetricField, SurfacePoint, eval_metric

from conftest import transported_shift, turned

ROUND = MetricField.round(1.0)
ELL = MetricField.ellipsoid(1.0, 1.1, 1.3)


def east(m):
    return UnitTangentState.from_sphere(m, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])


def random_state(m, rng):
    x = rng.normal(size=3)
    x /= np.linalg.norm(x)
    d = rng.normal(size=3)
    d -= (d @ x) * x
    return UnitTangentState.from_sphere(m, x, d)


def test_round_great_circle_closes():
    s0 = east(ROUND)
    s1, _ = advance(ROUND, s0, 2 * math.pi, 1e-12)
    assert state_distance(s0, s1) < 1e-8


def test_round_quarter_turn():
    s1, _ = advance(ROUND, east(ROUND), math.pi / 2, 1e-12)
    assert_allclose(s1.sphere(), [0.0, 1.0, 0.0], atol=1e-10)


def test_ellipsoid_unit_speed_and_tolerance_oracle(rng):
    s0 = random_state(ELL, rng)
    tol = 1e-10
    arc = flow(ELL, s0, 50.0, tol, sample_dt=0.5)
    fine = flow(ELL, s0, 50.0, tol / 100, times=arc.times)
    defect = max(arc.state(i).speed_defect(ELL) for i in range(len(arc)))
    assert defect < 1e-9
    pos = np.array([arc.state(i).sphere() for i in range(len(arc))])
    ref = np.array([fine.state(i).sphere() for i in range(len(fine))])
    assert np.max(np.abs(pos - ref)) < 1e-6


def test_unit_speed_within_ten_tol(rng):
    for tol in (1e-8, 1e-10, 1e-12):
        s0 = random_state(ELL, rng)
        arc = flow(ELL, s0, 20.0, tol, sample_dt=0.25)
        assert max(arc.state(i).speed_defect(ELL) for i in range(len(arc))) < 10 * tol


def test_time_reversibility(rng):
    tol = 1e-11
    for _ in range(5):
        s0 = random_state(ELL, rng)
        s1, _ = advance(ELL, s0, 7.3, tol)
        back, _ = advance(ELL, s1.flipped(), 7.3, tol)
        assert state_distance(s0, back.flipped()) < 100 * tol * 7.3


@pytest.mark.parametrize("t", [0.3, 1.0, 2.5, 4.0])
def test_round_jacobi_basis(t):
    arc = flow(ROUND, east(ROUND), t, 1e-12, times=[t])
    j1 = jacobi_propagate(ROUND, arc, JacobiScalarState(1.0, 0.0))
    j2 = jacobi_propagate(ROUND, arc, JacobiScalarState(0.0, 1.0))
    assert_allclose([j1.f, j1.fdot], [math.cos(t), -math.sin(t)], atol=1e-10)
    assert_allclose([j2.f, j2.fdot], [math.sin(t), math.cos(t)], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_jacobi_propagation_is_linear(c):
    arc = flow(ELL, east(ELL), 3.7, 1e-11, times=[3.7])
    a, b, s = JacobiScalarState(c[0], c[1]), JacobiScalarState(c[2], c[3]), c[4]
    ja, jb = jacobi_propagate(ELL, arc, a), jacobi_propagate(ELL, arc, b)
    jab = jacobi_propagate(ELL, arc, JacobiScalarState(a.f + s * b.f, a.fdot + s * b.fdot))
    scale = 1.0 + sum(abs(x) for x in c)
    assert abs(jab.f - (ja.f + s * jb.f)) < 1e-10 * scale
    assert abs(jab.fdot - (ja.fdot + s * jb.fdot)) < 1e-10 * scale


def test_wronskian_identity_along_arc(rng):
    s0 = random_state(ELL, rng)
    arc = flow(ELL, s0, 20.0, 1e-12, sample_dt=0.1)
    assert np.max(np.abs(arc.wronskian() - 1.0)) < 1e-8


def test_round_monodromy_is_identity():
    arc = flow(ROUND, east(ROUND), 2 * math.pi, 1e-12, times=[2 * math.pi])
    assert_allclose(linearized_return(ROUND, arc), np.eye(2), atol=1e-8)


def test_linearized_return_refuses_open_arc():
    arc = flow(ELL, east(ELL), 1.0, 1e-10, times=[1.0])
    with pytest.raises(PreconditionError):
        linearized_return(ELL, arc)


def _fd_normal_response(m, s0, T, h=1e-6, tol=1e-13):
    """Orthogonal endpoint response to a normal shift (f1) and a turn (f2) of the
    initial state, by central differences of the nonlinear flow."""
    end, _ = advance(m, s0, T, tol)
    N1 = normal_vector(m, end)
    g1 = eval_metric(m, end.point).g
    out = []
    for mode in ("shift", "turn"):
        imgs = []
        for sgn in (+1, -1):
            if mode == "shift":
                s = transported_shift(m, s0, sgn * h)
            else:
                s = turned(m, s0, sgn * h)
            e, _ = advance(m, s, T, tol)
            imgs.append(e.in_chart(end.chart))
        dx = (np.array(imgs[0].point.coords) - np.array(imgs[1].point.coords)) / (2 * h)
        out.append(float(dx @ g1 @ N1))
    return np.array(out)


@pytest.mark.parametrize("T", [5.0, 12.0, 20.0])
def test_jacobi_matches_flow_finite_differences(T, rng):
    s0 = random_state(ELL, rng)
    arc = flow(ELL, s0, T, 1e-13, times=[T])
    f1, _, f2, _ = arc.jacobi[-1]
    fd = _fd_normal_response(ELL, s0, T)
    # a parallel normal shift starts the Jacobi field (1, 0), a turn (0, 1)
    assert fd[0] == pytest.approx(f1, rel=1e-4, abs=1e-6)
    assert fd[1] == pytest.approx(f2, rel=1e-4, abs=1e-6)


def test_tolerance_range_enforced():
    with pytest.raises(PreconditionError):
        flow(ELL, east(ELL), 1.0, 1e-3)
    with pytest.raises(PreconditionError):
        flow(ELL, east(ELL), -1.0)

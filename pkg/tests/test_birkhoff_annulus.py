import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from geokit.birkhoff_annulus import (AnnulusState, DegenerateAnnulusReport, build_annulus,
                                     check_simple, displacement, fd_jacobian, find_periodic,
                                     inverse_return_map, iterate, periodic_point_geodesic,
                                     phase_portrait, return_map)
from geokit.closed_geodesics import LoopCurve, ellipse_length, plane_loop
from geokit.errors import DomainError, NotSimpleError, PreconditionError


def figure_eight_loop(n):
    phi = 2 * math.pi * np.arange(n) / n
    V = np.stack([0.6 * np.cos(phi), 0.3 * np.sin(2 * phi), np.ones(n)], axis=1)
    return LoopCurve(V / np.linalg.norm(V, axis=1)[:, None])


@pytest.fixture(scope="module")
def round_annulus(round_metric, round_equator):
    return build_annulus(round_metric, round_equator, tol=1e-11)


def test_state_domain():
    with pytest.raises(DomainError):
        AnnulusState(0.0, 0.0)
    with pytest.raises(DomainError):
        AnnulusState(0.0, math.pi)


def test_round_return_is_identity(round_annulus, rng):
    for t, th in zip(rng.uniform(0, 2 * math.pi, 10), rng.uniform(0.1, 3.0, 10)):
        r = return_map(round_annulus, AnnulusState(t, th))
        assert_allclose(displacement(round_annulus, AnnulusState(t, th), r.image), 0, atol=1e-8)
        assert r.return_time == pytest.approx(2 * math.pi, abs=1e-8)
        assert_allclose(r.jacobian, np.eye(2), atol=1e-7)


def test_round_find_periodic_degenerate(round_annulus):
    rep = find_periodic(round_annulus, 1, 16)
    assert isinstance(rep, DegenerateAnnulusReport)
    assert rep.max_displacement < 1e-7 and rep.samples == 256


def test_waist_annulus_length(waist_annulus):
    assert waist_annulus.L == pytest.approx(ellipse_length(1.0, 1.1), abs=1e-8)
    assert waist_annulus.curve_error < 1e-10


def test_figure_eight_is_not_simple(ellipsoid):
    with pytest.raises(NotSimpleError):
        build_annulus(ellipsoid, figure_eight_loop(64))
    with pytest.raises(NotSimpleError):
        check_simple(figure_eight_loop(64).vertices)
    check_simple(plane_loop("xy", 64).vertices)


def test_non_geodesic_input_refused(ellipsoid):
    with pytest.raises(PreconditionError):
        build_annulus(ellipsoid, np.zeros((4, 3)))


def test_weighted_determinant_is_one(waist_annulus, rng):
    for t, th in zip(rng.uniform(0, waist_annulus.L, 40), rng.uniform(0.05, math.pi - 0.05, 40)):
        r = return_map(waist_annulus, AnnulusState(t, th))
        assert r.weighted_determinant == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 6.6), st.floats(0.2, 2.9))
def test_jacobian_matches_finite_differences(waist_annulus, t, th):
    s = AnnulusState(t, th)
    J = return_map(waist_annulus, s).jacobian
    Jfd = fd_jacobian(waist_annulus, s, h=1e-5)
    assert_allclose(J, Jfd, rtol=0, atol=1e-5 * max(1.0, np.max(np.abs(J))))


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 6.6), st.floats(0.2, 2.9))
def test_inverse_return(waist_annulus, t, th):
    s = AnnulusState(t, th)
    back = inverse_return_map(waist_annulus, return_map(waist_annulus, s).image)
    assert_allclose(displacement(waist_annulus, s, back), 0, atol=1e-8)


def test_iterate_chains_jacobians(waist_annulus):
    s = AnnulusState(0.4, 1.0)
    r1 = return_map(waist_annulus, s)
    r2 = return_map(waist_annulus, r1.image)
    img, J, T = iterate(waist_annulus, s, 2)
    assert_allclose(img.array(), r2.image.array(), atol=1e-12)
    assert_allclose(J, r2.jacobian @ r1.jacobian, atol=1e-12)
    assert T == pytest.approx(r1.return_time + r2.return_time)


def test_p1_contains_orthogonal_crossings(waist_annulus):
    P = find_periodic(waist_annulus, 1, 16)
    L = waist_annulus.L
    ts = sorted(p.state.t % L for p in P)
    assert len(P) == 4
    assert_allclose([p.state.theta for p in P], math.pi / 2, atol=1e-8)
    # the crossings sit a quarter of the waist apart
    gaps = np.diff(ts + [ts[0] + L])
    assert_allclose(gaps, L / 4, atol=1e-6)
    traces = sorted(p.trace_n for p in P)
    assert abs(traces[0]) < 2 and abs(traces[-1]) > 2


def test_p1_trace_matches_closed_geodesic(waist_annulus, principal):
    P = find_periodic(waist_annulus, 1, 16)
    for p in P:
        g = periodic_point_geodesic(waist_annulus, p)
        assert p.trace_n == pytest.approx(g.trace, abs=1e-6)
    hyp = [p for p in P if p.hyperbolic]
    assert hyp and hyp[0].trace_n == pytest.approx(principal["xz"].trace, abs=1e-6)


def test_grid_refinement_finds_same_points(waist_annulus):
    a = find_periodic(waist_annulus, 1, 16)
    b = find_periodic(waist_annulus, 1, (40, 40))
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert_allclose(displacement(waist_annulus, p.state, q.state), 0, atol=1e-8)


def test_p2_contains_p1(waist_annulus):
    P1 = find_periodic(waist_annulus, 1, 16)
    P2 = find_periodic(waist_annulus, 2, 16)
    for p in P1:
        assert any(np.max(np.abs(displacement(waist_annulus, p.state, q.state))) < 1e-7 for q in P2)
    for q in P2:
        if q.m == 1:
            assert q.trace_n == pytest.approx(
                next(p.trace_n for p in P1
                     if np.max(np.abs(displacement(waist_annulus, p.state, q.state))) < 1e-7) ** 2 - 2,
                abs=1e-6)


def test_find_periodic_preconditions(waist_annulus):
    with pytest.raises(PreconditionError):
        find_periodic(waist_annulus, 0)
    with pytest.raises(PreconditionError):
        find_periodic(waist_annulus, 1, 8)


def test_guard_band(waist_annulus):
    with pytest.raises(DomainError):
        return_map(waist_annulus, AnnulusState(0.0, 1e-4))


def test_phase_portrait_shape(waist_annulus):
    rows = phase_portrait(waist_annulus, (4, 3))
    assert rows.shape == (12, 6)
    assert np.all(np.isfinite(rows[:, 2:5]))
    again = phase_portrait(waist_annulus, (4, 3), workers=2)
    assert_allclose(rows, again, atol=0)

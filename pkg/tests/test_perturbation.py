import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq

from geokit.closed_geodesics import classify
from geokit.errors import AmplitudeError, DomainError, MainCaseViolationError, PatchError, PreconditionError
from geokit.metric_core import SurfacePoint, Chart, eval_metric
from geokit.perturbation import (admissible_shift, apply_perturbation, design_bump, fermi_checks,
                                 fermi_frame, hill_monodromy, make_record,
                                 predicted_trace_delta, perturbed_profile, verify_perturbation)


@pytest.fixture(scope="module")
def xz_setup(ellipsoid, principal):
    g = principal["xz"]
    eps = 0.1 * g.period
    g = admissible_shift(ellipsoid, g, eps)
    rec = make_record(ellipsoid, g, eps, 1e-3)
    mh = apply_perturbation(ellipsoid, rec)
    return g, eps, rec, mh


# --- bump design ------------------------------------------------------------

def test_design_bump_support():
    b = design_bump(10.0, 1.0, 0.2)
    assert b.support == (8.0, 9.0)
    assert b.h(8.5) == pytest.approx(0.2, abs=1e-15)
    assert b.h(8.0) == 0.0 and b.h(9.0) == 0.0
    assert b.h(7.9) == 0.0 and b.h(9.1) == 0.0
    assert np.all(b.h(np.linspace(8.01, 8.99, 50)) > 0)
    assert b.b(0.0) == pytest.approx(1.0)
    assert b.b(b.s_max) == 0.0


def test_design_bump_derivatives_fd():
    b = design_bump(10.0, 1.0, 0.3)
    h = 1e-5
    for t in (8.2, 8.5, 8.77):
        assert b.h1(t) == pytest.approx((b.h(t + h) - b.h(t - h)) / (2 * h), rel=1e-6)
        assert b.h2(t) == pytest.approx((b.h1(t + h) - b.h1(t - h)) / (2 * h), rel=1e-6)


def test_design_bump_c2_norm_oracle():
    b = design_bump(10.0, 1.0, 1e-3)
    ts = np.linspace(8.0, 9.0, 4001)
    oracle = (np.max(np.abs(b.h(ts))) + np.max(np.abs(b.h1(ts))) + np.max(np.abs(b.h2(ts))))
    assert b.c2_norm == pytest.approx(oracle, rel=1e-3)
    assert math.isfinite(b.c2_norm)


def test_design_bump_preconditions():
    with pytest.raises(PreconditionError):
        design_bump(10.0, 5.0, 0.1)
    with pytest.raises(AmplitudeError):
        design_bump(10.0, 1.0, -0.1)
    with pytest.raises(PreconditionError):
        design_bump(10.0, 1.0, 0.1, f1=lambda t: t - 8.5)


# --- Fermi frame -------------------------------------------------------------

def test_round_fermi_normal_form(round_metric, round_equator):
    patch = fermi_frame(round_metric, round_equator, (4.0, 5.0), 0.3)
    for t in (4.2, 4.6):
        for s in (-0.25, 0.1, 0.3):
            G = patch.fermi_metric(round_metric, t, s)
            assert_allclose(G, np.diag([math.cos(s) ** 2, 1.0]), atol=1e-8)
    r = fermi_checks(round_metric, patch)
    assert r["ds2_g11"] < 1e-6
    assert max(r["g11"], r["g12"], r["g22"], r["ds_g11"]) < 1e-8


def test_ellipsoid_fermi_checks(xz_setup):
    _, _, rec, _ = xz_setup
    assert max(rec.patch.checks.values()) < 1e-7


def test_fermi_inverse_round_trip(xz_setup):
    patch = xz_setup[2].patch
    for t in np.linspace(*patch.t_window, 5):
        for s in (-0.08, 0.0, 0.05):
            assert_allclose(patch.inverse(patch.forward(t, s)), (t, s), atol=1e-9)


def test_focal_bound_refused(round_metric, round_equator):
    with pytest.raises(PatchError):
        fermi_frame(round_metric, round_equator, (4.0, 5.0), 1.7)


# --- prediction --------------------------------------------------------------

def test_zero_amplitude_predicts_zero(ellipsoid, xz_setup):
    g, eps, _, _ = xz_setup
    rec = make_record(ellipsoid, g, eps, 0.0)
    assert rec.predicted_delta_trace == 0.0
    assert np.all(rec.k_table[:, 1] == 0.0)


def test_sign_forced_by_f1dot(xz_setup):
    rec = xz_setup[2]
    assert rec.predicted_delta_trace != 0
    assert np.sign(rec.predicted_delta_trace) == -np.sign(rec.f1dot_T)


def test_prediction_matches_quadrature_oracle(xz_setup):
    # independent integral of 1/(f1+h)^2 - 1/f1^2 from the tabulated f1
    rec = xz_setup[2]
    b = rec.bump
    val = quad(lambda t: 1 / (float(rec.patch.f1(t)) + b.h(t)) ** 2
               - 1 / float(rec.patch.f1(t)) ** 2, *b.support, epsrel=1e-12, limit=400)[0]
    assert rec.predicted_delta_trace == pytest.approx(rec.f1dot_T * val, rel=1e-8)


def test_main_case_refused_on_round_sphere(round_metric, round_equator):
    # f1 = cos t, so f1'(2 pi) = 0
    with pytest.raises(MainCaseViolationError):
        make_record(round_metric, round_equator, 0.3, 1e-3)


def test_k_vanishes_outside_window(xz_setup):
    rec = xz_setup[2]
    a, b = rec.bump.support
    assert rec.k(a - 1e-3) == 0.0 and rec.k(b + 1e-3) == 0.0
    assert np.max(np.abs(rec.k_table[:, 1])) > 0


# --- patched metric ----------------------------------------------------------

def test_locality_outside_patch(ellipsoid, xz_setup, rng):
    mh = xz_setup[3]
    patch = xz_setup[2].patch
    n = 0
    while n < 50:
        x = rng.normal(size=3)
        x /= np.linalg.norm(x)
        p = SurfacePoint.from_sphere(x)
        try:
            u, v = SurfacePoint.from_sphere(x, Chart(patch.chart)).coords
            bb = patch.bbox
            if bb[0] <= u <= bb[1] and bb[2] <= v <= bb[3]:
                continue
        except DomainError:
            pass  # beyond the patch chart, so outside the patch
        a, b = eval_metric(ellipsoid, p), eval_metric(mh, p)
        assert np.array_equal(a.g, b.g) and np.array_equal(a.dg, b.dg)
        n += 1


def test_zero_amplitude_patch_is_identity(ellipsoid, xz_setup):
    g, eps, _, _ = xz_setup
    rec = make_record(ellipsoid, g, eps, 0.0)
    mh = apply_perturbation(ellipsoid, rec)
    for t in np.linspace(*rec.bump.support, 7):
        for s in (-0.05, 0.0, 0.07):
            p = rec.patch.forward(t, s)
            assert_allclose(eval_metric(mh, p).g, eval_metric(ellipsoid, p).g, atol=1e-12)
    rep = verify_perturbation(ellipsoid, rec, mh=mh)
    assert abs(rep["measured_delta_trace"]) < 1e-8


def test_patched_curvature_and_geodesic(ellipsoid, xz_setup):
    g, eps, rec, mh = xz_setup
    rep = verify_perturbation(ellipsoid, rec, mh=mh)
    assert rep["curvature_design_error"] < 1e-6
    assert rep["geodesic_residual"] < 1e-8
    assert rep["period_change"] < 1e-8
    assert rep["relative_discrepancy"] < 1e-2


def test_amplitude_too_large(ellipsoid, xz_setup):
    g, eps, _, _ = xz_setup
    with pytest.raises(AmplitudeError):
        rec = make_record(ellipsoid, g, eps, 50.0, 0.3, predict=False)
        apply_perturbation(ellipsoid, rec)


# --- Hill level: nondegeneracy creation --------------------------------------

def _parabolic_profile():
    T = 2 * math.pi

    def make(c):
        return lambda t: c + 0.4 * math.sin(t + math.pi) + 0.3 * math.cos(2 * (t + math.pi))
    c0 = brentq(lambda c: np.trace(hill_monodromy(make(c), T)) - 2, -0.1, 0.0, xtol=1e-15)
    return make(c0), T


def test_parabolic_case_becomes_nondegenerate():
    K, T = _parabolic_profile()
    M = hill_monodromy(K, T)
    assert np.trace(M) == pytest.approx(2.0, abs=1e-6)
    assert classify(M).tag == "parabolic"
    sol = solve_ivp(lambda t, y: [y[1], -K(t) * y[0]], (0, T), [1, 0], dense_output=True,
                    method="DOP853", rtol=1e-12, atol=1e-12)
    f1 = lambda t: float(sol.sol(t)[0])  # noqa: E731
    b = design_bump(T, 0.4, 1e-2, f1=f1)
    Mh = hill_monodromy(perturbed_profile(K, T, b), T)
    assert abs(np.trace(Mh) - 2) > 1e-5
    assert classify(Mh).tag != "parabolic"
    # the exact trace-change formula at the Hill level
    f1dT = sol.sol(T)[1]
    pred = f1dT * quad(lambda t: 1 / (f1(t) + b.h(t)) ** 2 - 1 / f1(t) ** 2, *b.support,
                       epsrel=1e-12)[0]
    assert np.trace(Mh) - np.trace(M) == pytest.approx(pred, rel=1e-4)

"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints
(see conftest.py), so a plain ``pytest`` run lists all nine outcomes.
"""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from geokit import homoclinic as H
from geokit.birkhoff_annulus import (AnnulusState, DegenerateAnnulusReport, build_annulus,
                                     displacement, find_periodic, return_map)
from geokit.closed_geodesics import (ellipse_length, geodesic_from_state, plane_geodesic,
                                     principal_geodesic, refine_closed, trace_via_f1)
from geokit.errors import FormulaInapplicableError, MainCaseViolationError
from geokit.geodesic_flow import UnitTangentState, advance, flow, normal_vector
from geokit.metric_core import MetricField, eval_metric
from geokit.perturbation import (admissible_shift, apply_perturbation, make_record,
                                 verify_perturbation)
from geokit.specfile import load_metric

from conftest import ACCEPTANCE, ELLIPSOID, transported_shift, turned

SPECS = Path(__file__).resolve().parents[1] / "specs"


class Verdict:
    """Collects the observed numbers of one criterion and records the outcome."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.notes = []
        self.t0 = time.perf_counter()

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        ok = exc_type is None
        detail = "; ".join(self.notes + [f"{dt:.1f} s"])
        if not ok:
            detail += f"; FAILED: {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        line = f"criterion {self.number} {'PASS' if ok else 'FAIL'}  {self.title}: {detail}"
        ACCEPTANCE[self.number] = line
        print(line)
        return False

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0


def random_state(m, rng):
    x = rng.normal(size=3)
    x /= np.linalg.norm(x)
    d = rng.normal(size=3)
    d -= (d @ x) * x
    return UnitTangentState.from_sphere(m, x, d)


# ---------------------------------------------------------------------------

def test_criterion_1_round_sphere_exactness():
    with Verdict(1, "round-sphere exactness") as v:
        m = MetricField.round(1.0)
        rng = np.random.default_rng(1)
        worst = dict(T=0.0, M=0.0, tr=0.0, ret=0.0, rt=0.0)
        for _ in range(6):
            g = refine_closed(m, random_state(m, rng), 1e-12, period=6.2)
            worst["T"] = max(worst["T"], abs(g.period - 2 * math.pi))
            worst["M"] = max(worst["M"], float(np.max(np.abs(g.monodromy - np.eye(2)))))
            worst["tr"] = max(worst["tr"], abs(g.trace - 2))
        ctx = build_annulus(m, plane_geodesic(m, "xy"), tol=1e-11)
        for t, th in zip(rng.uniform(0, 2 * math.pi, 20), rng.uniform(0.05, 3.09, 20)):
            s = AnnulusState(t, th)
            r = return_map(ctx, s)
            worst["ret"] = max(worst["ret"], float(np.max(np.abs(displacement(ctx, s, r.image)))))
            worst["rt"] = max(worst["rt"], abs(r.return_time - 2 * math.pi))
        v.note(f"|T-2pi| {worst['T']:.1e}, |M-I| {worst['M']:.1e}, |tr-2| {worst['tr']:.1e}, "
               f"|F(x)-x| {worst['ret']:.1e}, |T_ret-2pi| {worst['rt']:.1e}")
        assert worst["T"] < 1e-8 and worst["M"] < 1e-8 and worst["tr"] < 1e-6
        assert worst["ret"] < 1e-8 and worst["rt"] < 1e-8
        assert v.elapsed < 10


def test_criterion_2_linearization():
    with Verdict(2, "linearization") as v:
        m = MetricField.ellipsoid(*ELLIPSOID)
        rng = np.random.default_rng(2)
        h = 1e-6
        worst = 0.0
        count = 0
        for _ in range(3):
            s0 = random_state(m, rng)
            for T in (5.0, 12.0, 20.0):
                end, jac = advance(m, s0, T, 1e-13)
                f1, _, f2, _ = jac
                N1 = normal_vector(m, end)
                g1 = eval_metric(m, end.point).g
                # a fan of perturbation directions mixing the normal shift and the turn
                for phi in np.linspace(0, math.pi, 4, endpoint=False):
                    imgs = []
                    for sgn in (1, -1):
                        s = turned(m, transported_shift(m, s0, sgn * h * math.cos(phi)),
                                    sgn * h * math.sin(phi))
                        e, _ = advance(m, s, T, 1e-13)
                        imgs.append(np.array(e.in_chart(end.chart).point.coords))
                    dx = (imgs[0] - imgs[1]) / (2 * h)
                    fd = np.array([dx @ g1 @ N1, dx @ g1 @ end.direction])
                    pred = np.array([math.cos(phi) * f1 + math.sin(phi) * f2, 0.0])
                    scale = math.hypot(f1, f2)
                    worst = max(worst, float(np.linalg.norm(fd - pred)) / scale)
                    count += 1
        v.note(f"{count} fan members, arcs up to 20, max relative error {worst:.2e}")
        assert worst < 1e-4
        assert v.elapsed < 30


def test_criterion_3_trace_formula():
    with Verdict(3, "trace formula") as v:
        m = load_metric(SPECS / "dumbbell.spec")
        g = plane_geodesic(m, "yz")
        tr_f1 = trace_via_f1(m, g)
        arc = flow(m, g.init, g.period, 1e-12, sample_dt=0.01)
        f1 = arc.jacobi[:, 0]
        w = float(np.max(np.abs(arc.wronskian() - 1.0)))
        v.note(f"{g.classification.tag} neck, trace {g.trace:.8f}, via f1 {tr_f1:.8f}, "
               f"min|f1| {np.min(np.abs(f1)):.3f}, Wronskian defect {w:.1e}")
        assert g.classification.tag == "hyperbolic"
        assert np.all(f1 > 0)
        assert abs(tr_f1 - g.trace) < 1e-6
        assert w < 1e-8
        assert v.elapsed < 10


def test_criterion_4_section_invariance(principal):
    with Verdict(4, "section invariance") as v:
        g = principal["xz"]
        traces = np.array([g.shifted(t0).trace
                           for t0 in np.linspace(0, g.period, 10, endpoint=False)])
        spread = float(traces.max() - traces.min())
        v.note(f"10 base points on the hyperbolic ellipse, trace spread {spread:.1e}")
        assert spread < 1e-6


def test_criterion_5_area_preservation(waist_annulus):
    with Verdict(5, "area preservation") as v:
        rng = np.random.default_rng(5)
        n = 1000
        ts = rng.uniform(0, waist_annulus.L, n)
        ths = rng.uniform(0.02, math.pi - 0.02, n)
        dev = np.array([abs(return_map(waist_annulus, AnnulusState(t, th)).weighted_determinant
                            - 1.0) for t, th in zip(ts, ths)])
        v.note(f"{n} states, max |sin(th') det J / sin(th) - 1| = {dev.max():.1e}")
        assert dev.max() < 1e-6
        assert v.elapsed < 120


def test_criterion_6_ellipsoid_classification(ellipsoid):
    with Verdict(6, "ellipsoid classification") as v:
        a, b, c = ELLIPSOID
        found = {p: principal_geodesic(ellipsoid, p, tol=1e-10) for p in ("xy", "xz", "yz")}
        lengths = {"xy": ellipse_length(a, b), "xz": ellipse_length(a, c),
                   "yz": ellipse_length(b, c)}
        tags = {}
        for p, g in found.items():
            assert abs(g.period - lengths[p]) < 1e-8
            oracle = geodesic_from_state(ellipsoid, g.init, g.period, 1e-12)
            assert oracle.classification.tag == g.classification.tag
            tags[p] = g.classification.tag
        assert tags == {"xy": "elliptic", "xz": "hyperbolic", "yz": "elliptic"}
        ctx = build_annulus(ellipsoid, found["xy"], tol=1e-11)
        P = find_periodic(ctx, 1, 16)
        quarter = sorted(p.state.t for p in P)
        ortho = all(abs(p.state.theta - math.pi / 2) < 1e-8 for p in P)
        gaps = np.diff(quarter + [quarter[0] + ctx.L])
        v.note(f"xy {tags['xy']}, xz {tags['xz']} (trace {found['xz'].trace:.4f}), "
               f"yz {tags['yz']}; P_1 has {len(P)} orthogonal crossings at quarter spacing")
        assert len(P) == 4 and ortho and np.allclose(gaps, ctx.L / 4, atol=1e-6)
        assert v.elapsed < 300


def test_criterion_7_perturbation_end_to_end(ellipsoid, principal):
    with Verdict(7, "trace perturbation end to end") as v:
        g = principal["xz"]
        eps = 0.1 * g.period
        g = admissible_shift(ellipsoid, g, eps)
        reps = {}
        for amp in (1e-3, 3e-4, 1e-4):
            rec = make_record(ellipsoid, g, eps, amp)
            mh = apply_perturbation(ellipsoid, rec)
            reps[amp] = verify_perturbation(ellipsoid, rec, mh=mh)
        r = reps[1e-3]
        abs_d = [reps[a]["absolute_discrepancy"] for a in (1e-3, 3e-4, 1e-4)]
        rel_d = [reps[a]["relative_discrepancy"] for a in (1e-3, 3e-4, 1e-4)]
        v.note(f"dTr {r['measured_delta_trace']:.6e} vs {r['predicted_delta_trace']:.6e} "
               f"(rel {r['relative_discrepancy']:.1e}); |measured - predicted| at "
               f"1e-3, 3e-4, 1e-4: " + ", ".join(f"{x:.1e}" for x in abs_d)
               + "; relative: " + ", ".join(f"{x:.1e}" for x in rel_d)
               + f"; residual {r['geodesic_residual']:.1e}, "
               f"K_hat error {r['curvature_design_error']:.1e}")
        assert r["relative_discrepancy"] < 1e-2
        for rep in reps.values():
            assert rep["geodesic_residual"] < 1e-8
            assert rep["curvature_design_error"] < 1e-6
            assert rep["period_change"] < 1e-8
        assert v.elapsed < 600
        # the discrepancy must shrink as the amplitude decreases
        assert abs_d[0] > abs_d[1] > abs_d[2], "discrepancy does not decrease with amplitude"


def test_criterion_8_homoclinic_pipeline():
    with Verdict(8, "homoclinic pipeline") as v:
        m = load_metric(SPECS / "bumped.spec")
        g = plane_geodesic(m, "xy")
        ctx = build_annulus(m, g, tol=1e-11)
        P = find_periodic(ctx, 1, 16)
        hyp = [p for p in P if p.hyperbolic]
        fm = H.annulus_map(ctx, hyp[0])
        saddles = [H.saddle(fm, p, label=f"p{i}") for i, p in enumerate(hyp)]
        branches = [b for s in saddles for b in H.local_branches(fm, s)]
        budget = {"p0:unstable+": 6.0, "p1:stable-": 2.0}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = H.search(fm, None, branches, budget, steps=30)
        good = []
        for hp, rep in res.reports:
            if rep.certified and abs(hp.crossing_angle) > 1e-3 and rep.ratios_match(0.05):
                good.append((hp, rep))
        for hp, rep in good[:1]:
            v.note(f"{'heteroclinic' if hp.heteroclinic else 'homoclinic'} crossing at "
                   f"(t, theta) = ({hp.state[0] % ctx.L:.4f}, {hp.state[1]:.4f}), angle "
                   f"{hp.crossing_angle:.4f}, residual {hp.residual:.1e}, forward ratio*lam "
                   f"{rep.forward_ratio * rep.lam:.4f}, backward ratio*lam "
                   f"{rep.backward_ratio * rep.lam_backward:.4f}")
        v.note(f"{len(hyp)} hyperbolic points of F^2 with lam "
               + ", ".join(f"{s.lam:.3f}" for s in saddles)
               + f"; {len(res.reports)} transverse candidates, {len(good)} certified")
        assert len(hyp) >= 1
        assert good
        hp, rep = good[0]
        assert rep.forward[: 31].min() < 1e-4 and rep.backward[: 31].min() < 1e-4
        assert v.elapsed < 900


def test_criterion_9_degenerate_input_hygiene(round_metric, round_equator, ellipsoid, principal):
    with Verdict(9, "degenerate-input hygiene") as v:
        ctx = build_annulus(round_metric, round_equator, tol=1e-11)
        rep = find_periodic(ctx, 1, 16)
        assert isinstance(rep, DegenerateAnnulusReport)
        with pytest.raises(FormulaInapplicableError):
            trace_via_f1(ellipsoid, principal["xz"])
        with pytest.raises(FormulaInapplicableError):
            trace_via_f1(round_metric, round_equator)
        with pytest.raises(MainCaseViolationError) as e:
            make_record(round_metric, round_equator, 0.3, 1e-3)
        v.note("round annulus degenerate report, f1 zero refused by trace_via_f1, "
               f"main-case refusal: {str(e.value)[:60]}")

"""Command-line entry point ``geokit``.

Exit codes: 0 success, 2 domain error, 3 numerical failure, 64 usage
error, 65 malformed spec or config.  ``GEOKIT_OUT`` overrides ``--out``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError, GeokitError, NumericalError, SpecError

EXIT_OK, EXIT_DOMAIN, EXIT_NUMERICAL, EXIT_USAGE, EXIT_SPEC = 0, 2, 3, 64, 65
TOL_RANGE = (1e-13, 1e-5)
GEODESIC_SEEDS = ("principal-xy", "principal-xz", "principal-yz",
                  "plane-xy", "plane-xz", "plane-yz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunConfig:
    command: str
    metric: str | None
    tol: float
    grid: int
    out: Path
    seed: str
    workers: int
    options: dict = field(default_factory=dict)

    def record(self) -> dict:
        """Everything that determines the numbers; the worker count and the
        output directory do not, so runs differing only there share a digest."""
        spec = Path(self.metric).read_text() if self.metric else None
        return {"command": self.command, "metric_spec": spec, "tol": self.tol,
                "grid": self.grid, "seed": self.seed, "options": self.options}


def _common(p):
    p.add_argument("--metric", required=True, help="metric spec file (YAML)")
    p.add_argument("--tol", type=float, default=1e-10,
                   help=f"integration tolerance in [{TOL_RANGE[0]:g}, {TOL_RANGE[1]:g}]")
    p.add_argument("--grid", type=int, default=32, help="grid density")
    p.add_argument("--out", default="geokit_out", help="output directory")
    p.add_argument("--seed", default="0",
                   help="random seed (integer); for 'trace' the geodesic seed name")
    p.add_argument("--workers", type=int, default=1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geokit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geokit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("curvature", help="Gaussian curvature bounds on a grid")
    _common(c)

    t = sub.add_parser("trace", help="closed geodesic, monodromy and classification")
    _common(t)
    t.set_defaults(seed="principal-xy")
    t.add_argument("--samples", type=float, default=None, help="arc export spacing")

    a = sub.add_parser("annulus", help="phase portrait and periodic points of the return map")
    _common(a)
    a.add_argument("--base", default="principal-xy", choices=GEODESIC_SEEDS)
    a.add_argument("--n", type=int, default=1, help="period of the searched points")
    a.add_argument("--portrait-grid", type=int, default=None)

    q = sub.add_parser("perturb", help="trace perturbation and its verification")
    _common(q)
    q.add_argument("--geodesic", default="principal-xz", choices=GEODESIC_SEEDS)
    q.add_argument("--amplitude", type=float, default=1e-3)
    q.add_argument("--epsilon-fraction", type=float, default=0.1,
                   help="epsilon as a fraction of the period")
    q.add_argument("--s-max", type=float, default=0.1)

    h = sub.add_parser("homoclinic", help="manifold branches, crossings and shadowing")
    _common(h)
    h.add_argument("--base", default="plane-xy", choices=GEODESIC_SEEDS)
    h.add_argument("--n", type=int, default=1)
    h.add_argument("--budget", type=float, default=4.0, help="arc budget per branch")
    h.add_argument("--branch-budget", action="append", metavar="NAME=VALUE",
                   help="budget for one branch, e.g. p0:unstable+=6 (repeatable)")
    h.add_argument("--steps", type=int, default=30, help="shadowing iterations")

    w = sub.add_parser("pipeline", help="shortest geodesic through homoclinic search")
    _common(w)
    w.add_argument("--n", type=int, default=1)
    w.add_argument("--budget", type=float, default=4.0)
    w.add_argument("--branch-budget", action="append", metavar="NAME=VALUE",
                   help="budget for one branch, e.g. p0:unstable+=6 (repeatable)")
    w.add_argument("--steps", type=int, default=30)
    return p


def _config(args) -> RunConfig:
    if not (TOL_RANGE[0] <= args.tol <= TOL_RANGE[1]):
        raise SpecError(f"tolerance {args.tol:g} outside [{TOL_RANGE[0]:g}, {TOL_RANGE[1]:g}]",
                        None, "tol")
    if args.grid < 1:
        raise SpecError("grid must be positive", None, "grid")
    if args.workers < 1:
        raise SpecError("workers must be positive", None, "workers")
    out = Path(os.environ.get("GEOKIT_OUT") or args.out)
    skip = {"command", "metric", "tol", "grid", "out", "seed", "workers"}
    opts = {k: v for k, v in vars(args).items() if k not in skip}
    return RunConfig(args.command, args.metric, args.tol, args.grid, out, str(args.seed),
                     args.workers, opts)


def _random_seed(cfg: RunConfig) -> int:
    try:
        return int(cfg.seed)
    except ValueError:
        return 0


def _geodesic(m, name: str, tol: float):
    from .closed_geodesics import plane_geodesic, principal_geodesic
    if name not in GEODESIC_SEEDS:
        raise DomainError(f"unknown geodesic seed {name!r}; expected one of "
                          f"{', '.join(GEODESIC_SEEDS)}")
    kind, plane = name.split("-")
    tol = min(tol, 1e-12)
    return principal_geodesic(m, plane, tol) if kind == "principal" else \
        plane_geodesic(m, plane, tol)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def _point(p):
    return {"chart": p.chart.name.lower(), "coords": [float(x) for x in p.coords]}


def cmd_curvature(cfg, m, digest):
    from .metric_core import curvature_report
    from .specfile import write_csv, write_report
    r = curvature_report(m, max(cfg.grid, 8))
    write_csv(cfg.out / "curvature_samples.csv", ["chart", "u", "v", "K"], r.samples, digest)
    write_report(cfg.out / "curvature.yaml", {
        "command": "curvature", "seed": cfg.seed, "K_min": r.K_min, "K_max": r.K_max,
        "argmin": _point(r.argmin), "argmax": _point(r.argmax), "convex": r.convex,
        "grid": cfg.grid}, digest)
    return {"K_min": r.K_min, "K_max": r.K_max, "convex": r.convex}


def cmd_trace(cfg, m, digest):
    from .geodesic_flow import flow
    from .specfile import write_csv, write_report
    seed = cfg.seed if cfg.seed in GEODESIC_SEEDS else "principal-xy"
    g = _geodesic(m, seed, cfg.tol)
    arc = flow(m, g.init, g.period, max(cfg.tol, 1e-12), sample_dt=cfg.options.get("samples"))
    rows = [(t, int(c), *y) for t, c, y in zip(arc.times, arc.charts, arc.states)]
    write_csv(cfg.out / "arc.csv", ["time", "chart", "u", "v", "du", "dv"], rows, digest)
    rec = g.record()
    write_report(cfg.out / "closed_geodesic.yaml", {"command": "trace", "seed": seed, **rec},
                 digest)
    return {"period": g.period, "trace": g.trace, "classification": g.classification.tag}


def cmd_annulus(cfg, m, digest):
    from .birkhoff_annulus import (DegenerateAnnulusReport, build_annulus, find_periodic,
                                   phase_portrait)
    from .specfile import write_csv, write_report
    g = _geodesic(m, cfg.options["base"], cfg.tol)
    ctx = build_annulus(m, g, tol=cfg.tol)
    pg = cfg.options.get("portrait_grid") or cfg.grid
    rows = phase_portrait(ctx, pg, workers=cfg.workers)
    write_csv(cfg.out / "portrait.csv", ["t", "theta", "t_next", "theta_next", "return_time",
                                        "within_bounds"], rows, digest)
    res = find_periodic(ctx, cfg.options["n"], max(cfg.grid, 16), workers=cfg.workers)
    report = {"command": "annulus", "seed": cfg.seed, "base": g.record(), "L": ctx.L}
    if isinstance(res, DegenerateAnnulusReport):
        report["degenerate"] = {"n": res.n, "max_displacement": res.max_displacement,
                                "samples": res.samples, "message": res.message}
        write_csv(cfg.out / "periodic.csv", ["n", "m", "t", "theta", "trace_n",
                                            "degenerate_flag"], [], digest)
    else:
        write_csv(cfg.out / "periodic.csv", ["n", "m", "t", "theta", "trace_n",
                                            "degenerate_flag"],
                  [(p.n, p.m, p.state.t, p.state.theta, p.trace_n, p.degenerate_flag)
                   for p in res], digest)
        report["periodic_points"] = len(res)
    write_report(cfg.out / "annulus.yaml", report, digest)
    return report


def cmd_perturb(cfg, m, digest):
    from .perturbation import admissible_shift, apply_perturbation, make_record, \
        verify_perturbation
    from .specfile import metric_spec, write_csv, write_report
    g = _geodesic(m, cfg.options["geodesic"], cfg.tol)
    eps = cfg.options["epsilon_fraction"] * g.period
    g = admissible_shift(m, g, eps)
    rec = make_record(m, g, eps, cfg.options["amplitude"], cfg.options["s_max"])
    mh = apply_perturbation(m, rec)
    rep = verify_perturbation(m, rec, mh=mh)
    write_csv(cfg.out / "k_table.csv", ["t", "k"], rec.k_table, digest)
    write_report(cfg.out / "perturbation_record.yaml", rec.to_dict(), digest)
    write_report(cfg.out / "patched_metric.yaml", metric_spec(mh), digest)
    write_report(cfg.out / "perturbation.yaml", {"command": "perturb", "seed": cfg.seed,
                                                 "fermi_checks": rec.patch.checks, **rep},
                 digest)
    return rep


def _budgets(cfg, branches):
    """Per-branch arc budgets: --budget for every branch, overridden by
    --branch-budget NAME=VALUE entries."""
    b = {br.name: cfg.options["budget"] for br in branches}
    for item in cfg.options.get("branch_budget") or []:
        name, _, val = item.partition("=")
        if name not in b:
            raise SpecError(f"--branch-budget: unknown branch {name!r}; "
                            f"expected one of {', '.join(sorted(b))}", None, "branch_budget")
        try:
            b[name] = float(val)
        except ValueError:
            raise SpecError(f"--branch-budget: {val!r} is not a number", None,
                            "branch_budget") from None
    return b


def _homoclinic(cfg, m, ctx, points, digest, report):
    from . import homoclinic as H
    from .specfile import write_csv
    hyp = [p for p in points if abs(p.trace_n) > 2 + 1e-6]
    branch_rows, cross_rows, summary = [], [], []
    saddles, branches = [], []
    fm = H.annulus_map(ctx, hyp[0]) if hyp else None
    for idx, p in enumerate(hyp):
        sd = H.saddle(fm, p, label=f"p{idx}")
        saddles.append((p, sd))
        branches.extend(H.local_branches(fm, sd))
    if hyp:
        # one search over every owner so that heteroclinic pairs are seen too
        res = H.search(fm, None, branches, _budgets(cfg, branches), steps=cfg.options["steps"])
        for b in res.branches:
            for x in b.points:
                branch_rows.append((b.owner.label, b.kind, "+" if b.side > 0 else "-",
                                    x[0] % ctx.L, x[1]))
        for hp, rep in res.reports:
            cross_rows.append((hp.state[0] % ctx.L, hp.state[1], hp.crossing_angle, hp.residual,
                               "certified" if rep.certified else "quarantined",
                               "heteroclinic" if hp.heteroclinic else "homoclinic",
                               hp.branches[0], hp.branches[1]))
        for hp, why in res.quarantine:
            if why == "near-tangency":
                cross_rows.append((hp.state[0] % ctx.L, hp.state[1], hp.crossing_angle,
                                   hp.residual, "near-tangency",
                                   "heteroclinic" if hp.heteroclinic else "homoclinic",
                                   hp.branches[0], hp.branches[1]))
        for p, sd in saddles:
            mine = [b for b in res.branches if b.owner is sd]
            summary.append({"owner": sd.label, "state": [p.state.t, p.state.theta],
                            "trace_n": p.trace_n, "lambda": sd.lam,
                            "branches": {b.name: {"points": len(b.points),
                                                  "growth_ratio": b.growth_ratio()}
                                         for b in mine}})
        report["certified"] = len(res.certified)
        report["quarantined"] = len(res.quarantine)
    write_csv(cfg.out / "branches.csv", ["owner", "kind", "side", "t", "theta"], branch_rows,
              digest)
    write_csv(cfg.out / "crossings.csv", ["t", "theta", "angle", "residual", "status", "type",
                                         "stable_branch", "unstable_branch"], cross_rows, digest)
    report["hyperbolic_points"] = summary
    report["conventions"] = {"angle_tol": H.ANGLE_TOL, "shadow_threshold": 1e-4,
                             "shadow_steps": cfg.options["steps"], "delta0": H.DELTA0,
                             "sagitta": H.SAGITTA}
    return report


def cmd_homoclinic(cfg, m, digest):
    from .birkhoff_annulus import DegenerateAnnulusReport, build_annulus, find_periodic
    from .specfile import write_report
    g = _geodesic(m, cfg.options["base"], cfg.tol)
    ctx = build_annulus(m, g, tol=cfg.tol)
    pts = find_periodic(ctx, cfg.options["n"], max(cfg.grid, 16), workers=cfg.workers)
    report = {"command": "homoclinic", "seed": cfg.seed, "base": g.record()}
    if isinstance(pts, DegenerateAnnulusReport):
        raise DomainError(pts.message)
    report = _homoclinic(cfg, m, ctx, pts, digest, report)
    write_report(cfg.out / "homoclinic.yaml", report, digest)
    return report


def cmd_pipeline(cfg, m, digest):
    from .birkhoff_annulus import DegenerateAnnulusReport, build_annulus, find_periodic
    from .specfile import write_csv, write_report
    cands = []
    for name in ("principal-xy", "principal-xz", "principal-yz"):
        try:
            cands.append(_geodesic(m, name, cfg.tol))
        except GeokitError:
            continue
    if not cands:
        raise NumericalError("no closed geodesic found from the coordinate-plane seeds")
    g = min(cands, key=lambda c: c.period)
    ctx = build_annulus(m, g, tol=cfg.tol)
    pts = find_periodic(ctx, cfg.options["n"], max(cfg.grid, 16), workers=cfg.workers)
    report = {"command": "pipeline", "seed": cfg.seed, "base": g.record(),
              "candidates": [c.period for c in cands]}
    if isinstance(pts, DegenerateAnnulusReport):
        report["degenerate"] = pts.message
        write_report(cfg.out / "pipeline.yaml", report, digest)
        return report
    write_csv(cfg.out / "periodic.csv", ["n", "m", "t", "theta", "trace_n", "degenerate_flag"],
              [(p.n, p.m, p.state.t, p.state.theta, p.trace_n, p.degenerate_flag) for p in pts],
              digest)
    report = _homoclinic(cfg, m, ctx, pts, digest, report)
    write_report(cfg.out / "pipeline.yaml", report, digest)
    return report


COMMANDS = {"curvature": cmd_curvature, "trace": cmd_trace, "annulus": cmd_annulus,
            "perturb": cmd_perturb, "homoclinic": cmd_homoclinic, "pipeline": cmd_pipeline}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as e:
        sys.stderr.write(str(e))
        return EXIT_USAGE
    except SystemExit as e:   # --help / --version
        return int(e.code or 0)
    try:
        from .specfile import config_digest, load_metric
        cfg = _config(args)
        np.random.seed(_random_seed(cfg))
        m = load_metric(cfg.metric)
        digest = config_digest(cfg.record())
        summary = COMMANDS[cfg.command](cfg, m, digest)
    except SpecError as e:
        sys.stderr.write(f"geokit: spec error: {e}\n")
        return EXIT_SPEC
    except DomainError as e:
        sys.stderr.write(f"geokit: domain error: {e}\n")
        return EXIT_DOMAIN
    except NumericalError as e:
        sys.stderr.write(f"geokit: numerical failure: {e}\n")
        return EXIT_NUMERICAL
    sys.stdout.write(_summary_line(cfg.command, summary) + "\n")
    return EXIT_OK


def _summary_line(cmd, s):
    def fmt(v):
        return f"{v:.10g}" if isinstance(v, float) and math.isfinite(v) else str(v)
    keys = [k for k, v in s.items() if isinstance(v, (int, float, str, bool))][:6]
    return f"{cmd}: " + ", ".join(f"{k}={fmt(s[k])}" for k in keys)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

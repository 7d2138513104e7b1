from pathlib import Path

import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose

from geokit import __version__, cli
from geokit.errors import NoConvergenceError, SpecError
from geokit.metric_core import SurfacePoint, eval_metric
from geokit.specfile import load_metric, metric_spec, parse_tree, metric_from_tree, read_csv

SPECS = Path(__file__).resolve().parents[1] / "specs"


def write(tmp_path, text, name="m.spec"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- spec files -----------------------------------------------------------------

@pytest.mark.parametrize("name", ["round", "ellipsoid", "dumbbell", "bumped"])
def test_shipped_specs_load(name):
    m = load_metric(SPECS / f"{name}.spec")
    assert m.kind in ("round", "ellipsoid", "bumped_round")
    again = metric_from_tree(parse_tree(yaml.safe_dump(metric_spec(m))))
    p = SurfacePoint.from_sphere([0.3, -0.5, 0.8])
    assert np.array_equal(eval_metric(m, p).g, eval_metric(again, p).g)


@pytest.mark.parametrize("text, line, field", [
    ("kind: ellipsoid\nparameters:\n  a: 1\n  b: 1.1\n", 3, "parameters"),
    ("kind: ellipsoid\nparameters:\n  a: 1\n  b: x\n  c: 1\n", 4, "parameters.b"),
    ("kind: potato\n", 1, "kind"),
    ("kind: bumped_round\nparameters:\n  bumps:\n    - {center: [1, 0], radius: 1, "
     "amplitude: 0.1}\n", 4, "parameters.bumps[0].center"),
    ("kind: round\nparameters:\n  radius: -2\n", 3, "parameters"),
])
def test_spec_errors_report_line_and_field(tmp_path, text, line, field):
    with pytest.raises(SpecError) as e:
        load_metric(write(tmp_path, text))
    assert e.value.line == line
    assert e.value.field == field
    assert f"line {line}" in str(e.value)


def test_malformed_yaml(tmp_path):
    with pytest.raises(SpecError) as e:
        load_metric(write(tmp_path, "kind: round\nparameters: [1,\n"))
    assert e.value.line is not None


def test_missing_file(tmp_path):
    with pytest.raises(SpecError):
        load_metric(tmp_path / "nope.spec")


def test_fermi_patched_spec_round_trip(tmp_path):
    out = tmp_path / "out"
    assert cli.run(["perturb", "--metric", str(SPECS / "ellipsoid.spec"), "--out", str(out)]) == 0
    record = yaml.safe_load((out / "perturbation_record.yaml").read_text())
    spec = {"kind": "fermi_patched", "parameters": {"base": "base.spec", "record": "rec.yaml"}}
    write(tmp_path, (SPECS / "ellipsoid.spec").read_text(), "base.spec")
    write(tmp_path, yaml.safe_dump(record), "rec.yaml")
    mh = load_metric(write(tmp_path, yaml.safe_dump(spec), "patched.spec"))
    inline = load_metric(out / "patched_metric.yaml")
    rows = read_csv(out / "k_table.csv")[1]
    t, k = map(float, rows[len(rows) // 2])
    assert abs(k) > 0
    # both loaded forms evaluate the same curvature along the patched window
    for m in (mh, inline):
        assert m.kind == "fermi_patched"
    rec = mh.patch.record
    p = rec.patch.forward(t, 0.0)
    assert eval_metric(mh, p).curvature == pytest.approx(eval_metric(inline, p).curvature,
                                                         abs=1e-10)
    assert eval_metric(mh, p).curvature == pytest.approx(rec.curvature_hat(t), abs=1e-6)


# --- command line -----------------------------------------------------------------

def test_curvature_round(tmp_path):
    assert cli.run(["curvature", "--metric", str(SPECS / "round.spec"),
                    "--out", str(tmp_path)]) == 0
    r = yaml.safe_load((tmp_path / "curvature.yaml").read_text())
    assert r["K_min"] == pytest.approx(1.0, abs=1e-10)
    assert r["K_max"] == pytest.approx(1.0, abs=1e-10)
    assert r["geokit_version"] == __version__ and len(r["config_digest"]) == 16


def test_trace_ellipsoid_hyperbolic(tmp_path, principal):
    assert cli.run(["trace", "--metric", str(SPECS / "ellipsoid.spec"), "--seed", "principal-xz",
                    "--out", str(tmp_path)]) == 0
    r = yaml.safe_load((tmp_path / "closed_geodesic.yaml").read_text())
    assert r["classification"]["tag"] == "hyperbolic"
    assert r["trace"] == pytest.approx(principal["xz"].trace, abs=1e-8)
    header, rows = read_csv(tmp_path / "arc.csv")
    assert header[0] == "time" and len(rows) > 10


def test_perturb_report(tmp_path):
    assert cli.run(["perturb", "--metric", str(SPECS / "ellipsoid.spec"), "--amplitude", "1e-3",
                    "--out", str(tmp_path)]) == 0
    r = yaml.safe_load((tmp_path / "perturbation.yaml").read_text())
    assert r["relative_discrepancy"] < 1e-2
    assert "predicted_delta_trace" in r and "measured_delta_trace" in r


def test_every_output_has_version_and_digest(tmp_path):
    assert cli.run(["annulus", "--metric", str(SPECS / "ellipsoid.spec"), "--grid", "16",
                    "--portrait-grid", "4", "--out", str(tmp_path)]) == 0
    files = list(tmp_path.iterdir())
    assert {f.name for f in files} >= {"annulus.yaml", "portrait.csv", "periodic.csv"}
    digest = yaml.safe_load((tmp_path / "annulus.yaml").read_text())["config_digest"]
    for f in files:
        head = f.read_text()
        assert __version__ in head and digest in head


def test_outputs_are_deterministic(tmp_path):
    args = ["annulus", "--metric", str(SPECS / "ellipsoid.spec"), "--grid", "16",
            "--portrait-grid", "4"]
    assert cli.run(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_geokit_out_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("GEOKIT_OUT", str(tmp_path / "env"))
    assert cli.run(["curvature", "--metric", str(SPECS / "round.spec"),
                    "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "curvature.yaml").exists()
    assert not (tmp_path / "flag").exists()


def test_seed_recorded(tmp_path):
    assert cli.run(["curvature", "--metric", str(SPECS / "round.spec"), "--seed", "17",
                    "--out", str(tmp_path)]) == 0
    assert yaml.safe_load((tmp_path / "curvature.yaml").read_text())["seed"] == "17"


def test_usage_errors_exit_64(capsys):
    assert cli.run([]) == 64
    assert cli.run(["frobnicate"]) == 64
    assert cli.run(["curvature"]) == 64
    assert cli.run(["curvature", "--metric", "x", "--bogus"]) == 64
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert cli.run(["--version"]) == 0


def test_spec_errors_exit_65(tmp_path, capsys):
    bad = write(tmp_path, "kind: ellipsoid\nparameters:\n  a: 1\n")
    assert cli.run(["curvature", "--metric", str(bad), "--out", str(tmp_path)]) == 65
    assert "line" in capsys.readouterr().err
    assert cli.run(["curvature", "--metric", str(SPECS / "round.spec"), "--tol", "1e-3",
                    "--out", str(tmp_path)]) == 65
    assert cli.run(["homoclinic", "--metric", str(SPECS / "ellipsoid.spec"),
                    "--branch-budget", "nobody=1", "--budget", "0.1",
                    "--out", str(tmp_path)]) == 65


def test_domain_error_exit_2(tmp_path):
    # the round sphere has a degenerate annulus map
    assert cli.run(["homoclinic", "--metric", str(SPECS / "round.spec"),
                    "--out", str(tmp_path)]) == 2


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(cfg, m, digest):
        raise NoConvergenceError("no convergence", residual=1.0)
    monkeypatch.setitem(cli.COMMANDS, "curvature", boom)
    assert cli.run(["curvature", "--metric", str(SPECS / "round.spec"),
                    "--out", str(tmp_path)]) == 3


def test_pipeline_on_round_reports_degenerate(tmp_path):
    assert cli.run(["pipeline", "--metric", str(SPECS / "round.spec"),
                    "--out", str(tmp_path)]) == 0
    r = yaml.safe_load((tmp_path / "pipeline.yaml").read_text())
    assert "degenerate" in r

"""Metric spec files, record files and output writers.

A metric spec file is YAML with a top-level mapping::

    kind: ellipsoid            # round | ellipsoid | bumped_round | fermi_patched
    parameters:
      a: 1.0
      b: 1.1
      c: 1.3

``round`` takes ``radius``; ``bumped_round`` takes ``radius`` and a list
``bumps`` of mappings with ``center`` (3 numbers), ``radius`` and
``amplitude``.  ``fermi_patched`` takes ``base`` (an inline metric spec or
a path relative to the file) and ``record`` (an inline perturbation record
or a path), where a record holds ``gamma`` (``init`` with chart, coords,
direction and ``period``), ``epsilon``, ``amplitude`` and ``s_max``.

Errors are reported as :class:`SpecError` with the line and field.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import GeokitError, SpecError
from .metric_core import Bump, Chart, MetricField, SurfacePoint

KINDS = ("round", "ellipsoid", "bumped_round", "fermi_patched")


# ----------------------------------------------------------------------------
# YAML with line tracking
# ----------------------------------------------------------------------------

class _Node:
    """A parsed value together with the line it came from (1-based)."""

    def __init__(self, value, line, path):
        self.value, self.line, self.path = value, line, path

    def error(self, msg):
        raise SpecError(msg, self.line, self.path)

    def get(self, key, required=True):
        if not isinstance(self.value, dict):
            self.error(f"expected a mapping at {self.path or 'top level'}")
        if key not in self.value:
            if required:
                self.error(f"missing field '{key}'")
            return None
        return self.value[key]

    def number(self):
        v = self.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.error(f"field '{self.path}' must be a number, got {v!r}")
        return float(v)

    def vector(self, n):
        if not isinstance(self.value, list) or len(self.value) != n:
            self.error(f"field '{self.path}' must be a list of {n} numbers")
        return [x.number() for x in self.value]


def _wrap(node, path):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            out[key] = _wrap(v, f"{path}.{key}" if path else key)
        return _Node(out, line, path)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_wrap(v, f"{path}[{i}]") for i, v in enumerate(node.value)], line, path)
    value = yaml.safe_load(yaml.serialize(node)) if node.tag != "tag:yaml.org,2002:str" \
        else node.value
    return _Node(value, line, path)


def parse_tree(text: str) -> _Node:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SpecError(f"malformed YAML: {getattr(e, 'problem', e)}", line, None) from None
    if root is None:
        raise SpecError("empty spec file", 1, None)
    return _wrap(root, "")


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def metric_from_tree(root: _Node, base_dir: Path | None = None) -> MetricField:
    kind_node = root.get("kind")
    kind = kind_node.value
    if kind not in KINDS:
        kind_node.error(f"unknown metric kind {kind!r}; expected one of {', '.join(KINDS)}")
    params = root.get("parameters", required=kind != "round")
    try:
        if kind == "round":
            r = params.get("radius", required=False) if params is not None else None
            return MetricField.round(r.number() if r is not None else 1.0)
        if kind == "ellipsoid":
            return MetricField.ellipsoid(*(params.get(k).number() for k in ("a", "b", "c")))
        if kind == "bumped_round":
            r = params.get("radius", required=False)
            bl = params.get("bumps")
            if not isinstance(bl.value, list):
                bl.error("field 'bumps' must be a list")
            bumps = []
            for b in bl.value:
                try:
                    bumps.append(Bump(tuple(b.get("center").vector(3)), b.get("radius").number(),
                                      b.get("amplitude").number()))
                except SpecError:
                    raise
                except GeokitError as e:
                    b.error(str(e))
            return MetricField.bumped_round(r.number() if r is not None else 1.0, bumps)
        return _patched_from_tree(params, base_dir)
    except SpecError:
        raise
    except GeokitError as e:
        (params or root).error(str(e))


def _subtree(node: _Node, base_dir):
    """Inline mapping, or a path to a YAML file relative to base_dir."""
    if isinstance(node.value, str):
        path = Path(node.value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            text = path.read_text()
        except OSError as e:
            node.error(f"cannot read {path}: {e.strerror}")
        return parse_tree(text), path.parent
    return node, base_dir


def state_from_tree(node: _Node):
    from .geodesic_flow import UnitTangentState
    chart = node.get("chart").value
    try:
        c = Chart[str(chart).upper()]
    except KeyError:
        node.get("chart").error(f"chart must be 'north' or 'south', got {chart!r}")
    coords = node.get("coords").vector(2)
    direction = node.get("direction").vector(2)
    try:
        return UnitTangentState(SurfacePoint(c, tuple(coords)), np.array(direction))
    except GeokitError as e:
        node.error(str(e))


def _patched_from_tree(params: _Node, base_dir):
    from .closed_geodesics import geodesic_from_state
    from .perturbation import apply_perturbation, make_record
    base_node, bdir = _subtree(params.get("base"), base_dir)
    base = metric_from_tree(base_node, bdir)
    rec_node, _ = _subtree(params.get("record"), base_dir)
    g = rec_node.get("gamma")
    s0 = state_from_tree(g.get("init"))
    T = g.get("period").number()
    eps = rec_node.get("epsilon").number()
    amp = rec_node.get("amplitude").number()
    smax_node = rec_node.get("s_max", required=False)
    smax = smax_node.number() if smax_node is not None else 0.1
    gamma = geodesic_from_state(base, s0, T, 1e-12)
    rec = make_record(base, gamma, eps, amp, smax, predict=False)
    return apply_perturbation(base, rec)


def load_metric(path) -> MetricField:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecError(f"cannot read metric spec {path}: {e.strerror}", None, None) from None
    return metric_from_tree(parse_tree(text), path.parent)


def metric_spec(m: MetricField) -> dict:
    """Spec mapping for a base metric (the inverse of metric_from_tree)."""
    if m.kind == "round":
        return {"kind": "round", "parameters": {"radius": m.params["radius"]}}
    if m.kind == "ellipsoid":
        return {"kind": "ellipsoid", "parameters": dict(m.params)}
    if m.kind == "bumped_round":
        return {"kind": "bumped_round", "parameters": {
            "radius": m.params["radius"],
            "bumps": [{"center": list(map(float, b.center)), "radius": b.radius,
                       "amplitude": b.amplitude} for b in m.params["bumps"]]}}
    rec = m.patch.record
    return {"kind": "fermi_patched", "parameters": {"base": metric_spec(m.base),
                                                    "record": rec.to_dict()}}


# ----------------------------------------------------------------------------
# outputs
# ----------------------------------------------------------------------------

def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_report(path, report: dict, digest: str) -> Path:
    body = {"geokit_version": __version__, "config_digest": digest, **_clean(report)}
    return atomic_write(path, yaml.safe_dump(body, sort_keys=False))


def write_csv(path, header, rows, digest: str) -> Path:
    buf = io.StringIO()
    buf.write(f"# geokit_version={__version__} config_digest={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                    for x in _clean(list(r))])
    return atomic_write(path, buf.getvalue())


def read_csv(path):
    """Header and rows of a CSV written by write_csv (comment lines skipped)."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    r = list(csv.reader(lines))
    return r[0], r[1:]

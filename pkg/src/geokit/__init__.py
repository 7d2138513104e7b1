"""Geodesic flows on Riemannian two-spheres: Jacobi fields, closed geodesics,
the Birkhoff annulus map, trace perturbations and homoclinic search."""

__version__ = "0.1.0"

from .errors import (DomainError, GeokitError, NumericalError, SpecError)  # noqa: F401
from .metric_core import (Bump, Chart, MetricField, SurfacePoint, curvature_report,  # noqa: F401
                          eval_metric)
from .geodesic_flow import UnitTangentState, flow  # noqa: F401
from .closed_geodesics import (ClosedGeodesic, classify, principal_geodesic,  # noqa: F401
                               refine_closed)

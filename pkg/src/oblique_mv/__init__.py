"""Simulation and verification toolkit for mean-field SDEs whose state is
kept in a convex set by an obliquely distorted reflection term."""

__version__ = "0.1.0"

from .convexcore import ConvexConstraint, InteriorCertificate
from .dynamics import CoefficientField, CostField, ObliqueField
from .measures import EmpiricalMeasure, dirac, w2_to_origin, wasserstein2
from .mvsolver import (
    NoiseSource,
    PathEnsemble,
    System,
    TimeGrid,
    euler_iteration,
    interior_reflection_margin,
    oblique_skorohod_step,
    residual_report,
    simulate_penalized,
    simulate_projected,
)

__all__ = [
    "ConvexConstraint",
    "InteriorCertificate",
    "CoefficientField",
    "CostField",
    "ObliqueField",
    "EmpiricalMeasure",
    "dirac",
    "w2_to_origin",
    "wasserstein2",
    "NoiseSource",
    "PathEnsemble",
    "System",
    "TimeGrid",
    "euler_iteration",
    "interior_reflection_margin",
    "oblique_skorohod_step",
    "residual_report",
    "simulate_penalized",
    "simulate_projected",
    "__version__",
]

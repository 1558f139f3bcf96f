"""Backbone reconstruction of continuum robots from binary camera images."""

from .camera import CameraModel, Distortion, load_calibration, project_points, save_calibration, triangulate
from .curve import CurveParams, SegmentGrid, integrate_frame
from .icp import IcpProblem, SolverConfig, assign_closest, cost, solve, solve_multistep, solve_onestep

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CurveParams",
    "Distortion",
    "IcpProblem",
    "SegmentGrid",
    "SolverConfig",
    "assign_closest",
    "cost",
    "integrate_frame",
    "load_calibration",
    "project_points",
    "save_calibration",
    "solve",
    "solve_multistep",
    "solve_onestep",
    "triangulate",
]

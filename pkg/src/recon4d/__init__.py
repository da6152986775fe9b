"""Motion-compensated 4D reconstruction of dynamic volumes from scattered 2D slices."""
from .errors import (
    GeometryWarning,
    InvalidParameterError,
    NiftiError,
    NoValidSlicesError,
    OutOfGridWarning,
    UndefinedMetricError,
)
from .geometry import Grid4D, RigidTransform, Volume3D, Volume4D, compose, invert
from .psf import PsfParams
from .forward import ScatteredSlice, adjoint_project, build_slice_models, forward_project
from .solver import ReconConfig, ReconReport, reconstruct
from .baseline import interpolate_3d_baseline, raw_series
from .registration import RegistrationConfig, register_series, register_slices_hierarchical, register_volume
from .metrics import EvaluationReport, evaluate, sharpness, temporal_std

__version__ = "0.1.0"

__all__ = [
    "GeometryWarning", "InvalidParameterError", "NiftiError", "NoValidSlicesError",
    "OutOfGridWarning", "UndefinedMetricError",
    "Grid4D", "RigidTransform", "Volume3D", "Volume4D", "compose", "invert",
    "PsfParams", "ScatteredSlice", "adjoint_project", "build_slice_models", "forward_project",
    "ReconConfig", "ReconReport", "reconstruct", "interpolate_3d_baseline", "raw_series",
    "RegistrationConfig", "register_series", "register_slices_hierarchical", "register_volume",
    "EvaluationReport", "evaluate", "sharpness", "temporal_std",
]

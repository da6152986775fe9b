"""Slice acquisition operator and its adjoint.

Each observed pixel is modelled as the kernel-weighted average of the 4D
volume around the pixel centre after rigid motion, at the slice's acquisition
time. Weights are normalised per pixel (partition of unity), so constants are
reproduced under any pose; :func:`adjoint_project` is the exact transpose of
that normalised map.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from . import _kernels
from .errors import GeometryWarning, InvalidParameterError, OutOfGridWarning
from .geometry import Grid4D, RigidTransform, Volume4D
from .psf import PsfParams, half_widths

__all__ = [
    "ScatteredSlice",
    "SliceModel",
    "StackedOperator",
    "build_slice_models",
    "forward_project",
    "adjoint_project",
    "native_points",
]


@dataclass
class ScatteredSlice:
    """One acquired 2D slice.

    ``pose`` maps the slice's native (unmoved) pixel positions to the world
    positions that were actually sampled.
    """

    data: NDArray[np.float64] = field(repr=False)
    volume_index: int
    slice_index: int
    acq_time: float
    pose: RigidTransform
    in_plane_spacing: tuple[float, float]
    slice_thickness: float
    sigma_k: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise InvalidParameterError(f"slice data must be 2D, got shape {self.data.shape}")
        if not self.sigma_k > 0:
            raise InvalidParameterError(f"sigma_k must be positive, got {self.sigma_k}")
        if not (self.in_plane_spacing[0] > 0 and self.in_plane_spacing[1] > 0 and self.slice_thickness > 0):
            raise InvalidParameterError("slice spacings must be positive")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("slice data contains non-finite values")

    def with_pose(self, pose: RigidTransform) -> "ScatteredSlice":
        return ScatteredSlice(
            self.data, self.volume_index, self.slice_index, self.acq_time, pose,
            self.in_plane_spacing, self.slice_thickness, self.sigma_k, self.origin,
        )

    def with_data(self, data: NDArray[np.float64], sigma_k: float | None = None) -> "ScatteredSlice":
        return ScatteredSlice(
            data, self.volume_index, self.slice_index, self.acq_time, self.pose,
            self.in_plane_spacing, self.slice_thickness,
            self.sigma_k if sigma_k is None else sigma_k, self.origin,
        )


def native_points(
    shape: tuple[int, int],
    slice_index: int,
    in_plane_spacing: Sequence[float],
    slice_thickness: float,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> NDArray[np.float64]:
    """Unmoved pixel-centre positions of a slice, shape ``(nu*nv, 3)``."""
    nu, nv = shape
    u, v = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    pts = np.empty((nu * nv, 3))
    pts[:, 0] = origin[0] + u.ravel() * in_plane_spacing[0]
    pts[:, 1] = origin[1] + v.ravel() * in_plane_spacing[1]
    pts[:, 2] = origin[2] + slice_index * slice_thickness
    return pts


@dataclass
class SliceModel:
    """Sampling geometry of one slice: motion-corrected pixel centres and time."""

    pose: RigidTransform
    shape: tuple[int, int]
    points: NDArray[np.float64] = field(repr=False)
    times: NDArray[np.float64] = field(repr=False)
    psf: PsfParams

    @property
    def acq_time(self) -> float:
        return float(self.times[0])

    @property
    def normal(self) -> NDArray[np.float64]:
        return self.pose.matrix[:, 2]


def build_slice_models(
    slices: Sequence[ScatteredSlice], grid: Grid4D, psf: PsfParams
) -> list[SliceModel]:
    hw = half_widths(psf, grid)
    if min(hw[:3]) < 0.5:
        warnings.warn(
            f"psf truncation half-width {min(hw[:3]):.3f} voxels is below half a voxel; "
            "some samples will have an empty footprint",
            GeometryWarning,
            stacklevel=2,
        )
    models = []
    for s in slices:
        native = native_points(s.data.shape, s.slice_index, s.in_plane_spacing, s.slice_thickness, s.origin)
        pts = s.pose.apply(native)
        times = np.full(pts.shape[0], float(s.acq_time))
        models.append(SliceModel(s.pose, s.data.shape, np.ascontiguousarray(pts), times, psf))
    return models


def _geom(grid: Grid4D, psf: PsfParams) -> NDArray[np.float64]:
    return np.array(
        [*grid.origin, *grid.spacing, grid.tr, *psf.sigmas, psf.time_scale, psf.truncation_radius],
        dtype=np.float64,
    )


def _as_c(x: NDArray) -> NDArray[np.float64]:
    return np.ascontiguousarray(x, dtype=np.float64)


def gather(data: NDArray, grid: Grid4D, psf: PsfParams, points, times):
    """Normalised kernel average at arbitrary samples -> (values, weight sums)."""
    geom = _geom(grid, psf)
    n = points.shape[0]
    out = np.empty(n)
    norm = np.empty(n)
    _kernels.gather(_as_c(data), _as_c(points), _as_c(times), geom, _kernels.window_capacity(geom), out, norm)
    return out, norm


def scatter(values, grid: Grid4D, psf: PsfParams, points, times, mode=_kernels.SCATTER_NORMALIZED, n_chunks=None):
    geom = _geom(grid, psf)
    return _kernels.scatter(
        _as_c(values), _as_c(points), _as_c(times), geom, _kernels.window_capacity(geom), mode, grid.dims, n_chunks
    )


def forward_project(x: Volume4D, model: SliceModel) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Predicted slice and validity mask (False where the footprint is empty)."""
    values, norm = gather(x.data, x.grid, model.psf, model.points, model.times)
    valid = norm > 0
    if not valid.any():
        warnings.warn("slice lies entirely outside the reconstruction grid", OutOfGridWarning, stacklevel=2)
    return values.reshape(model.shape), valid.reshape(model.shape)


def adjoint_project(
    residual: NDArray[np.float64],
    valid: NDArray[np.bool_] | None,
    model: SliceModel,
    grid: Grid4D,
    n_chunks: int | None = None,
) -> Volume4D:
    """Transpose of :func:`forward_project` applied to a residual slice."""
    residual = np.asarray(residual, dtype=float)
    if residual.shape != tuple(model.shape):
        raise InvalidParameterError(f"residual shape {residual.shape} does not match slice shape {model.shape}")
    r = residual.ravel()
    if valid is not None:
        if valid.shape != residual.shape:
            raise InvalidParameterError("validity mask shape does not match residual")
        r = np.where(valid.ravel(), r, 0.0)
    data = scatter(r, grid, model.psf, model.points, model.times, n_chunks=n_chunks)
    return Volume4D(grid, data)


class StackedOperator:
    """All slice operators stacked into one linear map ``x -> [F_1 x; ...; F_K x]``.

    Holds the observed samples, their validity and per-sample weights
    ``1 / sigma_k**2`` so the solver works on flat arrays.
    """

    def __init__(
        self,
        slices: Sequence[ScatteredSlice],
        grid: Grid4D,
        psf: PsfParams,
        models: Sequence[SliceModel] | None = None,
        n_chunks: int | None = None,
    ):
        if models is None:
            models = build_slice_models(slices, grid, psf)
        if len(models) != len(slices):
            raise InvalidParameterError("one slice model per slice is required")
        self.grid = grid
        self.psf = psf
        self.n_chunks = n_chunks
        self.slices = list(slices)
        self.models = list(models)
        sizes = [int(np.prod(m.shape)) for m in self.models]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if self.models:
            self.points = np.ascontiguousarray(np.concatenate([m.points for m in self.models]))
            self.times = np.ascontiguousarray(np.concatenate([m.times for m in self.models]))
            self.observed = np.concatenate([s.data.ravel() for s in self.slices])
            self.weights = np.concatenate(
                [np.full(n, 1.0 / s.sigma_k**2) for n, s in zip(sizes, self.slices)]
            )
        else:
            self.points = np.zeros((0, 3))
            self.times = np.zeros(0)
            self.observed = np.zeros(0)
            self.weights = np.zeros(0)
        _, norm = self.apply_with_norm(np.zeros(grid.dims))
        self.valid = norm > 0

    @property
    def n_samples(self) -> int:
        return int(self.points.shape[0])

    def apply_with_norm(self, x: NDArray[np.float64]):
        if self.n_samples == 0:
            return np.zeros(0), np.zeros(0)
        return gather(x, self.grid, self.psf, self.points, self.times)

    def apply(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        values, _ = self.apply_with_norm(x)
        return np.where(self.valid, values, 0.0)

    def adjoint(self, r: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.n_samples == 0:
            return np.zeros(self.grid.dims)
        r = np.where(self.valid, r, 0.0)
        return scatter(r, self.grid, self.psf, self.points, self.times, n_chunks=self.n_chunks)

    def split(self, flat: NDArray) -> list[NDArray]:
        """Per-slice 2D views of a flat sample array."""
        return [
            flat[a:b].reshape(m.shape) for a, b, m in zip(self.offsets[:-1], self.offsets[1:], self.models)
        ]

    def raw_scatter(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Unnormalised kernel splat ``sum_n w_n(v) * values_n`` onto the grid."""
        if self.n_samples == 0:
            return np.zeros(self.grid.dims)
        return scatter(values, self.grid, self.psf, self.points, self.times,
                       mode=_kernels.SCATTER_RAW, n_chunks=self.n_chunks)

    def normal_diagonal(self) -> NDArray[np.float64]:
        """Diagonal of ``F^T W F`` restricted to valid samples."""
        if self.n_samples == 0:
            return np.zeros(self.grid.dims)
        w = np.where(self.valid, self.weights, 0.0)
        return scatter(w, self.grid, self.psf, self.points, self.times,
                       mode=_kernels.SCATTER_NORMALIZED_SQUARED, n_chunks=self.n_chunks)

"""Single-step 3D linear interpolation, one timepoint at a time.

Every sample of a timepoint is splatted onto its eight neighbouring voxels
with trilinear (tent) weights and the accumulated values are normalised by the
accumulated weights. Voxels that receive no weight are holes: they are filled
from the nearest covered voxel and reported in the coverage map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import NoValidSlicesError
from .forward import ScatteredSlice, native_points
from .geometry import Grid4D, Volume4D

__all__ = ["BaselineResult", "interpolate_3d_baseline", "raw_series", "trilinear_splat"]

_EPS = 1e-12


@dataclass
class BaselineResult:
    volume: Volume4D
    coverage: NDArray[np.bool_] = field(repr=False)
    missing_timepoints: list[int] = field(default_factory=list)

    def hole_fraction(self, mask: NDArray[np.bool_] | None = None, timepoint: int | None = None) -> float:
        cov = self.coverage if timepoint is None else self.coverage[..., timepoint]
        if mask is None:
            return float(1.0 - cov.mean())
        m = np.asarray(mask, dtype=bool)
        if timepoint is None:
            m = np.broadcast_to(m[..., None], cov.shape)
        return float(1.0 - cov[m].mean())


def trilinear_splat(
    points: NDArray[np.float64], values: NDArray[np.float64], grid: Grid4D
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Accumulated ``(sum w*v, sum w)`` on the spatial grid."""
    shape = grid.shape3
    f = (points - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    base = np.floor(f).astype(np.int64)
    frac = f - base
    num = np.zeros(int(np.prod(shape)))
    den = np.zeros_like(num)
    for corner in range(8):
        offs = np.array([(corner >> a) & 1 for a in range(3)])
        idx = base + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        inside = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1) & (w > 0)
        flat = np.ravel_multi_index(tuple(idx[inside].T), shape)
        num += np.bincount(flat, weights=w[inside] * values[inside], minlength=num.size)
        den += np.bincount(flat, weights=w[inside], minlength=den.size)
    return num.reshape(shape), den.reshape(shape)


def interpolate_3d_baseline(
    slices: Sequence[ScatteredSlice],
    grid: Grid4D,
) -> BaselineResult:
    """Reconstruct every timepoint independently from its own slices.

    Holes take the value of the nearest covered voxel. Timepoints without any
    slice copy the nearest reconstructed timepoint and are listed in
    ``missing_timepoints``.
    """
    if not slices:
        raise NoValidSlicesError("no slices supplied")
    nt = grid.nt
    by_time: dict[int, list[ScatteredSlice]] = {}
    for s in slices:
        by_time.setdefault(int(s.volume_index), []).append(s)

    data = np.zeros(grid.dims)
    coverage = np.zeros(grid.dims, dtype=bool)
    done = np.zeros(nt, dtype=bool)
    for t in range(nt):
        group = by_time.get(t)
        if not group:
            continue
        pts = np.concatenate(
            [s.pose.apply(native_points(s.data.shape, s.slice_index, s.in_plane_spacing, s.slice_thickness, s.origin))
             for s in group]
        )
        vals = np.concatenate([s.data.ravel() for s in group])
        num, den = trilinear_splat(pts, vals, grid)
        covered = den > _EPS
        if not covered.any():
            continue
        frame = np.where(covered, num / np.where(covered, den, 1.0), 0.0)
        if not covered.all():
            idx = ndimage.distance_transform_edt(
                ~covered, sampling=grid.spacing, return_distances=False, return_indices=True
            )
            frame = frame[tuple(idx)]
        data[..., t] = frame
        coverage[..., t] = covered
        done[t] = True

    if not done.any():
        raise NoValidSlicesError("no timepoint has a slice inside the grid")
    missing = [t for t in range(nt) if not done[t]]
    have = np.flatnonzero(done)
    for t in missing:
        nearest = have[np.argmin(np.abs(have - t))]
        data[..., t] = data[..., nearest]
    return BaselineResult(Volume4D(grid, data), coverage, missing)


def raw_series(slices: Sequence[ScatteredSlice], grid: Grid4D) -> Volume4D:
    """Slices written back to their nominal positions, ignoring motion."""
    data = np.zeros(grid.dims)
    for s in slices:
        data[: s.data.shape[0], : s.data.shape[1], s.slice_index, s.volume_index] = s.data
    return Volume4D(grid, data)

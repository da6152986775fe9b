"""Separable 4D Gaussian point spread function.

Time offsets are converted to mm-equivalents with ``time_scale`` (slice
thickness over TR) before they are compared with ``sigma_t``. The kernel is
the unnormalised Gaussian ``exp(-sum(d_a**2 / (2 sigma_a**2)))`` truncated at
``truncation_radius`` standard deviations on every axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameterError
from .geometry import Grid4D

__all__ = [
    "FWHM_TO_SIGMA",
    "PsfParams",
    "time_scale_factor",
    "axis_weight",
    "psf_weight",
    "kernel_footprint",
    "axis_window",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def time_scale_factor(slice_thickness_mm: float, tr_s: float) -> float:
    """Factor converting seconds into through-plane mm-equivalents."""
    if not slice_thickness_mm > 0 or not tr_s > 0:
        raise InvalidParameterError(
            f"slice thickness and TR must be positive (got {slice_thickness_mm}, {tr_s})"
        )
    return slice_thickness_mm / tr_s


@dataclass(frozen=True)
class PsfParams:
    sigma_x: float
    sigma_y: float
    sigma_z: float
    sigma_t: float
    time_scale: float
    truncation_radius: float = 3.0

    def __post_init__(self) -> None:
        for name in ("sigma_x", "sigma_y", "sigma_z", "sigma_t", "time_scale"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.truncation_radius >= 1:
            raise InvalidParameterError(f"truncation_radius must be >= 1, got {self.truncation_radius}")

    @classmethod
    def default(
        cls,
        in_plane_spacing: Sequence[float],
        slice_thickness: float,
        tr: float,
        truncation_radius: float = 3.0,
    ) -> "PsfParams":
        """FWHM of one voxel in space and one scaled TR of temporal sigma."""
        scale = time_scale_factor(slice_thickness, tr)
        return cls(
            sigma_x=in_plane_spacing[0] * FWHM_TO_SIGMA,
            sigma_y=in_plane_spacing[1] * FWHM_TO_SIGMA,
            sigma_z=slice_thickness * FWHM_TO_SIGMA,
            sigma_t=scale * tr,
            time_scale=scale,
            truncation_radius=truncation_radius,
        )

    @classmethod
    def for_grid(cls, grid: Grid4D, truncation_radius: float = 3.0) -> "PsfParams":
        return cls.default(grid.spacing[:2], grid.spacing[2], grid.tr, truncation_radius)

    def replace(self, **changes: float) -> "PsfParams":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return PsfParams(**values)

    @property
    def sigmas(self) -> tuple[float, float, float, float]:
        return (self.sigma_x, self.sigma_y, self.sigma_z, self.sigma_t)

    def as_config(self) -> dict[str, float]:
        return {
            "psf.sigma_x": self.sigma_x,
            "psf.sigma_y": self.sigma_y,
            "psf.sigma_z": self.sigma_z,
            "psf.sigma_t": self.sigma_t,
            "psf.time_scale": self.time_scale,
            "psf.truncation_radius": self.truncation_radius,
        }


def axis_weight(offset: ArrayLike, sigma: float, radius: float) -> NDArray[np.float64]:
    """1D Gaussian factor, exactly zero beyond ``radius * sigma``."""
    d = np.asarray(offset, dtype=float)
    w = np.exp(-0.5 * (d / sigma) ** 2)
    return np.where(np.abs(d) > radius * sigma, 0.0, w)


def psf_weight(params: PsfParams, dx: ArrayLike, dy: ArrayLike, dz: ArrayLike, dt: ArrayLike) -> NDArray[np.float64]:
    """Kernel value for spatial offsets in mm and a time offset in seconds."""
    r = params.truncation_radius
    dts = np.asarray(dt, dtype=float) * params.time_scale
    d = [np.asarray(dx, dtype=float), np.asarray(dy, dtype=float), np.asarray(dz, dtype=float), dts]
    outside = np.zeros(np.broadcast(*d).shape, dtype=bool)
    expo = 0.0
    for off, sigma in zip(d, params.sigmas):
        outside = outside | (np.abs(off) > r * sigma)
        expo = expo + off**2 / (2.0 * sigma**2)
    w = np.exp(-expo)
    w = np.where(outside, 0.0, w)
    return w if w.ndim else float(w)


def axis_window(center_idx: float, half_width: float, n: int) -> range:
    """Grid indices within ``half_width`` (voxel units) of a fractional index."""
    lo = max(0, math.ceil(center_idx - half_width))
    hi = min(n - 1, math.floor(center_idx + half_width))
    return range(lo, hi + 1)


def half_widths(params: PsfParams, grid: Grid4D) -> tuple[float, float, float, float]:
    """Truncation half-widths in voxel (and timepoint) units."""
    r = params.truncation_radius
    dx, dy, dz = grid.spacing
    dt_scaled = grid.tr * params.time_scale
    return (
        r * params.sigma_x / dx,
        r * params.sigma_y / dy,
        r * params.sigma_z / dz,
        r * params.sigma_t / dt_scaled,
    )


def kernel_footprint(
    params: PsfParams, grid: Grid4D, point: ArrayLike, time: float
) -> list[tuple[tuple[int, int, int, int], float]]:
    """All grid voxels with non-zero kernel weight around a world point and time."""
    point = np.asarray(point, dtype=float)
    idx = (point - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    tidx = time / grid.tr
    hw = half_widths(params, grid)
    windows = [axis_window(c, h, n) for c, h, n in zip((*idx, tidx), hw, grid.dims)]
    if any(len(w) == 0 for w in windows):
        return []
    r = params.truncation_radius
    per_axis = []
    for axis, win in enumerate(windows):
        pos = np.fromiter(win, dtype=float)
        if axis < 3:
            off = grid.origin[axis] + pos * grid.spacing[axis] - point[axis]
        else:
            off = (pos * grid.tr - time) * params.time_scale
        per_axis.append(axis_weight(off, params.sigmas[axis], r))
    out = []
    for a, i in enumerate(windows[0]):
        for b, j in enumerate(windows[1]):
            for c, k in enumerate(windows[2]):
                for d, l in enumerate(windows[3]):
                    w = per_axis[0][a] * per_axis[1][b] * per_axis[2][c] * per_axis[3][d]
                    if w > 0:
                        out.append(((i, j, k, l), float(w)))
    return out

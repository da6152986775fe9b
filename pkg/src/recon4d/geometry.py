"""Rigid transforms and the regular space-time grid.

Rotation convention: ``R = Rz(rz) @ Ry(ry) @ Rx(rx)`` (right-handed, angles in
radians internally). A transform maps a world point ``p`` (mm) to
``R @ (p - center) + center + t``. Rotation centres default to the geometric
centre of the reconstruction grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameterError

__all__ = [
    "RigidTransform",
    "Grid4D",
    "Volume3D",
    "Volume4D",
    "rotation_matrix",
    "matrix_to_angles",
    "apply_transform",
    "compose",
    "invert",
    "voxel_to_world",
    "world_to_voxel",
]


def rotation_matrix(rx: float, ry: float, rz: float) -> NDArray[np.float64]:
    """Rotation matrix ``Rz @ Ry @ Rx`` for angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rot_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rot_z @ rot_y @ rot_x


def matrix_to_angles(rot: NDArray[np.float64]) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_matrix`; unique for ``|ry| < 90°``."""
    sy = -float(np.clip(rot[2, 0], -1.0, 1.0))
    ry = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        rx = math.atan2(rot[2, 1], rot[2, 2])
        rz = math.atan2(rot[1, 0], rot[0, 0])
    else:
        # gimbal lock: fold everything into rz
        rx = 0.0
        rz = math.atan2(-rot[0, 1], rot[1, 1])
    return rx, ry, rz


@dataclass(frozen=True)
class RigidTransform:
    """6-DOF rigid motion. Angles in radians, translations and centre in mm."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        vals = (self.rx, self.ry, self.rz, self.tx, self.ty, self.tz, *self.center)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError("rigid transform parameters must be finite")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def identity(cls, center: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center=tuple(center))

    @classmethod
    def from_degrees(
        cls,
        rx: float = 0.0,
        ry: float = 0.0,
        rz: float = 0.0,
        tx: float = 0.0,
        ty: float = 0.0,
        tz: float = 0.0,
        center: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "RigidTransform":
        return cls(math.radians(rx), math.radians(ry), math.radians(rz), tx, ty, tz, tuple(center))

    @classmethod
    def from_params(cls, params: ArrayLike, center: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from ``(rx_deg, ry_deg, rz_deg, tx, ty, tz)``."""
        p = [float(v) for v in np.asarray(params, dtype=float).ravel()]
        return cls.from_degrees(*p, center=center)

    @classmethod
    def from_matrix(
        cls, rot: NDArray[np.float64], offset: ArrayLike, center: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        """Build from ``p -> rot @ p + offset`` expressed about ``center``."""
        rx, ry, rz = matrix_to_angles(np.asarray(rot, dtype=float))
        c = np.asarray(center, dtype=float)
        rot = rotation_matrix(rx, ry, rz)
        t = np.asarray(offset, dtype=float) - c + rot @ c
        return cls(rx, ry, rz, float(t[0]), float(t[1]), float(t[2]), tuple(c))

    # cached: poses are immutable and hit hard inside the registration loops
    @cached_property
    def matrix(self) -> NDArray[np.float64]:
        rot = rotation_matrix(self.rx, self.ry, self.rz)
        rot.flags.writeable = False
        return rot

    @cached_property
    def offset(self) -> NDArray[np.float64]:
        """Translation part of the equivalent ``p -> R @ p + offset`` map."""
        c = np.asarray(self.center)
        off = c - self.matrix @ c + np.array([self.tx, self.ty, self.tz])
        off.flags.writeable = False
        return off

    def params(self) -> NDArray[np.float64]:
        """``(rx_deg, ry_deg, rz_deg, tx, ty, tz)``."""
        return np.array(
            [math.degrees(self.rx), math.degrees(self.ry), math.degrees(self.rz), self.tx, self.ty, self.tz]
        )

    def with_center(self, center: Sequence[float]) -> "RigidTransform":
        """Same map, re-expressed about another rotation centre."""
        return RigidTransform.from_matrix(self.matrix, self.offset, center)

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Apply to a point ``(3,)`` or an array of points ``(..., 3)``."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.offset

    def is_close(self, other: "RigidTransform", atol: float = 1e-10) -> bool:
        """True if both describe the same map (ignores the centre parameterisation)."""
        return bool(
            np.allclose(self.matrix, other.matrix, atol=atol, rtol=0)
            and np.allclose(self.offset, other.offset, atol=atol, rtol=0)
        )


def apply_transform(transform: RigidTransform, point: ArrayLike) -> NDArray[np.float64]:
    return transform.apply(point)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``.

    The result is expressed about ``a.center``.
    """
    rot = a.matrix @ b.matrix
    offset = a.matrix @ b.offset + a.offset
    return RigidTransform.from_matrix(rot, offset, a.center)


def invert(t: RigidTransform) -> RigidTransform:
    rot_t = t.matrix.T
    return RigidTransform.from_matrix(rot_t, -rot_t @ t.offset, t.center)


@dataclass(frozen=True)
class Grid4D:
    """Regular space-time grid; voxel ``(i, j, k, l)`` sits at
    ``origin + (i*dx, j*dy, k*dz)`` and time ``l*tr``."""

    dims: tuple[int, int, int, int]
    spacing: tuple[float, float, float]
    tr: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 4 or any(d < 1 for d in dims):
            raise InvalidParameterError(f"grid dims must be four positive ints, got {self.dims}")
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise InvalidParameterError(f"grid spacing must be three positive values, got {self.spacing}")
        if not self.tr > 0:
            raise InvalidParameterError(f"tr must be positive, got {self.tr}")
        if len(origin) != 3:
            raise InvalidParameterError("origin must have three components")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "tr", float(self.tr))

    @property
    def shape3(self) -> tuple[int, int, int]:
        return self.dims[:3]

    @property
    def nt(self) -> int:
        return self.dims[3]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def center(self) -> tuple[float, float, float]:
        """World position of the geometric centre of the spatial grid."""
        return tuple(o + 0.5 * (n - 1) * s for o, n, s in zip(self.origin, self.dims[:3], self.spacing))

    def with_nt(self, nt: int) -> "Grid4D":
        return Grid4D((*self.dims[:3], nt), self.spacing, self.tr, self.origin)

    def refined(self, factor: int) -> "Grid4D":
        """Spatially ``factor``-times finer grid covering the same voxel extents."""
        spacing = tuple(s / factor for s in self.spacing)
        origin = tuple(o - 0.5 * (factor - 1) * s for o, s in zip(self.origin, spacing))
        dims = tuple(n * factor for n in self.dims[:3])
        return Grid4D((*dims, self.nt), spacing, self.tr, origin)

    def world_points(self) -> NDArray[np.float64]:
        """World coordinates of all spatial voxel centres, shape ``(nx, ny, nz, 3)``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims[:3])]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxel_to_world(grid: Grid4D, idx: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Fractional index ``(..., 4)`` -> (world point ``(..., 3)``, time in s)."""
    idx = np.asarray(idx, dtype=float)
    point = np.asarray(grid.origin) + idx[..., :3] * np.asarray(grid.spacing)
    return point, idx[..., 3] * grid.tr


def world_to_voxel(grid: Grid4D, point: ArrayLike, time: ArrayLike) -> NDArray[np.float64]:
    point = np.asarray(point, dtype=float)
    spatial = (point - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    t = np.asarray(time, dtype=float) / grid.tr
    return np.concatenate([spatial, t[..., None]], axis=-1)


@dataclass
class Volume4D:
    """Intensities on a :class:`Grid4D`, ``data.shape == grid.dims``."""

    grid: Grid4D
    data: NDArray[np.floating] = field(repr=False)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        if self.data.shape != self.grid.dims:
            raise InvalidParameterError(f"data shape {self.data.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("volume contains non-finite values")

    @classmethod
    def zeros(cls, grid: Grid4D) -> "Volume4D":
        return cls(grid, np.zeros(grid.dims))

    def copy(self) -> "Volume4D":
        return Volume4D(self.grid, self.data.copy())

    def frame(self, index: int) -> "Volume3D":
        return Volume3D(self.data[..., index].copy(), self.grid.spacing, self.grid.origin)

    def mean_frame(self) -> "Volume3D":
        return Volume3D(self.data.mean(axis=3), self.grid.spacing, self.grid.origin)


@dataclass
class Volume3D:
    """A single 3D frame with its spatial geometry."""

    data: NDArray[np.floating] = field(repr=False)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise InvalidParameterError(f"expected 3D data, got shape {self.data.shape}")

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple(o + 0.5 * (n - 1) * s for o, n, s in zip(self.origin, self.data.shape, self.spacing))

    def as_4d(self, tr: float = 1.0) -> Volume4D:
        grid = Grid4D((*self.data.shape, 1), self.spacing, tr, self.origin)
        return Volume4D(grid, self.data[..., None])


def stack_frames(frames: Iterable[Volume3D], tr: float) -> Volume4D:
    frames = list(frames)
    data = np.stack([f.data for f in frames], axis=-1)
    first = frames[0]
    return Volume4D(Grid4D(data.shape, first.spacing, tr, first.origin), data)

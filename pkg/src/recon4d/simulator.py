"""Synthetic ground truth: analytic phantoms, motion trajectories and slice acquisition.

Phantoms are analytic in world coordinates, so the same phantom can be
evaluated on the reconstruction grid or on a finer grid (to avoid testing the
solver on data produced by its own discretisation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from .errors import InvalidParameterError
from .forward import ScatteredSlice, gather, native_points
from .geometry import Grid4D, RigidTransform, Volume4D
from .masks import dilate_mask
from .psf import PsfParams

__all__ = [
    "DESK_GRID",
    "PhantomSpec",
    "TrajectorySpec",
    "SimulatedSeries",
    "generate_phantom",
    "generate_trajectory",
    "interleave_order",
    "simulate_acquisition",
    "simulate_series",
]

# 144x144 matrix, 1.74x1.74x3 mm, 96 volumes scaled down for desk runs
DESK_GRID = Grid4D((64, 64, 24, 32), (1.74, 1.74, 3.0), 2.0)

PhantomKind = Literal["nested-ellipsoids", "checkerboard-plus-ellipsoid"]
TrajectoryStyle = Literal["smooth-drift", "burst", "mixed"]


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid4D = DESK_GRID
    kind: PhantomKind = "nested-ellipsoids"
    amplitude: float = 0.02
    period: float = 20.0
    seed: int = 0
    baselines: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("nested-ellipsoids", "checkerboard-plus-ellipsoid"):
            raise InvalidParameterError(f"unknown phantom kind {self.kind!r}")
        if self.amplitude < 0 or not self.period > 0:
            raise InvalidParameterError("amplitude must be >= 0 and period > 0")

    @property
    def region_baselines(self) -> tuple[float, ...]:
        """Baseline intensity per label, label 0 (background) first."""
        if self.baselines is not None:
            return tuple(self.baselines)
        if self.kind == "nested-ellipsoids":
            return (0.0, 60.0, 100.0, 150.0, 140.0, 40.0)
        return (0.0, 80.0, 120.0, 160.0)

    def effective_period(self) -> float:
        """Period snapped to a whole number of cycles over the series."""
        duration = self.grid.nt * self.grid.tr
        cycles = max(1, round(duration / self.period))
        return duration / cycles


def _ellipsoid(points, center, axes) -> NDArray[np.bool_]:
    q = (points - center) / axes
    return np.sum(q * q, axis=-1) <= 1.0


def _labels(spec: PhantomSpec, grid: Grid4D) -> NDArray[np.int16]:
    """Region labels of the phantom evaluated at the voxel centres of ``grid``."""
    rng = np.random.default_rng(spec.seed)
    ref = spec.grid
    c = np.asarray(ref.center)
    half = 0.5 * (np.asarray(ref.dims[:3]) - 1) * np.asarray(ref.spacing)
    pts = grid.world_points()
    labels = np.zeros(pts.shape[:3], dtype=np.int16)
    jitter = lambda scale: 1.0 + rng.uniform(-scale, scale, 3)  # noqa: E731
    center = c + rng.uniform(-0.03, 0.03, 3) * half
    if spec.kind == "nested-ellipsoids":
        outer = 0.78 * half * jitter(0.03)
        labels[_ellipsoid(pts, center, outer)] = 1
        labels[_ellipsoid(pts, center, 0.85 * outer)] = 2
        vl = center + np.array([-0.22, 0.05, 0.10]) * half * jitter(0.1)
        labels[_ellipsoid(pts, vl, np.array([0.12, 0.30, 0.22]) * half * jitter(0.1))] = 3
        vr = center + np.array([0.20, 0.08, 0.05]) * half * jitter(0.1)
        labels[_ellipsoid(pts, vr, np.array([0.10, 0.26, 0.30]) * half * jitter(0.1))] = 4
        les = center + np.array([0.35, -0.40, -0.30]) * half * jitter(0.1)
        labels[_ellipsoid(pts, les, np.array([0.12, 0.12, 0.18]) * half)] = 5
    else:
        body = 0.8 * half * jitter(0.03)
        inside = _ellipsoid(pts, center, body)
        cell = np.array([4.0 * ref.spacing[0], 4.0 * ref.spacing[1], 2.0 * ref.spacing[2]]) * jitter(0.1)
        parity = np.sum(np.floor((pts - center) / cell).astype(np.int64), axis=-1) % 2
        labels[inside & (parity == 0)] = 1
        labels[inside & (parity == 1)] = 2
        blob = center + np.array([0.3, -0.35, 0.25]) * half * jitter(0.1)
        labels[_ellipsoid(pts, blob, np.array([0.15, 0.2, 0.25]) * half)] = 3
    return labels


def generate_phantom(spec: PhantomSpec, grid: Grid4D | None = None) -> tuple[Volume4D, NDArray[np.int16]]:
    """Phantom series and label map on ``grid`` (default: ``spec.grid``).

    Region ``r`` follows ``b_r * (1 + amplitude * sin(2 pi t / period + phi_r))``
    with a seeded phase per region; background stays at zero.
    """
    grid = spec.grid if grid is None else grid
    labels = _labels(spec, grid)
    baselines = np.asarray(spec.region_baselines, dtype=float)
    if labels.max() >= baselines.size:
        raise InvalidParameterError("not enough baselines for the phantom regions")
    rng = np.random.default_rng([spec.seed, 1])
    phases = rng.uniform(0, 2 * np.pi, baselines.size)
    t = np.arange(grid.nt) * grid.tr
    period = spec.effective_period()
    if grid.nt > 1:
        mod = 1.0 + spec.amplitude * np.sin(2 * np.pi * t[None, :] / period + phases[:, None])
    else:
        mod = np.ones((baselines.size, 1))
    series = baselines[:, None] * mod  # (regions, nt)
    series[0] = 0.0
    data = series[labels]
    return Volume4D(grid, data), labels


@dataclass(frozen=True)
class TrajectorySpec:
    """Per-parameter maxima; rotations in degrees as ``(roll, pitch, yaw) = (rx, ry, rz)``."""

    max_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    style: TrajectoryStyle = "mixed"
    burst_window: tuple[int, int] | None = None
    seed: int = 0
    drift_fraction: float = 0.3

    def __post_init__(self) -> None:
        if self.style not in ("smooth-drift", "burst", "mixed"):
            raise InvalidParameterError(f"unknown trajectory style {self.style!r}")
        if any(m < 0 for m in (*self.max_translation, *self.max_rotation)):
            raise InvalidParameterError("trajectory maxima must be non-negative")

    @classmethod
    def table_row(cls, tx, ty, tz, roll, pitch, yaw, **kw) -> "TrajectorySpec":
        return cls((tx, ty, tz), (roll, pitch, yaw), **kw)

    @property
    def maxima(self) -> NDArray[np.float64]:
        """``(rx, ry, rz, tx, ty, tz)`` maxima in degrees / mm."""
        return np.array([*self.max_rotation, *self.max_translation], dtype=float)


def _smooth_curve(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    knots = max(4, n // 96 + 4)
    xk = np.linspace(0, max(n - 1, 1), knots)
    return CubicSpline(xk, rng.normal(size=knots))(np.arange(n))


def _burst_curve(rng: np.random.Generator, n: int, window: tuple[int, int]) -> NDArray[np.float64]:
    a, b = window
    x = np.arange(n)
    inside = (x >= a) & (x < b)
    width = max(b - a, 1)
    bump = np.where(inside, 0.5 * (1 - np.cos(2 * np.pi * (x - a) / width)), 0.0)
    wiggle = _smooth_curve(rng, n)
    wiggle /= max(np.abs(wiggle).max(), 1e-12)
    return bump * (rng.choice([-1.0, 1.0]) + 0.15 * wiggle)


def _normalize(curve: NDArray[np.float64]) -> NDArray[np.float64]:
    peak = np.abs(curve).max()
    return curve / peak if peak > 0 else curve


def default_burst_window(n_slices: int, rng: np.random.Generator) -> tuple[int, int]:
    length = max(2, n_slices // 10)
    start = int(rng.integers(int(0.3 * n_slices), max(int(0.3 * n_slices) + 1, int(0.6 * n_slices))))
    return start, min(n_slices, start + length)


def generate_trajectory(
    spec: TrajectorySpec, n_slices: int, center: Sequence[float] = (0.0, 0.0, 0.0)
) -> list[RigidTransform]:
    """Per-slice poses in acquisition order.

    Every parameter curve is normalised to unit peak and scaled to between 90%
    and 100% of its declared maximum, so the series reaches but never exceeds
    the requested motion range.
    """
    if n_slices < 1:
        raise InvalidParameterError("n_slices must be >= 1")
    rng = np.random.default_rng(spec.seed)
    window = spec.burst_window or default_burst_window(n_slices, rng)
    maxima = spec.maxima
    params = np.zeros((n_slices, 6))
    for p in range(6):
        if maxima[p] == 0:
            continue
        if spec.style == "smooth-drift":
            curve = _normalize(_smooth_curve(rng, n_slices))
        elif spec.style == "burst":
            curve = _normalize(_burst_curve(rng, n_slices, window))
        else:
            drift = _normalize(_smooth_curve(rng, n_slices))
            burst = _normalize(_burst_curve(rng, n_slices, window))
            curve = _normalize(spec.drift_fraction * drift + (1.0 - spec.drift_fraction) * burst)
        params[:, p] = maxima[p] * rng.uniform(0.9, 1.0) * curve
    params = np.clip(params, -maxima, maxima)
    return [RigidTransform.from_params(row, center=center) for row in params]


def interleave_order(n_slices: int, interleave: int) -> list[int]:
    """Acquisition order of slice positions, e.g. ``0, 2, 4, ..., 1, 3, 5, ...``."""
    if interleave < 1:
        raise InvalidParameterError("interleave must be >= 1")
    return [k for p in range(interleave) for k in range(p, n_slices, interleave)]


def simulate_acquisition(
    truth: Volume4D,
    trajectory: Sequence[RigidTransform],
    psf: PsfParams,
    noise_sigma: float,
    interleave: int = 2,
    seed: int = 0,
    acquisition_grid: Grid4D | None = None,
) -> list[ScatteredSlice]:
    """Sample the truth along moved slices, in interleaved acquisition order.

    ``acquisition_grid`` fixes the slice matrix, spacing, slice count and TR;
    it defaults to the truth grid and differs from it when the truth is
    evaluated on a finer grid. Pixels whose kernel footprint misses the truth
    grid read as background (zero) before noise is added.
    """
    acq = truth.grid if acquisition_grid is None else acquisition_grid
    nx, ny, nz, nt = acq.dims
    if len(trajectory) != nz * nt:
        raise InvalidParameterError(f"trajectory has {len(trajectory)} poses, expected {nz * nt}")
    if noise_sigma < 0:
        raise InvalidParameterError("noise_sigma must be >= 0")
    rng = np.random.default_rng([seed, 2])
    order = interleave_order(nz, interleave)
    sigma_k = noise_sigma if noise_sigma > 0 else 1.0
    spacing = acq.spacing
    slices = []
    for v in range(nt):
        for j, k in enumerate(order):
            pose = trajectory[v * nz + j]
            acq_time = v * acq.tr + j * acq.tr / nz
            native = native_points((nx, ny), k, spacing[:2], spacing[2], acq.origin)
            pts = pose.apply(native)
            values, norm = gather(truth.data, truth.grid, psf, pts, np.full(pts.shape[0], acq_time))
            values = np.where(norm > 0, values, 0.0)
            if noise_sigma > 0:
                values = values + rng.normal(0.0, noise_sigma, values.shape)
            slices.append(
                ScatteredSlice(
                    values.reshape(nx, ny), v, k, acq_time, pose, spacing[:2], spacing[2], sigma_k, acq.origin
                )
            )
    return slices


@dataclass
class SimulatedSeries:
    truth: Volume4D
    labels: NDArray[np.int16] = field(repr=False)
    mask: NDArray[np.bool_] = field(repr=False)
    slices: list[ScatteredSlice] = field(repr=False)
    trajectory: list[RigidTransform] = field(repr=False)
    psf: PsfParams

    @property
    def grid(self) -> Grid4D:
        return self.truth.grid


def simulate_series(
    phantom: PhantomSpec,
    trajectory: TrajectorySpec,
    noise_sigma: float = 0.0,
    interleave: int = 2,
    psf: PsfParams | None = None,
    fine_factor: int = 1,
    mask_dilation: int = 2,
    seed: int | None = None,
) -> SimulatedSeries:
    """Phantom -> trajectory -> slices in one call.

    ``fine_factor > 1`` evaluates the phantom on a spatially finer grid before
    sampling the slices; the returned truth always lives on ``phantom.grid``.
    """
    grid = phantom.grid
    psf = PsfParams.for_grid(grid) if psf is None else psf
    seed = phantom.seed if seed is None else seed
    truth, labels = generate_phantom(phantom)
    if fine_factor > 1:
        source, _ = generate_phantom(phantom, grid.refined(fine_factor))
    else:
        source = truth
    poses = generate_trajectory(trajectory, grid.dims[2] * grid.nt, center=grid.center)
    slices = simulate_acquisition(source, poses, psf, noise_sigma, interleave, seed, acquisition_grid=grid)
    mask = dilate_mask(labels > 0, mask_dilation)
    return SimulatedSeries(truth, labels, mask, slices, poses, psf)

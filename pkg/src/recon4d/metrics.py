"""Image-quality metrics for comparing reconstructions.

Sharpness is the variance-of-Laplacian focus measure scaled by the mask size,
i.e. ``sum_{v in mask} (lap(v) - mean_mask(lap))**2``, with the 7-point
stencil ``sum_a (f[i+1] - 2 f[i] + f[i-1]) / h_a**2`` and edge-replicated
borders. Temporal standard deviation uses population (1/N) normalisation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import InvalidParameterError
from .geometry import Volume3D, Volume4D

__all__ = [
    "EvaluationReport",
    "laplacian",
    "sharpness",
    "temporal_std",
    "rmse",
    "evaluate",
    "TABLE_COLUMNS",
]


def _mask(mask, shape) -> NDArray[np.bool_]:
    m = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise InvalidParameterError(f"mask shape {m.shape} does not match volume shape {tuple(shape)}")
    if not m.any():
        raise InvalidParameterError("mask is empty")
    return m


def laplacian(data: NDArray[np.float64], spacing: Sequence[float]) -> NDArray[np.float64]:
    out = np.zeros(data.shape)
    for axis, h in enumerate(spacing):
        if data.shape[axis] > 1:
            out += ndimage.correlate1d(data, [1.0, -2.0, 1.0], axis=axis, mode="nearest") / h**2
    return out


def sharpness(volume: Volume3D, mask: NDArray[np.bool_] | None = None) -> float:
    m = _mask(mask, volume.data.shape)
    lap = laplacian(volume.data, volume.spacing)[m]
    return float(np.sum((lap - lap.mean()) ** 2))


def temporal_std(series: Volume4D, mask: NDArray[np.bool_] | None = None) -> tuple[NDArray[np.float64], float]:
    """Per-voxel population std over time and its mean over the mask."""
    if series.grid.nt < 2:
        raise InvalidParameterError("temporal std needs at least two timepoints")
    std = series.data.std(axis=3)
    m = _mask(mask, std.shape)
    return std, float(std[m].mean())


def rmse(a: NDArray[np.float64], b: NDArray[np.float64], mask: NDArray[np.bool_] | None = None) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim < diff.ndim:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (diff.ndim - m.ndim)), diff.shape)
        diff = diff[m]
    return float(np.sqrt(np.mean(diff * diff)))


TABLE_COLUMNS = (
    "subject",
    "sharpness_raw", "sharpness_linear", "sharpness_ours",
    "std_raw", "std_linear", "std_ours",
    "rel_sharpness_linear", "rel_sharpness_ours",
    "rel_std_linear", "rel_std_ours",
    "rmse_linear", "rmse_ours",
)


@dataclass(frozen=True)
class EvaluationReport:
    sharpness_raw: float
    sharpness_linear: float
    sharpness_ours: float
    std_raw: float
    std_linear: float
    std_ours: float
    rmse_linear: float = math.nan
    rmse_ours: float = math.nan
    subject: str = ""

    @property
    def rel_sharpness_linear(self) -> float:
        return self.sharpness_linear / self.sharpness_raw

    @property
    def rel_sharpness_ours(self) -> float:
        return self.sharpness_ours / self.sharpness_raw

    @property
    def rel_std_linear(self) -> float:
        return self.std_linear / self.std_raw

    @property
    def rel_std_ours(self) -> float:
        return self.std_ours / self.std_raw

    def row(self) -> dict[str, object]:
        out = asdict(self)
        for name in ("rel_sharpness_linear", "rel_sharpness_ours", "rel_std_linear", "rel_std_ours"):
            out[name] = getattr(self, name)
        return {k: out[k] for k in TABLE_COLUMNS}


def evaluate(
    raw: Volume4D,
    linear: Volume4D,
    ours: Volume4D,
    mask: NDArray[np.bool_] | None = None,
    truth: Volume4D | None = None,
    subject: str = "",
) -> EvaluationReport:
    """Sharpness of the temporal-mean volume and mask-mean temporal std for
    raw, 3D-linear and 4D reconstructions (plus RMSE when the truth is known)."""
    vols = [raw, linear, ours] + ([truth] if truth is not None else [])
    for v in vols[1:]:
        if v.grid.dims != raw.grid.dims or not np.allclose(v.grid.spacing, raw.grid.spacing):
            raise InvalidParameterError("all volumes must share one grid")
    m = _mask(mask, raw.grid.shape3)
    sharp = [sharpness(v.mean_frame(), m) for v in (raw, linear, ours)]
    stds = [temporal_std(v, m)[1] for v in (raw, linear, ours)]
    errs = [math.nan, math.nan]
    if truth is not None:
        errs = [rmse(v.data, truth.data, m) for v in (linear, ours)]
    return EvaluationReport(*sharp, *stds, *errs, subject=subject)

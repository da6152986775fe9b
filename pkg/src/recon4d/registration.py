"""Rigid motion estimation: volume-to-volume and hierarchical slice-to-volume.

Similarity is normalised cross-correlation (NCC). Poses are searched with a
derivative-free compass (pattern) search over ``(rx, ry, rz)`` in degrees and
``(tx, ty, tz)`` in mm, halving the step from ``initial_step`` down to
``final_step`` across a coarse-to-fine pyramid.

Conventions: :func:`register_volume` returns ``T`` with ``moving(T(p)) ~
target(p)``. Slice poses map native slice positions to target space, as in
:class:`recon4d.forward.ScatteredSlice`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import InvalidParameterError, UndefinedMetricError
from .forward import ScatteredSlice, native_points
from .geometry import Grid4D, RigidTransform, Volume3D, Volume4D, compose, invert
from .psf import PsfParams

__all__ = [
    "RegistrationConfig",
    "VolumeRegistration",
    "SliceRegistration",
    "ncc",
    "find_quiescent_target",
    "resample",
    "register_volume",
    "register_slices_hierarchical",
    "register_series",
    "register_pipeline",
    "slice_mask_coverage",
    "stack_volume",
]

log = logging.getLogger(__name__)

# NCC gains below this are treated as flat: weakly constrained slices (e.g. near
# the poles of smooth anatomy) would otherwise wander along near-flat ridges
_MIN_GAIN = 1e-5


@dataclass(frozen=True)
class RegistrationConfig:
    pyramid_levels: int = 3
    max_eval: int = 800
    interleave_factor: int = 2
    quiescence_window: int = 5
    metric: str = "ncc"
    initial_step: float = 2.0
    final_step: float = 0.1
    min_coverage: float = 0.1
    min_score: float = 0.2

    def __post_init__(self) -> None:
        if self.pyramid_levels < 1:
            raise InvalidParameterError("pyramid_levels must be >= 1")
        if self.interleave_factor < 1:
            raise InvalidParameterError("interleave_factor must be >= 1")
        if self.quiescence_window < 1:
            raise InvalidParameterError("quiescence_window must be >= 1")
        if self.metric != "ncc":
            raise InvalidParameterError(f"unsupported metric {self.metric!r}")
        if not 0 < self.final_step <= self.initial_step:
            raise InvalidParameterError("need 0 < final_step <= initial_step")
        if self.max_eval < 1:
            raise InvalidParameterError("max_eval must be >= 1")

    def as_config(self) -> dict[str, object]:
        return {
            "registration.pyramid_levels": self.pyramid_levels,
            "registration.max_eval": self.max_eval,
            "registration.interleave_factor": self.interleave_factor,
            "registration.quiescence_window": self.quiescence_window,
            "registration.metric": self.metric,
            "registration.initial_step": self.initial_step,
            "registration.final_step": self.final_step,
            "registration.min_coverage": self.min_coverage,
            "registration.min_score": self.min_score,
        }

    def level_steps(self) -> list[tuple[float, float]]:
        """(start, stop) step sizes per pyramid level, coarsest first."""
        edges = np.geomspace(self.initial_step, self.final_step, self.pyramid_levels + 1)
        return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def ncc(a: NDArray, b: NDArray, mask: NDArray[np.bool_] | None = None) -> float:
    """Pearson correlation of the (masked) intensities of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        a, b = a[m], b[m]
    else:
        a, b = a.ravel(), b.ravel()
    if a.size < 2:
        raise UndefinedMetricError("NCC needs at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    na = math.sqrt(float(np.dot(da, da)))
    nb = math.sqrt(float(np.dot(db, db)))
    # relative threshold so round-off on a constant image does not count as variance
    if na <= 1e-12 * max(1.0, float(np.abs(a).max())) or nb <= 1e-12 * max(1.0, float(np.abs(b).max())):
        raise UndefinedMetricError("NCC undefined for zero-variance input")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def _safe_ncc(a, b, mask=None) -> float:
    try:
        return ncc(a, b, mask)
    except UndefinedMetricError:
        return -1.0


def find_quiescent_target(
    series: Volume4D, window: int, mask: NDArray[np.bool_] | None = None
) -> tuple[Volume3D, int]:
    """Average of the ``window`` consecutive volumes with the least frame-to-frame change.

    The change score of a window is the summed mean absolute difference
    between its successive volumes; ties go to the earliest window.
    """
    nt = series.grid.nt
    if not 1 <= window <= nt:
        raise InvalidParameterError(f"window must be in [1, {nt}], got {window}")
    data = series.data
    m = np.ones(series.grid.shape3, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    diffs = np.array([np.abs(data[..., t + 1] - data[..., t])[m].mean() for t in range(nt - 1)])
    best, start = math.inf, 0
    for s in range(nt - window + 1):
        score = float(diffs[s : s + window - 1].sum()) if window > 1 else 0.0
        if score < best:
            best, start = score, s
    target = data[..., start : start + window].mean(axis=3)
    return Volume3D(target, series.grid.spacing, series.grid.origin), start


def resample(
    volume: Volume3D, transform: RigidTransform, points: NDArray[np.float64], order: int = 1
) -> NDArray[np.float64]:
    """Values of ``volume`` at ``transform(points)``; zero outside the field of view."""
    q = transform.apply(points)
    idx = (q - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    coords = np.moveaxis(idx, -1, 0)
    return ndimage.map_coordinates(volume.data, coords, order=order, mode="constant", cval=0.0)


def _pattern_search(
    cost: Callable[[NDArray[np.float64]], float],
    start: NDArray[np.float64],
    step: float,
    stop: float,
    budget: int,
    best: float | None = None,
    min_gain: float = 0.0,
) -> tuple[NDArray[np.float64], float, int]:
    """Greedy compass search; returns (params, cost, evaluations used).

    A move is taken only if it lowers the cost by more than ``min_gain``.
    """
    p = np.array(start, dtype=float)
    evals = 0
    if best is None:
        best = cost(p)
        evals += 1
    while step >= stop * (1 - 1e-9) and evals < budget:
        improved = False
        for d in range(p.size):
            for sign in (1.0, -1.0):
                if evals >= budget:
                    break
                trial = p.copy()
                trial[d] += sign * step
                c = cost(trial)
                evals += 1
                if c < best - min_gain:
                    best, p, improved = c, trial, True
                    break
        if not improved:
            step *= 0.5
    return p, best, evals


def _delta(params: NDArray[np.float64], center) -> RigidTransform:
    return RigidTransform.from_params(params, center=center)


def _search(cost_at_level, levels: Sequence[tuple[float, float]], budget: int, min_gain: float = 0.0):
    """Run the pattern search level by level (coarsest first)."""
    p = np.zeros(6)
    used = 0
    n_levels = len(levels)
    for i, (step, stop) in enumerate(levels):
        cost = cost_at_level(n_levels - 1 - i)
        share = max(1, (budget - used) // (n_levels - i))
        p, _, evals = _pattern_search(cost, p, step, stop, share, min_gain=min_gain)
        used += evals
    return p, used


@dataclass
class VolumeRegistration:
    transform: RigidTransform
    score: float
    initial_score: float
    evaluations: int
    warning: bool = False
    message: str = ""


def _volume_points(shape, spacing, origin, stride: int) -> NDArray[np.float64]:
    axes = [o + s * np.arange(0, n, stride if n > 4 * stride else 1) for o, s, n in zip(origin, spacing, shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _mask_at(mask: NDArray[np.bool_], volume: Volume3D, points: NDArray[np.float64]) -> NDArray[np.bool_]:
    idx = np.rint((points - np.asarray(volume.origin)) / np.asarray(volume.spacing)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(mask.shape)), axis=-1)
    out = np.zeros(points.shape[:-1], dtype=bool)
    sel = idx[inside]
    out[inside] = mask[sel[:, 0], sel[:, 1], sel[:, 2]]
    return out


def register_volume(
    moving: Volume3D,
    target: Volume3D,
    config: RegistrationConfig = RegistrationConfig(),
    mask: NDArray[np.bool_] | None = None,
    center: Sequence[float] | None = None,
) -> VolumeRegistration:
    """Rigid pose maximising the symmetric NCC between ``moving`` and ``target``.

    The score averages NCC of the moving volume resampled into target space
    and of the target resampled into moving space, each over the voxels of
    ``mask``. The mask is expected to be dilated enough to cover the region
    of interest in both spaces.
    """
    center = target.center if center is None else tuple(center)
    m = np.ones(target.data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    cache: dict[int, tuple] = {}

    def level_data(level: int):
        if level not in cache:
            sigma = 0.0 if level == 0 else 0.5 * 2**level
            mov = Volume3D(ndimage.gaussian_filter(moving.data, sigma) if sigma else moving.data,
                           moving.spacing, moving.origin)
            tgt = Volume3D(ndimage.gaussian_filter(target.data, sigma) if sigma else target.data,
                           target.spacing, target.origin)
            stride = 2**level
            tpts = _volume_points(target.data.shape, target.spacing, target.origin, stride)
            tpts = tpts[_mask_at(m, target, tpts)]
            mpts = _volume_points(moving.data.shape, moving.spacing, moving.origin, stride)
            mpts = mpts[_mask_at(m, target, mpts)]
            tvals = resample(tgt, RigidTransform.identity(), tpts)
            mvals = resample(mov, RigidTransform.identity(), mpts)
            cache[level] = (mov, tgt, tpts, tvals, mpts, mvals)
        return cache[level]

    def score(params, level: int) -> float:
        mov, tgt, tpts, tvals, mpts, mvals = level_data(level)
        t = _delta(params, center)
        forward = _safe_ncc(resample(mov, t, tpts), tvals)
        backward = _safe_ncc(mvals, resample(tgt, invert(t), mpts))
        return 0.5 * (forward + backward)

    p, evals = _search(lambda level: (lambda q: -score(q, level)), config.level_steps(), config.max_eval)
    initial = score(np.zeros(6), 0)
    final = score(p, 0)
    result = VolumeRegistration(_delta(p, center), final, initial, evals + 2)
    if final <= initial:
        result.transform = RigidTransform.identity(center)
        result.score = initial
        result.warning = True
        result.message = "no improvement over identity"
    elif final < config.min_score:
        result.transform = RigidTransform.identity(center)
        result.score = initial
        result.warning = True
        result.message = f"similarity {final:.3f} below {config.min_score}; images may not share content"
    if result.warning:
        log.warning("register_volume: %s", result.message)
    return result


def stack_volume(slices: Sequence[ScatteredSlice], grid: Grid4D, volume_index: int) -> Volume3D:
    """Slices of one volume written to their nominal positions (motion ignored)."""
    data = np.zeros(grid.shape3)
    for s in slices:
        if s.volume_index == volume_index:
            data[: s.data.shape[0], : s.data.shape[1], s.slice_index] = s.data
    return Volume3D(data, grid.spacing, grid.origin)


class _SliceSampler:
    """Cached native geometry for scoring slices against a fixed target."""

    def __init__(self, target: Volume3D, mask: NDArray[np.bool_], psf: PsfParams, center):
        self.target = target
        self.mask = mask
        self.psf = psf
        self.center = tuple(center)
        # the kernel blur is applied once; slices then read the blurred target trilinearly.
        # Normalised convolution matches the forward model's renormalisation at the grid edge.
        sigma = [sg / sp for sg, sp in zip(psf.sigmas[:3], target.spacing)]
        blur = lambda a: ndimage.gaussian_filter(a, sigma, mode="constant", truncate=psf.truncation_radius)  # noqa: E731
        self.blurred = blur(target.data) / np.maximum(blur(np.ones(target.data.shape)), 1e-12)
        self._origin = np.asarray(target.origin, dtype=float)
        self._spacing = np.asarray(target.spacing, dtype=float)
        self._native: dict[tuple[int, int], tuple[NDArray, NDArray]] = {}

    def native(self, s: ScatteredSlice, key: int, stride: int):
        k = (key, stride)
        if k not in self._native:
            pts = native_points(s.data.shape, s.slice_index, s.in_plane_spacing, s.slice_thickness, s.origin)
            nu, nv = s.data.shape
            u, v = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
            keep = ((u % stride == 0) & (v % stride == 0)).ravel()
            self._native[k] = (np.ascontiguousarray(pts[keep]), s.data.ravel()[keep])
        return self._native[k]

    def samples(self, s: ScatteredSlice, key: int, pose: RigidTransform, stride: int):
        """(predicted, observed) over samples that land inside the mask."""
        pts0, obs = self.native(s, key, stride)
        rot = pose.matrix.T / self._spacing
        idx = pts0 @ rot + (pose.offset - self._origin) / self._spacing
        near = np.rint(idx).astype(np.int64)
        inside = np.all((near >= 0) & (near < np.asarray(self.mask.shape)), axis=1)
        keep = np.zeros(len(idx), dtype=bool)
        sel = near[inside]
        keep[inside] = self.mask[sel[:, 0], sel[:, 1], sel[:, 2]]
        pred = ndimage.map_coordinates(self.blurred, idx[keep].T, order=1, mode="nearest")
        return pred, obs[keep]

    def score(self, group, poses, stride: int) -> float:
        preds, obs = [], []
        for key, s in group:
            p, o = self.samples(s, key, poses[key], stride)
            preds.append(p)
            obs.append(o)
        return _safe_ncc(np.concatenate(preds), np.concatenate(obs))


def _fit_group(
    sampler: _SliceSampler,
    group: list[tuple[int, ScatteredSlice]],
    base: dict[int, RigidTransform],
    config: RegistrationConfig,
    budget: int,
) -> tuple[dict[int, RigidTransform], float, float]:
    """Common rigid correction ``delta`` for all slices in ``group`` (new pose = delta o base)."""
    center = sampler.center

    def poses_for(params):
        d = _delta(params, center)
        return {key: compose(d, base[key]) for key, _ in group}

    def cost_at_level(level: int):
        stride = 2**level
        return lambda q: -sampler.score(group, poses_for(q), stride)

    p, _ = _search(cost_at_level, config.level_steps(), budget, _MIN_GAIN)
    initial = sampler.score(group, base, 1)
    final = sampler.score(group, poses_for(p), 1)
    if final > initial + _MIN_GAIN:
        return poses_for(p), final, initial
    return {key: base[key] for key, _ in group}, initial, initial


@dataclass
class SliceRegistration:
    poses: list[RigidTransform]
    scores: NDArray[np.float64]
    initial_scores: NDArray[np.float64]
    coverage: NDArray[np.float64]
    flagged: NDArray[np.bool_]


def slice_mask_coverage(
    slices: Sequence[ScatteredSlice],
    poses: Sequence[RigidTransform],
    mask: NDArray[np.bool_],
    target: Volume3D,
) -> NDArray[np.float64]:
    """In-mask pixel count per slice relative to the best-covered slice."""
    counts = np.empty(len(slices))
    for n, (s, pose) in enumerate(zip(slices, poses)):
        pts = native_points(s.data.shape, s.slice_index, s.in_plane_spacing, s.slice_thickness, s.origin)
        counts[n] = _mask_at(mask, target, pose.apply(pts)).sum()
    peak = counts.max() if counts.size else 0.0
    return counts / peak if peak > 0 else np.zeros_like(counts)


def register_slices_hierarchical(
    slices: Sequence[ScatteredSlice],
    target: Volume3D,
    config: RegistrationConfig = RegistrationConfig(),
    mask: NDArray[np.bool_] | None = None,
    psf: PsfParams | None = None,
) -> SliceRegistration:
    """Refine slice poses against ``target``: per-packet, then per-slice.

    Starting poses are taken from ``slices``. A packet is the set of slices
    of one volume acquired in the same interleave pass; the packet stage is
    skipped without interleaving. Slices whose in-mask coverage is below
    ``min_coverage`` of the best-covered slice keep their packet pose and are
    flagged, as are slices whose similarity cannot be evaluated. A returned
    pose never scores below its starting pose.
    """
    m = np.ones(target.data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != target.data.shape:
        raise InvalidParameterError(f"mask shape {m.shape} does not match target {target.data.shape}")
    if psf is None:
        grid = Grid4D((*target.data.shape, 1), target.spacing, 1.0, target.origin)
        psf = PsfParams.for_grid(grid)
    sampler = _SliceSampler(target, m, psf, target.center)
    n = len(slices)
    indexed = list(enumerate(slices))
    start = {k: s.pose for k, s in indexed}
    initial_scores = np.array([sampler.score([(k, s)], start, 1) for k, s in indexed])

    packet_pose = dict(start)
    if config.interleave_factor > 1:
        groups: dict[tuple[int, int], list] = {}
        for k, s in indexed:
            groups.setdefault((s.volume_index, s.slice_index % config.interleave_factor), []).append((k, s))
        for key in sorted(groups):
            fitted, _, _ = _fit_group(sampler, groups[key], start, config, config.max_eval)
            packet_pose.update(fitted)

    coverage = slice_mask_coverage(slices, [packet_pose[k] for k in range(n)], m, target)
    poses: list[RigidTransform] = []
    scores = np.empty(n)
    flagged = np.zeros(n, dtype=bool)
    for k, s in indexed:
        base = packet_pose[k]
        base_score = sampler.score([(k, s)], packet_pose, 1)
        if coverage[k] < config.min_coverage or base_score <= -1.0:
            flagged[k] = True
            pose, score = base, base_score
        else:
            fitted, score, _ = _fit_group(sampler, [(k, s)], packet_pose, config, config.max_eval)
            pose = fitted[k]
        if score < initial_scores[k]:
            pose, score = start[k], initial_scores[k]
        poses.append(pose)
        scores[k] = score
    if flagged.any():
        log.info("register_slices_hierarchical: %d of %d slices kept their packet pose", int(flagged.sum()), n)
    return SliceRegistration(poses, scores, initial_scores, coverage, flagged)


def register_series(
    slices: Sequence[ScatteredSlice],
    grid: Grid4D,
    target: Volume3D,
    config: RegistrationConfig = RegistrationConfig(),
    mask: NDArray[np.bool_] | None = None,
    psf: PsfParams | None = None,
) -> tuple[list[ScatteredSlice], SliceRegistration, list[VolumeRegistration]]:
    """Volume-level initialisation followed by hierarchical slice refinement.

    Each volume's nominally stacked slices are registered to ``target``; the
    inverse of that transform initialises its slice poses.
    """
    center = target.center
    by_volume: dict[int, VolumeRegistration] = {}
    for v in sorted({s.volume_index for s in slices}):
        moving = stack_volume(slices, grid, v)
        by_volume[v] = register_volume(moving, target, config, mask, center)
    init = [s.with_pose(invert(by_volume[s.volume_index].transform)) for s in slices]
    result = register_slices_hierarchical(init, target, config, mask, psf)
    corrected = [s.with_pose(p) for s, p in zip(slices, result.poses)]
    return corrected, result, [by_volume[v] for v in sorted(by_volume)]


def register_pipeline(
    slices: Sequence[ScatteredSlice],
    grid: Grid4D,
    config: RegistrationConfig = RegistrationConfig(),
    mask: NDArray[np.bool_] | None = None,
    psf: PsfParams | None = None,
    passes: int = 1,
) -> tuple[list[ScatteredSlice], SliceRegistration, Volume3D, int]:
    """Motion estimation from slices alone.

    The first target is the quiescent-window average of the nominally stacked
    volumes. Every further pass rebuilds the target from the motion-corrected
    slices of that window (3D linear interpolation) and refines the poses
    against it. Returns (corrected slices, last slice result, target, window start).
    """
    from .baseline import interpolate_3d_baseline, raw_series

    if passes < 1:
        raise InvalidParameterError("passes must be >= 1")
    window = min(config.quiescence_window, grid.nt)
    target, start = find_quiescent_target(raw_series(slices, grid), window, mask)
    corrected, result, _ = register_series(slices, grid, target, config, mask, psf)
    for _ in range(passes - 1):
        chosen = [s for s in corrected if start <= s.volume_index < start + window]
        rebuilt = interpolate_3d_baseline(chosen, grid).volume
        target = Volume3D(rebuilt.data[..., start : start + window].mean(axis=3), grid.spacing, grid.origin)
        result = register_slices_hierarchical(corrected, target, config, mask, psf)
        corrected = [s.with_pose(p) for s, p in zip(corrected, result.poses)]
    return corrected, result, target, start

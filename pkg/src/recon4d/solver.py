"""MAP reconstruction of a 4D volume from motion-scattered slices.

Minimises

    sum_k 1/sigma_k**2 * ||F_k x - s_k||**2  +  alpha/2 * ||L x||**2

where ``F_k`` is the normalised slice operator of :mod:`recon4d.forward` and
``L`` stacks first forward differences along x, y, z and scaled time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import InvalidParameterError, NoValidSlicesError
from .forward import ScatteredSlice, SliceModel, StackedOperator, build_slice_models
from .geometry import Grid4D, Volume4D
from .psf import PsfParams

__all__ = [
    "ReconConfig",
    "ReconReport",
    "difference_spacing",
    "regularizer",
    "regularizer_normal",
    "objective",
    "objective_gradient",
    "initial_estimate",
    "reconstruct",
]

log = logging.getLogger(__name__)

SolverKind = Literal["conjugate-gradient", "iterative-backprojection"]
InitKind = Literal["normalized-scatter", "zeros"]


@dataclass(frozen=True)
class ReconConfig:
    alpha: float = 0.01
    max_iters: int = 30
    tol: float = 1e-6
    solver_kind: SolverKind = "conjugate-gradient"
    step_size: float = 0.25
    init_kind: InitKind = "normalized-scatter"
    precondition: bool = True

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise InvalidParameterError(f"alpha must be >= 0, got {self.alpha}")
        if not self.tol > 0:
            raise InvalidParameterError(f"tol must be > 0, got {self.tol}")
        if int(self.max_iters) < 1:
            raise InvalidParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size > 0:
            raise InvalidParameterError(f"step_size must be > 0, got {self.step_size}")
        if self.solver_kind not in ("conjugate-gradient", "iterative-backprojection"):
            raise InvalidParameterError(f"unknown solver kind {self.solver_kind!r}")
        if self.init_kind not in ("normalized-scatter", "zeros"):
            raise InvalidParameterError(f"unknown init kind {self.init_kind!r}")

    def as_config(self) -> dict[str, object]:
        return {
            "solver.alpha": self.alpha,
            "solver.max_iters": self.max_iters,
            "solver.tol": self.tol,
            "solver.kind": self.solver_kind,
            "solver.step_size": self.step_size,
            "solver.init": self.init_kind,
            "solver.precondition": self.precondition,
        }


@dataclass
class ReconReport:
    """Per-iteration trace; entry 0 is the initial estimate."""

    data_terms: list[float] = field(default_factory=list)
    reg_terms: list[float] = field(default_factory=list)
    totals: list[float] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    message: str = ""
    # relative objective change that ended the run (0 when CG found the exact minimiser)
    last_change: float = math.nan

    @property
    def iterations(self) -> int:
        return max(0, len(self.totals) - 1)

    @property
    def final_objective(self) -> float:
        return self.totals[-1] if self.totals else math.nan

    def record(self, data: float, reg: float, alpha: float, residual_norm: float = math.nan) -> None:
        self.data_terms.append(float(data))
        self.reg_terms.append(float(reg))
        self.totals.append(float(data + 0.5 * alpha * reg))
        self.residual_norms.append(float(residual_norm))

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(i, d, r, t) for i, (d, r, t) in enumerate(zip(self.data_terms, self.reg_terms, self.totals))]


def difference_spacing(grid: Grid4D, psf: PsfParams | None) -> tuple[float, float, float, float]:
    """Step lengths of the four difference axes; time is scaled to mm-equivalents."""
    scale = psf.time_scale if psf is not None else grid.spacing[2] / grid.tr
    return (*grid.spacing, grid.tr * scale)


def regularizer(x: NDArray[np.float64], spacing: Sequence[float]) -> float:
    """Squared norm of spacing-weighted forward differences on all axes."""
    total = 0.0
    for axis, h in enumerate(spacing):
        if x.shape[axis] > 1:
            total += float(np.sum(np.diff(x, axis=axis) ** 2)) / h**2
    return total


def regularizer_normal(x: NDArray[np.float64], spacing: Sequence[float]) -> NDArray[np.float64]:
    """``L^T L x`` with one-sided differences at the boundaries."""
    out = np.zeros_like(x)
    for axis, h in enumerate(spacing):
        n = x.shape[axis]
        if n < 2:
            continue
        d = np.diff(x, axis=axis) / h**2
        lead = [slice(None)] * x.ndim
        trail = [slice(None)] * x.ndim
        lead[axis] = slice(0, n - 1)
        trail[axis] = slice(1, n)
        out[tuple(lead)] -= d
        out[tuple(trail)] += d
    return out


def _regularizer_diagonal(shape: Sequence[int], spacing: Sequence[float]) -> NDArray[np.float64]:
    diag = np.zeros(shape)
    for axis, (n, h) in enumerate(zip(shape, spacing)):
        if n < 2:
            continue
        count = np.full(n, 2.0)
        count[0] = count[-1] = 1.0
        view = [1] * len(shape)
        view[axis] = n
        diag = diag + count.reshape(view) / h**2
    return diag


def _operator(slices, models, grid, n_chunks=None) -> StackedOperator:
    psf = models[0].psf if models else PsfParams.for_grid(grid)
    return StackedOperator(slices, grid, psf, models=models, n_chunks=n_chunks)


def _data_term(op: StackedOperator, fx: NDArray[np.float64]) -> float:
    r = np.where(op.valid, fx - op.observed, 0.0)
    return float(np.sum(op.weights * r * r))


def objective(
    x: Volume4D, slices: Sequence[ScatteredSlice], models: Sequence[SliceModel], alpha: float
) -> tuple[float, float, float]:
    """Return ``(total, data_term, reg_term)``."""
    op = _operator(slices, models, x.grid)
    data = _data_term(op, op.apply(x.data))
    reg = regularizer(x.data, difference_spacing(x.grid, op.psf))
    return data + 0.5 * alpha * reg, data, reg


def objective_gradient(
    x: Volume4D, slices: Sequence[ScatteredSlice], models: Sequence[SliceModel], alpha: float
) -> Volume4D:
    op = _operator(slices, models, x.grid)
    return Volume4D(x.grid, _gradient(op, x.data, alpha))


def _gradient(op: StackedOperator, x: NDArray[np.float64], alpha: float) -> NDArray[np.float64]:
    r = op.weights * (op.apply(x) - op.observed)
    g = 2.0 * op.adjoint(r)
    if alpha > 0:
        g += alpha * regularizer_normal(x, difference_spacing(op.grid, op.psf))
    return g


def _nearest_fill(values: NDArray[np.float64], known: NDArray[np.bool_], sampling) -> NDArray[np.float64]:
    if known.all() or not known.any():
        return values
    idx = ndimage.distance_transform_edt(~known, sampling=sampling, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def _scatter_estimate(op: StackedOperator, eps: float = 1e-12) -> NDArray[np.float64]:
    valid = op.valid.astype(float)
    num = op.raw_scatter(op.observed * valid)
    den = op.raw_scatter(valid)
    covered = den > eps
    x = np.where(covered, num / np.where(covered, den, 1.0), 0.0)
    return _nearest_fill(x, covered, difference_spacing(op.grid, op.psf))


def initial_estimate(
    slices: Sequence[ScatteredSlice],
    models: Sequence[SliceModel],
    grid: Grid4D,
    kind: InitKind = "normalized-scatter",
) -> Volume4D:
    """Kernel-weighted average of the samples per voxel, or zeros."""
    if kind == "zeros" or not slices:
        return Volume4D.zeros(grid)
    if kind != "normalized-scatter":
        raise InvalidParameterError(f"unknown init kind {kind!r}")
    return Volume4D(grid, _scatter_estimate(_operator(slices, models, grid)))


def reconstruct(
    slices: Sequence[ScatteredSlice],
    grid: Grid4D,
    psf: PsfParams,
    config: ReconConfig = ReconConfig(),
    models: Sequence[SliceModel] | None = None,
    n_chunks: int | None = None,
) -> tuple[Volume4D, ReconReport]:
    if not slices:
        raise NoValidSlicesError("no slices supplied")
    op = StackedOperator(slices, grid, psf, models=models, n_chunks=n_chunks)
    if not op.valid.any():
        raise NoValidSlicesError("no slice sample falls inside the reconstruction grid")
    if config.init_kind == "zeros":
        x0 = np.zeros(grid.dims)
    else:
        x0 = _scatter_estimate(op)
    if config.solver_kind == "conjugate-gradient":
        x, report = _conjugate_gradient(op, x0, config)
    else:
        x, report = _iterative_backprojection(op, x0, config)
    return Volume4D(grid, x), report


def _relative_change(prev: float, cur: float) -> float:
    if prev == cur:
        return 0.0
    return abs(prev - cur) / max(abs(prev), np.finfo(float).tiny)


def _conjugate_gradient(op: StackedOperator, x0: NDArray[np.float64], config: ReconConfig):
    """Preconditioned CG on ``(F^T W F + alpha/2 L^T L) x = F^T W s``.

    The objective equals ``x^T A x - 2 b^T x + const``; CG decreases it
    monotonically in exact arithmetic. An iterate that would increase it
    through round-off is rejected and the run stops.
    """
    alpha = config.alpha
    spacing = difference_spacing(op.grid, op.psf)
    half_alpha = 0.5 * alpha

    def normal(v, fv):
        out = op.adjoint(op.weights * fv)
        if alpha > 0:
            out += half_alpha * regularizer_normal(v, spacing)
        return out

    if config.precondition:
        diag = op.normal_diagonal()
        if alpha > 0:
            diag = diag + half_alpha * _regularizer_diagonal(op.grid.dims, spacing)
        inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    else:
        inv_diag = None

    x = x0.copy()
    fx = op.apply(x)
    b = op.adjoint(op.weights * np.where(op.valid, op.observed, 0.0))
    r = b - normal(x, fx)
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = float(np.vdot(r, z))

    report = ReconReport()
    data = _data_term(op, fx)
    reg = regularizer(x, spacing)
    report.record(data, reg, alpha, float(np.linalg.norm(r)))

    for it in range(1, int(config.max_iters) + 1):
        fp = op.apply(p)
        ap = normal(p, fp)
        pap = float(np.vdot(p, ap))
        if not pap > 0 or rz == 0:
            report.converged = True
            report.last_change = 0.0
            report.message = f"exact solution reached after {it - 1} iterations"
            break
        step = rz / pap
        x_new = x + step * p
        fx_new = fx + step * fp
        data = _data_term(op, fx_new)
        reg = regularizer(x_new, spacing)
        total = data + half_alpha * reg
        prev = report.totals[-1]
        change = _relative_change(prev, total)
        report.last_change = change
        if total > prev:
            report.converged = change < config.tol
            report.message = f"stopped at iteration {it}: objective would increase by {total - prev:.3e}"
            break
        x, fx = x_new, fx_new
        r = r - step * ap
        report.record(data, reg, alpha, float(np.linalg.norm(r)))
        if change < config.tol:
            report.converged = True
            report.message = f"converged after {it} iterations"
            break
        z = r * inv_diag if inv_diag is not None else r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        report.message = f"reached max_iters={config.max_iters}"
    log.info("cg: %s, objective %.6g", report.message, report.final_objective)
    return x, report


def _iterative_backprojection(op: StackedOperator, x0: NDArray[np.float64], config: ReconConfig):
    """Gradient descent ``x <- x - step * grad``: residuals are backprojected and
    combined with the regulariser gradient at every iteration."""
    alpha = config.alpha
    spacing = difference_spacing(op.grid, op.psf)
    x = x0.copy()
    report = ReconReport()
    fx = op.apply(x)
    report.record(_data_term(op, fx), regularizer(x, spacing), alpha)
    rises = 0
    for it in range(1, int(config.max_iters) + 1):
        residual = op.weights * np.where(op.valid, fx - op.observed, 0.0)
        grad = 2.0 * op.adjoint(residual)
        if alpha > 0:
            grad += alpha * regularizer_normal(x, spacing)
        x = x - config.step_size * grad
        fx = op.apply(x)
        prev = report.totals[-1]
        report.record(_data_term(op, fx), regularizer(x, spacing), alpha, float(np.linalg.norm(grad)))
        cur = report.totals[-1]
        report.last_change = _relative_change(prev, cur)
        if not math.isfinite(cur):
            report.diverged = True
            report.message = f"objective became non-finite at iteration {it}"
            break
        rises = rises + 1 if cur > prev else 0
        if rises >= 3:
            report.diverged = True
            report.message = f"diverged: objective increased 3 consecutive times (iteration {it}); reduce step_size"
            break
        if cur <= prev and report.last_change < config.tol:
            report.converged = True
            report.message = f"converged after {it} iterations"
            break
    else:
        report.message = f"reached max_iters={config.max_iters}"
    if report.diverged:
        log.warning("iterative backprojection: %s", report.message)
        if not np.all(np.isfinite(x)):
            x = x0.copy()
    return x, report

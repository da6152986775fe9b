import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recon4d.errors import InvalidParameterError
from recon4d.geometry import Grid4D
from recon4d.psf import FWHM_TO_SIGMA, PsfParams, axis_weight, kernel_footprint, psf_weight, time_scale_factor

PSF = PsfParams(1.2, 0.9, 1.5, 2.0, 1.5, truncation_radius=3.0)
offsets = st.floats(-12.0, 12.0)


def test_time_scale_factor():
    assert time_scale_factor(3.0, 3.0) == 1.0
    assert time_scale_factor(3.0, 2.0) == 1.5
    for bad in [(0.0, 2.0), (3.0, 0.0), (-1.0, 2.0)]:
        with pytest.raises(InvalidParameterError):
            time_scale_factor(*bad)


def test_weight_peak_and_one_sigma():
    assert psf_weight(PSF, 0, 0, 0, 0) == 1.0
    assert psf_weight(PSF, PSF.sigma_x, 0, 0, 0) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_weight_cut_off_beyond_radius():
    eps = 1e-9
    assert psf_weight(PSF, (PSF.truncation_radius + eps) * PSF.sigma_x, 0, 0, 0) == 0.0
    # time offsets are scaled before the comparison
    dt = (PSF.truncation_radius + eps) * PSF.sigma_t / PSF.time_scale
    assert psf_weight(PSF, 0, 0, 0, dt) == 0.0
    assert psf_weight(PSF, 0, 0, 0, 0.999 * dt) > 0.0


def test_temporal_offset_is_scaled():
    dt = 1.0
    expected = math.exp(-((dt * PSF.time_scale) ** 2) / (2 * PSF.sigma_t**2))
    assert psf_weight(PSF, 0, 0, 0, dt) == pytest.approx(expected, abs=1e-15)


def test_defaults_follow_acquisition_geometry():
    p = PsfParams.default((1.74, 1.74), 3.0, 2.0)
    assert p.sigma_x == pytest.approx(1.74 / 2.3548200450309493, rel=1e-12)
    assert p.sigma_z == pytest.approx(3.0 * FWHM_TO_SIGMA)
    assert p.time_scale == 1.5
    assert p.sigma_t == pytest.approx(3.0)  # one TR in scaled units
    assert p.truncation_radius == 3.0


@pytest.mark.parametrize(
    "changes",
    [dict(sigma_x=0.0), dict(sigma_t=-1.0), dict(time_scale=0.0), dict(truncation_radius=0.5)],
)
def test_params_validation(changes):
    with pytest.raises(InvalidParameterError):
        PSF.replace(**changes)


@given(offsets, offsets, offsets, offsets)
def test_separable(dx, dy, dz, dt):
    r = PSF.truncation_radius
    parts = (
        axis_weight(dx, PSF.sigma_x, r)
        * axis_weight(dy, PSF.sigma_y, r)
        * axis_weight(dz, PSF.sigma_z, r)
        * axis_weight(dt * PSF.time_scale, PSF.sigma_t, r)
    )
    assert abs(psf_weight(PSF, dx, dy, dz, dt) - parts) < 1e-12


@given(offsets, offsets, offsets, offsets)
def test_symmetric_and_bounded_by_peak(dx, dy, dz, dt):
    w = psf_weight(PSF, dx, dy, dz, dt)
    assert w == psf_weight(PSF, -dx, -dy, -dz, -dt)
    assert 0.0 <= w <= psf_weight(PSF, 0, 0, 0, 0)


@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 3))
def test_monotone_decay_along_each_axis(a, b, axis):
    lo, hi = sorted((a, b))
    d_lo = [0.0] * 4
    d_hi = [0.0] * 4
    d_lo[axis], d_hi[axis] = lo, hi
    assert psf_weight(PSF, *d_hi) <= psf_weight(PSF, *d_lo)


def test_footprint_single_voxel():
    grid = Grid4D((5, 5, 5, 3), (2.0, 2.0, 3.0), 2.0)
    p = PsfParams(0.4, 0.4, 0.6, 0.5, 1.5, truncation_radius=1.0)
    fp = kernel_footprint(p, grid, (4.0, 6.0, 9.0), 2.0)
    assert fp == [((2, 3, 3, 1), 1.0)]


def test_footprint_midway_is_symmetric():
    grid = Grid4D((6, 5, 5, 3), (2.0, 2.0, 3.0), 2.0)
    p = PsfParams(1.0, 0.4, 0.6, 0.5, 1.5, truncation_radius=1.0)
    fp = dict(kernel_footprint(p, grid, (5.0, 4.0, 6.0), 2.0))
    assert set(fp) == {(2, 2, 2, 1), (3, 2, 2, 1)}
    assert abs(fp[(2, 2, 2, 1)] - fp[(3, 2, 2, 1)]) < 1e-12


def test_footprint_matches_brute_force():
    grid = Grid4D((14, 12, 10, 6), (1.74, 1.74, 3.0), 2.0, origin=(-3.0, 1.0, 0.5))
    p = PsfParams.for_grid(grid)
    point = np.array([7.3, 9.1, 13.2])
    time = 4.7
    fp = kernel_footprint(p, grid, point, time)
    world = grid.world_points()
    total = 0.0
    for l in range(grid.nt):
        d = world - point
        total += psf_weight(p, d[..., 0], d[..., 1], d[..., 2], l * grid.tr - time).sum()
    assert sum(w for _, w in fp) == pytest.approx(total, rel=1e-12)
    assert all(w > 0 for _, w in fp)


def test_footprint_empty_far_outside_grid():
    grid = Grid4D((5, 5, 5, 3), (2.0, 2.0, 3.0), 2.0)
    assert kernel_footprint(PsfParams.for_grid(grid), grid, (500.0, 0.0, 0.0), 0.0) == []


def test_wide_temporal_kernel_is_time_uniform():
    grid = Grid4D((5, 5, 5, 4), (2.0, 2.0, 3.0), 2.0)
    p = PsfParams.for_grid(grid).replace(sigma_t=1e6)
    fp = kernel_footprint(p, grid, (4.0, 4.0, 6.0), 3.0)
    by_space: dict = {}
    for (i, j, k, l), w in fp:
        by_space.setdefault((i, j, k), []).append(w)
    for ws in by_space.values():
        assert len(ws) == grid.nt
        assert max(ws) - min(ws) < 1e-6 * max(ws)

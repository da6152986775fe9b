import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from recon4d.errors import InvalidParameterError
from recon4d.masks import dilate_mask


def test_radius_zero_is_identity():
    m = np.zeros((5, 5, 5), bool)
    m[1, 2, 3] = True
    out = dilate_mask(m, 0)
    assert np.array_equal(out, m)
    assert out is not m


def test_single_voxel_radius_one_is_a_cross():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    out = dilate_mask(m, 1)
    assert out.sum() == 7
    for d in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
        assert out[2 + d[0], 2 + d[1], 2 + d[2]] and out[2 - d[0], 2 - d[1], 2 - d[2]]


def test_radius_two_is_city_block_ball():
    m = np.zeros((7, 7, 7), bool)
    m[3, 3, 3] = True
    out = dilate_mask(m, 2)
    i, j, k = np.indices(m.shape)
    assert np.array_equal(out, np.abs(i - 3) + np.abs(j - 3) + np.abs(k - 3) <= 2)


def test_negative_radius_rejected():
    with pytest.raises(InvalidParameterError):
        dilate_mask(np.ones((2, 2, 2)), -1)


@given(arrays(bool, (6, 5, 4)), st.integers(0, 3))
def test_dilation_is_monotone(m, r):
    out = dilate_mask(m, r)
    assert np.all(out[m])
    assert np.all(dilate_mask(out, 1)[out])

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import InvalidParameterError


def dilate_mask(mask: NDArray, radius_voxels: int) -> NDArray[np.bool_]:
    """Binary dilation with a city-block ball of the given radius (in voxels)."""
    if radius_voxels < 0:
        raise InvalidParameterError(f"dilation radius must be >= 0, got {radius_voxels}")
    mask = np.asarray(mask, dtype=bool)
    if radius_voxels == 0:
        return mask.copy()
    cross = ndimage.generate_binary_structure(mask.ndim, 1)
    return ndimage.binary_dilation(mask, structure=cross, iterations=int(radius_voxels))

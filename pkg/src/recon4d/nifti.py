"""Minimal single-file NIfTI-1 (``.nii``) reader and writer.

Little-endian only; float32 and int16 payloads; up to four dimensions.
Spacing is stored in ``pixdim[1:4]`` (mm), TR in ``pixdim[4]`` (s) and the
grid origin in ``qoffset_*`` / the sform translation column.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import NiftiError
from .geometry import Grid4D, Volume4D

__all__ = ["HEADER_DTYPE", "read_nifti", "read_nifti_array", "write_nifti", "write_nifti_array"]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy dtype, bitpix)
DATATYPES = {16: (np.dtype("<f4"), 32), 4: (np.dtype("<i2"), 16)}
_CODES = {np.dtype("float32"): 16, np.dtype("int16"): 4}

UNITS_MM_SEC = 2 | 8


def _field_offset(name: str) -> int:
    return HEADER_DTYPE.fields[name][1]


def _parse_header(raw: bytes) -> np.void:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", offset=len(raw))
    size_le = int.from_bytes(raw[:4], "little")
    if size_le != HEADER_SIZE:
        if int.from_bytes(raw[:4], "big") == HEADER_SIZE:
            raise NiftiError("big-endian NIfTI files are not supported", offset=0)
        raise NiftiError(f"sizeof_hdr is {size_le}, expected {HEADER_SIZE}", offset=0)
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE, count=1)[0]
    magic = raw[_field_offset("magic"):HEADER_SIZE]
    if magic != MAGIC:
        raise NiftiError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=_field_offset("magic"))
    return hdr


def read_nifti_array(path: str | os.PathLike) -> tuple[np.ndarray, np.void]:
    """Scaled data array (x fastest on disk, returned as ``[x, y, z, t]``) and raw header."""
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw)
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 4:
        raise NiftiError(f"unsupported dimensionality {ndim}", offset=_field_offset("dim"))
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise NiftiError(f"invalid dims {shape}", offset=_field_offset("dim"))
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}", offset=_field_offset("datatype"))
    dtype, bitpix = DATATYPES[code]
    if int(hdr["bitpix"]) != bitpix:
        raise NiftiError(f"bitpix {int(hdr['bitpix'])} does not match datatype {code}", offset=_field_offset("bitpix"))
    start = int(hdr["vox_offset"])
    if start < HEADER_SIZE:
        raise NiftiError(f"vox_offset {start} lies inside the header", offset=_field_offset("vox_offset"))
    count = int(np.prod(shape))
    end = start + count * dtype.itemsize
    if len(raw) < end:
        raise NiftiError(f"truncated payload: expected {end - start} bytes, found {max(0, len(raw) - start)}",
                         offset=len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data.astype(np.float64) * slope + inter
    return data, hdr


def read_nifti(path: str | os.PathLike) -> Volume4D:
    data, hdr = read_nifti_array(path)
    while data.ndim < 4:
        data = data[..., None]
    pixdim = hdr["pixdim"]
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    tr = float(pixdim[4]) if pixdim[4] > 0 else 1.0
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    return Volume4D(Grid4D(data.shape, spacing, tr, origin), data)


def _header(shape, dtype, spacing, tr, origin, slope=1.0, inter=0.0, descrip=b"") -> np.ndarray:
    hdr = np.zeros(1, dtype=HEADER_DTYPE)
    h = hdr[0]
    h["sizeof_hdr"] = HEADER_SIZE
    h["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(shape)
    dim[1 : len(shape) + 1] = shape
    h["dim"] = dim
    h["datatype"] = _CODES[np.dtype(dtype)]
    h["bitpix"] = DATATYPES[_CODES[np.dtype(dtype)]][1]
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = spacing
    pixdim[4] = tr
    pixdim[5:] = 1.0
    h["pixdim"] = pixdim
    h["vox_offset"] = VOX_OFFSET
    h["scl_slope"] = slope
    h["scl_inter"] = inter
    h["xyzt_units"] = UNITS_MM_SEC
    h["descrip"] = descrip[:80]
    h["qform_code"] = 1
    h["sform_code"] = 1
    h["qoffset_x"], h["qoffset_y"], h["qoffset_z"] = origin
    h["srow_x"] = (spacing[0], 0, 0, origin[0])
    h["srow_y"] = (0, spacing[1], 0, origin[1])
    h["srow_z"] = (0, 0, spacing[2], origin[2])
    h["magic"] = MAGIC
    return hdr


def write_nifti_array(
    path: str | os.PathLike,
    data: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    tr: float = 1.0,
    origin=(0.0, 0.0, 0.0),
    dtype="float32",
    slope: float = 1.0,
    inter: float = 0.0,
) -> None:
    """Write ``data`` (``[x, y, z(, t)]``) cast to ``dtype``; int16 data are stored raw
    with the given ``slope`` / ``inter`` scaling in the header."""
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise NiftiError(f"unsupported output dtype {dtype}")
    arr = np.asarray(data)
    if not 1 <= arr.ndim <= 4:
        raise NiftiError(f"cannot write {arr.ndim}-dimensional data")
    hdr = _header(arr.shape, dtype, spacing, tr, origin, slope, inter)
    payload = np.asarray(arr, dtype=dtype.newbyteorder("<")).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def write_nifti(volume: Volume4D, path: str | os.PathLike, dtype="float32") -> None:
    g = volume.grid
    write_nifti_array(path, volume.data, g.spacing, g.tr, g.origin, dtype=dtype)

import struct

import numpy as np
import pytest

from recon4d.errors import NiftiError
from recon4d.geometry import Grid4D, Volume4D
from recon4d.nifti import read_nifti, read_nifti_array, write_nifti, write_nifti_array


def hand_built(shape, code, bitpix, payload: bytes, slope=0.0, inter=0.0, magic=b"n+1\x00", endian="<"):
    """Header assembled byte by byte from the published field offsets."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    struct.pack_into(endian + "h", hdr, 70, code)
    struct.pack_into(endian + "h", hdr, 72, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, 2.0, 2.0, 3.0, 2.5, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "f", hdr, 112, slope)
    struct.pack_into(endian + "f", hdr, 116, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\x00" * 4 + payload


def test_float32_round_trip_is_bitwise(tmp_path, rng):
    grid = Grid4D((8, 8, 4, 3), (1.74, 1.74, 3.0), 2.0, origin=(-10.0, 5.5, 0.0))
    data = rng.normal(size=grid.dims).astype(np.float32).astype(np.float64)
    path = tmp_path / "v.nii"
    write_nifti(Volume4D(grid, data), path)
    back = read_nifti(path)
    assert back.data.astype(np.float32).tobytes() == data.astype(np.float32).tobytes()
    assert back.grid.dims == grid.dims
    assert back.grid.spacing == pytest.approx(grid.spacing, rel=1e-6)
    assert back.grid.tr == pytest.approx(2.0)
    assert back.grid.origin == pytest.approx(grid.origin)
    raw = path.read_bytes()
    assert len(raw) == 352 + data.size * 4
    assert raw[344:348] == b"n+1\x00"


def test_header_fields_at_standard_offsets(tmp_path):
    path = tmp_path / "h.nii"
    write_nifti_array(path, np.zeros((3, 4, 5, 6), np.float32), spacing=(1.5, 2.0, 3.0), tr=2.5)
    raw = path.read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:5] == (4, 3, 4, 5, 6)
    assert struct.unpack_from("<h", raw, 70)[0] == 16
    assert struct.unpack_from("<5f", raw, 76)[1:] == (1.5, 2.0, 3.0, 2.5)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0


def test_int16_scaling_from_hand_built_fixture(tmp_path):
    raw = np.array([[-3, 0], [7, 100]], dtype="<i2")
    path = tmp_path / "s.nii"
    path.write_bytes(hand_built((2, 2), 4, 16, raw.tobytes(order="F"), slope=2.0, inter=1.0))
    data, _ = read_nifti_array(path)
    np.testing.assert_array_equal(data, 2.0 * raw + 1.0)
    vol = read_nifti(path)
    assert vol.grid.dims == (2, 2, 1, 1)
    assert vol.grid.spacing == (2.0, 2.0, 3.0)


def test_int16_without_scaling_reads_raw(tmp_path):
    raw = np.arange(6, dtype="<i2").reshape(3, 2)
    path = tmp_path / "r.nii"
    path.write_bytes(hand_built((3, 2), 4, 16, raw.tobytes(order="F")))
    data, _ = read_nifti_array(path)
    np.testing.assert_array_equal(data, raw)


def test_fortran_order_on_disk(tmp_path):
    path = tmp_path / "o.nii"
    write_nifti_array(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    payload = np.frombuffer(path.read_bytes()[352:], "<f4")
    np.testing.assert_array_equal(payload, [0, 3, 1, 4, 2, 5])


def test_bad_magic(tmp_path):
    path = tmp_path / "m.nii"
    path.write_bytes(hand_built((2,), 16, 32, b"\x00" * 8, magic=b"ni1\x00"))
    with pytest.raises(NiftiError, match="magic") as err:
        read_nifti(path)
    assert err.value.offset == 344


def test_truncated_payload_names_offset(tmp_path):
    path = tmp_path / "t.nii"
    path.write_bytes(hand_built((4, 4), 16, 32, b"\x00" * 20))
    with pytest.raises(NiftiError, match="truncated") as err:
        read_nifti(path)
    assert err.value.offset == 352 + 20
    assert "372" in str(err.value)


def test_truncated_header(tmp_path):
    path = tmp_path / "h.nii"
    path.write_bytes(b"\x5c\x01\x00\x00" + b"\x00" * 100)
    with pytest.raises(NiftiError, match="header"):
        read_nifti(path)


def test_big_endian_rejected(tmp_path):
    path = tmp_path / "b.nii"
    path.write_bytes(hand_built((2,), 16, 32, b"\x00" * 8, endian=">"))
    with pytest.raises(NiftiError, match="big-endian"):
        read_nifti(path)


def test_unsupported_datatype(tmp_path):
    path = tmp_path / "d.nii"
    path.write_bytes(hand_built((2,), 64, 64, b"\x00" * 16))
    with pytest.raises(NiftiError, match="datatype") as err:
        read_nifti(path)
    assert err.value.offset == 70
    with pytest.raises(NiftiError):
        write_nifti_array(tmp_path / "x.nii", np.zeros(3), dtype="float64")


def test_int16_writer_round_trip(tmp_path):
    path = tmp_path / "i.nii"
    write_nifti_array(path, np.array([[1, 2], [3, 4]]), dtype="int16", slope=0.5, inter=-1.0)
    data, _ = read_nifti_array(path)
    np.testing.assert_array_equal(data, [[-0.5, 0.0], [0.5, 1.0]])

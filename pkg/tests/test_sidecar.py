import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recon4d.errors import InvalidParameterError
from recon4d.forward import ScatteredSlice
from recon4d.geometry import RigidTransform
from recon4d.sidecar import (
    MOTION_COLUMNS,
    PoseRow,
    apply_motion,
    format_value,
    parse_value,
    read_key_values,
    read_motion_csv,
    read_sidecar,
    sha256_file,
    write_key_values,
    write_motion_csv,
    write_report_csv,
    write_sidecar,
)

CENTER = (10.0, 12.0, 6.0)


def make_slices(rng, n=6):
    out = []
    for i in range(n):
        pose = RigidTransform.from_params(rng.uniform(-5, 5, 6), center=CENTER)
        out.append(ScatteredSlice(rng.normal(size=(4, 3)), i // 3, (2 * i) % 3, 0.5 * i, pose,
                                  (1.74, 1.74), 3.0, 1.5, (0.0, 0.0, 0.0)))
    return out


def make_rows(slices):
    return [PoseRow(s.slice_index, s.volume_index, s.pose) for s in slices]


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_round_trip_exactly(x):
    assert parse_value(format_value(x)) == x


def test_format_and_parse():
    assert format_value(True) == "true"
    assert format_value(-0.0) == "0.0"
    assert format_value((64, 64, 24)) == "64,64,24"
    assert format_value(np.float64(0.1)) == "0.1"
    assert parse_value(" 3 ") == 3
    assert parse_value("1.74,1.74,3.0") == (1.74, 1.74, 3.0)
    assert parse_value("FALSE") is False
    assert parse_value("mixed") == "mixed"
    with pytest.raises(InvalidParameterError):
        format_value("two\nlines")


def test_key_value_round_trip(tmp_path):
    values = {"b.x": 1.5, "a": (1, 2), "c": "conjugate-gradient", "d": False}
    path = tmp_path / "k.txt"
    write_key_values(path, values, header="hello")
    text = path.read_text()
    assert text.splitlines()[0] == "# hello"
    assert text.splitlines()[1].startswith("a = ")
    assert "\r" not in text
    assert read_key_values(path) == values


@pytest.mark.parametrize("body", ["a = 1\na = 2\n", "novalue\n", " = 3\n"])
def test_key_value_errors(tmp_path, body):
    path = tmp_path / "bad.txt"
    path.write_text(body)
    with pytest.raises(InvalidParameterError):
        read_key_values(path)


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# top\n\nseed = 7  # trailing\n")
    assert read_key_values(path) == {"seed": 7}


def test_sha256(tmp_path):
    path = tmp_path / "f.bin"
    path.write_bytes(b"abc")
    assert sha256_file(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_motion_csv_round_trip(tmp_path, rng):
    slices = make_slices(rng)
    path = tmp_path / "m.csv"
    write_motion_csv(path, slices[::-1])
    header = path.read_text().splitlines()[0]
    assert tuple(header.split(",")) == MOTION_COLUMNS
    rows = read_motion_csv(path, CENTER)
    # rows come back in acquisition order
    assert [(r.volume_index, r.slice_index) for r in rows] == [(s.volume_index, s.slice_index) for s in slices]
    for r, s in zip(rows, slices):
        assert r.pose.is_close(s.pose, atol=1e-12)
    moved = apply_motion([s.with_pose(RigidTransform.identity(CENTER)) for s in slices], rows)
    assert all(a.pose.is_close(b.pose, atol=1e-12) for a, b in zip(moved, slices))


def test_apply_motion_requires_every_slice(rng):
    slices = make_slices(rng)
    rows = make_rows(slices)[1:]
    with pytest.raises(InvalidParameterError, match="no pose"):
        apply_motion(slices, rows)
    with pytest.raises(InvalidParameterError, match="duplicate"):
        apply_motion(slices, make_rows(slices) + make_rows(slices)[:1])


def test_motion_csv_missing_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("slice_index,volume_index,rx_deg\n0,0,1.0\n")
    with pytest.raises(InvalidParameterError, match="missing columns"):
        read_motion_csv(path, CENTER)


def test_motion_csv_bad_value(tmp_path, rng):
    path = tmp_path / "m.csv"
    write_motion_csv(path, make_slices(rng, 2))
    text = path.read_text().replace("\n0,", "\nzero,", 1)
    path.write_text(text)
    with pytest.raises(InvalidParameterError):
        read_motion_csv(path, CENTER)


def test_sidecar_round_trip(tmp_path, rng):
    slices = make_slices(rng)
    path = tmp_path / "s.csv"
    write_sidecar(path, slices)
    stack = np.stack([s.data for s in slices], axis=-1)[:, :, None, :]
    back = read_sidecar(path, stack, (1.74, 1.74), 3.0, (0.0, 0.0, 0.0), CENTER)
    for a, b in zip(back, slices):
        assert np.array_equal(a.data, b.data)
        assert (a.volume_index, a.slice_index, a.acq_time, a.sigma_k) == (
            b.volume_index, b.slice_index, b.acq_time, b.sigma_k)
        assert a.pose.is_close(b.pose, atol=1e-12)
    with pytest.raises(InvalidParameterError):
        read_sidecar(path, stack[..., :3], (1.74, 1.74), 3.0, (0, 0, 0), CENTER)


def test_report_csv(tmp_path):
    path = tmp_path / "r.csv"
    write_report_csv(path, [(0, 2.0, 1.0, 2.5), (1, 1.0, 0.5, 1.25)])
    assert path.read_text() == "iter,data_term,reg_term,total\n0,2.0,1.0,2.5\n1,1.0,0.5,1.25\n"

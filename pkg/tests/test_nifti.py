"""NIfTI-1 reader/writer: round trips, determinism, malformed inputs."""

import gzip
import struct

import numpy as np
import pytest

from t2srecon.errors import IntegrityError, ParseError
from t2srecon.grid import UNIT_LABEL, UNIT_MS, UNIT_SIGNAL, VoxelGrid
from t2srecon.nifti import read_volume, write_volume
from t2srecon.phantom import centered_geometry


def _random_grid(rng, dims=(8, 8, 8), unit=UNIT_SIGNAL):
    geom = centered_geometry(dims, (3.125, 3.125, 3.0))
    data = rng.normal(size=dims).astype(np.float32).astype(float)
    return VoxelGrid(data, geom.affine, unit)


def test_round_trip_bitwise_data_and_affine(tmp_path):
    grid = _random_grid(np.random.default_rng(0))
    path = tmp_path / "vol.nii.gz"
    write_volume(grid, path)
    back = read_volume(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, grid.data.astype(np.float32))
    assert np.abs(back.affine - grid.affine).max() < 1e-6
    assert back.unit == UNIT_SIGNAL


def test_round_trip_uncompressed(tmp_path):
    grid = _random_grid(np.random.default_rng(1))
    path = tmp_path / "vol.nii"
    write_volume(grid, path)
    back = read_volume(path)
    assert np.array_equal(back.data, grid.data.astype(np.float32))


def test_non_axis_aligned_affine_preserved(tmp_path):
    rng = np.random.default_rng(2)
    aff = np.eye(4)
    aff[:3, :3] = np.array([[2.8, 0.9, 0.1], [-0.8, 2.7, 0.2], [0.1, -0.3, 3.1]])
    aff[:3, 3] = rng.normal(size=3) * 20
    grid = VoxelGrid(rng.normal(size=(6, 7, 5)), aff, UNIT_SIGNAL)
    path = tmp_path / "oblique.nii.gz"
    write_volume(grid, path)
    back = read_volume(path)
    assert np.abs(back.affine - aff).max() < 1e-5


def test_label_grid_stored_as_uint8(tmp_path):
    geom = centered_geometry((6, 6, 6), 2.0)
    labels = np.zeros((6, 6, 6), dtype=np.uint8)
    labels[2:4, 2:4, 2:4] = 7
    grid = VoxelGrid(labels, geom.affine, UNIT_LABEL)
    path = tmp_path / "labels.nii.gz"
    write_volume(grid, path)
    back = read_volume(path)
    assert back.data.dtype == np.uint8
    assert back.unit == UNIT_LABEL
    assert np.array_equal(back.data, labels)


def test_label_grid_rejects_fractional_values(tmp_path):
    geom = centered_geometry((4, 4, 4), 2.0)
    grid = VoxelGrid(np.full((4, 4, 4), 0.5), geom.affine, UNIT_LABEL)
    with pytest.raises(IntegrityError):
        write_volume(grid, tmp_path / "bad.nii.gz")


def test_unit_override_on_read(tmp_path):
    grid = _random_grid(np.random.default_rng(3))
    path = tmp_path / "t2s.nii.gz"
    write_volume(grid, path)
    assert read_volume(path, unit=UNIT_MS).unit == UNIT_MS


def test_write_is_byte_deterministic(tmp_path):
    grid = _random_grid(np.random.default_rng(4))
    p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    write_volume(grid, p1)
    write_volume(grid, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_header_is_parse_error(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(ParseError):
        read_volume(path)


def test_truncated_payload_is_parse_error(tmp_path):
    grid = _random_grid(np.random.default_rng(5))
    path = tmp_path / "cut.nii"
    write_volume(grid, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])
    with pytest.raises(ParseError, match="truncated"):
        read_volume(path)


def test_bad_magic_is_parse_error_with_offset(tmp_path):
    grid = _random_grid(np.random.default_rng(6))
    path = tmp_path / "magic.nii"
    write_volume(grid, path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"nope"
    path.write_bytes(bytes(raw))
    with pytest.raises(ParseError) as err:
        read_volume(path)
    assert err.value.byte_offset == 344


def test_4d_header_is_integrity_error(tmp_path):
    grid = _random_grid(np.random.default_rng(7))
    path = tmp_path / "funky.nii"
    write_volume(grid, path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<2h", raw, 40, 4, 8)  # dim[0]=4, dim[1]=8
    struct.pack_into("<h", raw, 48, 3)      # dim[4]=3 time points
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        read_volume(path)


def test_gzip_payload_matches_plain(tmp_path):
    grid = _random_grid(np.random.default_rng(8))
    plain, packed = tmp_path / "p.nii", tmp_path / "p.nii.gz"
    write_volume(grid, plain)
    write_volume(grid, packed)
    assert gzip.decompress(packed.read_bytes()) == plain.read_bytes()


def test_int16_read_converts_to_float32(tmp_path):
    grid = _random_grid(np.random.default_rng(9))
    path = tmp_path / "i16.nii"
    write_volume(grid, path)
    raw = bytearray(path.read_bytes())
    data = (np.arange(8 * 8 * 8, dtype=np.int16) % 100).astype("<i2")
    struct.pack_into("<2h", raw, 70, 4, 16)  # datatype int16, bitpix 16
    out = bytes(raw[:352]) + data.tobytes()
    path.write_bytes(out)
    back = read_volume(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(
        back.data, data.astype(np.float32).reshape((8, 8, 8), order="F")
    )

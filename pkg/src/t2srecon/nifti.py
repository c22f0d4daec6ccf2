"""Minimal NIfTI-1 volume I/O.

Supports the interchange subset this toolkit emits and consumes: 3D
little-endian volumes, datatype float32 (16), uint8 (2) or int16 (4),
sform affine with qform fallback, optional gzip. int16 data is converted
to float32 on read; uint8 stays integral and is tagged as a label map.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError
from .grid import UNIT_LABEL, UNIT_SIGNAL, VoxelGrid, spacing_from_affine

HDR_SIZE = 348
VOX_OFFSET = 352
DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}
_NPTYPE = {DT_UINT8: "<u1", DT_INT16: "<i2", DT_FLOAT32: "<f4"}


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.GzipFile(fileobj=fh) as gz:
                return gz.read()
        return fh.read()


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = np.array([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return aff


def read_volume(path, unit: str | None = None) -> VoxelGrid:
    """Read a 3D NIfTI-1 volume (.nii or .nii.gz)."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HDR_SIZE:
        raise ParseError(f"{path}: truncated header", byte_offset=len(raw))
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HDR_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HDR_SIZE:
            raise ParseError(f"{path}: big-endian NIfTI not supported", byte_offset=0)
        raise ParseError(f"{path}: bad sizeof_hdr {sizeof_hdr}", byte_offset=0)
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ParseError(f"{path}: bad magic {magic!r}", byte_offset=344)
    if magic == b"ni1\x00":
        raise ParseError(f"{path}: two-file (.hdr/.img) NIfTI not supported", byte_offset=344)

    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quatern = struct.unpack_from("<6f", raw, 256)
    srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)

    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise IntegrityError(
            f"{path}: expected a 3D volume, header says {dim[0]}D with dim={dim[1:5]}"
        )
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise ParseError(f"{path}: non-positive dims {dim[1:4]}", byte_offset=40)
    if datatype not in _NPTYPE:
        raise ParseError(f"{path}: unsupported datatype code {datatype}", byte_offset=70)
    if bitpix != _BITPIX[datatype]:
        raise ParseError(
            f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}", byte_offset=72
        )

    offset = int(round(vox_offset)) if vox_offset else VOX_OFFSET
    if offset < HDR_SIZE:
        raise ParseError(f"{path}: vox_offset {offset} overlaps header", byte_offset=108)
    nbytes = nx * ny * nz * _BITPIX[datatype] // 8
    if len(raw) < offset + nbytes:
        raise ParseError(
            f"{path}: truncated data, need {offset + nbytes} bytes, have {len(raw)}",
            byte_offset=len(raw),
        )
    arr = np.frombuffer(raw, dtype=_NPTYPE[datatype], count=nx * ny * nz, offset=offset)
    data = arr.reshape((nx, ny, nz), order="F").copy()

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = srow
    elif qform_code > 0:
        hdr = dict(
            pixdim=pixdim,
            quatern_b=quatern[0],
            quatern_c=quatern[1],
            quatern_d=quatern[2],
            qoffset_x=quatern[3],
            qoffset_y=quatern[4],
            qoffset_z=quatern[5],
        )
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

    if datatype == DT_UINT8:
        inferred = UNIT_LABEL
    else:
        inferred = UNIT_SIGNAL
        if datatype == DT_INT16:
            data = data.astype(np.float32)
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            slope = scl_slope if scl_slope != 0.0 else 1.0
            data = (data * slope + scl_inter).astype(np.float32)
    return VoxelGrid(data, affine, unit or inferred)


def write_volume(grid: VoxelGrid, path) -> None:
    """Write a 3D NIfTI-1 volume; gzip when the suffix is .gz.

    Label grids are stored as uint8, everything else as float32. The gzip
    stream is written with mtime=0 so identical volumes produce identical
    bytes.
    """
    path = Path(path)
    if grid.unit == UNIT_LABEL:
        data = np.asarray(grid.data)
        if not np.issubdtype(data.dtype, np.integer):
            rounded = np.rint(data)
            if not np.allclose(data, rounded, atol=1e-6):
                raise IntegrityError("label grid holds non-integral values")
            data = rounded
        if data.min() < 0 or data.max() > 255:
            raise IntegrityError("label codes out of uint8 range")
        data = data.astype("<u1")
        datatype = DT_UINT8
    else:
        data = np.asarray(grid.data, dtype="<f4")
        datatype = DT_FLOAT32

    nx, ny, nz = grid.dims
    spacing = spacing_from_affine(grid.affine)
    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, _BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform aligned
    srow = np.asarray(grid.affine[:3, :], dtype=float).reshape(-1)
    struct.pack_into("<12f", hdr, 280, *srow)
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # filename="" and mtime=0 keep the stream a pure function of content
        with open(path, "wb") as fh:
            with gzip.GzipFile(
                filename="", fileobj=fh, mode="wb", compresslevel=6, mtime=0
            ) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)

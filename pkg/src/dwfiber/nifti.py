"""Minimal single-file NIfTI-1 (.nii) reader and writer.

Only uncompressed, single-file images with 3 or 4 dimensions are handled.
Compressed files, .hdr/.img pairs and NIfTI-2 are rejected.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dwfiber.volume import Volume4D

HEADER_SIZE = 348

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

HEADER_DTYPE = np.dtype(_HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy scalar type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    pass


def read_header(raw: bytes):
    """Parse the 348-byte header; returns (header record, byte order char)."""
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            return hdr, order
    raise NiftiError("sizeof_hdr is not 348 in either byte order")


def load_nifti(path, dtype=np.float64) -> Volume4D:
    """Read a .nii file into a Volume4D (3D images get C=1)."""
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiError("compressed NIfTI is not supported")
    raw = path.read_bytes()
    hdr, order = read_header(raw)
    if hdr["magic"] != b"n+1":
        raise NiftiError(f"bad magic {bytes(hdr['magic'])!r}; only single-file n+1 is supported")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    dims = [int(d) for d in hdr["dim"][1 : ndim + 1]]
    while ndim > 4 and dims[-1] == 1:
        ndim -= 1
        dims.pop()
    if ndim not in (3, 4) or any(d < 1 for d in dims):
        raise NiftiError(f"unsupported dim {list(hdr['dim'])}")

    scalar = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE or offset > len(raw):
        raise NiftiError(f"vox_offset {hdr['vox_offset']} inconsistent with file size {len(raw)}")
    count = int(np.prod(dims))
    expected = offset + count * scalar.itemsize
    if len(raw) < expected:
        raise NiftiError(
            f"truncated image data: expected {expected} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=scalar, count=count, offset=offset)
    data = data.reshape(dims, order="F").astype(dtype)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data * slope + inter

    voxel_size = tuple(float(v) for v in hdr["pixdim"][1:4])
    affine = None
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    return Volume4D(data, voxel_size, affine)


def make_header(shape, dtype=np.float32, voxel_size=(1.0, 1.0, 1.0), affine=None) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dims = [d for d in shape]
    if len(dims) == 4 and dims[3] == 1:
        dims = dims[:3]
    hdr["dim"][0] = len(dims)
    hdr["dim"][1 : len(dims) + 1] = dims
    hdr["dim"][len(dims) + 1 :] = 1
    hdr["datatype"] = _CODES[np.dtype(dtype)]
    hdr["bitpix"] = np.dtype(dtype).itemsize * 8
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = voxel_size
    hdr["pixdim"][4:] = 1.0
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    if affine is None:
        affine = np.diag(list(voxel_size) + [1.0])
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1"
    return hdr


def save_nifti(vol: Volume4D, path, dtype=np.float32) -> None:
    """Write ``vol`` as a little-endian single-file NIfTI-1 image."""
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise NiftiError(f"cannot write dtype {dtype}")
    hdr = make_header(vol.shape, dtype, vol.voxel_size, vol.affine)
    body = np.asarray(vol.data, dtype=dtype.newbyteorder("<"))
    if vol.shape[3] == 1:
        body = body[..., 0]
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * 4)  # empty extension block
        fh.write(body.tobytes(order="F"))

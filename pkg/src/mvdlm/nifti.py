"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer."""
from __future__ import annotations

import contextlib
import gzip
from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy type
DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}
_TIME_UNITS = {8: 1.0, 16: 1e-3, 24: 1e-6}
# fields copied from a template when writing a derived volume
SPATIAL_FIELDS = ("dim_info", "qform_code", "sform_code", "quatern_b", "quatern_c",
                  "quatern_d", "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y",
                  "srow_z", "xyzt_units")


def default_header(shape, voxel_size=(1.0, 1.0, 1.0), tr: float = 1.0) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["magic"] = b"n+1"
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2 | 8  # mm, seconds
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    vs = [float(v) for v in voxel_size]
    hdr["pixdim"] = [1.0, *vs, tr, 1.0, 1.0, 1.0]
    hdr["srow_x"] = [vs[0], 0, 0, 0]
    hdr["srow_y"] = [0, vs[1], 0, 0]
    hdr["srow_z"] = [0, 0, vs[2], 0]
    _set_shape(hdr, shape)
    return hdr


def _set_shape(hdr, shape):
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(shape)
    dim[1:1 + len(shape)] = shape
    hdr["dim"] = dim


@contextlib.contextmanager
def _open(path: Path, mode: str):
    if path.suffix != ".gz":
        with open(path, mode) as fh:
            yield fh
        return
    # no stored name and a fixed mtime keep compressed output byte-reproducible
    with open(path, mode) as raw, gzip.GzipFile(filename="", mode=mode, fileobj=raw,
                                                mtime=0) as fh:
        yield fh


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(data, header)`` with scaling applied; data is float64."""
    path = Path(path)
    with _open(path, "rb") as fh:
        try:
            raw = fh.read()
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: unreadable or truncated stream ({exc})") from None
    if len(raw) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    order = "<"
    if np.frombuffer(raw[:4], "<i4")[0] != 348:
        if np.frombuffer(raw[:4], ">i4")[0] != 348:
            raise FormatError(f"{path}: sizeof_hdr is not 348")
        order = ">"
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != b"n+1":
        raise FormatError(f"{path}: bad magic {magic!r} (only single-file NIfTI-1 is supported)")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1:1 + ndim])
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: truncated payload ({len(raw) - offset} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        if slope != 1.0 or inter != 0.0:
            data = data * slope + (inter if np.isfinite(inter) else 0.0)
    return data, np.array(hdr).astype(HEADER_DTYPE.newbyteorder("<"))


def header_tr(hdr) -> float:
    units = int(hdr["xyzt_units"]) & 0x38
    return float(hdr["pixdim"][4]) * _TIME_UNITS.get(units, 1.0)


def write_nifti(data, path, header=None, dtype: str = "f4") -> None:
    """Write ``data`` as a single-file NIfTI-1 (gzip when the name ends in .gz).

    Spatial fields of ``header`` are preserved; dimensions, datatype and
    scaling are set from ``data``.
    """
    path = Path(path)
    data = np.asarray(data)
    code = {v: k for k, v in DATATYPES.items()}[np.dtype(dtype).str[1:]]
    if header is None:
        hdr = default_header(data.shape)
    else:
        hdr = default_header(data.shape)
        tmpl = np.asarray(header)
        for name in SPATIAL_FIELDS:
            hdr[name] = tmpl[name]
        pix = np.array(tmpl["pixdim"], dtype=np.float32)
        pix[data.ndim + 1:] = 1.0
        hdr["pixdim"] = pix
        hdr["descrip"] = tmpl["descrip"]
    _set_shape(hdr, data.shape)
    hdr["datatype"] = code
    hdr["bitpix"] = _BITPIX[code]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    finite = data[np.isfinite(data)] if data.size else data
    if finite.size:
        hdr["cal_min"], hdr["cal_max"] = float(finite.min()), float(finite.max())
    payload = np.asarray(data, dtype=np.dtype(dtype).newbyteorder("<")).tobytes(order="F")
    try:
        with _open(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(b"\x00\x00\x00\x00")
            fh.write(payload)
    except OSError as exc:
        raise FormatError(f"{path}: cannot write ({exc})") from None

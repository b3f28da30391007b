"""4-D BOLD volumes, masks, voxel neighborhoods and per-cluster series."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, ParameterError
from .nifti import default_header, header_tr, read_nifti, write_nifti


@dataclass
class Bold4D:
    data: np.ndarray                  # (d1, d2, d3, T)
    tr: float = 2.0
    voxel_size: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None    # (d1, d2, d3) bool
    header: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4:
            raise FormatError(f"BOLD data must be 4-D, got shape {self.data.shape}")
        if self.mask is None:
            self.mask = nonzero_variance(self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.dims:
            raise ConfigurationError(f"mask shape {self.mask.shape} does not match {self.dims}")
        if self.header is None:
            self.header = default_header(self.data.shape, self.voxel_size, self.tr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def n_scans(self) -> int:
        return self.data.shape[3]

    def with_mask(self, mask) -> "Bold4D":
        return Bold4D(self.data, self.tr, self.voxel_size, mask, self.header)


def nonzero_variance(data: np.ndarray) -> np.ndarray:
    finite = np.all(np.isfinite(data), axis=-1)
    with np.errstate(invalid="ignore"):
        var = np.var(np.where(np.isfinite(data), data, 0.0), axis=-1)
    return finite & (var > 0)


def read_volume(path, mask=None) -> Bold4D:
    data, hdr = read_nifti(path)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise FormatError(f"{path}: expected a 3-D or 4-D image, got {data.ndim}-D")
    tr = header_tr(hdr) or 1.0
    vs = tuple(float(v) for v in hdr["pixdim"][1:4])
    return Bold4D(data, tr=tr, voxel_size=vs, mask=mask, header=hdr)


def write_volume(vol, header, path) -> None:
    """Write a 3-D or 4-D array as float32 NIfTI-1, copying spatial fields of ``header``."""
    if isinstance(header, Bold4D):
        header = header.header
    write_nifti(np.asarray(vol, dtype=float), path, header=header, dtype="f4")


def build_mask(vol: Bold4D, strategy="variance", fraction: float = 0.2) -> np.ndarray:
    """Select analysable voxels.

    ``strategy`` is ``"variance"`` (nonzero temporal variance), ``"threshold"``
    (mean intensity above ``fraction`` of the 98th-percentile mean), a path
    to a NIfTI mask, or a boolean array.  Zero-variance voxels are always
    excluded.
    """
    base = nonzero_variance(vol.data)
    if isinstance(strategy, (str, Path)) and str(strategy) == "variance":
        mask = base
    elif isinstance(strategy, (str, Path)) and str(strategy) == "threshold":
        mean = np.abs(vol.data.mean(axis=-1))
        robust_max = np.percentile(mean, 98)
        mask = base & (mean > fraction * robust_max)
    elif isinstance(strategy, (str, Path)):
        ext, _ = read_nifti(strategy)
        ext = np.squeeze(ext)
        if ext.shape != vol.dims:
            raise ConfigurationError(f"mask {strategy} has shape {ext.shape}, expected {vol.dims}")
        mask = (ext != 0) & base
    else:
        ext = np.asarray(strategy)
        if ext.shape != vol.dims:
            raise ConfigurationError(f"mask has shape {ext.shape}, expected {vol.dims}")
        mask = ext.astype(bool) & base
    if not mask.any():
        raise ConfigurationError("mask is empty")
    return mask


@dataclass
class ClusterIndex:
    center: tuple[int, int, int]
    neighbors: list[tuple[int, int, int]]

    @property
    def q(self) -> int:
        return len(self.neighbors)


@lru_cache(maxsize=None)
def neighbor_offsets(r: int) -> np.ndarray:
    """Integer offsets with squared length ``<= r``, center first.

    Within one shell the order follows +i, -i, +j, -j, +k, -k.
    """
    if int(r) != r or r < 1:
        raise ParameterError(f"radius must be a positive integer, got {r!r}")
    span = int(np.floor(np.sqrt(r)))
    rng = range(-span, span + 1)
    offs = [(a, b, c) for a in rng for b in rng for c in rng if a * a + b * b + c * c <= r]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2 + o[2] ** 2,
                             -abs(o[0]), -abs(o[1]), -abs(o[2]), -o[0], -o[1], -o[2]))
    out = np.array(offs, dtype=np.int64)
    out.setflags(write=False)
    return out


def neighborhood(center, r: int, mask: np.ndarray, dims=None) -> ClusterIndex:
    """In-mask voxels within squared index distance ``r`` of ``center``.

    On a full interior grid this gives 7, 19, 27 and 33 voxels for
    ``r = 1..4``.  Near the grid or mask edge the cluster shrinks.
    """
    mask = np.asarray(mask, dtype=bool)
    dims = tuple(mask.shape) if dims is None else tuple(dims)
    c = np.asarray(center, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= dims) or not mask[tuple(c)]:
        raise ParameterError(f"center {tuple(c.tolist())} is outside the mask")
    cand = c + neighbor_offsets(r)
    ok = np.all((cand >= 0) & (cand < np.asarray(dims)), axis=1)
    cand = cand[ok]
    cand = cand[mask[cand[:, 0], cand[:, 1], cand[:, 2]]]
    return ClusterIndex(tuple(c.tolist()), [tuple(v) for v in cand.tolist()])


def cluster_linear_indices(cluster: ClusterIndex, dims) -> np.ndarray:
    return np.ravel_multi_index(np.array(cluster.neighbors).T, dims)


def standardize_columns(Y: np.ndarray) -> np.ndarray:
    mu = Y.mean(axis=-2, keepdims=True)
    sd = Y.std(axis=-2, keepdims=True)
    if np.any(sd == 0):
        raise DataError("cannot standardize a constant series")
    return (Y - mu) / sd


def extract_series(vol: Bold4D, cluster: ClusterIndex, standardize: bool = True) -> np.ndarray:
    """``T x q`` matrix whose column ``n`` is the series of ``cluster.neighbors[n]``."""
    idx = np.array(cluster.neighbors)
    Y = vol.data[idx[:, 0], idx[:, 1], idx[:, 2], :].T.copy()
    return standardize_columns(Y) if standardize else Y

"""Per-subject posterior summaries for the group stage.

A summary container is a directory::

    subject.mvdlm/
        manifest.json     metadata, chunk table, checksums
        shared.bin        left scales C_t (T+1, p, p) and degrees of freedom n_t
        chunk_00000.bin   voxel records, little-endian float64

Each voxel record is ``[index, q, neighbors(q), m((T+1) p q), S((T+1) q q)]``.
The left scale ``C_t`` depends only on the design and prior, so it is stored
once; :attr:`VoxelSummary.c_diag` exposes the per-task diagonal.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError, IntegrityError

FORMAT_NAME = "mvdlm-summary"
FORMAT_VERSION = 1
_LE = np.dtype("<f8")


@dataclass
class SummaryMeta:
    dims: tuple
    r: int
    beta: list
    task_names: list
    burn_in: int
    n_scans: int
    design_hash: str
    standardize: bool = True
    tr: float = 2.0
    config: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.task_names)

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SummaryMeta":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        return cls(**d)


@dataclass
class VoxelSummary:
    index: int
    neighbors: np.ndarray    # (q,) linear indices, center first
    m: np.ndarray            # (T+1, p, q)
    S: np.ndarray            # (T+1, q, q)
    C: np.ndarray            # (T+1, p, p), shared by the subject's voxels

    @property
    def q(self) -> int:
        return self.neighbors.size

    @property
    def c_diag(self) -> np.ndarray:
        return np.diagonal(self.C, axis1=-2, axis2=-1)

    def to_record(self) -> np.ndarray:
        return np.concatenate([[self.index, self.q], self.neighbors.astype(float),
                               self.m.ravel(), self.S.ravel()])


def _record_size(q: int, n_t: int, p: int) -> int:
    return 2 + q + n_t * p * q + n_t * q * q


class SubjectSummary:
    """Posterior summaries of one subject, in memory or backed by a container."""

    def __init__(self, meta: SummaryMeta, C: np.ndarray, n: np.ndarray,
                 voxels: dict[int, VoxelSummary] | None = None, path: Path | None = None,
                 chunks: list[dict] | None = None):
        self.meta = meta
        self.C = np.asarray(C, dtype=float)
        self.n = np.asarray(n, dtype=float)
        self._voxels = voxels
        self.path = path
        self._chunks = chunks or []
        self._where: dict[int, int] = {}
        for ci, ch in enumerate(self._chunks):
            for v in ch["voxels"]:
                self._where[int(v)] = ci
        self._cache: tuple[int, dict[int, VoxelSummary]] | None = None

    @property
    def indices(self) -> np.ndarray:
        keys = self._voxels.keys() if self._voxels is not None else self._where.keys()
        return np.array(sorted(keys), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._voxels) if self._voxels is not None else len(self._where)

    def __contains__(self, index) -> bool:
        index = int(index)
        return index in (self._voxels if self._voxels is not None else self._where)

    def voxel(self, index: int) -> VoxelSummary:
        index = int(index)
        if self._voxels is not None:
            return self._voxels[index]
        ci = self._where[index]
        if self._cache is None or self._cache[0] != ci:
            self._cache = (ci, self._read_chunk(ci))
        return self._cache[1][index]

    def __iter__(self) -> Iterator[VoxelSummary]:
        if self._voxels is not None:
            for k in sorted(self._voxels):
                yield self._voxels[k]
            return
        for ci in range(len(self._chunks)):
            recs = self._read_chunk(ci)
            for k in sorted(recs):
                yield recs[k]

    def _read_chunk(self, ci: int) -> dict[int, VoxelSummary]:
        ch = self._chunks[ci]
        fpath = self.path / ch["file"]
        try:
            raw = fpath.read_bytes()
        except OSError as exc:
            raise IntegrityError(f"{fpath}: missing chunk ({exc})") from None
        if len(raw) != ch["nbytes"]:
            raise IntegrityError(f"{fpath}: {len(raw)} bytes on disk, manifest says {ch['nbytes']}")
        if zlib.crc32(raw) != ch["crc32"]:
            raise IntegrityError(f"{fpath}: checksum mismatch")
        return decode_records(np.frombuffer(raw, dtype=_LE), self.C, self.meta.p,
                              expected=ch["voxels"], source=str(fpath))


def decode_records(flat: np.ndarray, C: np.ndarray, p: int, expected=None,
                   source: str = "chunk") -> dict[int, VoxelSummary]:
    n_t = C.shape[0]
    out: dict[int, VoxelSummary] = {}
    pos = 0
    while pos < flat.size:
        if pos + 2 > flat.size:
            raise IntegrityError(f"{source}: truncated record header")
        index, q = int(flat[pos]), int(flat[pos + 1])
        size = _record_size(q, n_t, p)
        if q < 1 or pos + size > flat.size:
            raise IntegrityError(f"{source}: record for voxel {index} is truncated")
        body = flat[pos + 2:pos + size]
        nb = body[:q].astype(np.int64)
        m = body[q:q + n_t * p * q].reshape(n_t, p, q).copy()
        S = body[q + n_t * p * q:].reshape(n_t, q, q).copy()
        out[index] = VoxelSummary(index, nb, m, S, C)
        pos += size
    if expected is not None and sorted(out) != sorted(int(v) for v in expected):
        raise IntegrityError(f"{source}: voxel list does not match the manifest")
    return out


class SummaryWriter:
    """Streams voxel records into a container; call :meth:`close` to write the manifest."""

    def __init__(self, path, meta: SummaryMeta, C: np.ndarray, n: np.ndarray):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.meta = meta
        self.C = np.asarray(C, dtype=float)
        self.n = np.asarray(n, dtype=float)
        self.chunks: list[dict] = []
        shared = np.concatenate([self.C.ravel(), self.n.ravel()]).astype(_LE).tobytes()
        (self.path / "shared.bin").write_bytes(shared)
        self._shared_crc = zlib.crc32(shared)
        self._shared_nbytes = len(shared)

    def add(self, records: Iterable[VoxelSummary]) -> None:
        records = list(records)
        if not records:
            return
        name = f"chunk_{len(self.chunks):05d}.bin"
        payload = np.concatenate([r.to_record() for r in records]).astype(_LE).tobytes()
        (self.path / name).write_bytes(payload)
        self.chunks.append({"file": name, "voxels": [int(r.index) for r in records],
                            "nbytes": len(payload), "crc32": zlib.crc32(payload)})

    def close(self) -> "SubjectSummary":
        manifest = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "meta": self.meta.to_json(),
            "n_times": int(self.C.shape[0]),
            "p": int(self.C.shape[1]),
            "shared": {"file": "shared.bin", "nbytes": self._shared_nbytes,
                       "crc32": self._shared_crc},
            "chunks": self.chunks,
        }
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return load_summary(self.path)


def save_summary(summary: SubjectSummary, path, chunk_size: int = 256) -> None:
    writer = SummaryWriter(path, summary.meta, summary.C, summary.n)
    batch: list[VoxelSummary] = []
    for rec in summary:
        batch.append(rec)
        if len(batch) == chunk_size:
            writer.add(batch)
            batch = []
    writer.add(batch)
    writer.close()


def load_summary(path) -> SubjectSummary:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: not a summary container")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported summary version {manifest.get('version')!r}")
    meta = SummaryMeta.from_json(manifest["meta"])
    n_t, p = manifest["n_times"], manifest["p"]
    sh = manifest["shared"]
    raw = (path / sh["file"]).read_bytes()
    if len(raw) != sh["nbytes"] or zlib.crc32(raw) != sh["crc32"]:
        raise IntegrityError(f"{path}: shared payload does not match the manifest")
    flat = np.frombuffer(raw, dtype=_LE)
    if flat.size != n_t * p * p + n_t:
        raise IntegrityError(f"{path}: shared payload has unexpected length")
    C = flat[:n_t * p * p].reshape(n_t, p, p).copy()
    n = flat[n_t * p * p:].copy()
    if p != meta.p:
        raise IntegrityError(f"{path}: manifest task count disagrees with payload")
    return SubjectSummary(meta, C, n, path=path, chunks=manifest["chunks"])

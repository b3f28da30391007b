"""Whole-volume activation maps for one subject.

Voxels are split into fixed chunks of consecutive in-mask linear indices and
every voxel draws from its own generator seeded by ``(seed, linear index)``.
The partition depends only on the mask and ``chunk_size``, so the worker
count changes scheduling but never the numbers.
"""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .design import DesignMatrix
from .dlm import ModelConfig, filter_batch, filter_gains
from .errors import ConfigurationError, DataError, MVDLMError
from .nifti import write_nifti
from .summary import SubjectSummary, SummaryMeta, SummaryWriter, VoxelSummary
from .trajectories import EffectKind, parse_algorithm, sample_batch
from .volume import Bold4D, neighbor_offsets

log = logging.getLogger(__name__)

WORKERS_ENV = "MVDLM_WORKERS"
# upper bound on draws x times x columns handled in one vectorized call
_BATCH_ELEMENTS = 6_000_000


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def voxel_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class EvidenceVolume:
    """Activation probabilities, one 3-D map per task (plus optional contrasts)."""

    values: np.ndarray                  # (p, d1, d2, d3)
    task_names: list[str]
    kind: EffectKind
    algorithm: str
    n_draws: int
    threshold: float
    mask: np.ndarray
    contrasts: dict[str, np.ndarray] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)
    summary: SubjectSummary | None = None

    def active(self, task: int | str = 0) -> np.ndarray:
        return self.map(task) > self.threshold

    def map(self, task: int | str = 0) -> np.ndarray:
        if isinstance(task, str):
            if task in self.contrasts:
                return self.contrasts[task]
            task = self.task_names.index(task)
        return self.values[task]

    def save(self, outdir, header=None, prefix: str = "", csv_report: bool = True) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        maps = {name: self.values[i] for i, name in enumerate(self.task_names)}
        maps.update(self.contrasts)
        for name, vol in maps.items():
            path = outdir / f"{prefix}{self.algorithm}_{self.kind.value}_{name}.nii.gz"
            write_nifti(vol.astype(np.float32), path, header=header, dtype="f4")
            written.append(path)
        if csv_report:
            path = outdir / f"{prefix}{self.algorithm}_{self.kind.value}_evidence.csv"
            ijk = np.argwhere(self.mask)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["i", "j", "k", *maps.keys()])
                for i, j, k in ijk:
                    w.writerow([i, j, k, *(f"{maps[n][i, j, k]:.6g}" for n in maps)])
            written.append(path)
        return written


# ---------------------------------------------------------------------------
# worker pool
# ---------------------------------------------------------------------------

_CTX: dict | None = None


def _init_worker(ctx):
    global _CTX
    _CTX = ctx


def _run_in_worker(chunk):
    return _CTX["fn"](_CTX, chunk)


def run_chunks(fn: Callable, ctx: dict, chunks: Sequence, workers: int = 1) -> Iterable:
    """Apply ``fn(ctx, chunk)`` to every chunk, in order, optionally in a process pool."""
    if workers <= 1 or len(chunks) <= 1:
        for c in chunks:
            yield fn(ctx, c)
        return
    method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context(method),
                             initializer=_init_worker, initargs=(dict(ctx, fn=fn),)) as ex:
        yield from ex.map(_run_in_worker, chunks)


def make_chunks(indices: np.ndarray, chunk_size: int) -> list[np.ndarray]:
    return [indices[i:i + chunk_size] for i in range(0, indices.size, chunk_size)]


def cluster_neighbors(index: int, r: int, mask: np.ndarray) -> np.ndarray:
    """Linear indices of the in-mask neighborhood of voxel ``index``, center first."""
    dims = mask.shape
    c = np.array(np.unravel_index(index, dims))
    cand = c + neighbor_offsets(r)
    ok = np.all((cand >= 0) & (cand < np.asarray(dims)), axis=1)
    cand = cand[ok]
    cand = cand[mask[cand[:, 0], cand[:, 1], cand[:, 2]]]
    return np.ravel_multi_index(cand.T, dims)


def _sub_batches(members: list, n_elements_per_voxel: int) -> list[list]:
    size = max(1, _BATCH_ELEMENTS // max(1, n_elements_per_voxel))
    return [members[i:i + size] for i in range(0, len(members), size)]


def evidence_from_draws(draws: np.ndarray, contrasts=()) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel task evidence ``(B, p)`` and contrast evidence ``(B, n_contrasts)``."""
    ev = np.all(draws > 0, axis=(-2, -1)).mean(axis=1)
    con = np.empty((draws.shape[0], len(contrasts)))
    for c, (a, b) in enumerate(contrasts):
        con[:, c] = np.all(draws[:, :, a] - draws[:, :, b] > 0, axis=(-2, -1)).mean(axis=1)
    return ev, con


def _subject_chunk(ctx: dict, chunk: np.ndarray):
    data2d, mask, r = ctx["data2d"], ctx["mask"], ctx["r"]
    F, cfg, gains = ctx["F"], ctx["cfg"], ctx["gains"]
    p = F.shape[1]
    n_con = len(ctx["contrasts"])
    ev = np.full((chunk.size, p), np.nan)
    con = np.full((chunk.size, n_con), np.nan)
    failures: dict[int, str] = {}
    records: list[VoxelSummary] = []
    pos = {int(v): i for i, v in enumerate(chunk)}

    groups: dict[int, list[tuple[int, np.ndarray]]] = {}
    for v in chunk:
        nb = cluster_neighbors(int(v), r, mask)
        groups.setdefault(nb.size, []).append((int(v), nb))

    def run(members):
        idx = [v for v, _ in members]
        Y = np.stack([data2d[nb].T for _, nb in members])
        if ctx["standardize"]:
            sd = Y.std(axis=1, keepdims=True)
            if np.any(sd == 0):
                raise DataError("constant series in cluster")
            Y = (Y - Y.mean(axis=1, keepdims=True)) / sd
        post = filter_batch(Y, F, cfg, gains)
        rngs = [voxel_rng(ctx["seed"], v) for v in idx]
        draws = sample_batch(post, ctx["algorithm"], ctx["kind"], ctx["n_draws"], rngs,
                             design=F, cfg=cfg, gains=gains)
        e, c = evidence_from_draws(draws, ctx["contrasts"])
        recs = []
        if ctx["keep_summary"]:
            recs = [VoxelSummary(v, nb.astype(np.int64), post.m[b], post.S[b], post.C)
                    for b, (v, nb) in enumerate(members)]
        return idx, e, c, recs

    for q, members in sorted(groups.items()):
        d = q if ctx["kind"] is EffectKind.JOINT else 1
        for sub in _sub_batches(members, ctx["n_draws"] * F.shape[0] * d * p):
            try:
                outs = [run(sub)]
            except (MVDLMError, np.linalg.LinAlgError, FloatingPointError):
                outs = []
                for member in sub:
                    try:
                        outs.append(run([member]))
                    except (MVDLMError, np.linalg.LinAlgError, FloatingPointError) as exc:
                        failures[member[0]] = f"{type(exc).__name__}: {exc}"
            for idx, e, c, recs in outs:
                for b, v in enumerate(idx):
                    ev[pos[v]] = e[b]
                    con[pos[v]] = c[b]
                records.extend(recs)
    records.sort(key=lambda rec: rec.index)
    return chunk, ev, con, failures, records


def map_subject(vol: Bold4D, design: DesignMatrix, cfg: ModelConfig | None = None,
                algorithm: str = "fest", kind="average", n_draws: int = 1000,
                threshold: float = 0.95, seed: int = 0, r: int = 1,
                standardize: bool = True, workers: int | None = None,
                summary: bool | str | Path = False, contrasts: Sequence[tuple[int, int]] = (),
                chunk_size: int = 64) -> EvidenceVolume:
    """Fit every in-mask voxel and compute Monte Carlo activation evidence.

    ``summary`` may be ``True`` (keep posterior summaries in memory) or a
    container path (stream them to disk).  Voxels whose fit fails are
    recorded in ``failures`` and left at evidence 0.
    """
    cfg = cfg or ModelConfig()
    algorithm = parse_algorithm(algorithm)
    kind = EffectKind.parse(kind)
    if not 0 < threshold <= 1:
        raise ConfigurationError("threshold must lie in (0, 1]")
    if n_draws < 1:
        raise ConfigurationError("n_draws must be at least 1")
    if design.n_scans != vol.n_scans:
        raise ConfigurationError(f"design has {design.n_scans} scans, data has {vol.n_scans}")
    if cfg.burn_in > vol.n_scans:
        raise ConfigurationError(f"burn_in {cfg.burn_in} exceeds the {vol.n_scans} scans")
    p = design.n_tasks
    for a, b in contrasts:
        if not (0 <= a < p and 0 <= b < p) or a == b:
            raise ConfigurationError(f"invalid contrast ({a}, {b})")
    workers = default_workers() if workers is None else max(1, int(workers))
    F = design.values
    gains = filter_gains(F, cfg)
    mask = vol.mask
    indices = np.flatnonzero(mask.ravel())
    if indices.size == 0:
        raise ConfigurationError("mask is empty")
    ctx = {
        "data2d": vol.data.reshape(-1, vol.n_scans), "mask": mask, "r": r,
        "F": F, "cfg": cfg, "gains": gains, "algorithm": algorithm, "kind": kind,
        "n_draws": int(n_draws), "seed": int(seed), "standardize": standardize,
        "contrasts": [tuple(c) for c in contrasts], "keep_summary": summary is not False,
    }
    writer = None
    kept: dict[int, VoxelSummary] = {}
    meta = SummaryMeta(dims=vol.dims, r=r, beta=cfg.discounts(p).tolist(),
                       task_names=list(design.task_names), burn_in=cfg.burn_in,
                       n_scans=vol.n_scans, design_hash=design.digest(),
                       standardize=standardize, tr=design.tr, config=cfg.to_dict())
    if summary is not False and summary is not True:
        writer = SummaryWriter(summary, meta, gains["C"], gains["n"])

    values = np.zeros((p,) + vol.dims)
    flat_vals = values.reshape(p, -1)
    con_vals = np.zeros((len(contrasts),) + vol.dims)
    flat_con = con_vals.reshape(len(contrasts), values[0].size)
    failures: dict[int, str] = {}
    chunks = make_chunks(indices, chunk_size)
    for i, (chunk, ev, con, fails, recs) in enumerate(run_chunks(_subject_chunk, ctx, chunks,
                                                                  workers)):
        ok = ~np.isnan(ev[:, 0])
        flat_vals[:, chunk[ok]] = ev[ok].T
        if contrasts:
            flat_con[:, chunk[ok]] = con[ok].T
        failures.update(fails)
        if writer is not None:
            writer.add(recs)
        elif summary is True:
            kept.update({rec.index: rec for rec in recs})
        log.debug("chunk %d/%d done", i + 1, len(chunks))
    if failures:
        log.warning("%d voxel(s) failed and were left at zero evidence", len(failures))

    subject_summary = None
    if writer is not None:
        subject_summary = writer.close()
    elif summary is True:
        subject_summary = SubjectSummary(meta, gains["C"], gains["n"], voxels=kept)
    names = [f"{design.task_names[a]}-{design.task_names[b]}" for a, b in contrasts]
    return EvidenceVolume(values, list(design.task_names), kind, algorithm, int(n_draws),
                          threshold, mask.copy(), dict(zip(names, con_vals)), failures,
                          subject_summary)

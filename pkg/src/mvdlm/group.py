"""Two-stage group analysis on per-subject posterior summaries.

A group effect at voxel ``v`` is a weighted sum of independent subject
effects, ``theta_bar = sum_z w_z Theta_z A`` with ``w_z = 1/N_g`` for one
group and ``-1/N_B`` for the members of a subtracted group.  Its law is
normal with mean ``sum w_z m_z A`` and, in column-stacked form, covariance
``sum w_z^2 (A' S_z A kron C_z)``.  The diagonal blocks are the per-task
scales ``(1/N_g^2) sum C_{z,ll} A' S_z A``; the off-diagonal blocks carry the
cross-task terms so that a one-subject group reproduces the subject-level
samplers exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignMatrix
from .dlm import ModelConfig, PosteriorBatch, discount_covariance, filter_gains
from .errors import (ConfigurationError, MetadataError, MVDLMError,
                     UnsupportedCombinationError)
from .mapping import (EvidenceVolume, default_workers, evidence_from_draws, make_chunks,
                      run_chunks, voxel_rng)
from .summary import SubjectSummary
from .trajectories import (EffectKind, fest_from_moments, ffbs_kernel, gaussian_paths,
                           kron_vec_cov, parse_algorithm, projection_matrix)

log = logging.getLogger(__name__)

_META_KEYS = ("dims", "r", "task_names", "n_scans", "burn_in", "beta", "standardize")


@dataclass
class GroupVoxel:
    """Group effect law at one voxel for every time ``t = 0..T``."""

    index: int
    mean: np.ndarray        # (T+1, p, d)
    cov: np.ndarray         # (T+1, pd, pd), column-stacked vec(theta_bar)
    step_cov: np.ndarray    # (T+1, pd, pd), evolution increment from t-1 to t
    noise: np.ndarray       # (T+1, d, d), pooled observational scale
    n_subjects: int

    @property
    def p(self) -> int:
        return self.mean.shape[1]

    @property
    def d(self) -> int:
        return self.mean.shape[2]

    @property
    def scale(self) -> np.ndarray:
        """Per-task scales ``(T+1, p, d, d)`` (diagonal blocks of ``cov``)."""
        p, d = self.p, self.d
        K = self.cov.reshape(-1, d, p, d, p)
        idx = np.arange(p)
        return np.moveaxis(K[:, :, idx, :, idx], 0, 1)


@dataclass
class GroupDistribution:
    """Lazy voxel-wise group effect: weighted members plus shared metadata."""

    kind: EffectKind
    members: list[tuple[float, SubjectSummary]]
    n_subjects: int
    labels: list[str] = field(default_factory=list)

    @property
    def meta(self):
        return self.members[0][1].meta

    @property
    def design_hashes(self) -> set[str]:
        return {s.meta.design_hash for _, s in self.members}

    @property
    def indices(self) -> np.ndarray:
        common = None
        for _, s in self.members:
            idx = s.indices
            common = idx if common is None else np.intersect1d(common, idx)
        return common

    def voxel(self, index: int) -> GroupVoxel:
        return combine_voxel(self.members, index, self.kind, self.n_subjects)


def _check_compatible(summaries: Sequence[SubjectSummary]) -> None:
    ref = summaries[0].meta
    problems = []
    for z, s in enumerate(summaries[1:], start=1):
        for key in _META_KEYS:
            a, b = getattr(ref, key), getattr(s.meta, key)
            if key == "dims":
                a, b = tuple(a), tuple(b)
            if key == "beta":
                same = np.allclose(a, b)
            else:
                same = a == b
            if not same:
                problems.append(f"subject {z}: {key} {b!r} != {a!r}")
    if problems:
        raise MetadataError("incompatible summaries: " + "; ".join(problems))


def group_combine(summaries: Sequence[SubjectSummary], kind) -> GroupDistribution:
    """Average subject effect laws into a group law (means ``1/N_g``, scales ``1/N_g^2``)."""
    summaries = list(summaries)
    if not summaries:
        raise ConfigurationError("need at least one subject summary")
    _check_compatible(summaries)
    w = 1.0 / len(summaries)
    return GroupDistribution(EffectKind.parse(kind), [(w, s) for s in summaries],
                             len(summaries))


def group_contrast(a, b):
    """Law of ``group a - group b``: mean difference, summed scales.

    Accepts two :class:`GroupDistribution` objects or two :class:`GroupVoxel`.
    """
    if isinstance(a, GroupVoxel) and isinstance(b, GroupVoxel):
        if a.mean.shape != b.mean.shape:
            raise MetadataError(f"group effects differ in shape: {a.mean.shape} vs {b.mean.shape}")
        return GroupVoxel(a.index, a.mean - b.mean, a.cov + b.cov, a.step_cov + b.step_cov,
                          a.noise + b.noise, a.n_subjects + b.n_subjects)
    if a.kind is not b.kind:
        raise MetadataError(f"cannot contrast a {a.kind.value} effect with a {b.kind.value} one")
    _check_compatible([a.members[0][1], b.members[0][1]])
    members = list(a.members) + [(-w, s) for w, s in b.members]
    return GroupDistribution(a.kind, members, a.n_subjects + b.n_subjects)


def _project_member(summary: SubjectSummary, index: int, kind: EffectKind):
    if index not in summary:
        raise MetadataError(f"voxel {index} is missing from a subject summary")
    vs = summary.voxel(index)
    A = projection_matrix(kind, vs.q)
    m = vs.m @ A
    S = A.T @ vs.S @ A
    return m, S


def combine_voxel(members, index: int, kind, n_subjects: int | None = None) -> GroupVoxel:
    kind = EffectKind.parse(kind)
    mean = cov = step = noise = None
    for w, s in members:
        m, S = _project_member(s, index, kind)
        if mean is None:
            mean = np.zeros_like(m)
            pd = m.shape[1] * m.shape[2]
            cov = np.zeros((m.shape[0], pd, pd))
            step = np.zeros_like(cov)
            noise = np.zeros_like(S)
        elif m.shape != mean.shape:
            raise MetadataError(f"voxel {index}: subjects disagree on the effect shape "
                                f"({m.shape} vs {mean.shape}); use a scalar effect kind")
        W, _ = discount_covariance(s.C[:-1], np.asarray(s.meta.beta, dtype=float))
        w2 = w * w
        mean += w * m
        cov += w2 * kron_vec_cov(S, s.C)
        step[1:] += w2 * kron_vec_cov(S[1:], W)
        noise += w2 * S
    return GroupVoxel(int(index), mean, cov, step, noise,
                      len(members) if n_subjects is None else n_subjects)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _fest_group(gvs: list[GroupVoxel], F, gains, m0, burn_in, n_draws, rngs):
    mean = np.stack([g.mean for g in gvs])
    cov = np.stack([g.cov for g in gvs])
    noise = np.stack([g.noise for g in gvs])
    B, n_t, p, d = mean.shape
    K = cov[:, 1:].reshape(B, n_t - 1, d, p, d, p)
    y_mean = np.einsum("ti,btid->btd", F, mean[:, 1:])
    y_cov = np.einsum("ti,btjikl,tl->btjk", F, K, F) + noise[:, 1:]
    return fest_from_moments(y_mean, y_cov, F, gains, m0, burn_in, n_draws, rngs)


def _fsts_group(gvs: list[GroupVoxel], burn_in, n_draws, rngs):
    n_t = gvs[0].mean.shape[0]
    times = np.arange(burn_in, n_t)
    mean = np.stack([g.mean[times - 1] for g in gvs])
    cov = np.stack([g.cov[times - 1] + g.step_cov[times] for g in gvs])
    return gaussian_paths(mean, cov, n_draws, rngs)


def _ffbs_group(members, indices, kind, burn_in, n_draws, rngs):
    total = None
    for w, s in members:
        proj = [_project_member(s, v, kind) for v in indices]
        post = PosteriorBatch(np.stack([m for m, _ in proj]), s.C,
                              np.stack([S for _, S in proj]), s.n, None,
                              np.asarray(s.meta.beta, dtype=float), burn_in)
        draws = w * ffbs_kernel(post, n_draws, rngs)
        total = draws if total is None else total + draws
    return total


def _group_chunk(ctx: dict, chunk: np.ndarray):
    dist: GroupDistribution = ctx["dist"]
    kind, algorithm = dist.kind, ctx["algorithm"]
    burn_in = dist.meta.burn_in
    p = dist.meta.p
    ev = np.full((chunk.size, p), np.nan)
    con = np.full((chunk.size, len(ctx["contrasts"])), np.nan)
    failures: dict[int, str] = {}
    pos = {int(v): i for i, v in enumerate(chunk)}

    def run(indices):
        rngs = [voxel_rng(ctx["seed"], v) for v in indices]
        if algorithm == "ffbs":
            draws = _ffbs_group(dist.members, indices, kind, burn_in, ctx["n_draws"], rngs)
        else:
            gvs = [dist.voxel(v) for v in indices]
            if algorithm == "fsts":
                draws = _fsts_group(gvs, burn_in, ctx["n_draws"], rngs)
            else:
                m0 = np.stack([ctx["m0"](g) for g in gvs])[:, None]
                draws = _fest_group(gvs, ctx["F"], ctx["gains"], m0, burn_in,
                                    ctx["n_draws"], rngs)
        return indices, evidence_from_draws(draws, ctx["contrasts"])

    batches: dict[int, list[int]] = {}
    for v in chunk:
        v = int(v)
        d = 1 if kind is not EffectKind.JOINT else dist.members[0][1].voxel(v).q
        batches.setdefault(d, []).append(v)
    for _, indices in sorted(batches.items()):
        try:
            outs = [run(indices)]
        except (MVDLMError, np.linalg.LinAlgError, FloatingPointError):
            outs = []
            for v in indices:
                try:
                    outs.append(run([v]))
                except (MVDLMError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    failures[v] = f"{type(exc).__name__}: {exc}"
        for idx, (e, c) in outs:
            for b, v in enumerate(idx):
                ev[pos[v]] = e[b]
                con[pos[v]] = c[b]
    return chunk, ev, con, failures


def map_group(dist: GroupDistribution, design: DesignMatrix | None = None,
              cfg: ModelConfig | None = None, algorithm: str = "fsts", n_draws: int = 1000,
              threshold: float = 0.95, seed: int = 0, workers: int | None = None,
              contrasts: Sequence[tuple[int, int]] = (), chunk_size: int = 64) -> EvidenceVolume:
    """Group (or group-contrast) evidence maps over the voxels shared by all subjects.

    FEST re-filters synthetic group series and therefore needs the design
    shared by every subject; FFBS averages per-subject backward passes and
    is likewise limited to a shared design.  FSTS needs no design.
    """
    algorithm = parse_algorithm(algorithm)
    if not 0 < threshold <= 1:
        raise ConfigurationError("threshold must lie in (0, 1]")
    if n_draws < 1:
        raise ConfigurationError("n_draws must be at least 1")
    meta = dist.meta
    p = meta.p
    for a, b in contrasts:
        if not (0 <= a < p and 0 <= b < p) or a == b:
            raise ConfigurationError(f"invalid contrast ({a}, {b})")
    hashes = dist.design_hashes
    ctx = {"dist": dist, "algorithm": algorithm, "n_draws": int(n_draws), "seed": int(seed),
           "contrasts": [tuple(c) for c in contrasts]}
    if algorithm in ("fest", "ffbs") and len(hashes) > 1:
        raise UnsupportedCombinationError(
            f"group {algorithm.upper()} needs one design shared by all subjects "
            f"({len(hashes)} distinct designs found); use algorithm 'fsts' instead")
    if algorithm == "fest":
        if design is None:
            raise UnsupportedCombinationError("group FEST needs the shared design matrix; "
                                              "supply it or use algorithm 'fsts'")
        if design.digest() not in hashes:
            raise UnsupportedCombinationError("the supplied design differs from the one the "
                                              "subjects were fitted with; use algorithm 'fsts'")
        cfg = cfg or ModelConfig.from_dict(meta.config)
        F = design.values
        ctx["F"] = F
        ctx["gains"] = filter_gains(F, cfg)
        weight = sum(w for w, _ in dist.members)

        def m0(g: GroupVoxel, cfg=cfg, weight=weight):
            q = g.d if dist.kind is EffectKind.JOINT else None
            if cfg.prior_m is None:
                return np.zeros((g.p, g.d))
            q = q or np.asarray(cfg.prior_m).shape[1]
            return weight * cfg.initial_state(g.p, q).m @ projection_matrix(dist.kind, q)
        ctx["m0"] = m0
    workers = default_workers() if workers is None else max(1, int(workers))

    dims = tuple(meta.dims)
    indices = dist.indices
    if indices is None or indices.size == 0:
        raise ConfigurationError("the subjects share no voxels")
    mask = np.zeros(int(np.prod(dims)), dtype=bool)
    mask[indices] = True
    values = np.zeros((p,) + dims)
    con_vals = np.zeros((len(contrasts),) + dims)
    flat_vals = values.reshape(p, -1)
    flat_con = con_vals.reshape(len(contrasts), values[0].size)
    failures: dict[int, str] = {}
    for chunk, ev, con, fails in run_chunks(_group_chunk, ctx, make_chunks(indices, chunk_size),
                                            workers):
        ok = ~np.isnan(ev[:, 0])
        flat_vals[:, chunk[ok]] = ev[ok].T
        if contrasts:
            flat_con[:, chunk[ok]] = con[ok].T
        failures.update(fails)
    if failures:
        log.warning("%d voxel(s) failed and were left at zero evidence", len(failures))
    names = [f"{meta.task_names[a]}-{meta.task_names[b]}" for a, b in contrasts]
    return EvidenceVolume(values, list(meta.task_names), dist.kind, algorithm, int(n_draws),
                          threshold, mask.reshape(dims), dict(zip(names, con_vals)), failures)

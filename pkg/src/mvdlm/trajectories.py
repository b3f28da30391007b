"""Effect projections, trajectory samplers and Monte Carlo activation evidence.

All three samplers work on the posterior of ``Theta_t A`` where ``A`` is the
``q x d`` projection of the chosen effect kind (first column, column average,
or identity).  Because a matrix normal is closed under right multiplication,
``Theta_t A | D_t ~ N(m_t A, C_t, A' S_t A)``, and under the inverse Wishart
parameterization of :func:`~mvdlm.dlm.sample_inverse_wishart`
``A' Sigma A ~ W^{-1}_{n_t}(A' S_t A)`` with the same ``n_t``.  Sampling the
projected model is therefore distributionally identical to sampling the full
``p x q`` state and projecting afterwards, and much cheaper for the scalar
kinds.

Samplers are batched: arrays carry a leading voxel axis ``B`` and each voxel
draws from its own generator, so results do not depend on how voxels are
grouped into batches.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dlm import (
    ModelConfig,
    PosteriorBatch,
    PosteriorSequence,
    PosteriorState,
    chol_factor,
    discount_covariance,
    filter_gains,
    filter_means,
    psd_factor,
    sample_inverse_wishart,
)
from .errors import ConfigurationError, DataError, ParameterError

ALGORITHMS = ("fest", "fsts", "ffbs")


class EffectKind(str, enum.Enum):
    MARGINAL = "marginal"
    AVERAGE = "average"
    JOINT = "joint"

    @classmethod
    def parse(cls, value) -> "EffectKind":
        if isinstance(value, cls):
            return value
        aliases = {"average_cluster": "average", "averagecluster": "average", "ace": "average",
                   "ltt": "average"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigurationError(f"unknown effect kind {value!r}") from None


def parse_algorithm(name: str) -> str:
    key = str(name).lower()
    if key == "fets":
        key = "fest"
    if key not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    return key


@dataclass
class EffectDistribution:
    kind: EffectKind
    mean: float | np.ndarray
    scale: float | np.ndarray
    t: int | None = None
    task: int = 0


@dataclass
class EffectTrajectory:
    values: np.ndarray     # (n_retained, d)
    task: int
    algorithm: str
    kind: EffectKind
    draw: int = 0


@dataclass
class EvidenceResult:
    probability: float
    n_draws: int
    task: int | None = None
    kind: EffectKind | None = None
    algorithm: str | None = None


def projection_matrix(kind, q: int) -> np.ndarray:
    kind = EffectKind.parse(kind)
    if kind is EffectKind.MARGINAL:
        a = np.zeros((q, 1))
        a[0, 0] = 1.0
        return a
    if kind is EffectKind.AVERAGE:
        return np.full((q, 1), 1.0 / q)
    return np.eye(q)


def effect_projection(state: PosteriorState, l: int, kind) -> EffectDistribution:
    """Distribution of the task-``l`` effect (0-based) under the normal approximation."""
    kind = EffectKind.parse(kind)
    p, q = state.m.shape
    if not 0 <= l < p:
        raise ParameterError(f"task index {l} out of range for {p} tasks")
    c = state.C[l, l]
    if kind is EffectKind.MARGINAL:
        return EffectDistribution(kind, float(state.m[l, 0]), float(c * state.S[0, 0]), task=l)
    if kind is EffectKind.AVERAGE:
        S = state.S
        diag = np.sum(c * np.diag(S))
        off = np.sum(c * S) - diag
        return EffectDistribution(kind, float(np.mean(state.m[l])), float((diag + off) / q**2),
                                  task=l)
    return EffectDistribution(kind, state.m[l].copy(), c * state.S, task=l)


def project(batch: PosteriorBatch, kind) -> PosteriorBatch:
    """Posterior of ``Theta A`` for every voxel and time."""
    q = batch.m.shape[-1]
    A = projection_matrix(kind, q)
    if A.shape[1] == q and np.array_equal(A, np.eye(q)):
        return batch
    m = batch.m @ A
    S = np.swapaxes(A, 0, 1) @ batch.S @ A
    return PosteriorBatch(m, batch.C, S, batch.n, batch.A, batch.beta, batch.burn_in,
                          dict(batch.extra))


def _as_rngs(rng, size: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        if size != 1:
            raise ValueError("a single generator can only drive a batch of one")
        return [rng]
    rngs = list(rng)
    if len(rngs) != size:
        raise ValueError(f"{len(rngs)} generators for a batch of {size}")
    return rngs


def _left_right(L, Z, R):
    """``L @ Z @ R'`` for broadcastable stacks: L (..., p, p), Z (..., p, d), R (..., d, d)."""
    p, d = Z.shape[-2:]
    X = L * Z if p == 1 else np.einsum("...ij,...jk->...ik", L, Z)
    return X * R if d == 1 else np.einsum("...ik,...lk->...il", X, R)


def kron_vec_cov(S: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Covariance of column-stacked ``vec(X)`` for ``X ~ N(M, C, S)``: ``S kron C``."""
    d, p = S.shape[-1], C.shape[-1]
    K = np.einsum("...ab,...ij->...aibj", S, C)
    return K.reshape(K.shape[:-4] + (d * p, d * p))


# ---------------------------------------------------------------------------
# samplers (batched kernels, time-major internally)
# ---------------------------------------------------------------------------

def gaussian_paths(mean: np.ndarray, cov: np.ndarray, n_draws: int, rngs) -> np.ndarray:
    """Independent draws ``vec(Theta_t) ~ N(vec(mean_t), cov_t)`` at every time.

    ``mean`` is ``(B, n, p, d)`` and ``cov`` ``(B, n, pd, pd)`` in
    column-stacked order; returns ``(B, N, p, n, d)``.
    """
    B, n, p, d = mean.shape
    rngs = _as_rngs(rngs, B)
    z = np.empty((n, B, n_draws, p * d))
    for b, g in enumerate(rngs):
        z[:, b] = g.standard_normal((n, n_draws, p * d))
    L = chol_factor(cov)                               # (B, n, pd, pd)
    Lt = np.swapaxes(L, 0, 1)                          # (n, B, pd, pd)
    if p * d == 1:
        v = Lt[:, :, None, 0, :] * z
    else:
        v = np.einsum("tbij,tbnj->tbni", Lt, z)
    x = v.reshape(n, B, n_draws, d, p)                 # vec -> (d, p), transposed below
    x = np.swapaxes(x, -1, -2) + np.swapaxes(mean, 0, 1)[:, :, None]
    return np.moveaxis(x, 0, -2)                        # (B, N, p, n, d)


def refilter_trajectories(y: np.ndarray, F, gains, m0, burn_in: int) -> np.ndarray:
    """Filtered means of time-major synthetic series ``(T, ..., d)`` -> ``(..., p, n_ret, d)``."""
    means = filter_means(y, F, gains, m0, start=burn_in, time_major=True)
    return np.swapaxes(means, -3, -2)


def fest_from_moments(y_mean: np.ndarray, y_cov: np.ndarray, F, gains: dict, m0,
                      burn_in: int, n_draws: int, rngs) -> np.ndarray:
    """Synthesize series ``Y~_t ~ N(y_mean_t, y_cov_t)`` and re-filter them.

    ``y_mean`` is ``(B, T, d)``, ``y_cov`` ``(B, T, d, d)``.
    """
    B, T, d = y_mean.shape
    rngs = _as_rngs(rngs, B)
    z = np.empty((T, B, n_draws, d))
    for b, g in enumerate(rngs):
        z[:, b] = g.standard_normal((T, n_draws, d))
    L = np.swapaxes(chol_factor(y_cov), 0, 1)          # (T, B, d, d)
    if d == 1:
        z *= L[:, :, None, 0, :]
    else:
        z = np.einsum("tbij,tbnj->tbni", L, z)
    z += np.swapaxes(y_mean, 0, 1)[:, :, None, :]
    return refilter_trajectories(z, F, gains, m0, burn_in)


def fest_kernel(post: PosteriorBatch, F, gains: dict, m0, n_draws: int, rngs) -> np.ndarray:
    """Forward estimated trajectories for a projected batch -> ``(B, N, p, n_ret, d)``.

    Each draw samples the effect ``Theta_t`` from its posterior at every
    time, forms ``Y~_t = F_t' Theta_t + nu_t`` with ``nu_t ~ N(0, S_t)``,
    re-runs the filter on ``Y~`` and keeps the filtered means at retained
    times.  Only ``Y~`` enters the re-filter, so it is drawn in one step from
    its exact law ``N(F_t' m_t, (F_t' C_t F_t + 1) S_t)``.
    """
    F = np.asarray(F, dtype=float)
    y_mean = np.einsum("tj,btjd->btd", F, post.m[:, 1:])
    lever = np.einsum("tj,tjk,tk->t", F, post.C[1:], F) + 1.0
    y_cov = lever[None, :, None, None] * post.S[:, 1:]
    return fest_from_moments(y_mean, y_cov, F, gains, m0, post.burn_in, n_draws, rngs)


def fsts_kernel(post: PosteriorBatch, n_draws: int, rngs) -> np.ndarray:
    """Forward state trajectories -> ``(B, N, p, n_ret, d)``.

    At each retained ``t`` a fresh ``Theta_{t-1} ~ N(m_{t-1}, C_{t-1}, S_{t-1})``
    is moved one evolution step by ``Omega_t ~ N(0, W_t, S_t)`` with
    ``W_t = B C_{t-1} B - C_{t-1}``.  The sum is drawn directly from its
    law, ``vec ~ N(vec m_{t-1}, S_{t-1} kron C_{t-1} + S_t kron W_t)``.
    """
    T = post.n_times
    times = np.arange(post.burn_in, T + 1)
    C_prev = post.C[times - 1]
    W, _ = discount_covariance(C_prev, post.beta)
    cov = (kron_vec_cov(post.S[:, times - 1], C_prev[None])
           + kron_vec_cov(post.S[:, times], W[None]))
    return gaussian_paths(post.m[:, times - 1], cov, n_draws, rngs)


def ffbs_backward_terms(C: np.ndarray, beta, burn_in: int):
    """Backward gains ``J_t = C_t (B C_t B)^{-1}`` and factors of ``C_t - J_t C_t``.

    Returned arrays are indexed by ``t - burn_in`` for ``t = burn_in .. T-1``.
    """
    T = C.shape[0] - 1
    times = np.arange(burn_in, T)
    Ct = C[times]
    _, R = discount_covariance(Ct, beta)
    J = np.swapaxes(np.linalg.solve(R, Ct), -1, -2)    # C R^{-1}; both symmetric
    Cstar = Ct - J @ Ct
    return J, psd_factor(Cstar)


def ffbs_kernel(post: PosteriorBatch, n_draws: int, rngs) -> np.ndarray:
    """Forward-filtering backward-sampling -> ``(B, N, p, n_ret, d)``.

    Per draw: ``Sigma ~ W^{-1}_{n_T}(S_T)``, ``Theta_T ~ N(m_T, C_T, Sigma)``,
    then ``Theta_t | Theta_{t+1}, Sigma ~ N(m_t + J_t (Theta_{t+1} - m_t), C_t - J_t C_t, Sigma)``
    back to the first retained time.
    """
    B = post.size
    T = post.n_times
    t0 = post.burn_in
    p, d = post.m.shape[-2:]
    n_ret = T - t0 + 1
    rngs = _as_rngs(rngs, B)
    L_sigma = np.empty((B, n_draws, d, d))
    z = np.empty((n_ret, B, n_draws, p, d))
    for b, g in enumerate(rngs):
        sigma = sample_inverse_wishart(post.n[T], post.S[b, T], g, size=n_draws)
        L_sigma[b] = np.sqrt(sigma) if d == 1 else chol_factor(sigma)
        z[:, b] = g.standard_normal((n_ret, n_draws, p, d))
    J, LCs = ffbs_backward_terms(post.C, post.beta, t0)
    out = np.empty((n_ret, B, n_draws, p, d))
    theta = post.m[:, None, T] + _left_right(chol_factor(post.C[T]), z[-1], L_sigma)
    out[-1] = theta
    for i in range(n_ret - 2, -1, -1):
        mt = post.m[:, None, t0 + i]
        if p == 1:
            theta = mt + J[i, 0, 0] * (theta - mt)
        else:
            theta = mt + np.einsum("ij,bnjd->bnid", J[i], theta - mt)
        theta += _left_right(LCs[i], z[i], L_sigma)
        out[i] = theta
    return np.moveaxis(out, 0, -2)


def sample_batch(post: PosteriorBatch, algorithm: str, kind, n_draws: int, rngs,
                 design=None, cfg: ModelConfig | None = None, gains: dict | None = None
                 ) -> np.ndarray:
    """Trajectory draws for every voxel of ``post`` -> ``(B, N, p, n_ret, d)``."""
    algorithm = parse_algorithm(algorithm)
    kind = EffectKind.parse(kind)
    if n_draws < 1:
        raise ParameterError("need at least one draw")
    if post.burn_in > post.n_times:
        raise ConfigurationError(f"burn_in {post.burn_in} exceeds series length {post.n_times}")
    q = post.m.shape[-1]
    reduced = project(post, kind)
    if algorithm == "fsts":
        return fsts_kernel(reduced, n_draws, rngs)
    if algorithm == "ffbs":
        return ffbs_kernel(reduced, n_draws, rngs)
    if design is None or cfg is None:
        raise ConfigurationError("FEST needs the design matrix and model configuration")
    F = np.asarray(getattr(design, "values", design), dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if gains is None:
        gains = filter_gains(F, cfg)
    m0 = cfg.initial_state(F.shape[1], q).m @ projection_matrix(kind, q)
    return fest_kernel(reduced, F, gains, m0, n_draws, rngs)


def sample_trajectories(posteriors: PosteriorSequence, algorithm: str, kind, n_draws: int,
                        rng: np.random.Generator, design=None, cfg: ModelConfig | None = None
                        ) -> np.ndarray:
    """``n_draws`` trajectories for one voxel -> ``(N, p, n_ret, d)``."""
    return sample_batch(posteriors.as_batch(), algorithm, kind, n_draws, [rng],
                        design=design, cfg=cfg)[0]


def _single(posteriors, algorithm, l, kind, rng, design=None, cfg=None) -> EffectTrajectory:
    kind = EffectKind.parse(kind)
    p = posteriors.m.shape[1]
    if not 0 <= l < p:
        raise ParameterError(f"task index {l} out of range for {p} tasks")
    draws = sample_trajectories(posteriors, algorithm, kind, 1, rng, design, cfg)
    return EffectTrajectory(draws[0, l], l, parse_algorithm(algorithm), kind)


def fest_draw(posteriors: PosteriorSequence, design, cfg: ModelConfig, l: int, kind,
              rng: np.random.Generator) -> EffectTrajectory:
    return _single(posteriors, "fest", l, kind, rng, design, cfg)


def fsts_draw(posteriors: PosteriorSequence, cfg: ModelConfig, l: int, kind,
              rng: np.random.Generator) -> EffectTrajectory:
    return _single(posteriors, "fsts", l, kind, rng)


def ffbs_draw(posteriors: PosteriorSequence, cfg: ModelConfig, l: int, kind,
              rng: np.random.Generator) -> EffectTrajectory:
    return _single(posteriors, "ffbs", l, kind, rng)


# ---------------------------------------------------------------------------
# evidence
# ---------------------------------------------------------------------------

def _stack(draws) -> np.ndarray:
    if isinstance(draws, np.ndarray):
        return draws
    draws = list(draws)
    if not draws:
        raise DataError("no trajectories given")
    vals = [np.asarray(getattr(d, "values", d), dtype=float) for d in draws]
    if len({v.shape for v in vals}) != 1:
        raise DataError("trajectories have inconsistent shapes")
    return np.stack(vals)


def positive_fraction(draws: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Fraction of draws (axis ``-3`` after reduction) whose every element is > 0."""
    ok = np.all(draws > 0, axis=axes)
    return ok.mean(axis=-1) if ok.ndim else float(ok)


def evidence(draws) -> EvidenceResult:
    """``(1/N) #{k : every element of trajectory k is strictly positive}``."""
    meta = None if isinstance(draws, np.ndarray) else list(draws)
    arr = _stack(meta if meta is not None else draws)
    if arr.shape[0] == 0:
        raise DataError("no trajectories given")
    flat = arr.reshape(arr.shape[0], -1)
    prob = float(np.mean(np.all(flat > 0, axis=1)))
    first = meta[0] if meta else None
    return EvidenceResult(prob, arr.shape[0], getattr(first, "task", None),
                          getattr(first, "kind", None), getattr(first, "algorithm", None))


def contrast_evidence(draws_l, draws_other) -> EvidenceResult:
    """Evidence that trajectory ``l`` exceeds the paired trajectory everywhere."""
    a = _stack(draws_l)
    b = _stack(draws_other)
    if a.shape != b.shape:
        raise DataError(f"paired trajectories differ in shape: {a.shape} vs {b.shape}")
    return evidence(a - b)

"""Conjugate matrix-variate dynamic linear model.

Observation and evolution equations, for a ``q``-variate series ``Y_t`` and a
``p x q`` state ``Theta_t``::

    Y_t     = F_t' Theta_t + nu_t,        nu_t    ~ N_q(0, V Sigma)
    Theta_t = Theta_{t-1} + Omega_t,      Omega_t ~ N_{pq}(0, W_t, Sigma)

with a matrix normal / inverse Wishart prior on ``(Theta_0, Sigma)`` and the
system variance ``W_t`` specified through discount factors.  The left-scale
recursion (``C_t``, ``R_t``, ``Q_t``, ``A_t``) does not involve the data, so it
is computed once and shared between voxels by :func:`filter_batch`.

Time index convention: ``t = 0`` is the prior, ``t = 1..T`` are posteriors
after each observation.  Sequences therefore have ``T + 1`` states.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateForecastError,
    NumericalError,
    ParameterError,
)

Q_FLOOR = 1e-12
_JITTER_BASE = 1e-10
_JITTER_RETRIES = 3


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------

def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _chol_single(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    dim = a.shape[-1]
    scale = max(float(np.trace(a)) / dim, np.finfo(float).tiny)
    jitter = _JITTER_BASE * scale
    for _ in range(_JITTER_RETRIES):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(dim))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("Cholesky factorization failed after jitter escalation")


def chol_factor(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix (or a stack of them).

    On failure a diagonal jitter of ``1e-10 * trace / dim`` is added and the
    factorization retried, escalating tenfold up to three times.
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if a.ndim == 2:
            return _chol_single(a)
    flat = a.reshape((-1,) + a.shape[-2:])
    out = np.empty_like(flat)
    for i, mat in enumerate(flat):
        out[i] = _chol_single(mat)
    return out.reshape(a.shape)


def psd_factor(a: np.ndarray) -> np.ndarray:
    """Square root ``L`` with ``L L' = a`` for symmetric PSD (possibly singular) ``a``."""
    a = symmetrize(np.asarray(a, dtype=float))
    w, v = np.linalg.eigh(a)
    return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ModelConfig:
    """Prior and evolution settings shared by every voxel.

    ``beta`` may be a scalar (same discount for every regressor) or a
    length-``p`` sequence.  ``prior_m``/``prior_S`` default to zeros and the
    identity once ``p`` and ``q`` are known.
    """

    beta: float | Sequence[float] = 0.95
    v_scale: float = 1.0
    prior_m: np.ndarray | None = None
    prior_c_scale: float = 100.0
    prior_S: np.ndarray | None = None
    prior_n: float = 1.0
    burn_in: int = 30

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if b.ndim != 1 or b.size == 0:
            raise ParameterError("beta must be a scalar or a 1-D sequence")
        if np.any(~np.isfinite(b)) or np.any(b <= 0.0) or np.any(b > 1.0):
            raise ParameterError(f"discount factors must lie in (0, 1], got {b.tolist()}")
        if not (np.isfinite(self.v_scale) and self.v_scale > 0):
            raise ParameterError("v_scale must be positive")
        if not (np.isfinite(self.prior_c_scale) and self.prior_c_scale > 0):
            raise ParameterError("prior_c_scale must be positive")
        if not (np.isfinite(self.prior_n) and self.prior_n > 0):
            raise ParameterError("prior_n must be positive")
        if int(self.burn_in) != self.burn_in or self.burn_in < 1:
            raise ParameterError("burn_in must be a positive integer")
        self.burn_in = int(self.burn_in)

    def discounts(self, p: int) -> np.ndarray:
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if b.size == 1:
            return np.full(p, b[0])
        if b.size != p:
            raise ParameterError(f"{b.size} discount factors given for {p} regressors")
        return b.copy()

    def initial_state(self, p: int, q: int) -> "PosteriorState":
        m0 = np.zeros((p, q)) if self.prior_m is None else np.asarray(self.prior_m, float)
        if m0.shape != (p, q):
            raise ParameterError(f"prior_m has shape {m0.shape}, expected {(p, q)}")
        s0 = np.eye(q) if self.prior_S is None else np.asarray(self.prior_S, float)
        if s0.shape != (q, q):
            raise ParameterError(f"prior_S has shape {s0.shape}, expected {(q, q)}")
        return PosteriorState(m0.copy(), self.prior_c_scale * np.eye(p), s0.copy(),
                              float(self.prior_n))

    def to_dict(self) -> dict:
        out = {
            "beta": np.atleast_1d(np.asarray(self.beta, float)).tolist(),
            "v_scale": self.v_scale,
            "prior_c_scale": self.prior_c_scale,
            "prior_n": self.prior_n,
            "burn_in": self.burn_in,
        }
        if self.prior_m is not None:
            out["prior_m"] = np.asarray(self.prior_m).tolist()
        if self.prior_S is not None:
            out["prior_S"] = np.asarray(self.prior_S).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        beta = d.pop("beta", 0.95)
        if isinstance(beta, list) and len(beta) == 1:
            beta = beta[0]
        for key in ("prior_m", "prior_S"):
            if d.get(key) is not None:
                d[key] = np.asarray(d[key], float)
        return cls(beta=beta, **d)


@dataclass
class PosteriorState:
    """Hyperparameters of ``(Theta_t, Sigma | D_t) ~ NW^{-1}_n[m, C, S]``."""

    m: np.ndarray
    C: np.ndarray
    S: np.ndarray
    n: float


@dataclass
class FilterStepDetail:
    f: np.ndarray
    e: np.ndarray
    Q: float
    A: np.ndarray
    R: np.ndarray
    W: np.ndarray


@dataclass
class PosteriorSequence:
    """All filtered states of one series; index 0 holds the prior."""

    m: np.ndarray   # (T+1, p, q)
    C: np.ndarray   # (T+1, p, p)
    S: np.ndarray   # (T+1, q, q)
    n: np.ndarray   # (T+1,)
    f: np.ndarray   # (T, q)
    e: np.ndarray   # (T, q)
    Q: np.ndarray   # (T,)
    A: np.ndarray   # (T, p)
    R: np.ndarray   # (T, p, p)
    W: np.ndarray   # (T, p, p)
    beta: np.ndarray
    burn_in: int

    @property
    def n_times(self) -> int:
        return self.Q.shape[0]

    def state(self, t: int) -> PosteriorState:
        return PosteriorState(self.m[t], self.C[t], self.S[t], float(self.n[t]))

    def detail(self, t: int) -> FilterStepDetail:
        i = t - 1
        return FilterStepDetail(self.f[i], self.e[i], float(self.Q[i]), self.A[i],
                                self.R[i], self.W[i])

    def as_batch(self) -> "PosteriorBatch":
        return PosteriorBatch(m=self.m[None], C=self.C, S=self.S[None], n=self.n,
                              A=self.A, beta=self.beta, burn_in=self.burn_in)


@dataclass
class PosteriorBatch:
    """Posterior sequences of ``B`` series sharing design and configuration.

    ``C``, ``n`` and the gains ``A`` are common to the whole batch; ``m`` and
    ``S`` carry a leading batch axis.
    """

    m: np.ndarray   # (B, T+1, p, d)
    C: np.ndarray   # (T+1, p, p)
    S: np.ndarray   # (B, T+1, d, d)
    n: np.ndarray   # (T+1,)
    A: np.ndarray | None   # (T, p) adaptive gains; absent for stored summaries
    beta: np.ndarray
    burn_in: int
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.m.shape[0]

    @property
    def n_times(self) -> int:
        return self.C.shape[0] - 1

    def select(self, idx) -> "PosteriorBatch":
        return PosteriorBatch(self.m[idx], self.C, self.S[idx], self.n, self.A,
                              self.beta, self.burn_in, dict(self.extra))


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def discount_covariance(C: np.ndarray, beta) -> tuple[np.ndarray, np.ndarray]:
    """System variance by discounting: ``R = B C B`` and ``W = R - C``.

    ``B = diag(beta_i^{-1/2})``.  Works on a single matrix or a stack.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if np.any(~np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta > 1.0):
        raise ParameterError(f"discount factors must lie in (0, 1], got {beta.tolist()}")
    C = np.asarray(C, dtype=float)
    b = 1.0 / np.sqrt(beta)
    R = symmetrize(C * b[:, None] * b[None, :])
    return R - C, R


def _check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite values in {what}")


def filter_step(state: PosteriorState, y, f_row, cfg: ModelConfig
                ) -> tuple[PosteriorState, FilterStepDetail]:
    """One conjugate update from ``t-1`` to ``t``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    F = np.asarray(f_row, dtype=float).reshape(-1)
    _check_finite(y, "observation")
    _check_finite(F, "regressor row")
    p, q = state.m.shape
    if F.size != p or y.size != q:
        raise DataError(f"shape mismatch: state {p}x{q}, regressors {F.size}, observation {y.size}")

    W, R = discount_covariance(state.C, cfg.discounts(p))
    RF = R @ F
    Q = cfg.v_scale + F @ RF
    if not Q > Q_FLOOR:
        raise DegenerateForecastError(f"forecast scale {Q!r} below floor {Q_FLOOR}")
    A = RF / Q
    f = F @ state.m
    e = y - f
    n = state.n + 1.0
    new = PosteriorState(
        m=state.m + np.outer(A, e),
        C=symmetrize(R - np.outer(A, A) * Q),
        S=symmetrize((state.n * state.S + np.outer(e, e) / Q) / n),
        n=n,
    )
    return new, FilterStepDetail(f=f, e=e, Q=float(Q), A=A, R=R, W=W)


def _as_design_values(design) -> np.ndarray:
    values = getattr(design, "values", design)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return values


def run_filter(series, design, cfg: ModelConfig) -> PosteriorSequence:
    """Filter a ``T x q`` series against a ``T x p`` design, step by step."""
    Y = np.asarray(series, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    F = _as_design_values(design)
    if Y.shape[0] != F.shape[0]:
        raise DataError(f"series has {Y.shape[0]} times but design has {F.shape[0]}")
    T, q = Y.shape
    p = F.shape[1]

    state = cfg.initial_state(p, q)
    m = np.empty((T + 1, p, q)); C = np.empty((T + 1, p, p)); S = np.empty((T + 1, q, q))
    n = np.empty(T + 1)
    fs = np.empty((T, q)); es = np.empty((T, q)); Qs = np.empty(T); As = np.empty((T, p))
    Rs = np.empty((T, p, p)); Ws = np.empty((T, p, p))
    m[0], C[0], S[0], n[0] = state.m, state.C, state.S, state.n
    for t in range(1, T + 1):
        try:
            state, det = filter_step(state, Y[t - 1], F[t - 1], cfg)
        except (DataError, NumericalError) as exc:
            raise type(exc)(f"t={t}: {exc}") from exc
        m[t], C[t], S[t], n[t] = state.m, state.C, state.S, state.n
        fs[t - 1], es[t - 1], Qs[t - 1], As[t - 1] = det.f, det.e, det.Q, det.A
        Rs[t - 1], Ws[t - 1] = det.R, det.W
    return PosteriorSequence(m, C, S, n, fs, es, Qs, As, Rs, Ws,
                             beta=cfg.discounts(p), burn_in=cfg.burn_in)


def filter_gains(design, cfg: ModelConfig) -> dict:
    """Data-independent part of the recursion: ``C``, ``R``, ``W``, ``Q`` and ``A``."""
    F = _as_design_values(design)
    _check_finite(F, "design")
    T, p = F.shape
    beta = cfg.discounts(p)
    C = np.empty((T + 1, p, p)); R = np.empty((T, p, p)); W = np.empty((T, p, p))
    Q = np.empty(T); A = np.empty((T, p))
    C[0] = cfg.prior_c_scale * np.eye(p)
    for t in range(1, T + 1):
        Wt, Rt = discount_covariance(C[t - 1], beta)
        RF = Rt @ F[t - 1]
        Qt = cfg.v_scale + F[t - 1] @ RF
        if not Qt > Q_FLOOR:
            raise DegenerateForecastError(f"t={t}: forecast scale {Qt!r} below floor {Q_FLOOR}")
        A[t - 1] = RF / Qt
        C[t] = symmetrize(Rt - np.outer(A[t - 1], A[t - 1]) * Qt)
        R[t - 1], W[t - 1], Q[t - 1] = Rt, Wt, Qt
    n = cfg.prior_n + np.arange(T + 1, dtype=float)
    return {"C": C, "R": R, "W": W, "Q": Q, "A": A, "n": n, "beta": beta}


def filter_means(series, design, gains: dict, m0, start: int = 0,
                 time_major: bool = False) -> np.ndarray:
    """Run only the location recursion ``m_t = m_{t-1} + A_t e_t``.

    ``series`` has shape ``(..., T, d)`` (or ``(T, ..., d)`` with
    ``time_major``) and ``m0`` shape ``(p, d)``.  Returns the means for
    ``t = start..T`` as ``(..., T+1-start, p, d)``.  Used to re-filter
    synthetic series, whose gains coincide with those of the real-data filter.
    """
    Y = np.asarray(series, dtype=float)
    if not time_major:
        Y = np.moveaxis(Y, -2, 0)
    F = _as_design_values(design)
    A = gains["A"]
    T, p = F.shape
    lead = Y.shape[1:-1]
    d = Y.shape[-1]
    out = np.empty((T + 1 - start,) + lead + (p, d))
    m = np.broadcast_to(np.asarray(m0, float), lead + (p, d)).copy()
    if start == 0:
        out[0] = m
    if p == 1:
        m1 = m[..., 0, :]
        for t in range(T):
            e = Y[t] - F[t, 0] * m1
            e *= A[t, 0]
            m1 += e
            if t + 1 >= start:
                out[t + 1 - start, ..., 0, :] = m1
    else:
        for t in range(T):
            e = Y[t] - np.einsum("j,...jd->...d", F[t], m)
            m += A[t][:, None] * e[..., None, :]
            if t + 1 >= start:
                out[t + 1 - start] = m
    return np.moveaxis(out, 0, -3)


def filter_batch(series, design, cfg: ModelConfig, gains: dict | None = None) -> PosteriorBatch:
    """Vectorized filter for ``B`` series of shape ``(B, T, q)`` sharing one design.

    Produces the same numbers as :func:`run_filter` applied to each series.
    """
    Y = np.asarray(series, dtype=float)
    if Y.ndim == 2:
        Y = Y[None]
    _check_finite(Y, "series")
    F = _as_design_values(design)
    B, T, q = Y.shape
    if T != F.shape[0]:
        raise DataError(f"series has {T} times but design has {F.shape[0]}")
    p = F.shape[1]
    if gains is None:
        gains = filter_gains(F, cfg)
    init = cfg.initial_state(p, q)
    m = np.empty((B, T + 1, p, q))
    S = np.empty((B, T + 1, q, q))
    m[:, 0] = init.m
    S[:, 0] = init.S
    n = gains["n"]
    mt = m[:, 0].copy()
    St = S[:, 0].copy()
    for t in range(T):
        e = Y[:, t, :] - np.einsum("j,bjd->bd", F[t], mt)
        mt = mt + gains["A"][t][:, None] * e[:, None, :]
        St = (n[t] * St + e[:, :, None] * e[:, None, :] / gains["Q"][t]) / n[t + 1]
        St = symmetrize(St)
        m[:, t + 1] = mt
        S[:, t + 1] = St
    return PosteriorBatch(m=m, C=gains["C"], S=S, n=n, A=gains["A"], beta=gains["beta"],
                          burn_in=cfg.burn_in, extra={"Q": gains["Q"]})


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def sample_matrix_normal(M, U, V, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``X = M + L_U Z L_V'`` so that ``vec(X) ~ N(vec(M), V kron U)``."""
    M = np.asarray(M, dtype=float)
    LU = chol_factor(U)
    LV = chol_factor(V)
    shape = M.shape if size is None else tuple(np.atleast_1d(size)) + M.shape
    Z = rng.standard_normal(shape)
    return M + LU @ Z @ LV.T


def _check_spd(S: np.ndarray):
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ParameterError(f"scale matrix must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)) or not np.allclose(S, S.T, rtol=1e-8, atol=1e-12):
        raise ParameterError("scale matrix must be finite and symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ParameterError("scale matrix is not positive definite") from None


def sample_inverse_wishart(n: float, S, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``Sigma ~ W^{-1}_n(S)``.

    Parameterized as a standard inverse Wishart with ``n + q - 1`` degrees of
    freedom and scale ``n S``, so the draws concentrate on ``S`` as ``n``
    grows (mean ``n S / (n - 2)`` for ``n > 2``).  Uses the Bartlett
    decomposition of the corresponding Wishart precision.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not (np.isfinite(n) and n > 0):
        raise ParameterError(f"degrees of freedom must be positive, got {n!r}")
    _check_spd(S)
    q = S.shape[0]
    dof = n + q - 1.0
    lead = () if size is None else tuple(np.atleast_1d(size))

    # precision ~ Wishart(dof, (n S)^{-1}) = L A A' L'
    L = np.linalg.cholesky(np.linalg.inv(n * S))
    chi = rng.chisquare(dof - np.arange(q), size=lead + (q,))
    A = np.zeros(lead + (q, q))
    idx = np.arange(q)
    A[..., idx, idx] = np.sqrt(chi)
    rows, cols = np.tril_indices(q, -1)
    if rows.size:
        A[..., rows, cols] = rng.standard_normal(lead + (rows.size,))
    LA = L @ A
    LA_inv = np.linalg.inv(LA)
    return symmetrize(np.swapaxes(LA_inv, -1, -2) @ LA_inv)

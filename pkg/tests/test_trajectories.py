"""Effect projections, the three trajectory samplers and Monte Carlo evidence."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdlm.dlm import ModelConfig, PosteriorState, filter_batch, run_filter
from mvdlm.errors import ConfigurationError, DataError, ParameterError
from mvdlm.trajectories import (
    EffectKind,
    EffectTrajectory,
    contrast_evidence,
    effect_projection,
    evidence,
    fest_draw,
    ffbs_draw,
    fsts_draw,
    kron_vec_cov,
    parse_algorithm,
    positive_fraction,
    projection_matrix,
    sample_batch,
    sample_trajectories,
)

from conftest import block_regressor


def random_state(rng, p=3, q=5):
    A = rng.normal(size=(p, p))
    B = rng.normal(size=(q, q))
    return PosteriorState(rng.normal(size=(p, q)), A @ A.T + np.eye(p), B @ B.T + np.eye(q), 7.0)


def smoother_oracle(f, y, beta, c0=100.0):
    """Posterior mean of theta_0..theta_T given y by direct Gaussian conditioning."""
    T = len(f)
    C = np.empty(T + 1)
    C[0] = c0
    W = np.zeros(T + 1)
    for t in range(1, T + 1):
        R = C[t - 1] / beta
        W[t] = R - C[t - 1]
        Q = 1.0 + f[t - 1] ** 2 * R
        C[t] = R - (f[t - 1] * R) ** 2 / Q
    cum = c0 + np.cumsum(W)                     # var(theta_t) under the prior
    cov_tt = np.minimum.outer(cum, cum)         # cov(theta_s, theta_t)
    H = np.zeros((T, T + 1))
    H[np.arange(T), np.arange(1, T + 1)] = f
    cov_ty = cov_tt @ H.T
    cov_yy = H @ cov_tt @ H.T + np.eye(T)
    return cov_ty @ np.linalg.solve(cov_yy, y)


class TestProjection:
    def test_projection_matrices(self):
        np.testing.assert_array_equal(projection_matrix("marginal", 3)[:, 0], [1, 0, 0])
        np.testing.assert_allclose(projection_matrix("average", 4), np.full((4, 1), 0.25))
        np.testing.assert_array_equal(projection_matrix("joint", 2), np.eye(2))

    def test_reductions_of_joint(self, rng):
        for _ in range(100):
            st_ = random_state(rng)
            for l in range(3):
                joint = effect_projection(st_, l, "joint")
                marg = effect_projection(st_, l, "marginal")
                avg = effect_projection(st_, l, "average")
                e1 = np.eye(5)[0]
                w = np.full(5, 0.2)
                assert marg.mean == pytest.approx(e1 @ joint.mean, abs=1e-12)
                assert marg.scale == pytest.approx(e1 @ joint.scale @ e1, abs=1e-12)
                assert avg.mean == pytest.approx(w @ joint.mean, abs=1e-12)
                assert avg.scale == pytest.approx(w @ joint.scale @ w, abs=1e-12)

    def test_bad_task(self, rng):
        with pytest.raises(ParameterError):
            effect_projection(random_state(rng), 3, "joint")

    def test_kind_aliases(self):
        assert EffectKind.parse("ACE") is EffectKind.AVERAGE
        assert parse_algorithm("FETS") == "fest"
        with pytest.raises(ConfigurationError):
            EffectKind.parse("median")
        with pytest.raises(ConfigurationError):
            parse_algorithm("gibbs")

    def test_kron_ordering(self, rng):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        C = np.array([[1.0, 0.5], [0.5, 3.0]])
        X = rng.normal(size=(40_000, 2, 2))
        X = np.linalg.cholesky(C) @ X @ np.linalg.cholesky(S).T
        vec = np.swapaxes(X, 1, 2).reshape(-1, 4)  # column stacking
        np.testing.assert_allclose(np.cov(vec.T), kron_vec_cov(S, C), rtol=0.05, atol=0.04)


class TestFFBS:
    def test_matches_smoother(self, rng):
        T, beta = 5, 0.9
        f = np.array([1.0, 0.5, -0.3, 1.2, 0.8])
        y = np.array([0.9, 0.1, -0.4, 1.5, 0.2])
        cfg = ModelConfig(beta=beta, burn_in=1)
        post = run_filter(y, f, cfg)
        draws = sample_trajectories(post, "ffbs", "marginal", 10_000, rng)[:, 0, :, 0]
        oracle = smoother_oracle(f, y, beta)[1:]
        se = draws.std(axis=0) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - oracle) < 3 * se)

    def test_final_time_is_filtered_posterior(self, rng):
        y = rng.normal(size=40) + 1.0
        cfg = ModelConfig(beta=0.95, burn_in=1)
        post = run_filter(y, np.ones(40), cfg)
        x = sample_trajectories(post, "ffbs", "marginal", 10_000, rng)[:, 0, -1, 0]
        n, S, C, m = post.n[-1], post.S[-1, 0, 0], post.C[-1, 0, 0], post.m[-1, 0, 0]
        var = C * S * n / (n - 2)
        assert abs(x.mean() - m) < 3 * np.sqrt(var / x.size)
        assert x.var() == pytest.approx(var, rel=0.06)

    def test_static_model_paths_are_constant(self, rng):
        post = run_filter(rng.normal(size=30), np.ones(30), ModelConfig(beta=1.0, burn_in=1))
        x = sample_trajectories(post, "ffbs", "average", 50, rng)
        np.testing.assert_allclose(x, np.broadcast_to(x[..., -1:, :], x.shape), atol=1e-9)


class TestFSTS:
    def test_moments(self, rng):
        T = 30
        y = rng.normal(size=T)
        cfg = ModelConfig(beta=0.9, burn_in=5)
        post = run_filter(y, np.ones(T), cfg)
        x = sample_trajectories(post, "fsts", "marginal", 20_000, rng)[:, 0, :, 0]
        t = np.arange(5, T + 1)
        mean = post.m[t - 1, 0, 0]
        var = post.C[t - 1, 0, 0] * post.S[t - 1, 0, 0] + post.W[t - 1, 0, 0] * post.S[t, 0, 0]
        assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * np.sqrt(var / x.shape[0]))
        np.testing.assert_allclose(x.var(axis=0), var, rtol=0.06)

    def test_joint_cross_covariance(self, rng):
        Y = rng.normal(size=(25, 2))
        post = run_filter(Y, np.ones(25), ModelConfig(beta=1.0, burn_in=25))
        x = sample_trajectories(post, "fsts", "joint", 40_000, rng)[:, 0, 0, :]
        S = post.S[24]
        np.testing.assert_allclose(np.cov(x.T), post.C[24, 0, 0] * S, rtol=0.06, atol=1e-4)


class TestFEST:
    def test_mean_is_refiltered_mean_series(self, rng, block_design):
        cfg = ModelConfig(beta=0.95, burn_in=10)
        F = block_design.values
        y = 2.0 * F[:, 0] + rng.normal(size=F.shape[0])
        post = run_filter(y, F, cfg)
        x = sample_trajectories(post, "fest", "marginal", 4000, rng, block_design, cfg)[:, 0, :, 0]
        fitted = np.einsum("tj,tj->t", F, post.m[1:, :, 0])
        oracle = run_filter(fitted, F, cfg).m[10:, 0, 0]
        se = x.std(axis=0) / np.sqrt(x.shape[0])
        assert np.all(np.abs(x.mean(axis=0) - oracle) < 4.5 * se)

    def test_needs_design(self, rng, block_design, cfg):
        post = run_filter(rng.normal(size=120), block_design, cfg)
        with pytest.raises(ConfigurationError):
            sample_trajectories(post, "fest", "marginal", 5, rng)

    def test_strong_activation_positive(self, rng):
        design = block_regressor(200)
        y = 5.0 * design.values[:, 0] + rng.normal(size=200)
        cfg = ModelConfig()
        post = run_filter(y, design, cfg)
        x = sample_trajectories(post, "fest", "marginal", 1000, rng, design, cfg)
        assert np.mean(x > 0) >= 0.99


class TestBatching:
    @pytest.mark.parametrize("algorithm", ["fest", "fsts", "ffbs"])
    @pytest.mark.parametrize("kind", ["marginal", "average", "joint"])
    def test_batch_equals_single(self, rng, two_task_design, cfg, algorithm, kind):
        Y = rng.normal(size=(3, two_task_design.n_scans, 3))
        batch = filter_batch(Y, two_task_design, cfg)
        rngs = [np.random.default_rng([5, i]) for i in range(3)]
        together = sample_batch(batch, algorithm, kind, 20, rngs, two_task_design, cfg)
        d = 3 if kind == "joint" else 1
        assert together.shape == (3, 20, 2, two_task_design.n_scans - cfg.burn_in + 1, d)
        for b in range(3):
            alone = sample_batch(batch.select([b]), algorithm, kind, 20,
                                 [np.random.default_rng([5, b])], two_task_design, cfg)
            np.testing.assert_allclose(alone[0], together[b], rtol=1e-12, atol=1e-12)

    def test_single_draw_helpers(self, rng, two_task_design, cfg):
        post = run_filter(rng.normal(size=(two_task_design.n_scans, 2)), two_task_design, cfg)
        n_ret = two_task_design.n_scans - cfg.burn_in + 1
        for traj in (fest_draw(post, two_task_design, cfg, 1, "joint", rng),
                     fsts_draw(post, cfg, 0, "average", rng),
                     ffbs_draw(post, cfg, 1, "marginal", rng)):
            assert isinstance(traj, EffectTrajectory)
            assert traj.values.shape[0] == n_ret
        with pytest.raises(ParameterError):
            fsts_draw(post, cfg, 2, "average", rng)

    def test_burn_in_longer_than_series(self, rng):
        post = run_filter(rng.normal(size=8), np.ones(8), ModelConfig(burn_in=9))
        with pytest.raises(ConfigurationError):
            sample_trajectories(post, "fsts", "marginal", 3, rng)


class TestEvidence:
    def test_all_positive(self):
        assert evidence(np.ones((10, 5))).probability == 1.0

    def test_half(self):
        x = np.ones((10, 5))
        x[:5, 2] = -1.0
        assert evidence(x).probability == 0.5

    def test_zero_is_not_positive(self):
        x = np.ones((4, 5))
        x[0, 3] = 0.0
        assert evidence(x).probability == 0.75

    def test_from_trajectories(self):
        trajs = [EffectTrajectory(np.full((6, 2), s), 0, "ffbs", EffectKind.JOINT)
                 for s in (1.0, 1.0, -1.0, 1.0)]
        res = evidence(trajs)
        assert res.probability == 0.75 and res.n_draws == 4 and res.algorithm == "ffbs"

    def test_empty(self):
        with pytest.raises(DataError):
            evidence([])
        with pytest.raises(DataError):
            evidence(np.empty((0, 3)))

    def test_contrast(self, rng):
        a = rng.normal(size=(50, 8))
        assert contrast_evidence(a, a).probability == 0.0
        assert contrast_evidence(a + 10.0, a).probability == 1.0
        with pytest.raises(DataError):
            contrast_evidence(a, a[:, :4])

    def test_task_contrast_end_to_end(self, rng, two_task_design):
        F = two_task_design.values
        T = F.shape[0]
        y = 5.0 * F[:, 0] + rng.normal(size=T)
        cfg = ModelConfig(burn_in=30)
        post = run_filter(y, F, cfg)
        x = sample_trajectories(post, "fest", "marginal", 1000, rng, two_task_design, cfg)
        assert contrast_evidence(x[:, 0], x[:, 1]).probability > 0.95


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), cut=st.integers(1, 9))
def test_evidence_monotone_in_prefix(seed, cut):
    x = np.random.default_rng(seed).normal(0.5, 1.0, size=(200, 10))
    assert evidence(x[:, :cut]).probability >= evidence(x).probability
    p = positive_fraction(x[:, :, None])
    assert 0.0 <= p <= 1.0

"""Optimizer oracles: scalar transcription, MC unbiasedness, composition.

The scalar update is checked line by line against an independent
plain-float reimplementation; the curvature estimator is checked for
unbiasedness on a quadratic with known curvature; the full client
update is checked against a manual composition of its pieces.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedivon.ivon import (
    IvonConfig,
    IvonState,
    PriorSpec,
    VariationalPosterior,
    client_update,
    hessian_estimate,
    ivon_step,
    load_posterior,
    per_sample_sq_grad_mean,
    personalized_client_update,
    posterior_from_record,
    posterior_to_record,
    sample_theta,
    save_posterior,
    sigma_sq,
    von_step,
    vogn_step,
)
from fedivon.nn import Batch, ModelSpec, init_params, loss_and_grad, param_count


def make_state(m, h, g=0.0, step=0, **cfg_kwargs):
    cfg = IvonConfig(**cfg_kwargs)
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    ess = cfg.ess if cfg.ess is not None else 100.0
    post = VariationalPosterior(m, h, ess, cfg.weight_decay)
    return IvonState(post, np.full_like(m, g), step, cfg)


class TestSigmaSq:
    def test_direct_substitution(self):
        post = VariationalPosterior(np.zeros(1), np.array([0.9]), 100.0, 0.1)
        np.testing.assert_allclose(sigma_sq(post), 0.01, atol=1e-15)

    def test_monotone_decreasing_in_h(self):
        hs = np.linspace(0.0, 50.0, 200)
        post = VariationalPosterior(np.zeros(200), hs, 10.0, 0.5)
        values = sigma_sq(post)
        assert np.all(np.diff(values) < 0)

    def test_published_hyperparameter_values(self):
        # ess 5000, weight decay 2e-4, curvature 2.0.
        post = VariationalPosterior(np.zeros(1), np.array([2.0]), 5000.0, 2e-4)
        np.testing.assert_allclose(sigma_sq(post), 1.0 / (5000.0 * 2.0002), rtol=1e-15)


class TestSampleTheta:
    def test_degenerate_posterior_returns_mean(self):
        post = VariationalPosterior(np.array([1.5, -2.0]), np.array([1e14, 1e14]), 1e6, 1.0)
        theta = sample_theta(post, 0)
        np.testing.assert_allclose(theta, post.mean, atol=1e-6)

    def test_sample_mean_unbiased(self):
        post = VariationalPosterior(np.array([0.7]), np.array([0.9]), 100.0, 0.1)
        rng = np.random.default_rng(13)
        n = 100_000
        draws = np.array([sample_theta(post, rng)[0] for _ in range(n)])
        se = np.sqrt(sigma_sq(post)[0] / n)
        assert abs(draws.mean() - 0.7) < 4 * se

    def test_same_stream_state_identical(self):
        post = VariationalPosterior(np.zeros(4), np.ones(4), 50.0, 0.2)
        a = sample_theta(post, np.random.default_rng(999))
        b = sample_theta(post, np.random.default_rng(999))
        assert np.array_equal(a, b)


class TestHessianEstimate:
    def test_zero_displacement(self):
        post = VariationalPosterior(np.array([1.0, 2.0]), np.ones(2), 10.0, 0.1)
        est = hessian_estimate(np.array([3.0, -1.0]), post.mean.copy(), post)
        np.testing.assert_array_equal(est, 0.0)

    def test_zero_gradient(self):
        post = VariationalPosterior(np.zeros(2), np.ones(2), 10.0, 0.1)
        theta = sample_theta(post, 1)
        np.testing.assert_array_equal(hessian_estimate(np.zeros(2), theta, post), 0.0)

    def test_unbiased_on_quadratic(self):
        # loss(theta) = 0.5 * a * theta^2 has gradient a * theta and
        # curvature a; the estimator must average to a.
        a = 2.5
        post = VariationalPosterior(np.array([0.4]), np.array([1.2]), 50.0, 0.1)
        rng = np.random.default_rng(7)
        n = 100_000
        total = 0.0
        for _ in range(n):
            theta = sample_theta(post, rng)
            total += hessian_estimate(a * theta, theta, post)[0]
        assert abs(total / n - a) / a < 0.05


class TestIvonStep:
    def test_zero_everything_fixed_mean(self):
        state = make_state(0.0, 1.0, weight_decay=0.1)
        new = ivon_step(state, np.zeros(1), np.zeros(1), 0.05)
        assert new.posterior.mean[0] == 0.0
        # With hhat = 0 the curvature decays through the averaged update
        # plus its second-order correction, staying positive.
        assert 0.0 < new.posterior.hessian[0] < 1.0
        assert new.step == 1

    def test_scalar_transcription(self):
        state = make_state(1.0, 1.0, g=0.0, step=0, beta1=0.9, beta2=0.99999,
                           weight_decay=0.1, ess=100.0)
        new = ivon_step(state, np.array([0.5]), np.array([0.2]), 0.1)
        # Independent plain-float transcription of the update sequence.
        b1, b2, d, lr = 0.9, 0.99999, 0.1, 0.1
        m, h, g, e = 1.0, 1.0, 0.0, 0
        ghat, hhat = 0.5, 0.2
        g = b1 * g + (1 - b1) * ghat
        h_new = b2 * h + (1 - b2) * hhat + 0.5 * (1 - b2) ** 2 * (h - hhat) ** 2 / (h + d)
        h_new = max(h_new, 0.0)
        e += 1
        gbar = g / (1 - b1**e)
        m_new = m - lr * (gbar + d * m) / (h_new + d)
        assert new.posterior.mean[0] == m_new
        assert new.posterior.hessian[0] == h_new
        assert new.momentum[0] == g
        assert new.step == e

    def test_hessian_clamped_nonnegative(self):
        state = make_state(0.0, 0.001, beta2=0.5, weight_decay=0.01)
        new = ivon_step(state, np.zeros(1), np.array([-50.0]), 0.01)
        assert new.posterior.hessian[0] >= 0.0

    @given(
        st.floats(-3, 3), st.floats(0, 5), st.floats(-2, 2),
        st.floats(-4, 4), st.floats(-4, 4), st.integers(0, 50),
    )
    @settings(max_examples=60, deadline=None)
    def test_h_stays_nonnegative(self, m, h, g, ghat, hhat, step):
        state = make_state(m, h, g=g, step=step, beta1=0.9, beta2=0.95, weight_decay=0.1)
        new = ivon_step(state, np.array([ghat]), np.array([hhat]), 0.1)
        assert new.posterior.hessian[0] >= 0.0

    def test_first_step_debias_recovers_gradient(self):
        # With zero momentum, the debiased average after step one equals
        # the raw gradient, so the update matches a direct Newton step.
        state = make_state(0.5, 2.0, g=0.0, step=0, beta1=0.9, weight_decay=0.1)
        ghat = np.array([0.75])
        new = ivon_step(state, ghat, np.zeros(1), 0.2)
        h_new = new.posterior.hessian[0]
        expected = 0.5 - 0.2 * (0.75 + 0.1 * 0.5) / (h_new + 0.1)
        assert new.posterior.mean[0] == expected

    def test_fixed_point_under_expected_loss(self):
        # At the stationary point (gradient 0, hhat equal to h) the state
        # does not move.
        state = make_state(0.0, 1.7, g=0.0, step=3, weight_decay=0.1)
        new = ivon_step(state, np.zeros(1), np.array([1.7]), 0.1)
        assert new.posterior.mean[0] == 0.0
        assert new.posterior.hessian[0] == pytest.approx(1.7, abs=1e-15)

    def test_nonfinite_update_names_coordinate(self):
        state = make_state([0.0, 0.0], [1.0, 1.0], weight_decay=0.1)
        with pytest.raises(FloatingPointError, match="coordinate 1"):
            ivon_step(state, np.array([0.0, np.inf]), np.zeros(2), 0.1)


class TestClientUpdate:
    def setup_method(self):
        self.spec = ModelSpec((2, 3))
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(12, 2))
        self.y = rng.integers(0, 3, size=12)
        self.init_mean = init_params(self.spec, 1)
        self.init_h = np.full(param_count(self.spec), 0.5)

    def test_zero_epochs_identity(self):
        cfg = IvonConfig(epochs=0)
        post = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 7)
        assert np.array_equal(post.mean, self.init_mean)
        assert np.array_equal(post.hessian, self.init_h)

    def test_single_full_batch_step_matches_manual_composition(self):
        cfg = IvonConfig(epochs=1, batch_size=len(self.y), ess=200.0, weight_decay=0.05)
        got = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 99)

        rng = np.random.default_rng(99)
        post = VariationalPosterior(self.init_mean.copy(), self.init_h.copy(), 200.0, 0.05)
        state = IvonState(post, np.zeros_like(self.init_mean), 0, cfg)
        order = rng.permutation(len(self.y))
        theta = sample_theta(state.posterior, rng)
        _, g_hat = loss_and_grad(self.spec, theta, Batch(self.x[order], self.y[order]))
        h_hat = hessian_estimate(g_hat, theta, state.posterior)
        manual = ivon_step(state, g_hat, h_hat, cfg.lr_initial).posterior
        assert np.array_equal(got.mean, manual.mean)
        assert np.array_equal(got.hessian, manual.hessian)

    def test_deterministic(self):
        cfg = IvonConfig(epochs=2, batch_size=5)
        a = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 3)
        b = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 3)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.hessian, b.hessian)

    def test_empty_dataset_rejected(self):
        cfg = IvonConfig()
        with pytest.raises(ValueError, match="empty"):
            client_update(np.zeros((0, 2)), np.zeros(0, dtype=int), self.spec,
                          self.init_mean, self.init_h, cfg, 0)

    def test_ess_defaults_to_dataset_size(self):
        cfg = IvonConfig(epochs=0, ess=None)
        post = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 0)
        assert post.ess == float(len(self.y))

    def test_mc_averaging_runs(self):
        cfg = IvonConfig(epochs=1, batch_size=6, train_mc_samples=3)
        post = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 5)
        assert np.all(post.hessian >= 0)


class TestPersonalizedUpdate:
    def setup_method(self):
        self.spec = ModelSpec((2, 3))
        rng = np.random.default_rng(4)
        self.x = rng.normal(size=(10, 2))
        self.y = rng.integers(0, 3, size=10)
        self.p = param_count(self.spec)
        self.init_mean = init_params(self.spec, 2)
        self.init_h = np.full(self.p, 1.0)

    def test_zero_prior_beta_one_reduces_to_client_update(self):
        cfg = IvonConfig(epochs=2, batch_size=4, ess=150.0)
        prior = PriorSpec(np.zeros(self.p), np.zeros(self.p), beta=1.0)
        a = personalized_client_update(self.x, self.y, self.spec, self.init_mean,
                                       self.init_h, prior, cfg, 11)
        b = client_update(self.x, self.y, self.spec, self.init_mean, self.init_h, cfg, 11)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.hessian, b.hessian)

    def test_beta_zero_removes_regularization(self):
        cfg = IvonConfig(epochs=1, batch_size=10)
        prior = PriorSpec(np.full(self.p, 100.0), np.full(self.p, 5.0), beta=0.0)
        post = personalized_client_update(self.x, self.y, self.spec, self.init_mean,
                                          self.init_h, prior, cfg, 8)
        # The effective decay vanished, so sigma^2 = 1 / (ess * h) alone.
        np.testing.assert_array_equal(np.asarray(post.weight_decay), 0.0)
        np.testing.assert_allclose(sigma_sq(post), 1.0 / (post.ess * post.hessian))

    def test_huge_beta_pins_mean_to_prior(self):
        cfg = IvonConfig(epochs=5, batch_size=4, ess=100.0, lr_initial=0.05, lr_final=0.01)
        anchor = init_params(self.spec, 77) * 0.2
        prior = PriorSpec(anchor, np.full(self.p, 1.0), beta=1e6)
        post = personalized_client_update(self.x[:4], self.y[:4], self.spec, anchor.copy(),
                                          self.init_h, prior, cfg, 21)
        assert np.linalg.norm(post.mean - anchor) < 1e-3


class TestReferenceOptimizers:
    def test_vogn_curvature_nonnegative(self):
        spec = ModelSpec((3, 4, 2))
        rng = np.random.default_rng(0)
        theta = init_params(spec, 3)
        batch = Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, size=6))
        sq = per_sample_sq_grad_mean(spec, theta, batch)
        assert np.all(sq >= 0.0)

    def test_vogn_zero_gradient_moves_only_by_decay(self):
        mean = np.array([0.8])
        m_new, h_new = vogn_step(mean, np.array([2.0]), np.zeros(1), np.zeros(1), 0.1, 0.05)
        expected = 0.8 - 0.1 * (0.05 * 0.8) / (h_new[0] + 0.05)
        assert m_new[0] == expected

    def test_von_and_ivon_share_quadratic_optimum(self):
        # loss = 0.5 * a * (theta - c)^2; the decay-regularized optimum is
        # a * c / (a + wd) for both methods.
        a, c, wd = 2.0, 1.0, 0.1
        target = a * c / (a + wd)

        m, h = np.array([0.0]), np.array([1.0])
        for _ in range(4000):
            grad = a * (m - c)
            m, h = von_step(m, h, grad, np.array([a]), 0.01, wd)
        assert abs(m[0] - target) < 1e-3

        cfg = IvonConfig(beta1=0.9, beta2=0.999, weight_decay=wd, ess=5000.0,
                         lr_initial=0.05, lr_final=1e-5)
        post = VariationalPosterior(np.array([0.0]), np.array([1.0]), 5000.0, wd)
        state = IvonState(post, np.zeros(1), 0, cfg)
        rng = np.random.default_rng(5)
        n = 4000
        lrs = np.linspace(0.05, 1e-5, n)
        for t in range(n):
            theta = sample_theta(state.posterior, rng)
            grad = a * (theta - c)
            h_hat = hessian_estimate(grad, theta, state.posterior)
            state = ivon_step(state, grad, h_hat, float(lrs[t]))
        assert abs(state.posterior.mean[0] - target) < 1e-3

    def test_von_surfaces_negative_curvature(self):
        _, h_new = von_step(np.zeros(1), np.array([0.1]), np.zeros(1), np.array([-5.0]), 0.5, 0.01)
        assert h_new[0] < 0.0


class TestSerialization:
    def test_record_round_trip(self):
        post = VariationalPosterior(np.array([1.0, -2.0]), np.array([0.5, 3.0]), 42.0, 0.01)
        back = posterior_from_record(posterior_to_record(post))
        assert np.array_equal(back.mean, post.mean)
        assert np.array_equal(back.hessian, post.hessian)
        assert back.ess == post.ess and back.weight_decay == post.weight_decay

    def test_vector_weight_decay_round_trip(self, tmp_path):
        post = VariationalPosterior(np.zeros(3), np.ones(3), 10.0, np.array([0.1, 0.2, 0.3]))
        path = tmp_path / "post.json"
        save_posterior(path, post)
        back = load_posterior(path)
        assert np.array_equal(np.asarray(back.weight_decay), np.asarray(post.weight_decay))

    def test_length_mismatch_rejected(self):
        post = VariationalPosterior(np.zeros(2), np.ones(2), 1.0, 0.5)
        record = posterior_to_record(post)
        record["length"] = 3
        with pytest.raises(ValueError):
            posterior_from_record(record)

"""
test_vi_estimator.py
--------------------
Encoders, the three ELBO terms, block training and the gradient check.

Usage:
    pytest tests/test_vi_estimator.py -v
"""

import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import csv

import numpy as np
import pytest

from core.channel_sim import (
    detection_schedule,
    draw_channel,
    draw_frame,
    estimation_schedule,
    snr_db_to_noise_var,
)
from core.errors import DomainError, ShapeError
from core.math_core import GaussianPosterior, complex_normal, from_stacked, make_rng, value_and_grad
from core.vi_estimator import (
    H_PRIOR_VAR,
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    EncoderNet,
    VIConfig,
    assemble_channel,
    decision_directed_channel,
    elbo_gradcheck,
    elbo_loss,
    elbo_terms,
    encoder_forward,
    fit_block,
    has_converged,
    likelihood_weight,
    log_evidence,
    loss1,
    loss2,
    loss3_expected,
    loss3_mc,
    make_vi_state,
    reparam_sample,
    resolve_reference,
)


def channel_and_symbol_posteriors(rng, N, K, T=1, var_scale=0.5):
    """Random q(H) over 2NK dims and q(x) over 2K dims for T slots."""
    post_h = GaussianPosterior(rng.standard_normal((T, 2 * N * K)) * 0.7,
                               rng.uniform(0.05, var_scale, (T, 2 * N * K)))
    post_x = GaussianPosterior(rng.standard_normal((T, 2 * K)) * 0.7,
                               rng.uniform(0.05, var_scale, (T, 2 * K)))
    return post_h, post_x


# ══════════════════════════════════════════════
# ENCODERS
# ══════════════════════════════════════════════

class TestEncoder:

    def test_parameter_count(self):
        net = EncoderNet(8, 4, hidden_dim=16)
        assert net.n_params == (8 + 1) * 16 + (16 + 1) * 8
        assert net.params.shape == (net.n_params,)

    def test_wrong_parameter_vector(self):
        with pytest.raises(ShapeError):
            EncoderNet(4, 2, params=np.zeros(3))

    def test_forward_shapes_and_bounds(self, rng):
        net = EncoderNet.initialize(6, 4, rng, amplitude=3.0)
        post = encoder_forward(net, rng.standard_normal((5, 6)) * 50)
        assert post.mean.shape == (5, 4)
        assert np.all(np.abs(post.mean) <= 3.0)
        assert np.all(post.var >= np.exp(LOG_VAR_MIN) * (1 - 1e-12))
        assert np.all(post.var <= np.exp(LOG_VAR_MAX) * (1 + 1e-12))

    def test_zero_parameters_give_unit_variance(self, rng):
        post = encoder_forward(EncoderNet(4, 2), rng.standard_normal(4))
        assert np.allclose(post.mean, 0.0)
        assert np.allclose(post.var, 1.0)

    def test_input_dimension_checked(self, rng):
        with pytest.raises(ShapeError):
            encoder_forward(EncoderNet(4, 2), np.zeros(5))

    def test_initialization_is_seeded(self):
        a = EncoderNet.initialize(4, 2, make_rng(3))
        b = EncoderNet.initialize(4, 2, make_rng(3))
        assert np.array_equal(a.params, b.params)


# ══════════════════════════════════════════════
# KL TERMS
# ══════════════════════════════════════════════

class TestKLTerms:

    def test_loss1_worked_example(self):
        post = GaussianPosterior(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        assert loss1(post, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_loss1_zero_at_prior(self):
        rho2 = 2.0
        assert loss1(GaussianPosterior(np.zeros(6), np.full(6, rho2)), rho2) == pytest.approx(0.0, abs=1e-12)

    def test_loss2_zero_at_prior(self):
        post = GaussianPosterior(np.zeros(16), np.full(16, H_PRIOR_VAR))
        assert loss2(post) == pytest.approx(0.0, abs=1e-12)

    def test_loss2_single_entry(self):
        post = GaussianPosterior(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert loss2(post) == pytest.approx(1.0, abs=1e-12)

    def test_loss2_grows_with_mean(self):
        var = np.full(4, 0.3)
        values = [loss2(GaussianPosterior(np.full(4, a), var)) for a in (0.0, 0.5, 1.0, 2.0)]
        assert values == sorted(values)

    def test_nonnegative(self, rng, make_posterior):
        for _ in range(500):
            assert loss1(make_posterior(rng, 8), rng.uniform(0.2, 4.0)) >= 0.0
            assert loss2(make_posterior(rng, 32)) >= 0.0

    def test_rho2_must_be_positive(self):
        with pytest.raises(DomainError):
            loss1(GaussianPosterior(np.zeros(2), np.ones(2)), 0.0)

    @pytest.mark.parametrize("prior_var", [H_PRIOR_VAR, 1.0, 2.5])
    def test_differences_match_trace_form(self, rng, make_posterior, prior_var):
        """
        Up to a constant the KL is (tr S + m'm) / (2 p) - 1/2 sum log s,
        so differences between two posteriors agree exactly.
        """
        def trace_form(post):
            return (np.sum(post.var) + np.sum(post.mean ** 2)) / (2 * prior_var) - 0.5 * np.sum(np.log(post.var))

        def kl(post):
            return loss1(post, prior_var) if prior_var != H_PRIOR_VAR else loss2(post)

        for _ in range(20):
            a, b = make_posterior(rng, 8), make_posterior(rng, 8)
            assert kl(a) - kl(b) == pytest.approx(trace_form(a) - trace_form(b), abs=1e-10)


# ══════════════════════════════════════════════
# RECONSTRUCTION TERM
# ══════════════════════════════════════════════

class TestReconstruction:

    def test_weight_modes(self):
        assert likelihood_weight(0.1) == pytest.approx(5.0)
        assert likelihood_weight(0.1, "unit") == 1.0
        assert likelihood_weight(0.0) == pytest.approx(500.0)
        assert likelihood_weight(0.1, sigma2_model=0.25) == pytest.approx(2.0)

    def test_reparam_with_zero_noise_is_mean(self, rng, make_posterior):
        post = make_posterior(rng, 6)
        assert np.array_equal(reparam_sample(post, noise=np.zeros(6)), post.mean)
        assert reparam_sample(post, rng, n_samples=4).shape == (4, 6)

    def test_reparam_pinned_noise(self, rng, make_posterior):
        post = make_posterior(rng, 4)
        assert np.allclose(reparam_sample(post, noise=np.ones(4)), post.mean + np.sqrt(post.var))

    def test_reparam_sample_moments(self, rng):
        post = GaussianPosterior(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
        draws = reparam_sample(post, rng, n_samples=100000)
        assert np.allclose(draws.mean(axis=0), post.mean, atol=0.02)
        assert np.allclose(draws.var(axis=0), post.var, rtol=0.03)

    def test_collapsed_channel_hand_expansion(self):
        """N = K = 1, H fixed at 1, m_x = 0: loss3 = s + |y|^2 unweighted."""
        post_h = GaussianPosterior(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
        post_x = GaussianPosterior(np.zeros((1, 2)), np.array([[0.3, 0.2]]))
        y = np.array([[0.6 - 0.8j]])
        got = loss3_mc(post_h, post_x, y, 0.1, 5, make_rng(0), weight=1.0)
        assert got == pytest.approx(0.5 + 1.0, rel=1e-12)

    def test_perfect_reconstruction_is_zero(self, rng, complex_vector):
        N, K = 3, 2
        H = complex_vector(rng, N, K)
        x = complex_vector(rng, K)
        post_h = GaussianPosterior(np.concatenate([H.real.ravel(), H.imag.ravel()])[None], np.zeros((1, 2 * N * K)))
        post_x = GaussianPosterior(np.concatenate([x.real, x.imag])[None], np.zeros((1, 2 * K)))
        assert loss3_mc(post_h, post_x, (H @ x)[None], 0.1, 3, rng) == pytest.approx(0.0, abs=1e-18)

    def test_frozen_noise_matches_complex_arithmetic(self, rng, complex_vector):
        """With zero base noise the channel sample is the mean."""
        N, K = 3, 2
        post_h, post_x = channel_and_symbol_posteriors(rng, N, K)
        y = complex_vector(rng, 1, N)
        got = loss3_mc(post_h, post_x, y, 0.1, 1, noise=np.zeros((1, 1, 2 * N * K)), weight=1.0)

        M = from_stacked(post_h.mean[0], (N, K))
        m = from_stacked(post_x.mean[0])
        s_c = post_x.var[0, :K] + post_x.var[0, K:]
        expected = np.sum(np.abs(M @ m - y[0]) ** 2) + np.sum(np.abs(M) ** 2 * s_c[None, :])
        assert got == pytest.approx(expected, rel=1e-12)

    def test_monte_carlo_matches_closed_form(self, rng, complex_vector):
        for _ in range(3):
            N, K = 4, 4
            post_h, post_x = channel_and_symbol_posteriors(rng, N, K)
            y = complex_vector(rng, 1, N)
            mc = loss3_mc(post_h, post_x, y, 0.1, 20000, rng, weight=1.0)
            exact = loss3_expected(post_h, post_x, y, weight=1.0)
            assert mc == pytest.approx(exact, rel=0.03)

    def test_weight_scales_linearly(self, rng, complex_vector):
        post_h, post_x = channel_and_symbol_posteriors(rng, 2, 2)
        y = complex_vector(rng, 1, 2)
        assert loss3_expected(post_h, post_x, y, weight=3.0) == pytest.approx(
            3.0 * loss3_expected(post_h, post_x, y, weight=1.0))

    def test_mask_silences_users(self, rng, complex_vector):
        N, K = 2, 2
        post_h, post_x = channel_and_symbol_posteriors(rng, N, K)
        y = complex_vector(rng, 1, N)
        mask = np.array([[True, False]])

        zeroed = GaussianPosterior(post_x.mean * [1, 0, 1, 0], post_x.var * [1, 0, 1, 0])
        assert loss3_expected(post_h, post_x, y, mask=mask) == pytest.approx(
            loss3_expected(post_h, zeroed, y))

    def test_needs_a_sample(self, rng, complex_vector):
        post_h, post_x = channel_and_symbol_posteriors(rng, 2, 2)
        with pytest.raises(DomainError):
            loss3_mc(post_h, post_x, complex_vector(rng, 1, 2), 0.1, 0, rng)

    def test_dimension_mismatch(self, rng, complex_vector):
        post_h, post_x = channel_and_symbol_posteriors(rng, 3, 2)
        with pytest.raises(ShapeError):
            loss3_expected(post_h, post_x, complex_vector(rng, 1, 2))


# ══════════════════════════════════════════════
# ELBO AND TRAINING
# ══════════════════════════════════════════════

class TestElbo:

    def test_loss_is_sum_of_terms(self, rng, complex_vector):
        state = make_vi_state(2, 2, rng)
        y = complex_vector(rng, 3, 2)
        noise = rng.standard_normal((4, 3, 8))
        terms = elbo_terms(state, y, 1.0, 0.1, noise=noise, L=4)
        assert elbo_loss(state, y, 1.0, 0.1, noise=noise, L=4) == pytest.approx(sum(terms))

    def test_gradient_matches_finite_differences(self):
        for i in range(3):
            assert elbo_gradcheck(2, 2, make_rng(99, i)) < 1e-4

    def test_finite_for_random_initialization(self, complex_vector):
        for seed in range(100):
            rng = make_rng(seed)
            state = make_vi_state(2, 2, rng)
            assert np.isfinite(elbo_loss(state, complex_vector(rng, 3, 2), 1.0, 0.1, rng))

    def test_adam_lowers_loss_on_noiseless_slot(self, qpsk):
        """200 steps on one noiseless slot, median change over 20 seeds."""
        N, K, steps = 2, 1, 200
        changes = []
        for seed in range(20):
            rng = make_rng(seed)
            h = draw_channel(N, K, rng).H
            y = (h @ qpsk.points[[seed % 4]])[None]          # 1 x N
            state = make_vi_state(N, K, rng)
            frozen = rng.standard_normal((state.mc_samples, 1, 2 * N * K))
            before = elbo_loss(state, y, 1.0, 0.0, noise=frozen)

            params = state.params
            for _ in range(steps):
                noise = rng.standard_normal((state.mc_samples, 1, 2 * N * K))
                _, g = value_and_grad(lambda p: elbo_loss(state, y, 1.0, 0.0, params=p, noise=noise),
                                      params)
                params = state.optimizer.step(params, g)
            state.set_params(params)
            changes.append(elbo_loss(state, y, 1.0, 0.0, noise=frozen) - before)
        assert np.median(changes) < 0.0

    def test_convergence_rule(self):
        assert not has_converged([1.0] * 39, 20, 1e-4)
        assert has_converged([1.0] * 40, 20, 1e-4)
        assert not has_converged([2.0] * 20 + [1.0] * 20, 20, 1e-4)

    def test_assemble_averages_active_slots(self):
        mean_h = np.zeros((4, 1, 2), dtype=complex)
        mean_h[:, 0, 0] = [1, 99, 3, 99]
        mean_h[:, 0, 1] = [99, 2j, 99, 4j]
        slots = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=bool)
        assert np.allclose(assemble_channel(mean_h, slots), [[2, 3j]])

    def test_decision_directed_recovers_noiseless_channel(self, rng, qpsk):
        H = draw_channel(4, 2, rng).H
        X = qpsk.points[rng.integers(0, 4, size=(2, 12))]
        assert np.allclose(decision_directed_channel(H @ X, X), H)


class TestFitBlock:

    @pytest.fixture
    def frame(self, rng, qpsk):
        H = draw_channel(2, 2, rng).H
        return draw_frame(H, estimation_schedule(2, 3), qpsk, snr_db_to_noise_var(15.0), rng)

    def test_outputs(self, frame, qpsk):
        est = fit_block(frame, qpsk, VIConfig(max_iters=30, report_samples=5), make_rng(1))
        assert est.H_hat.shape == (2, 2)
        assert est.x_hat.shape == (2, 6)
        assert np.all(est.x_hat[~frame.schedule.slots.T] == -1)
        assert np.all(est.x_hat[frame.schedule.slots.T] >= 0)
        assert est.iterations == len(est.loss_trace) <= 30
        assert len(est.components) == est.iterations
        assert np.isfinite(est.final_loss) and np.isfinite(est.final_loss_expected)

    def test_deterministic_under_seed(self, frame, qpsk):
        cfg = VIConfig(max_iters=20, report_samples=5)
        a = fit_block(frame, qpsk, cfg, make_rng(4))
        b = fit_block(frame, qpsk, cfg, make_rng(4))
        assert np.array_equal(a.H_hat, b.H_hat)
        assert a.loss_trace == b.loss_trace

    def test_training_lowers_the_loss(self, frame, qpsk):
        est = fit_block(frame, qpsk, VIConfig(max_iters=300, report_samples=5), make_rng(2))
        assert np.mean(est.loss_trace[-20:]) < np.mean(est.loss_trace[:20])

    def test_smoothed_trace_does_not_rise_on_noiseless_input(self, qpsk):
        rng = make_rng(8)
        H = draw_channel(1, 1, rng).H
        frame = draw_frame(H, estimation_schedule(1, 4), qpsk, 0.0, rng)
        est = fit_block(frame, qpsk, VIConfig(max_iters=200, report_samples=5), rng)
        smoothed = np.convolve(est.loss_trace, np.ones(20) / 20, mode="valid")
        assert np.all(np.diff(smoothed) <= 0.02 * abs(smoothed[0]))
        assert smoothed[-1] < smoothed[0]

    def test_noiseless_single_antenna_recovery(self, qpsk):
        """N = K = 1 without noise: the reference symbol pins the rotation, so h comes back exactly."""
        for seed in range(3):
            rng = make_rng(40 + seed)
            H = draw_channel(1, 1, rng).H
            frame = draw_frame(H, estimation_schedule(1, 4), qpsk, 0.0, rng, reference=True)
            cfg = VIConfig(max_iters=200, report_samples=5, reference_symbol=True)
            est = fit_block(frame, qpsk, cfg, rng)
            assert np.mean(np.abs(est.H_hat - H) ** 2) < 1e-3

    def test_decision_directed_assembly(self, frame, qpsk):
        cfg = VIConfig(max_iters=20, report_samples=5, h_assembly="decision_directed")
        assert fit_block(frame, qpsk, cfg, make_rng(1)).H_hat.shape == (2, 2)

    def test_trace_csv(self, frame, qpsk, tmp_path):
        path = tmp_path / "trace.csv"
        fit_block(frame, qpsk, VIConfig(max_iters=10, report_samples=5, trace_path=str(path)), make_rng(1))
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 10
        first = rows[0]
        total = float(first["loss1"]) + float(first["loss2"]) + float(first["loss3"])
        assert float(first["total"]) == pytest.approx(total, rel=1e-6)


class TestReferenceSymbol:

    def test_noiseless_scale_is_removed(self, rng, qpsk):
        H = draw_channel(3, 2, rng).H
        frame = draw_frame(H, estimation_schedule(2, 2), qpsk, 0.0, rng, reference=True)
        skewed = H * np.array([0.5j, -2.0])
        assert np.allclose(resolve_reference(skewed, frame), H)

    def test_any_known_symbol_works(self, rng, qam16):
        H = draw_channel(4, 2, rng).H
        frame = draw_frame(H, estimation_schedule(2, 2), qam16, 0.0, rng)
        assert np.allclose(resolve_reference(H * np.exp(1j * np.array([1.0, -0.4])), frame), H)

    def test_without_solo_slots_nothing_changes(self, rng, qpsk):
        H = draw_channel(2, 2, rng).H
        frame = draw_frame(H, detection_schedule(2, 4), qpsk, 0.0, rng)
        skewed = 0.3 * H
        assert np.array_equal(resolve_reference(skewed, frame), skewed)

    def test_zero_column_passes_through(self, rng, qpsk):
        H = draw_channel(2, 2, rng).H
        frame = draw_frame(H, estimation_schedule(2, 1), qpsk, 0.0, rng)
        H_hat = H.copy()
        H_hat[:, 0] = 0
        out = resolve_reference(H_hat, frame)
        assert np.all(out[:, 0] == 0)
        assert np.allclose(out[:, 1], H[:, 1])

    def test_off_by_default_in_fit_block(self):
        assert not VIConfig().reference_symbol


# ══════════════════════════════════════════════
# EVIDENCE BOUND (N = K = 1)
# ══════════════════════════════════════════════

class TestEvidenceBound:

    def test_log_evidence_against_sampling(self, rng):
        y, rho2, noise_var = 0.8 - 0.3j, 1.0, 0.5
        w = likelihood_weight(noise_var)
        x = complex_normal((400000,), 2 * rho2, rng)
        h = complex_normal((400000,), 1.0, rng)
        estimate = np.mean(np.exp(-w * np.abs(y - h * x) ** 2))
        assert np.exp(log_evidence(y, rho2, noise_var)) == pytest.approx(estimate, rel=0.02)

    def test_bound_holds_for_untrained_posteriors(self, rng, complex_vector):
        for _ in range(20):
            post_h, post_x = channel_and_symbol_posteriors(rng, 1, 1)
            y = complex_vector(rng, 1, 1)
            w = likelihood_weight(0.2)
            neg_loss = -(loss1(post_x, 1.0) + loss2(post_h) + loss3_expected(post_h, post_x, y, weight=w))
            assert neg_loss <= log_evidence(y[0, 0], 1.0, 0.2) + 1e-2

    def test_bound_holds_after_training(self, qpsk):
        rng = make_rng(17)
        noise_var = snr_db_to_noise_var(10.0)
        H = draw_channel(1, 1, rng).H
        frame = draw_frame(H, estimation_schedule(1, 20), qpsk, noise_var, rng)
        est = fit_block(frame, qpsk, VIConfig(max_iters=200, report_samples=10), rng)

        evidence = sum(log_evidence(y, 1.0, noise_var) for y in frame.rx_signals[0])
        assert -est.final_loss_expected <= evidence + 1e-2

"""Pilot LMMSE channel estimation and least-squares detection.

The estimator is checked against an independent complex conjugate
posterior-mean oracle (helpers.complex_lmmse) and, in the all-Gaussian
pilot-only case, closed against the Bayesian bound machinery: analytic
estimator MSE, bound trace, and Monte-Carlo error all coincide.
"""

import numpy as np
import pytest

from helpers import complex_lmmse, complex_lmmse_mse, random_psd_complex
from flowmimo.baselines import (
    LmmseEstimator,
    extract_pilot_observation,
    lmmse_analytic_mse,
    lmmse_channel_estimate,
    lmmse_for_scheme,
    ls_detect,
    pilot_observation_operator,
)
from flowmimo.channel_sim import SystemDims, generate_channel, transmit
from flowmimo.encoders import PilotScheme, assemble_block, pilot_matrices
from flowmimo.fim_bcrb import bcrb, bfim, gaussian_prior_fim
from flowmimo.flow_priors import GmmPrior
from flowmimo.tensor_core import expand_hermitian

RNG = np.random.default_rng(20240518)


def vec_channel(h):
    """Canonical complex channel vec (per-subcarrier column-major)."""
    h = np.asarray(h)
    lead = h.shape[:-3]
    return np.ascontiguousarray(np.swapaxes(h, -1, -2)).reshape(lead + (-1,))


def circular_prior(c):
    """Gaussian prior over the real channel embedding with complex cov c."""
    d = c.shape[0]
    return GmmPrior.gaussian(np.zeros(2 * d), 0.5 * expand_hermitian(c))


class TestPilotObservation:
    def setup_method(self):
        self.dims = SystemDims(n_f=2, n_t=2, n_r=3, t_s=6, noise_var=0.4)
        self.scheme = PilotScheme(kind="orthogonal", alpha=1.0 / 3.0, seed=3)

    def test_operator_shape(self):
        a = pilot_observation_operator(self.scheme, self.dims)
        assert a.shape == (2 * 2 * 3, 2 * 2 * 3)  # n_f*n_pil*n_r x n_f*n_t*n_r

    def test_noiseless_pairing_orthogonal(self):
        h = generate_channel(circular_prior(np.eye(12)), self.dims, seed=5)
        zero_cw = [np.zeros((2, 4), dtype=complex)] * 2
        x = assemble_block(zero_cw, self.scheme, self.dims)
        rx = transmit(x, h, 0.0, seed=0)
        y_pil = extract_pilot_observation(rx.y, self.scheme, self.dims)
        a = pilot_observation_operator(self.scheme, self.dims)
        assert np.allclose(y_pil, a @ vec_channel(h), atol=1e-12)

    def test_noiseless_pairing_superimposed(self):
        scheme = PilotScheme(kind="superimposed", pilot_power_fraction=0.36, seed=3)
        h = generate_channel(circular_prior(np.eye(12)), self.dims, seed=6)
        zero_cw = [np.zeros((2, 6), dtype=complex)] * 2
        x = assemble_block(zero_cw, scheme, self.dims)
        rx = transmit(x, h, 0.0, seed=0)
        y_pil = extract_pilot_observation(rx.y, scheme, self.dims)
        a = pilot_observation_operator(scheme, self.dims)
        assert np.allclose(y_pil, a @ vec_channel(h), atol=1e-12)

    def test_pilot_free_scheme_rejected(self):
        none = PilotScheme(kind="none")
        with pytest.raises(ValueError):
            pilot_observation_operator(none, self.dims)
        with pytest.raises(ValueError):
            extract_pilot_observation(np.zeros((2, 6, 3), dtype=complex), none, self.dims)


class TestLmmseEstimator:
    def setup_method(self):
        self.dims = SystemDims(n_f=2, n_t=2, n_r=3, t_s=6, noise_var=0.4)
        self.scheme = PilotScheme(kind="orthogonal", alpha=1.0 / 3.0, seed=3)
        self.c = random_psd_complex(12, np.random.default_rng(21))
        self.prior = circular_prior(self.c)
        self.a = pilot_observation_operator(self.scheme, self.dims)
        self.est = LmmseEstimator.from_prior(self.prior, self.a, 0.4, self.dims)

    def test_matches_conjugate_posterior_mean(self):
        y = RNG.standard_normal(12) + 1j * RNG.standard_normal(12)
        h_hat = lmmse_channel_estimate(y, self.est)
        oracle = complex_lmmse(y, self.a, self.c, 0.4)
        assert np.allclose(vec_channel(h_hat), oracle, atol=1e-10)

    def test_analytic_mse_matches_oracle(self):
        mse = lmmse_analytic_mse(self.est)
        oracle = complex_lmmse_mse(self.a, self.c, 0.4)
        assert abs(mse - oracle) <= 1e-10 * oracle

    def test_square_operator_inverts_at_low_noise(self):
        # alpha t_s = n_t makes the per-subcarrier pilot block square
        est = LmmseEstimator.from_prior(self.prior, self.a, 1e-12, self.dims)
        h = generate_channel(self.prior, self.dims, seed=9)
        y = self.a @ vec_channel(h)
        h_hat = lmmse_channel_estimate(y, est)
        err = np.linalg.norm(vec_channel(h_hat) - vec_channel(h))
        assert err <= 1e-5 * np.linalg.norm(vec_channel(h))

    def test_vanishing_prior_shrinks_to_mean(self):
        tiny = circular_prior(1e-12 * np.eye(12))
        est = LmmseEstimator.from_prior(tiny, self.a, 0.4, self.dims)
        y = RNG.standard_normal(12) + 1j * RNG.standard_normal(12)
        h_hat = lmmse_channel_estimate(y, est)
        assert np.linalg.norm(vec_channel(h_hat)) <= 1e-6

    def test_monte_carlo_mse_consistency(self):
        n = 10_000
        rng = np.random.default_rng(77)
        h = generate_channel(self.prior, self.dims, seed=44, n=n)
        hv = vec_channel(h)
        noise = np.sqrt(0.4 / 2.0) * (
            rng.standard_normal((n, 12)) + 1j * rng.standard_normal((n, 12)))
        y = hv @ self.a.T + noise
        h_hat = lmmse_channel_estimate(y, self.est)
        emp = float(np.mean(np.sum(np.abs(vec_channel(h_hat) - hv) ** 2, axis=-1)))
        assert emp == pytest.approx(lmmse_analytic_mse(self.est), rel=0.03)

    def test_scheme_constructor_adds_interference(self):
        est = lmmse_for_scheme(self.prior, self.scheme, self.dims,
                               data_interference_power=0.3)
        assert est.noise_var == pytest.approx(0.4 + 0.3)
        assert est.pilot_matrix.shape == self.a.shape

    def test_validation(self):
        with pytest.raises(ValueError):
            LmmseEstimator.from_prior(self.prior, self.a[:, :5], 0.4, self.dims)
        with pytest.raises(ValueError):
            LmmseEstimator.from_prior(self.prior, self.a, 0.0, self.dims)
        with pytest.raises(ValueError):
            LmmseEstimator.from_prior(GmmPrior.standard(4), self.a, 0.4, self.dims)


class TestBoundClosure:
    """Pilot-only conjugate case: estimator MSE, bound, and MC error agree."""

    def setup_method(self):
        self.dims = SystemDims(n_f=1, n_t=2, n_r=3, t_s=4, noise_var=0.2)
        self.scheme = PilotScheme(kind="orthogonal", alpha=0.5, seed=11)
        self.prior = circular_prior(np.eye(6))
        self.a = pilot_observation_operator(self.scheme, self.dims)
        self.est = LmmseEstimator.from_prior(self.prior, self.a, 0.2, self.dims)

    def _bound_trace(self):
        pilots = pilot_matrices(self.scheme, self.dims)  # (1, 2, 2)
        x = np.zeros((1, 4, 2), dtype=complex)
        x[:, :2] = pilots
        h_dummy = np.ones((1, 2, 3), dtype=complex)
        fm = bfim(x, h_dummy, 0.2, None, gaussian_prior_fim(self.prior),
                  self.dims, known_x=True)
        return bcrb(fm, e_h2=6.0)

    def test_bound_equals_analytic_mse(self):
        res = self._bound_trace()
        mse = lmmse_analytic_mse(self.est)
        oracle = complex_lmmse_mse(self.a, np.eye(6), 0.2)
        assert res.trace_h == pytest.approx(mse, rel=1e-8)
        assert res.trace_h == pytest.approx(oracle, rel=1e-8)

    def test_monte_carlo_error_attains_bound(self):
        res = self._bound_trace()
        n = 4000
        rng = np.random.default_rng(13)
        h = generate_channel(self.prior, self.dims, seed=21, n=n)
        hv = vec_channel(h)
        noise = np.sqrt(0.2 / 2.0) * (
            rng.standard_normal((n, 6)) + 1j * rng.standard_normal((n, 6)))
        y = hv @ self.a.T + noise
        h_hat = lmmse_channel_estimate(y, self.est)
        emp = float(np.mean(np.sum(np.abs(vec_channel(h_hat) - hv) ** 2, axis=-1)))
        assert emp == pytest.approx(res.trace_h, rel=0.05)
        assert emp / 6.0 == pytest.approx(res.bcrb_h, rel=0.05)


class TestLsDetect:
    def test_exact_recovery_noiseless(self):
        h = RNG.standard_normal((1, 2, 4)) + 1j * RNG.standard_normal((1, 2, 4))
        x = RNG.standard_normal((1, 5, 2)) + 1j * RNG.standard_normal((1, 5, 2))
        x_hat = ls_detect(x @ h, h)
        assert np.allclose(x_hat, x, atol=1e-10)

    def test_residual_satisfies_normal_equations(self):
        h = RNG.standard_normal((2, 2, 3)) + 1j * RNG.standard_normal((2, 2, 3))
        x = RNG.standard_normal((2, 5, 2)) + 1j * RNG.standard_normal((2, 5, 2))
        y = x @ h + 0.3 * (RNG.standard_normal((2, 5, 3)) + 1j * RNG.standard_normal((2, 5, 3)))
        resid = y - ls_detect(y, h) @ h
        for f in range(2):
            assert np.allclose(resid[f] @ h[f].conj().T, 0.0, atol=1e-10)

    def test_error_grows_with_noise(self):
        # same noise pattern scaled up: the LS error scales exactly with it
        h = RNG.standard_normal((1, 2, 4)) + 1j * RNG.standard_normal((1, 2, 4))
        x = RNG.standard_normal((1, 6, 2)) + 1j * RNG.standard_normal((1, 6, 2))
        w = RNG.standard_normal((1, 6, 4)) + 1j * RNG.standard_normal((1, 6, 4))
        errs = [np.linalg.norm(ls_detect(x @ h + np.sqrt(nv) * w, h) - x)
                for nv in (0.01, 0.1, 1.0)]
        assert errs[0] < errs[1] < errs[2]

    def test_rank_deficient_estimate_rejected(self):
        h = RNG.standard_normal((1, 2, 2)) + 1j * RNG.standard_normal((1, 2, 2))
        h[0, 1] = h[0, 0]
        with pytest.raises(ValueError):
            ls_detect(np.zeros((1, 4, 2), dtype=complex), h)
        tall = RNG.standard_normal((1, 3, 2)) + 1j * RNG.standard_normal((1, 3, 2))
        with pytest.raises(ValueError):
            ls_detect(np.zeros((1, 4, 2), dtype=complex), tall)

    def test_batched(self):
        h = RNG.standard_normal((3, 1, 2, 4)) + 1j * RNG.standard_normal((3, 1, 2, 4))
        x = RNG.standard_normal((3, 1, 5, 2)) + 1j * RNG.standard_normal((3, 1, 5, 2))
        x_hat = ls_detect(x @ h, h)
        assert x_hat.shape == x.shape
        assert np.allclose(x_hat, x, atol=1e-9)

"""Channel generation, forward model, CSNR and ensemble persistence."""

import numpy as np
import pytest

from flowmimo.channel_sim import (
    ReceiveTensor,
    SystemDims,
    channel_to_real,
    correlated_channel_prior,
    csnr,
    generate_channel,
    load_channel_ensemble,
    real_to_channel,
    save_channel_ensemble,
    transmit,
)
from flowmimo.flow_priors import GmmPrior
from flowmimo.tensor_core import complex_to_real, vec_by_slice

RNG = np.random.default_rng(77)


class TestSystemDims:
    def test_dimension_products(self):
        d = SystemDims(n_f=4, n_t=2, n_r=8, t_s=6)
        assert d.h_dim == 64
        assert d.x_dim == 48

    def test_invalid_counts_rejected(self):
        with pytest.raises(ValueError):
            SystemDims(n_f=0, n_t=1, n_r=1, t_s=1)
        with pytest.raises(ValueError):
            SystemDims(n_f=1, n_t=1, n_r=1, t_s=1, power_p=0.0)


class TestChannelEmbedding:
    def test_matches_canonical_vec(self):
        h = RNG.standard_normal((3, 2, 4)) + 1j * RNG.standard_normal((3, 2, 4))
        assert np.array_equal(channel_to_real(h), complex_to_real(vec_by_slice(h)))

    def test_round_trip(self):
        dims = SystemDims(n_f=3, n_t=2, n_r=4, t_s=5)
        h = RNG.standard_normal((3, 2, 4)) + 1j * RNG.standard_normal((3, 2, 4))
        assert np.array_equal(real_to_channel(channel_to_real(h), dims), h)

    def test_batched(self):
        dims = SystemDims(n_f=2, n_t=2, n_r=3, t_s=4)
        h = RNG.standard_normal((5, 2, 2, 3)) + 1j * RNG.standard_normal((5, 2, 2, 3))
        v = channel_to_real(h)
        assert v.shape == (5, 2 * dims.h_dim)
        assert np.array_equal(real_to_channel(v, dims), h)


class TestGenerateChannel:
    def test_scalar_siso_moments(self):
        # CN(0, 1) scalar channel: complex mean near 0, E|h|^2 near 1
        dims = SystemDims(n_f=1, n_t=1, n_r=1, t_s=1)
        prior = GmmPrior.gaussian(np.zeros(2), 0.5 * np.eye(2))
        h = generate_channel(prior, dims, seed=5, n=100_000)
        assert h.shape == (100_000, 1, 1, 1)
        assert abs(h.mean()) < 0.02
        assert abs(np.mean(np.abs(h) ** 2) - 1.0) < 0.03

    def test_single_sample_shape(self):
        dims = SystemDims(n_f=2, n_t=2, n_r=3, t_s=4)
        prior = GmmPrior.standard(2 * dims.h_dim)
        h = generate_channel(prior, dims, seed=1)
        assert h.shape == (2, 2, 3)

    def test_subspace_prior_support(self):
        # prior on a 2-dim affine subspace of the 8-dim embedding: every
        # sample must satisfy ||(I - U U^T)(x - b)|| <= 1e-10
        dims = SystemDims(n_f=1, n_t=2, n_r=2, t_s=3)  # 2 * h_dim = 8
        rng = np.random.default_rng(3)
        u, _ = np.linalg.qr(rng.standard_normal((8, 2)))
        b = rng.standard_normal(8)
        prior = GmmPrior.subspace(b, u, np.array([1.0, 2.0]))
        h = generate_channel(prior, dims, seed=11, n=200)
        x = channel_to_real(h)
        resid = (x - b) - ((x - b) @ u) @ u.T
        assert np.max(np.linalg.norm(resid, axis=1)) <= 1e-10

    def test_same_seed_identical(self):
        dims = SystemDims(n_f=2, n_t=2, n_r=2, t_s=3)
        prior = correlated_channel_prior(dims)
        a = generate_channel(prior, dims, seed=42, n=4)
        b = generate_channel(prior, dims, seed=42, n=4)
        assert np.array_equal(a, b)

    def test_dimension_mismatch_rejected(self):
        dims = SystemDims(n_f=2, n_t=2, n_r=2, t_s=3)
        with pytest.raises(ValueError):
            generate_channel(GmmPrior.standard(4), dims, seed=0)


class TestCorrelatedPrior:
    def test_unit_diagonal_energy(self):
        dims = SystemDims(n_f=2, n_t=2, n_r=3, t_s=4)
        prior = correlated_channel_prior(dims)
        _, cov = prior.mean_cov()
        # E||H||_F^2 = trace of the real covariance = n_f * n_t * n_r
        assert np.isclose(np.trace(cov), dims.h_dim, atol=1e-9)

    def test_neighbor_correlation(self):
        # adjacent transmit antennas at the same (f, r) should correlate at rho_t
        dims = SystemDims(n_f=1, n_t=2, n_r=1, t_s=2)
        prior = correlated_channel_prior(dims, rho_t=0.6)
        h = generate_channel(prior, dims, seed=9, n=60_000)
        z = h.reshape(-1, 2)
        c = np.mean(z[:, 0] * z[:, 1].conj()).real
        assert abs(c - 0.6) < 0.03


class TestTransmit:
    def test_noiseless_exact(self):
        x = RNG.standard_normal((2, 3, 2)) + 1j * RNG.standard_normal((2, 3, 2))
        h = RNG.standard_normal((2, 2, 4)) + 1j * RNG.standard_normal((2, 2, 4))
        rx = transmit(x, h, 0.0, seed=0)
        assert np.array_equal(rx.y, x @ h)
        assert np.all(rx.w == 0)

    def test_zero_input_gives_pure_noise(self):
        rx = transmit(np.zeros((1, 2, 1), dtype=complex),
                      np.zeros((1, 1, 3), dtype=complex), 1.0, seed=4)
        assert np.array_equal(rx.y, rx.w)

    def test_scalar_arithmetic(self):
        # 1x1 SISO: y = x h + w = 2 * 3 + 0.1
        x = np.full((1, 1, 1), 2.0 + 0j)
        h = np.full((1, 1, 1), 3.0 + 0j)
        rx = transmit(x, h, 0.01, seed=8)
        assert np.allclose(rx.y, 6.0 + rx.w, atol=1e-15)
        manual = ReceiveTensor(y=np.full((1, 1, 1), 6.1 + 0j), w=np.full((1, 1, 1), 0.1 + 0j))
        assert np.isclose(manual.y[0, 0, 0], 6.1)

    def test_linearity_in_x(self):
        x = RNG.standard_normal((2, 3, 2)) + 1j * RNG.standard_normal((2, 3, 2))
        h = RNG.standard_normal((2, 2, 4)) + 1j * RNG.standard_normal((2, 2, 4))
        a = 1.7 - 0.3j
        assert np.allclose(transmit(a * x, h, 0.0, 0).y, a * transmit(x, h, 0.0, 0).y,
                           atol=1e-12)

    def test_negative_noise_var_rejected(self):
        with pytest.raises(ValueError):
            transmit(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), -1.0, seed=0)

    def test_noise_whiteness(self):
        # empirical covariance of vec(W) within 5% of noise_var * I (spectral)
        nv = 0.8
        n = 10_000
        x = np.zeros((n, 1, 2, 2), dtype=complex)
        h = np.zeros((n, 1, 2, 2), dtype=complex)
        rx = transmit(x, h, nv, seed=13)
        w = rx.w.reshape(n, -1)
        cov = (w.T @ w.conj()) / n
        assert np.linalg.norm(cov - nv * np.eye(4), 2) <= 0.05 * nv
        # real and imaginary parts each carry half the variance
        assert abs(np.var(w.real) - nv / 2) < 0.03 * nv


class TestCsnr:
    def test_ratio_definition(self):
        # ||Y - W||^2 = 10, ||W||^2 = 1 -> 10 dB
        w = np.ones((1, 1, 1), dtype=complex)
        y = w + np.sqrt(10.0)
        rx = ReceiveTensor(y=y, w=w)
        assert np.isclose(csnr(rx), 10.0, atol=1e-12)

    def test_zero_db_at_equal_energy(self):
        w = np.full((1, 2, 1), 1.0 + 0j)
        rx = ReceiveTensor(y=w + np.array([[[1.0], [-1.0]]]), w=w)
        assert np.isclose(csnr(rx), 0.0, atol=1e-12)

    def test_zero_noise_undefined(self):
        rx = ReceiveTensor(y=np.ones((1, 1, 1)), w=np.zeros((1, 1, 1)))
        with pytest.raises(ValueError):
            csnr(rx)


class TestEnsembleIo:
    def test_round_trip(self, tmp_path):
        dims = SystemDims(n_f=2, n_t=2, n_r=2, t_s=3)
        prior = correlated_channel_prior(dims)
        h = generate_channel(prior, dims, seed=21, n=5)
        path = tmp_path / "ens.bin"
        save_channel_ensemble(path, h, dims, "correlated", 21)
        h2, dims2, head = load_channel_ensemble(path)
        assert np.array_equal(h, h2)
        assert dims2 == dims
        assert head["prior_id"] == "correlated"

    def test_shape_mismatch_rejected(self, tmp_path):
        dims = SystemDims(n_f=2, n_t=2, n_r=2, t_s=3)
        with pytest.raises(ValueError):
            save_channel_ensemble(tmp_path / "x.bin", np.zeros((1, 1, 2, 2)), dims, "p", 0)

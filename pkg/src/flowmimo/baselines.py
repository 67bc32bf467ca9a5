"""Classical baselines: pilot LMMSE channel estimation and LS detection.

The LMMSE estimator works in the real channel embedding, which handles
any Gaussian-mixture generating prior through its overall mean and
covariance (the best linear estimator only sees second-order statistics)
and coincides with the conjugate posterior mean when the prior is a
single Gaussian.  The pilot observation is linear in the channel:

    orthogonal:   y_pil = dsum_f (I_nr kron P_f) h + w
    superimposed: y     = sqrt(rho) dsum_f (I_nr kron P_f) h + (data term) + w

with the superimposed data term folded into an effective white noise
variance (standard treatment; exact for the mean, approximate for the
covariance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel_sim import SystemDims, real_to_channel
from .encoders import PilotScheme, n_pilot_symbols, pilot_matrices
from .flow_priors import GmmPrior
from .tensor_core import complex_to_real, expand_hermitian

__all__ = [
    "LmmseEstimator",
    "pilot_observation_operator",
    "extract_pilot_observation",
    "lmmse_for_scheme",
    "lmmse_channel_estimate",
    "lmmse_analytic_mse",
    "ls_detect",
]


@dataclass(frozen=True)
class LmmseEstimator:
    """Precomputed linear MMSE estimator of the channel from pilot symbols.

    pilot_matrix: complex observation operator A with y_pilot = A h + noise
    in the canonical channel ordering.  channel_mean / channel_cov are the
    real-embedding prior moments; noise_var is the effective per-complex-
    entry observation noise.
    """

    pilot_matrix: np.ndarray
    channel_mean: np.ndarray
    channel_cov: np.ndarray
    noise_var: float
    dims: SystemDims

    def __post_init__(self):
        a = np.asarray(self.pilot_matrix, dtype=complex)
        if a.shape[1] != self.dims.h_dim:
            raise ValueError("pilot operator columns must match the channel dimension")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        object.__setattr__(self, "pilot_matrix", a)

    @classmethod
    def from_prior(cls, prior: GmmPrior, pilot_matrix: np.ndarray, noise_var: float,
                   dims: SystemDims) -> "LmmseEstimator":
        mean, cov = prior.mean_cov()
        if mean.shape[0] != 2 * dims.h_dim:
            raise ValueError("prior dimension does not match the channel embedding")
        return cls(pilot_matrix=pilot_matrix, channel_mean=mean, channel_cov=cov,
                   noise_var=noise_var, dims=dims)

    def _gain(self):
        """Real-embedding LMMSE gain K and innovation Gram matrix."""
        a_r = expand_hermitian(self.pilot_matrix)  # real rep of complex action
        gram = a_r @ self.channel_cov @ a_r.T + 0.5 * self.noise_var * np.eye(a_r.shape[0])
        gain = self.channel_cov @ a_r.T @ np.linalg.inv(gram)
        return a_r, gain, gram


def pilot_observation_operator(scheme: PilotScheme, dims: SystemDims) -> np.ndarray:
    """Complex operator A mapping the canonical channel vec to pilot symbols.

    Block diagonal over subcarriers with blocks I_nr kron P_f; the
    superimposed kind scales by sqrt(rho).  Raises for the pilot-free
    kind.
    """
    pilots = pilot_matrices(scheme, dims)
    if pilots is None:
        raise ValueError("pilot-free scheme has no pilot observation")
    n_sym = pilots.shape[1]
    block_rows = n_sym * dims.n_r
    block_cols = dims.n_t * dims.n_r
    a = np.zeros((dims.n_f * block_rows, dims.n_f * block_cols), dtype=complex)
    eye_r = np.eye(dims.n_r)
    gain = np.sqrt(scheme.pilot_power_fraction) if scheme.kind == "superimposed" else 1.0
    for f in range(dims.n_f):
        a[f * block_rows : (f + 1) * block_rows, f * block_cols : (f + 1) * block_cols] = gain * np.kron(eye_r, pilots[f])
    return a


def extract_pilot_observation(y: np.ndarray, scheme: PilotScheme, dims: SystemDims) -> np.ndarray:
    """Canonical complex vec of the symbols entering the pilot observation.

    orthogonal: the first alpha * t_s symbols; superimposed: the whole
    block.  Batched over leading axes of y.
    """
    y = np.asarray(y, dtype=complex)
    if scheme.kind == "none":
        raise ValueError("pilot-free scheme has no pilot observation")
    if scheme.kind == "orthogonal":
        y = y[..., :, : n_pilot_symbols(scheme, dims.t_s), :]
    lead = y.shape[:-3]
    return np.ascontiguousarray(np.swapaxes(y, -1, -2)).reshape(lead + (-1,))


def lmmse_for_scheme(prior: GmmPrior, scheme: PilotScheme, dims: SystemDims,
                     data_interference_power: float = 0.0) -> LmmseEstimator:
    """Build the estimator for a pilot scheme at the system noise level.

    data_interference_power adds to the effective noise variance
    (superimposed pilots see the data as extra white noise).
    """
    a = pilot_observation_operator(scheme, dims)
    return LmmseEstimator.from_prior(prior, a, dims.noise_var + data_interference_power, dims)


def lmmse_channel_estimate(y_pilot: np.ndarray, est: LmmseEstimator) -> np.ndarray:
    """Posterior-mean estimate of the channel tensor from pilot symbols.

    y_pilot: (..., n_obs) canonical complex pilot observation.  Returns
    (..., n_f, n_t, n_r).  Equals the conjugate posterior mean exactly
    when the generating prior is Gaussian.
    """
    y_pilot = np.asarray(y_pilot, dtype=complex)
    a_r, gain, _ = est._gain()
    y_real = complex_to_real(y_pilot)
    innov = y_real - (a_r @ est.channel_mean)
    h_real = est.channel_mean + innov @ gain.T
    return real_to_channel(h_real, est.dims)


def lmmse_analytic_mse(est: LmmseEstimator) -> float:
    """Exact e||H_hat - H||_F^2 of the estimator under its own model."""
    a_r, gain, _ = est._gain()
    post = est.channel_cov - gain @ a_r @ est.channel_cov
    return float(np.trace(post))


def ls_detect(y: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    """Per-subcarrier least squares X_hat_f = Y_f pinv(H_hat_f).

    y: (..., n_f, t, n_r), h_hat: (..., n_f, n_t, n_r) with n_r >= n_t and
    full-rank rows per subcarrier (checked); the residual satisfies the
    normal equations (Y - X_hat H) H^H = 0.
    """
    y = np.asarray(y, dtype=complex)
    h_hat = np.asarray(h_hat, dtype=complex)
    sv = np.linalg.svd(h_hat, compute_uv=False)  # (..., n_f, min(n_t, n_r))
    if h_hat.shape[-2] > h_hat.shape[-1] or np.any(sv[..., -1] <= 1e-10 * sv[..., 0]):
        raise ValueError("rank-deficient channel estimate: LS detection undefined")
    return y @ np.linalg.pinv(h_hat)

"""Block-fading MIMO-OFDM forward model.

Per subcarrier f the receive block is Y_f = X_f H_f + W_f with
X_f (t_s, n_t), H_f (n_t, n_r), and W_f iid circular complex Gaussian of
per-entry variance noise_var (real and imaginary parts each noise_var / 2).
Tensors are indexed (subcarrier, ...) throughout:

    H: (n_f, n_t, n_r)   X: (n_f, t_s, n_t)   Y, W: (n_f, t_s, n_r)

The canonical channel parameter vector stacks per-subcarrier column-major
vecs, h = [vec(H_0); vec(H_1); ...], and its real embedding [Re h; Im h]
is the domain of channel priors.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.linalg import toeplitz

from . import diskio
from .flow_priors import GmmPrior
from .seeding import as_rng
from .tensor_core import (
    complex_to_real,
    expand_hermitian,
    kron,
    real_to_complex,
    unvec_by_slice,
    vec_by_slice,
)

__all__ = [
    "SystemDims",
    "ReceiveTensor",
    "channel_to_real",
    "real_to_channel",
    "correlated_channel_prior",
    "generate_channel",
    "transmit",
    "csnr",
    "save_channel_ensemble",
    "load_channel_ensemble",
]


@dataclass(frozen=True)
class SystemDims:
    """Static system dimensions and budgets.

    n_f: subcarriers, n_t: transmit antennas (one per user), n_r: receive
    antennas, t_s: OFDM symbols per block, power_p: per-antenna average
    power budget per symbol, noise_var: per-entry complex noise variance.
    """

    n_f: int
    n_t: int
    n_r: int
    t_s: int
    power_p: float = 1.0
    noise_var: float = 1.0

    def __post_init__(self):
        for name in ("n_f", "n_t", "n_r", "t_s"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.power_p <= 0 or self.noise_var <= 0:
            raise ValueError("power_p and noise_var must be positive")

    @property
    def h_dim(self) -> int:
        """Complex channel parameter count n_f * n_t * n_r."""
        return self.n_f * self.n_t * self.n_r

    @property
    def x_dim(self) -> int:
        """Complex transmit parameter count n_f * t_s * n_t."""
        return self.n_f * self.t_s * self.n_t

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReceiveTensor:
    """Received block and the noise realization that produced it."""

    y: np.ndarray  # (..., n_f, t_s, n_r) complex
    w: np.ndarray  # same shape


def channel_to_real(h: np.ndarray) -> np.ndarray:
    """Canonical real embedding of a channel tensor (..., n_f, n_t, n_r).

    Equals complex_to_real(vec_by_slice(h)) per batch row: swapping the
    trailing axes makes the per-slice column-major vec a plain C-order
    flatten, which also works batched.
    """
    h = np.asarray(h)
    lead = h.shape[:-3]
    v = np.ascontiguousarray(np.swapaxes(h, -1, -2)).reshape(lead + (-1,))
    return complex_to_real(v)


def real_to_channel(v: np.ndarray, dims: SystemDims) -> np.ndarray:
    """Inverse of channel_to_real; v has last axis 2 * n_f * n_t * n_r."""
    z = real_to_complex(np.asarray(v))
    lead = z.shape[:-1]
    t = z.reshape(lead + (dims.n_f, dims.n_r, dims.n_t))
    return np.swapaxes(t, -1, -2)


def correlated_channel_prior(dims: SystemDims, rho_f: float = 0.7, rho_t: float = 0.3,
                             rho_r: float = 0.5) -> GmmPrior:
    """Circular Gaussian channel prior with separable exponential correlation.

    Complex covariance C = R_f kron R_t kron R_r with R[i, j] = rho^|i-j|
    (unit diagonal, so e||H||_F^2 = n_f * n_t * n_r).  The Kronecker factors
    follow the canonical ordering: n_t fastest, then n_r, then subcarrier.
    """
    def expcorr(n, rho):
        return toeplitz(rho ** np.arange(n))

    # vec ordering is (n_t fastest, n_r, n_f slowest) -> C = R_f kron R_r kron R_t
    c_complex = kron(expcorr(dims.n_f, rho_f), kron(expcorr(dims.n_r, rho_r), expcorr(dims.n_t, rho_t)))
    cov_real = 0.5 * expand_hermitian(c_complex)
    return GmmPrior.gaussian(np.zeros(2 * dims.h_dim), cov_real)


def generate_channel(prior: GmmPrior, dims: SystemDims, seed, n: int = 1) -> np.ndarray:
    """Draw channel tensors from a prior over the real channel embedding.

    Returns (n, n_f, n_t, n_r) complex, or (n_f, n_t, n_r) when n == 1.
    """
    if prior.dim != 2 * dims.h_dim:
        raise ValueError(
            f"prior dimension {prior.dim} does not match 2*n_f*n_t*n_r = {2 * dims.h_dim}"
        )
    draws = prior.sample(n, as_rng(seed))
    out = real_to_channel(draws, dims)
    return out[0] if n == 1 else out


def transmit(x: np.ndarray, h: np.ndarray, noise_var: float, seed) -> ReceiveTensor:
    """Pass transmit blocks through the channel and add receiver noise.

    x: (..., n_f, t_s, n_t), h: (..., n_f, n_t, n_r) with broadcastable
    leading axes.  Noise entries are iid CN(0, noise_var).
    """
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    clean = x @ h  # batched per-subcarrier matmul
    rng = as_rng(seed)
    scale = np.sqrt(noise_var / 2.0)
    w = scale * (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape))
    return ReceiveTensor(y=clean + w, w=w)


def csnr(rx: ReceiveTensor) -> float:
    """Realized channel SNR 10 log10(||Y - W||_F^2 / ||W||_F^2) in dB."""
    w_energy = float(np.sum(np.abs(rx.w) ** 2))
    if w_energy == 0.0:
        raise ValueError("csnr undefined for zero noise energy")
    sig = float(np.sum(np.abs(rx.y - rx.w) ** 2))
    return 10.0 * np.log10(sig / w_energy)


def save_channel_ensemble(path, channels: np.ndarray, dims: SystemDims, prior_id: str, seed) -> None:
    """Write an ensemble (n, n_f, n_t, n_r) with dims/provenance header."""
    channels = np.asarray(channels, dtype=complex)
    if channels.ndim == 3:
        channels = channels[None]
    expected = (dims.n_f, dims.n_t, dims.n_r)
    if channels.shape[1:] != expected:
        raise ValueError(f"channel shape {channels.shape[1:]} does not match dims {expected}")
    diskio.write_blob(
        path,
        {"kind": "channel_ensemble", "dims": dims.to_dict(), "prior_id": str(prior_id),
         "seed": int(seed) if seed is not None else None},
        {"channels": channels},
    )


def load_channel_ensemble(path):
    """Read back (channels, dims, header) written by save_channel_ensemble."""
    head, arrays = diskio.read_blob(path)
    if head.get("kind") != "channel_ensemble":
        raise ValueError(f"not a channel ensemble file: {path}")
    dims = SystemDims(**head["dims"])
    return arrays["channels"], dims, head

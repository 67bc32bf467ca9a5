"""Source-to-codeword encoders, pilot schemes and transmit-block assembly.

Each user k owns one transmit antenna and maps its real source vector
s_k (m,) to a complex codeword matrix (n_f, t_data) through a linear map:
consecutive reals are paired into complex entries (odd m zero-pads the
last imaginary part), multiplied by a fixed matrix G and a scalar scale
calibrated so the average codeword energy meets the per-user budget
n_f * t_data * power_p.

Pilot kinds:

* ``none``         - all t_s symbols carry data.
* ``orthogonal``   - the first round(alpha * t_s) symbols are pilots; users
                     fire on disjoint symbol subsets (round robin), which
                     makes cross-user pilot blocks exactly orthogonal.
* ``superimposed`` - pilots span the whole block and are added to the data,
                     X = sqrt(1 - rho) * data + sqrt(rho) * pilots.

Pilot energy counts against the same per-user budget: pilots get the
share proportional to the symbols they occupy (orthogonal) or the rho
fraction (superimposed), so every kind realizes the same total
n_f * t_s * power_p per user on average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel_sim import SystemDims
from .flow_priors import GmmPrior
from .seeding import split_rng
from .tensor_core import complex_to_real, real_to_complex, unvec_by_slice, vec_by_slice

__all__ = [
    "PowerOverflowError",
    "LinearEncoder",
    "PilotScheme",
    "encode",
    "encoder_jacobian",
    "pullback_gradient",
    "n_pilot_symbols",
    "t_data_symbols",
    "pilot_matrices",
    "assemble_block",
    "data_symbol_slice",
    "codeword_gradient_from_block",
    "block_to_real",
    "real_to_block",
    "transmit_prior",
]

OVERFLOW_FACTOR = 2.0  # realized-over-average energy ratio treated as miscalibration


class PowerOverflowError(ValueError):
    """Realized codeword energy exceeded the calibrated budget by > 2x."""


def _complexify(s: np.ndarray) -> np.ndarray:
    """Pair consecutive reals into complex entries; odd length zero-pads."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] % 2:
        s = np.concatenate([s, np.zeros(s.shape[:-1] + (1,))], axis=-1)
    return s[..., 0::2] + 1j * s[..., 1::2]


@dataclass(frozen=True)
class LinearEncoder:
    """Fixed linear encoder s -> scale * G * complexify(s).

    g: (n_f * t_data, m_c) complex with m_c = ceil(m / 2).
    budget: average energy target n_f * t_data * power_p used by the
    overflow guard; inf disables the guard (utility encoders).
    """

    g: np.ndarray
    scale: float
    n_f: int
    t_data: int
    m: int
    budget: float = np.inf

    def __post_init__(self):
        g = np.asarray(self.g, dtype=complex)
        n_c = self.n_f * self.t_data
        m_c = (self.m + 1) // 2
        if g.shape != (n_c, m_c):
            raise ValueError(f"G must be ({n_c}, {m_c}) for m={self.m}, got {g.shape}")
        object.__setattr__(self, "g", g)

    @classmethod
    def identity(cls, n_f: int, t_data: int, budget: float = np.inf) -> "LinearEncoder":
        """m = 2 * n_f * t_data sources mapped one pair per codeword entry."""
        n_c = n_f * t_data
        return cls(g=np.eye(n_c, dtype=complex), scale=1.0, n_f=n_f, t_data=t_data,
                   m=2 * n_c, budget=budget)

    @classmethod
    def random_orthonormal(cls, n_f: int, t_data: int, m: int, power_p: float, seed,
                           source_prior: GmmPrior | None = None) -> "LinearEncoder":
        """Orthonormal-column G with scale calibrated to the power budget.

        The calibration is exact for the given source prior (standard
        normal assumed when none is given): with unitary columns the mean
        codeword energy equals e||s||^2 times scale^2.
        """
        n_c = n_f * t_data
        m_c = (m + 1) // 2
        if m_c > n_c:
            raise ValueError(f"source dim m={m} exceeds codeword capacity 2*{n_c}")
        rng = split_rng(seed, 0) if not isinstance(seed, np.random.Generator) else seed
        a = rng.standard_normal((n_c, m_c)) + 1j * rng.standard_normal((n_c, m_c))
        q, _ = np.linalg.qr(a)
        budget = n_f * t_data * power_p
        if source_prior is None:
            e_s = float(m)
        else:
            mu, cov = source_prior.mean_cov()
            e_s = float(np.trace(cov) + mu @ mu)
        return cls(g=q, scale=float(np.sqrt(budget / e_s)), n_f=n_f, t_data=t_data,
                   m=m, budget=budget)


def unguarded(enc: LinearEncoder) -> LinearEncoder:
    """Copy with the overflow guard disabled (budget = inf).

    For measurement paths: likelihood evaluations at off-budget candidate
    points, calibration energy averages, bound ensembles.  The guard only
    protects actual transmissions.
    """
    return LinearEncoder(g=enc.g, scale=enc.scale, n_f=enc.n_f, t_data=enc.t_data, m=enc.m)


def encode(enc: LinearEncoder, s: np.ndarray) -> np.ndarray:
    """Map sources (..., m) to codeword matrices (..., n_f, t_data).

    Deterministic; raises PowerOverflowError when a realized codeword
    exceeds OVERFLOW_FACTOR times the average budget.
    """
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != enc.m:
        raise ValueError(f"source length {s.shape[-1]} != encoder m={enc.m}")
    z = _complexify(s)
    c = z @ (enc.scale * enc.g).T  # (..., n_c)
    energy = np.sum(np.abs(c) ** 2, axis=-1)
    if np.any(energy > OVERFLOW_FACTOR * enc.budget):
        raise PowerOverflowError(
            f"power overflow: realized codeword energy {float(np.max(energy)):.4g} "
            f"exceeds {OVERFLOW_FACTOR} x budget {enc.budget:.4g}"
        )
    lead = c.shape[:-1]
    return np.swapaxes(c.reshape(lead + (enc.t_data, enc.n_f)), -1, -2)


def encoder_jacobian(enc: LinearEncoder) -> np.ndarray:
    """Action matrix J (n_f * t_data, m) of the real-linear map s -> codeword vec.

    Column 2j is scale * G[:, j], column 2j+1 is 1j * scale * G[:, j]
    (absent for odd m), so encode(s) = unvec(J @ s) exactly for real s.
    """
    n_c = enc.n_f * enc.t_data
    j = np.zeros((n_c, enc.m), dtype=complex)
    cols = enc.scale * enc.g
    j[:, 0::2] = cols[:, : (enc.m + 1) // 2]
    if enc.m > 1:
        j[:, 1::2] = 1j * cols[:, : enc.m // 2]
    return j


def pullback_gradient(enc: LinearEncoder, grad_codeword: np.ndarray) -> np.ndarray:
    """Pull a conjugate-Wirtinger codeword gradient back to the real source.

    grad_codeword: (..., n_f, t_data) gradient d f / d c* of a real
    function f.  Returns the real gradient (..., m) of f with respect to
    s, i.e. 2 * Re(J^H g) interleaved over (Re, Im) pairs.
    """
    g = np.asarray(grad_codeword)
    lead = g.shape[:-2]
    vec = np.swapaxes(g, -1, -2).reshape(lead + (-1,))  # column-major codeword vec
    u = vec @ np.conj(enc.scale * enc.g)  # (..., m_c)
    out = np.empty(lead + (enc.m,))
    out[..., 0::2] = 2.0 * u.real[..., : (enc.m + 1) // 2]
    if enc.m > 1:
        out[..., 1::2] = 2.0 * u.imag[..., : enc.m // 2]
    return out


# -- pilot schemes ----------------------------------------------------


@dataclass(frozen=True)
class PilotScheme:
    """Pilot placement policy. alpha and rho only apply to their kinds."""

    kind: str = "none"
    alpha: float = 0.5
    pilot_power_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "orthogonal", "superimposed"):
            raise ValueError(f"unknown pilot kind {self.kind!r}")
        if self.kind == "orthogonal" and not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.kind == "superimposed" and not 0.0 < self.pilot_power_fraction < 1.0:
            raise ValueError("pilot_power_fraction must lie in (0, 1)")


def n_pilot_symbols(scheme: PilotScheme, t_s: int) -> int:
    """Number of pilot OFDM symbols; alpha * t_s must be a whole number.

    alpha = 0 is allowed and degenerates the orthogonal kind to pilot-free.
    """
    if scheme.kind != "orthogonal":
        return 0
    n_pil = scheme.alpha * t_s
    if abs(n_pil - round(n_pil)) > 1e-9:
        raise ValueError(f"alpha * t_s = {n_pil} is not a whole number of symbols")
    n_pil = int(round(n_pil))
    if not 0 <= n_pil < t_s:
        raise ValueError("orthogonal scheme needs 0 <= alpha*t_s < t_s")
    return n_pil


def t_data_symbols(scheme: PilotScheme, t_s: int) -> int:
    """Data symbols per block under the scheme."""
    return t_s - n_pilot_symbols(scheme, t_s)


def pilot_matrices(scheme: PilotScheme, dims: SystemDims) -> np.ndarray | None:
    """Known pilot blocks per user, reproducible from (scheme.seed, scheme).

    orthogonal: (n_f, n_pil, n_t), users on disjoint symbol subsets
    (exactly orthogonal), each carrying energy n_f * n_pil * power_p.
    superimposed: (n_f, t_s, n_t) dense blocks, energy n_f * t_s * power_p
    per user before the rho split.  none: None.
    """
    if scheme.kind == "none":
        return None
    rng = split_rng(scheme.seed, 91, dims.n_f, dims.n_t, dims.t_s)
    if scheme.kind == "orthogonal":
        n_pil = n_pilot_symbols(scheme, dims.t_s)
        if n_pil == 0:
            return None
        if n_pil < dims.n_t:
            raise ValueError(
                f"{n_pil} pilot symbols cannot host {dims.n_t} disjoint users"
            )
        pilots = np.zeros((dims.n_f, n_pil, dims.n_t), dtype=complex)
        for k in range(dims.n_t):
            fired = np.arange(k, n_pil, dims.n_t)
            amp = np.sqrt(n_pil * dims.power_p / fired.size)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=(dims.n_f, fired.size))
            pilots[:, fired, k] = amp * np.exp(1j * phases)
        return pilots
    # superimposed: dense unit-budget blocks, exactly normalized per user
    pilots = rng.standard_normal((dims.n_f, dims.t_s, dims.n_t)) + 1j * rng.standard_normal(
        (dims.n_f, dims.t_s, dims.n_t)
    )
    target = dims.n_f * dims.t_s * dims.power_p
    for k in range(dims.n_t):
        pilots[:, :, k] *= np.sqrt(target) / np.linalg.norm(pilots[:, :, k])
    return pilots


def data_symbol_slice(scheme: PilotScheme, t_s: int) -> slice:
    """Symbol positions carrying (possibly superimposed) data."""
    return slice(n_pilot_symbols(scheme, t_s), t_s)


def assemble_block(codewords, scheme: PilotScheme, dims: SystemDims,
                   check_power: bool = True) -> np.ndarray:
    """Combine per-user codewords and pilots into X (..., n_f, t_s, n_t).

    codewords: sequence of n_t arrays (..., n_f, t_data).  Raises on wrong
    user count, codeword shape, or per-user energy above 2x the block
    budget n_f * t_s * power_p.  check_power=False skips the energy guard
    (likelihood evaluations at off-budget candidate points).
    """
    if len(codewords) != dims.n_t:
        raise ValueError(f"need {dims.n_t} codewords, got {len(codewords)}")
    t_data = t_data_symbols(scheme, dims.t_s)
    cw = [np.asarray(c, dtype=complex) for c in codewords]
    for k, c in enumerate(cw):
        if c.shape[-2:] != (dims.n_f, t_data):
            raise ValueError(
                f"codeword {k} shape {c.shape[-2:]} != ({dims.n_f}, {t_data})"
            )
    lead = np.broadcast_shapes(*[c.shape[:-2] for c in cw])
    x = np.zeros(lead + (dims.n_f, dims.t_s, dims.n_t), dtype=complex)
    pilots = pilot_matrices(scheme, dims)
    if scheme.kind == "none":
        for k, c in enumerate(cw):
            x[..., :, :, k] = c
    elif scheme.kind == "orthogonal":
        n_pil = n_pilot_symbols(scheme, dims.t_s)
        for k, c in enumerate(cw):
            if n_pil:
                x[..., :, :n_pil, k] = pilots[:, :, k]
            x[..., :, n_pil:, k] = c
    else:  # superimposed
        rho = scheme.pilot_power_fraction
        for k, c in enumerate(cw):
            x[..., :, :, k] = np.sqrt(1.0 - rho) * c + np.sqrt(rho) * pilots[:, :, k]
    if check_power:
        budget = dims.n_f * dims.t_s * dims.power_p
        energy = np.sum(np.abs(x) ** 2, axis=(-3, -2))  # (..., n_t)
        if np.any(energy > OVERFLOW_FACTOR * budget):
            raise PowerOverflowError(
                f"power overflow: per-user block energy {float(np.max(energy)):.4g} "
                f"exceeds {OVERFLOW_FACTOR} x budget {budget:.4g}"
            )
    return x


def codeword_gradient_from_block(grad_x: np.ndarray, scheme: PilotScheme,
                                 dims: SystemDims, k: int) -> np.ndarray:
    """Restrict a conjugate-Wirtinger gradient in X to user k's codeword.

    Pilot positions contribute nothing under the orthogonal kind; the
    superimposed kind scales by sqrt(1 - rho) (chain rule through the
    power split).
    """
    g = np.asarray(grad_x)
    if scheme.kind == "superimposed":
        return np.sqrt(1.0 - scheme.pilot_power_fraction) * g[..., :, :, k]
    sl = data_symbol_slice(scheme, dims.t_s)
    return g[..., :, sl, k]


# -- canonical transmit vectorization and pushforward prior -----------


def block_to_real(x: np.ndarray) -> np.ndarray:
    """Real embedding of the canonical transmit vec [vec(X_0); vec(X_1); ...].

    Same layout trick as the channel embedding: per-slice column-major vec
    via trailing-axes swap, batched over leading axes.
    """
    x = np.asarray(x)
    lead = x.shape[:-3]
    v = np.ascontiguousarray(np.swapaxes(x, -1, -2)).reshape(lead + (-1,))
    return complex_to_real(v)


def real_to_block(v: np.ndarray, dims: SystemDims) -> np.ndarray:
    """Inverse of block_to_real."""
    z = real_to_complex(np.asarray(v))
    lead = z.shape[:-1]
    t = z.reshape(lead + (dims.n_f, dims.n_t, dims.t_s))
    return np.swapaxes(t, -1, -2)


def transmit_prior(encoders, source_priors, scheme: PilotScheme, dims: SystemDims) -> GmmPrior:
    """Pushforward prior of the assembled block in the real transmit embedding.

    Sources are independent across users, so the joint source prior is the
    product mixture; the block assembly is affine in the sources (pilots
    are the offset), so the result stays a Gaussian mixture, typically
    supported on a low-dimensional affine subspace of the block space.
    """
    if len(encoders) != dims.n_t or len(source_priors) != dims.n_t:
        raise ValueError("need one encoder and one source prior per user")
    t_data = t_data_symbols(scheme, dims.t_s)
    for enc in encoders:
        if (enc.n_f, enc.t_data) != (dims.n_f, t_data):
            raise ValueError("encoder geometry does not match dims/scheme")
    joint = source_priors[0]
    for p in source_priors[1:]:
        joint = joint.product(p)
    zeros = [np.zeros(enc.m) for enc in encoders]
    # overflow guard off while probing: unit probes are not draws from the prior
    probe_encs = [unguarded(e) for e in encoders]
    offset = block_to_real(assemble_block([encode(e, z) for e, z in zip(probe_encs, zeros)],
                                          scheme, dims, check_power=False))
    cols = []
    for k, enc in enumerate(probe_encs):
        for i in range(enc.m):
            s = zeros[k].copy()
            s[i] = 1.0
            cw = [encode(e, s if j == k else zeros[j]) for j, e in enumerate(probe_encs)]
            cols.append(block_to_real(assemble_block(cw, scheme, dims, check_power=False))
                        - offset)
    mat = np.stack(cols, axis=1)  # (2 * x_dim, sum m_k)
    return joint.affine_pushforward(mat, offset)

"""Parallel flow-matching posterior sampler for the joint channel/source state.

All flow variables (the channel in its real embedding and each user's real
source vector) are integrated backwards from tau = 1 to tau = delta_tau
with a shared schedule.  One step at tau does, in order:

1. evaluate each variable's prior velocity at the current state,
2. form the one-step denoised estimates x_hat(0|tau) = x - tau * v,
3. evaluate the likelihood gradients at those denoised estimates (all
   variables use the same pre-step estimates: the parallel contract),
4. Euler update x(tau - dt) = x - dt * v + (tau * dt * beta / (1 - tau)) * g.

The guidance factor is singular at tau = 1, so the first step is prior
only.  The returned estimates are the raw states at tau = delta_tau; the
denoised terminal states are also reported.  Velocity evaluations per
variable equal 1 / delta_tau: one per visited tau including the last,
whose evaluation produces the terminal denoised state instead of another
update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel_sim import SystemDims, channel_to_real, real_to_channel
from .encoders import (
    PilotScheme,
    assemble_block,
    codeword_gradient_from_block,
    encode,
    pullback_gradient,
    unguarded,
)
from .seeding import split_rng

__all__ = [
    "LikelihoodModel",
    "PfmConfig",
    "FlowState",
    "PfmResult",
    "log_likelihood",
    "likelihood_score_h",
    "likelihood_score_s",
    "pfm_step",
    "pfm_decode",
    "pfm_decode_channel",
    "write_trace_csv",
]


@dataclass(frozen=True)
class LikelihoodModel:
    """Observation model p(Y | H, {s_k}) for one (possibly batched) block.

    y: (..., n_f, t_s, n_r) received tensor; the leading axes, if any, are
    independent trials sharing encoders, scheme and noise level.
    """

    y: np.ndarray
    encoders: tuple
    scheme: PilotScheme
    dims: SystemDims
    noise_var: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=complex)
        d = self.dims
        if y.shape[-3:] != (d.n_f, d.t_s, d.n_r):
            raise ValueError(f"y trailing shape {y.shape[-3:]} != ({d.n_f}, {d.t_s}, {d.n_r})")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        if len(self.encoders) != d.n_t:
            raise ValueError(f"need {d.n_t} encoders, one per user")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "encoders", tuple(unguarded(e) for e in self.encoders))

    @property
    def batch_shape(self) -> tuple:
        return self.y.shape[:-3]

    def assemble(self, s_list) -> np.ndarray:
        """Transmit block implied by source estimates (guards off)."""
        cw = [encode(enc, s) for enc, s in zip(self.encoders, s_list)]
        return assemble_block(cw, self.scheme, self.dims, check_power=False)


def log_likelihood(lm: LikelihoodModel, h: np.ndarray, s_list) -> np.ndarray:
    """Gaussian log density of Y given the channel tensor and sources.

    Convention: the full normalized density, -||Y - X H||_F^2 / noise_var
    - n_f*t_s*n_r * log(pi * noise_var), so a perfect fit attains the
    constant -n log(pi sigma^2).  Batched over leading axes of y/h/s.
    """
    x = lm.assemble(s_list)
    resid = lm.y - x @ h
    n_entries = lm.dims.n_f * lm.dims.t_s * lm.dims.n_r
    quad = np.sum(np.abs(resid) ** 2, axis=(-3, -2, -1)) / lm.noise_var
    return -quad - n_entries * np.log(np.pi * lm.noise_var)


def _wirtinger_grads(lm: LikelihoodModel, h: np.ndarray, s_list):
    """Conjugate-Wirtinger gradients of log_likelihood in H and X.

    Per subcarrier: d/dH* = X^H R / noise_var and d/dX* = R H^H / noise_var
    with R = Y - X H.  Returns (grad_h tensor, grad_x tensor, residual).
    """
    x = lm.assemble(s_list)
    resid = lm.y - x @ h
    g_h = np.swapaxes(x, -1, -2).conj() @ resid / lm.noise_var
    g_x = resid @ np.swapaxes(h, -1, -2).conj() / lm.noise_var
    return g_h, g_x, resid


def likelihood_score_h(lm: LikelihoodModel, h: np.ndarray, s_list) -> np.ndarray:
    """Real-embedding gradient of log_likelihood w.r.t. the channel.

    The exact gradient in the canonical embedding is [2 Re g; 2 Im g] with
    g the conjugate-Wirtinger gradient, i.e. twice the embedded g.
    """
    g_h, _, _ = _wirtinger_grads(lm, h, s_list)
    return 2.0 * channel_to_real(g_h)


def likelihood_score_s(lm: LikelihoodModel, h: np.ndarray, s_list, k: int) -> np.ndarray:
    """Real gradient of log_likelihood w.r.t. user k's source vector.

    Chain rule through the block assembly (pilot positions drop out, the
    superimposed kind scales by sqrt(1 - rho)) and the encoder.
    """
    _, g_x, _ = _wirtinger_grads(lm, h, s_list)
    cw_grad = codeword_gradient_from_block(g_x, lm.scheme, lm.dims, k)
    return pullback_gradient(lm.encoders[k], cw_grad)


@dataclass(frozen=True)
class PfmConfig:
    """Sampler settings.

    delta_tau: Euler step; 1/delta_tau must be a whole number.
    beta_h / beta_s: guidance weights for the channel and (per user or
    shared) the sources.
    n_avg: independent flows averaged per trial (variance reduction
    extension, off by default).
    """

    delta_tau: float = 0.02
    beta_h: float = 1.0
    beta_s: float = 1.0
    seed: int = 0
    n_avg: int = 1
    record_trace: bool = False

    def __post_init__(self):
        n = 1.0 / self.delta_tau
        if not 0.0 < self.delta_tau <= 1.0 or abs(n - round(n)) > 1e-9:
            raise ValueError("1/delta_tau must be a positive integer")
        if self.n_avg < 1:
            raise ValueError("n_avg must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(1.0 / self.delta_tau))

    def beta_for_user(self, k: int) -> float:
        if np.ndim(self.beta_s) == 0:
            return float(self.beta_s)
        return float(self.beta_s[k])


@dataclass
class FlowState:
    """Joint state of all flows at a common tau; arrays are (batch, dim)."""

    tau: float
    h: np.ndarray
    s: list = field(default_factory=list)


def _denoised(lm: LikelihoodModel, state: FlowState, v_h, v_s):
    """Per-variable one-step denoisers from pre-step velocities."""
    h0 = state.h - state.tau * v_h
    s0 = [s - state.tau * v for s, v in zip(state.s, v_s)]
    return h0, s0


def pfm_step(state: FlowState, lm: LikelihoodModel, channel_prior, source_priors,
             cfg: PfmConfig) -> FlowState:
    """One guided Euler update from state.tau to state.tau - delta_tau.

    All likelihood gradients are evaluated at the same pre-step denoised
    estimates; no variable sees another's update within the step.
    """
    tau = state.tau
    dt = cfg.delta_tau
    v_h = channel_prior.velocity(state.h, tau)
    v_s = [p.velocity(s, tau) for p, s in zip(source_priors, state.s)]
    if tau >= 1.0:  # guidance factor tau*dt/(1-tau) singular: prior-only step
        return FlowState(tau - dt, state.h - dt * v_h,
                         [s - dt * v for s, v in zip(state.s, v_s)])
    h0, s0 = _denoised(lm, state, v_h, v_s)
    h0_t = real_to_channel(h0, lm.dims)
    g_h = likelihood_score_h(lm, h0_t, s0)
    coef = tau * dt / (1.0 - tau)
    new_h = state.h - dt * v_h + coef * cfg.beta_h * g_h
    new_s = []
    for k, (s, v) in enumerate(zip(state.s, v_s)):
        g_s = likelihood_score_s(lm, h0_t, s0, k)
        new_s.append(s - dt * v + coef * cfg.beta_for_user(k) * g_s)
    return FlowState(tau - dt, new_h, new_s)


@dataclass
class PfmResult:
    """Decoder output: estimates, accounting and optional per-step trace."""

    h_hat: np.ndarray          # (..., n_f, n_t, n_r)
    s_hat: list                # per user (..., m_k)
    x_hat: np.ndarray          # (..., n_f, t_s, n_t) re-encoded block
    h_hat_denoised: np.ndarray
    s_hat_denoised: list
    nfe_per_variable: int
    trace: dict | None = None


def _init_state(lm: LikelihoodModel, source_dims, cfg: PfmConfig, row_keys,
                n_avg: int) -> FlowState:
    """Standard-Gaussian initialization at tau=1.

    Row (o, a) draws from the stream split by (seed, row_keys[o], a), so an
    observation decoded alone with the same key reproduces its batched run.
    """
    d_h = 2 * lm.dims.h_dim
    n_rows = len(row_keys) * n_avg
    h = np.empty((n_rows, d_h))
    s = [np.empty((n_rows, m)) for m in source_dims]
    b = 0
    for key in row_keys:
        for a in range(n_avg):
            rng = split_rng(cfg.seed, int(key), a)
            h[b] = rng.standard_normal(d_h)
            for arr, m in zip(s, source_dims):
                arr[b] = rng.standard_normal(m)
            b += 1
    return FlowState(1.0, h, s)


def pfm_decode(lm: LikelihoodModel, channel_prior, source_priors, cfg: PfmConfig,
               truth=None, row_keys=None) -> PfmResult:
    """Run the full reverse schedule and return joint estimates.

    truth, when given, is a (h_tensor, x_tensor) pair used only to record
    per-step errors in the trace.  Batched observations decode as
    independent rows; cfg.n_avg > 1 averages that many independent flows
    per observation.  row_keys optionally names each observation's
    initialization stream (default 0..n-1), letting callers keep per-trial
    reproducibility when some trials are dropped from a batch.
    """
    dims = lm.dims
    batch = lm.batch_shape
    if len(batch) > 1:
        raise ValueError("at most one leading batch axis is supported")
    n_obs = batch[0] if batch else 1
    source_dims = [enc.m for enc in lm.encoders]
    if row_keys is None:
        row_keys = range(n_obs)
    elif len(row_keys) != n_obs:
        raise ValueError("row_keys must have one entry per observation")

    lm_rows = lm
    if cfg.n_avg > 1 or not batch:
        y_rows = np.repeat(lm.y.reshape((n_obs,) + lm.y.shape[-3:]), cfg.n_avg, axis=0)
        lm_rows = LikelihoodModel(y=y_rows, encoders=lm.encoders, scheme=lm.scheme,
                                  dims=dims, noise_var=lm.noise_var)

    state = _init_state(lm_rows, source_dims, cfg, row_keys, cfg.n_avg)
    trace = {"tau": [], "residual_rms": [], "nmse_h_db": [], "nmse_x_db": []} if cfg.record_trace else None
    n_steps = cfg.n_steps
    nfe = 0

    def record(st: FlowState, v_h, v_s):
        h0, s0 = _denoised(lm_rows, st, v_h, v_s)
        h0_t = real_to_channel(h0, dims)
        x0 = lm_rows.assemble(s0)
        resid = lm_rows.y - x0 @ h0_t
        trace["tau"].append(st.tau)
        trace["residual_rms"].append(float(np.sqrt(np.mean(np.abs(resid) ** 2))))
        if truth is not None:
            h_true, x_true = truth
            trace["nmse_h_db"].append(_nmse_db(h0_t, h_true, cfg.n_avg))
            trace["nmse_x_db"].append(_nmse_db(x0, x_true, cfg.n_avg))

    # overflow from a diverging flow (guidance weight too large for the noise
    # level) shows up as non-finite estimates; callers decide how to react
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps - 1):
            tau = (n_steps - step) / n_steps  # exact grid, no float drift
            state.tau = tau
            if trace is not None:
                v_h = channel_prior.velocity(state.h, tau)
                v_s = [p.velocity(s, tau) for p, s in zip(source_priors, state.s)]
                record(state, v_h, v_s)
            state = pfm_step(state, lm_rows, channel_prior, source_priors, cfg)
            nfe += 1

        # terminal visit at tau = delta_tau: one more velocity evaluation for
        # the denoised output, no further guided update
        state.tau = 1.0 / n_steps
        v_h = channel_prior.velocity(state.h, state.tau)
        v_s = [p.velocity(s, state.tau) for p, s in zip(source_priors, state.s)]
        nfe += 1
        if trace is not None:
            record(state, v_h, v_s)
        h0, s0 = _denoised(lm_rows, state, v_h, v_s)

    def fold(arr):
        """Average the n_avg flows of each observation, drop fake batch."""
        arr = arr.reshape((n_obs, cfg.n_avg) + arr.shape[1:]).mean(axis=1)
        return arr if batch else arr[0]

    h_hat = real_to_channel(fold(state.h), dims)
    s_hat = [fold(s) for s in state.s]
    x_hat = lm.assemble(s_hat)
    return PfmResult(
        h_hat=h_hat,
        s_hat=s_hat,
        x_hat=x_hat,
        h_hat_denoised=real_to_channel(fold(h0), dims),
        s_hat_denoised=[fold(s) for s in s0],
        nfe_per_variable=nfe,
        trace=trace,
    )


def pfm_decode_channel(y: np.ndarray, x_known: np.ndarray, channel_prior, dims: SystemDims,
                       noise_var: float, cfg: PfmConfig, row_keys=None) -> PfmResult:
    """Channel-only guided flow for a fully known transmit block.

    The pilot-only special case of the sampler: the source flows drop out
    and the likelihood gradient is exact up to the denoising
    approximation.  Same schedule, guidance factor and averaging
    semantics as pfm_decode; y may carry one leading batch axis.
    """
    y = np.asarray(y, dtype=complex)
    if y.shape[-3:] != (dims.n_f, dims.t_s, dims.n_r):
        raise ValueError(f"y trailing shape {y.shape[-3:]} != block shape")
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    batch = y.shape[:-3]
    if len(batch) > 1:
        raise ValueError("at most one leading batch axis is supported")
    n_obs = batch[0] if batch else 1
    if row_keys is None:
        row_keys = range(n_obs)
    elif len(row_keys) != n_obs:
        raise ValueError("row_keys must have one entry per observation")

    y_rows = np.repeat(y.reshape((n_obs,) + y.shape[-3:]), cfg.n_avg, axis=0)
    d_h = 2 * dims.h_dim
    h = np.empty((len(row_keys) * cfg.n_avg, d_h))
    b = 0
    for key in row_keys:
        for a in range(cfg.n_avg):
            h[b] = split_rng(cfg.seed, int(key), a).standard_normal(d_h)
            b += 1

    n_steps = cfg.n_steps
    xh = np.swapaxes(x_known, -1, -2).conj()
    nfe = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps - 1):
            tau = (n_steps - step) / n_steps
            v = channel_prior.velocity(h, tau)
            nfe += 1
            if tau >= 1.0:
                h = h - cfg.delta_tau * v
                continue
            h0_t = real_to_channel(h - tau * v, dims)
            resid = y_rows - x_known @ h0_t
            g = 2.0 * channel_to_real(xh @ resid / noise_var)
            coef = tau * cfg.delta_tau / (1.0 - tau)
            h = h - cfg.delta_tau * v + coef * cfg.beta_h * g
        tau = 1.0 / n_steps
        v = channel_prior.velocity(h, tau)
        nfe += 1
        h0 = h - tau * v

    def fold(arr):
        arr = arr.reshape((n_obs, cfg.n_avg) + arr.shape[1:]).mean(axis=1)
        return arr if batch else arr[0]

    x_hat = np.broadcast_to(x_known, batch + x_known.shape[-3:]) if batch else x_known
    return PfmResult(h_hat=real_to_channel(fold(h), dims), s_hat=[], x_hat=np.array(x_hat),
                     h_hat_denoised=real_to_channel(fold(h0), dims), s_hat_denoised=[],
                     nfe_per_variable=nfe)


def write_trace_csv(trace: dict, path) -> None:
    """Persist a recorded per-step trace as CSV.

    Columns: step, tau, residual_rms, and, when the decode was given ground
    truth, nmse_h_db and nmse_x_db.
    """
    cols = ["step", "tau", "residual_rms"]
    if trace.get("nmse_h_db"):
        cols += ["nmse_h_db", "nmse_x_db"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(trace["tau"])):
            vals = [str(i)] + [format(trace[c][i], ".12g") for c in cols[1:]]
            fh.write(",".join(vals) + "\n")


def _nmse_db(est: np.ndarray, ref: np.ndarray, n_avg: int) -> float:
    """Mean per-row NMSE in dB for trace recording (n_avg rows per trial)."""
    ref = _expand_truth(ref, est.shape, n_avg)
    num = np.sum(np.abs(est - ref) ** 2, axis=(-3, -2, -1))
    den = np.sum(np.abs(ref) ** 2, axis=(-3, -2, -1))
    return float(10.0 * np.log10(np.mean(num / den)))


def _expand_truth(ref: np.ndarray, target_shape, n_avg: int) -> np.ndarray:
    """Repeat per-trial truth tensors to match the n_avg-expanded row axis."""
    ref = np.asarray(ref)
    if ref.shape == tuple(target_shape):
        return ref
    flat = ref.reshape((-1,) + ref.shape[-3:])
    return np.repeat(flat, n_avg, axis=0).reshape(target_shape)

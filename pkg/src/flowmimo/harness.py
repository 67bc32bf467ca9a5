"""Monte-Carlo experiment harness: config, sweeps, metrics, reporting.

A sweep is the cartesian product of (pilot scheme x CBR x channel SNR).
Every random draw descends from the master seed through counter-based
splits keyed by grid-point and trial indices, so any single trial can be
reproduced in isolation and reruns are byte-identical.

CBR (channel bandwidth ratio) is n_f * t_s / m with m the per-user real
source dimension; sweeping CBR sweeps m.  Channel SNR targets are met by
calibrating the noise variance against the Monte-Carlo mean received
signal energy of the configured encoders and priors.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, channel_sim, diskio, encoders, fim_bcrb
from .channel_sim import ReceiveTensor, SystemDims
from .encoders import LinearEncoder, PilotScheme, PowerOverflowError
from .flow_priors import GmmPrior
from .pfm_decoder import LikelihoodModel, PfmConfig, pfm_decode
from .seeding import split_rng

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "GridPoint",
    "TrialResult",
    "compute_metrics",
    "nmse_db",
    "build_channel_prior",
    "build_source_prior",
    "grid_points",
    "calibrate_noise_var",
    "run_point",
    "run_sweep",
    "point_bcrb",
    "aggregate_results",
]

NMSE_DB_FLOOR = -120.0
FAILURE_ABORT_FRACTION = 0.10


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


def _require_keys(d: dict, allowed: set, context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see from_dict for the schema)."""

    master_seed: int = 1234
    dims: SystemDims = field(default_factory=lambda: SystemDims(n_f=4, n_t=2, n_r=8, t_s=6))
    channel_prior: dict = field(default_factory=lambda: {"kind": "correlated"})
    source_prior: dict = field(default_factory=lambda: {"kind": "shell", "n_components": 4, "sigma": 0.05})
    schemes: tuple = (("orthogonal", 0.5),)   # (kind, alpha-or-rho) pairs
    csnr_db: tuple = (0.0,)
    cbr: tuple = (1.0,)
    n_trials: int = 20
    delta_tau: float = 0.02
    beta_h: float = 1.0
    beta_s: float = 1.0
    n_avg: int = 1
    bcrb_eps: float = 0.05
    bcrb_prior_samples: int = 20000
    bcrb_fim_samples: int = 64
    n_calibration: int = 400
    workers: int = 1
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        _require_keys(raw, {"master_seed", "dims", "channel_prior", "source_prior",
                            "sweep", "pfm", "bcrb", "run", "train"}, "top-level")
        dims_raw = dict(raw.get("dims", {}))
        _require_keys(dims_raw, {"n_f", "n_t", "n_r", "t_s", "power_p"}, "dims")
        try:
            dims = SystemDims(n_f=int(dims_raw.get("n_f", 4)), n_t=int(dims_raw.get("n_t", 2)),
                              n_r=int(dims_raw.get("n_r", 8)), t_s=int(dims_raw.get("t_s", 6)),
                              power_p=float(dims_raw.get("power_p", 1.0)))
        except ValueError as err:
            raise ConfigError(str(err)) from err

        ch = dict(raw.get("channel_prior", {"kind": "correlated"}))
        _require_keys(ch, {"kind", "rho_f", "rho_t", "rho_r", "n_components", "spread", "sigma", "seed"},
                      "channel_prior")
        if ch.get("kind", "correlated") not in ("correlated", "iid", "gmm"):
            raise ConfigError(f"unknown channel prior kind {ch.get('kind')!r}")

        src = dict(raw.get("source_prior", {"kind": "shell"}))
        _require_keys(src, {"kind", "n_components", "sigma", "seed"}, "source_prior")
        if src.get("kind", "shell") not in ("shell", "gaussian"):
            raise ConfigError(f"unknown source prior kind {src.get('kind')!r}")

        sweep = dict(raw.get("sweep", {}))
        _require_keys(sweep, {"csnr_db", "cbr", "schemes", "alpha", "pilot_power_fraction",
                              "n_trials"}, "sweep")
        scheme_kinds = list(sweep.get("schemes", ["orthogonal"]))
        alphas = list(np.atleast_1d(sweep.get("alpha", [0.5])))
        rho = float(sweep.get("pilot_power_fraction", 0.5))
        schemes = []
        for kind in scheme_kinds:
            if kind == "orthogonal":
                schemes.extend((kind, float(a)) for a in alphas)
            elif kind in ("none", "superimposed"):
                schemes.append((kind, rho if kind == "superimposed" else 0.0))
            else:
                raise ConfigError(f"unknown pilot scheme {kind!r}")
        csnr_db = tuple(float(v) for v in np.atleast_1d(sweep.get("csnr_db", [0.0])))
        cbr = tuple(float(v) for v in np.atleast_1d(sweep.get("cbr", [1.0])))
        if any(v <= 0 for v in cbr):
            raise ConfigError("cbr values must be positive")
        n_trials = int(sweep.get("n_trials", 20))
        if n_trials < 1:
            raise ConfigError("n_trials must be >= 1")

        pfm = dict(raw.get("pfm", {}))
        _require_keys(pfm, {"delta_tau", "beta_h", "beta_s", "n_avg"}, "pfm")
        bcrb_raw = dict(raw.get("bcrb", {}))
        _require_keys(bcrb_raw, {"eps", "prior_samples", "fim_samples"}, "bcrb")
        run = dict(raw.get("run", {}))
        _require_keys(run, {"workers", "n_calibration"}, "run")
        train = dict(raw.get("train", {}))
        _require_keys(train, {"dim", "hidden", "steps", "lr", "batch", "eps", "seed"}, "train")

        try:
            cfg = cls(
                master_seed=int(raw.get("master_seed", 1234)),
                dims=dims,
                channel_prior=ch,
                source_prior=src,
                schemes=tuple(schemes),
                csnr_db=csnr_db,
                cbr=cbr,
                n_trials=n_trials,
                delta_tau=float(pfm.get("delta_tau", 0.02)),
                beta_h=float(pfm.get("beta_h", 1.0)),
                beta_s=float(pfm.get("beta_s", 1.0)),
                n_avg=int(pfm.get("n_avg", 1)),
                bcrb_eps=float(bcrb_raw.get("eps", 0.05)),
                bcrb_prior_samples=int(bcrb_raw.get("prior_samples", 20000)),
                bcrb_fim_samples=int(bcrb_raw.get("fim_samples", 64)),
                n_calibration=int(run.get("n_calibration", 400)),
                workers=int(run.get("workers", 1)),
                train=train,
            )
            PfmConfig(delta_tau=cfg.delta_tau, beta_h=cfg.beta_h, beta_s=cfg.beta_s,
                      n_avg=cfg.n_avg)  # validates step/averaging settings
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"malformed config {path}: {err}") from err
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class GridPoint:
    """One sweep cell: a pilot scheme at one CBR (source dim) and CSNR."""

    idx: int
    scheme: PilotScheme
    cbr_target: float
    m: int
    csnr_db: float


def realized_cbr(dims: SystemDims, m: int) -> float:
    return dims.n_f * dims.t_s / m


@dataclass
class TrialResult:
    """Per-trial, per-method metric row."""

    point: int
    trial: int
    method: str
    scheme: str
    alpha: float
    cbr: float
    m: int
    csnr_target_db: float
    csnr_realized_db: float
    noise_var: float
    nmse_h_db: float
    nmse_x_db: float
    bcrb_h_db: float = float("nan")
    bcrb_x_db: float = float("nan")
    failed: bool = False
    # trial stream key "master:point:trial"; enough to replay one trial alone
    seed: str = ""
    # wall time share of the batched decode; in-memory only (results.csv must
    # be byte-identical across reruns, so timing never lands there)
    runtime_ms: float = float("nan")


def nmse_db(err_energy: float, ref_energy: float) -> float:
    """10 log10 of the normalized error, clamped at -120 dB for exact fits."""
    if ref_energy <= 0:
        raise ValueError("reference energy must be positive")
    ratio = err_energy / ref_energy
    return 10.0 * np.log10(max(ratio, 10.0 ** (NMSE_DB_FLOOR / 10.0)))


def compute_metrics(h_true: np.ndarray, h_hat: np.ndarray, x_true: np.ndarray,
                    x_hat: np.ndarray) -> dict:
    """Per-trial normalized errors of channel and transmit-block estimates."""
    eh = float(np.sum(np.abs(h_hat - h_true) ** 2))
    rh = float(np.sum(np.abs(h_true) ** 2))
    ex = float(np.sum(np.abs(x_hat - x_true) ** 2))
    rx = float(np.sum(np.abs(x_true) ** 2))
    return {
        "nmse_h": eh / rh,
        "nmse_x": ex / rx,
        "nmse_h_db": nmse_db(eh, rh),
        "nmse_x_db": nmse_db(ex, rx),
    }


# -- prior factories --------------------------------------------------


def build_channel_prior(cfg_block: dict, dims: SystemDims) -> GmmPrior:
    """Channel priors: 'correlated' (separable exponential), 'iid', or 'gmm'."""
    kind = cfg_block.get("kind", "correlated")
    if kind == "correlated":
        return channel_sim.correlated_channel_prior(
            dims, rho_f=float(cfg_block.get("rho_f", 0.7)),
            rho_t=float(cfg_block.get("rho_t", 0.3)), rho_r=float(cfg_block.get("rho_r", 0.5)))
    if kind == "iid":
        d = 2 * dims.h_dim
        return GmmPrior.gaussian(np.zeros(d), 0.5 * np.eye(d))
    # gmm: correlated components displaced by unit-energy random means
    n_comp = int(cfg_block.get("n_components", 3))
    spread = float(cfg_block.get("spread", 0.7))
    seed = int(cfg_block.get("seed", 97))
    base = channel_sim.correlated_channel_prior(dims)
    comp0 = base.components[0]
    rng = split_rng(seed, 11)
    comps = []
    for _ in range(n_comp):
        mu = rng.standard_normal(2 * dims.h_dim)
        mu *= spread * np.sqrt(dims.h_dim) / np.linalg.norm(mu)
        comps.append(dataclasses.replace(comp0, mean=mu,
                                         eigvals=comp0.eigvals * (1.0 - spread**2)))
    return GmmPrior(np.full(n_comp, 1.0 / n_comp), comps)


def build_source_prior(cfg_block: dict, m: int) -> GmmPrior:
    """Source priors: 'shell' (unit-energy mixture, narrow modes) or 'gaussian'.

    The shell width default keeps realized codeword energies inside the
    transmit overflow guard at small m, where relative norm fluctuations
    are largest.
    """
    kind = cfg_block.get("kind", "shell")
    if kind == "gaussian":
        return GmmPrior.standard(m)
    return GmmPrior.shell(m, n_components=int(cfg_block.get("n_components", 4)),
                          sigma=float(cfg_block.get("sigma", 0.05)),
                          seed=int(cfg_block.get("seed", 53)))


def grid_points(cfg: ExperimentConfig) -> list:
    pts = []
    idx = 0
    for kind, param in cfg.schemes:
        if kind == "orthogonal":
            scheme = PilotScheme(kind=kind, alpha=param, seed=cfg.master_seed)
        elif kind == "superimposed":
            scheme = PilotScheme(kind=kind, pilot_power_fraction=param, seed=cfg.master_seed)
        else:
            scheme = PilotScheme(kind=kind, seed=cfg.master_seed)
        for cbr in cfg.cbr:
            m = max(1, int(round(cfg.dims.n_f * cfg.dims.t_s / cbr)))
            t_data = encoders.t_data_symbols(scheme, cfg.dims.t_s)
            if (m + 1) // 2 > cfg.dims.n_f * t_data:
                raise ConfigError(
                    f"cbr={cbr} gives m={m} beyond codeword capacity for scheme {kind}")
            for csnr in cfg.csnr_db:
                pts.append(GridPoint(idx=idx, scheme=scheme, cbr_target=cbr, m=m, csnr_db=csnr))
                idx += 1
    return pts


def _point_encoders(cfg: ExperimentConfig, point: GridPoint, source_prior: GmmPrior):
    t_data = encoders.t_data_symbols(point.scheme, cfg.dims.t_s)
    encs = []
    for k in range(cfg.dims.n_t):
        rng = split_rng(cfg.master_seed, 7001, point.m, _scheme_tag(point.scheme), k)
        encs.append(LinearEncoder.random_orthonormal(
            cfg.dims.n_f, t_data, point.m, cfg.dims.power_p, rng, source_prior=source_prior))
    return encs


def _scheme_tag(scheme: PilotScheme) -> int:
    return {"none": 0, "orthogonal": 1, "superimposed": 2}[scheme.kind]


def calibrate_noise_var(cfg: ExperimentConfig, point: GridPoint, encs, channel_prior: GmmPrior,
                        source_prior: GmmPrior) -> float:
    """Noise variance hitting the CSNR target in expectation.

    Monte-Carlo mean of ||X H||_F^2 over calibration draws, divided by the
    noise energy implied by the target ratio.
    """
    n = cfg.n_calibration
    rng = split_rng(cfg.master_seed, 8101, point.idx)
    h = channel_sim.generate_channel(channel_prior, cfg.dims, rng, n=n)
    s = [source_prior.sample(n, rng) for _ in range(cfg.dims.n_t)]
    cw = [encoders.encode(encoders.unguarded(e), sk) for e, sk in zip(encs, s)]
    x = encoders.assemble_block(cw, point.scheme, cfg.dims, check_power=False)
    sig = float(np.mean(np.sum(np.abs(x @ h) ** 2, axis=(-3, -2, -1))))
    noise_energy = cfg.dims.n_f * cfg.dims.t_s * cfg.dims.n_r
    return sig / (noise_energy * 10.0 ** (point.csnr_db / 10.0))


def point_bcrb(cfg: ExperimentConfig, point: GridPoint, encs, channel_prior: GmmPrior,
               source_prior: GmmPrior, noise_var: float,
               known_x: bool = False) -> fim_bcrb.BcrbResult:
    """Bayesian bound at one grid point from the configured priors.

    known_x treats the transmit block as deterministic side information
    and bounds the channel block alone.
    """
    dims = replace(cfg.dims, noise_var=noise_var)
    rng = split_rng(cfg.master_seed, 8201, point.idx)
    n = cfg.bcrb_fim_samples
    h_ens = channel_sim.generate_channel(channel_prior, dims, rng, n=n)
    s = [source_prior.sample(n, rng) for _ in range(dims.n_t)]
    cw = [encoders.encode(encoders.unguarded(e), sk) for e, sk in zip(encs, s)]
    x_ens = encoders.assemble_block(cw, point.scheme, dims, check_power=False)

    fp_x, e_x2 = None, float("nan")
    if not known_x:
        x_prior = encoders.transmit_prior(encs, [source_prior] * dims.n_t, point.scheme, dims)
        fp_x = fim_bcrb.prior_fim(x_prior.score, x_prior.sample, cfg.bcrb_eps,
                                  cfg.bcrb_prior_samples,
                                  split_rng(cfg.master_seed, 8301, point.idx))
        mu_x, cov_x = x_prior.mean_cov()
        e_x2 = float(np.trace(cov_x) + mu_x @ mu_x)
    if len(channel_prior.components) == 1 and channel_prior.components[0].rank == channel_prior.dim:
        fp_h = fim_bcrb.gaussian_prior_fim(channel_prior)
    else:
        fp_h = fim_bcrb.prior_fim(channel_prior.score, channel_prior.sample, cfg.bcrb_eps,
                                  cfg.bcrb_prior_samples, split_rng(cfg.master_seed, 8302, point.idx))
    mat = fim_bcrb.bfim(x_ens, h_ens, noise_var, fp_x, fp_h, dims, known_x=known_x)
    mu_h, cov_h = channel_prior.mean_cov()
    e_h2 = float(np.trace(cov_h) + mu_h @ mu_h)
    return fim_bcrb.bcrb(mat, e_h2, e_x2)


def run_point(cfg: ExperimentConfig, point: GridPoint, with_bcrb: bool = False,
              dump_dir=None) -> list:
    """All trials of one grid point; returns TrialResult rows.

    Per-trial draws come from streams keyed by (point.idx, trial); the
    decoder is run once, batched over the surviving trials, with flow
    initializations keyed by original trial indices.
    """
    dims = cfg.dims
    channel_prior = build_channel_prior(cfg.channel_prior, dims)
    source_prior = build_source_prior(cfg.source_prior, point.m)
    encs = _point_encoders(cfg, point, source_prior)
    noise_var = calibrate_noise_var(cfg, point, encs, channel_prior, source_prior)
    dims_n = replace(dims, noise_var=noise_var)
    cbr = realized_cbr(dims, point.m)

    h_true, x_true, s_true, rx_list, ok_trials, failures = [], [], [], [], [], []
    for t in range(cfg.n_trials):
        rng = split_rng(cfg.master_seed, point.idx, t)
        try:
            h = channel_sim.generate_channel(channel_prior, dims_n, rng)
            s = [source_prior.sample(1, rng)[0] for _ in range(dims.n_t)]
            cw = [encoders.encode(e, sk) for e, sk in zip(encs, s)]
            x = encoders.assemble_block(cw, point.scheme, dims_n)
            rx = channel_sim.transmit(x, h, noise_var, rng)
        except PowerOverflowError:
            failures.append(t)
            continue
        h_true.append(h)
        x_true.append(x)
        s_true.append(s)
        rx_list.append(rx)
        ok_trials.append(t)

    if len(failures) > FAILURE_ABORT_FRACTION * cfg.n_trials:
        raise RuntimeError(
            f"aborting point {point.idx}: {len(failures)}/{cfg.n_trials} trials failed")

    rows = []
    base = dict(point=point.idx, scheme=point.scheme.kind,
                alpha=point.scheme.alpha if point.scheme.kind == "orthogonal" else float("nan"),
                cbr=cbr, m=point.m, csnr_target_db=point.csnr_db, noise_var=noise_var)

    def trial_seed(t: int) -> str:
        return f"{cfg.master_seed}:{point.idx}:{t}"

    for t in failures:
        rows.append(TrialResult(trial=t, method="pfm", csnr_realized_db=float("nan"),
                                nmse_h_db=float("nan"), nmse_x_db=float("nan"),
                                failed=True, seed=trial_seed(t), **base))
    if not ok_trials:
        return rows

    bc = None
    if with_bcrb:
        bc = point_bcrb(cfg, point, encs, channel_prior, source_prior, noise_var)
    bcrb_cols = dict(bcrb_h_db=bc.bcrb_h_db if bc else float("nan"),
                     bcrb_x_db=bc.bcrb_x_db if bc else float("nan"))

    y_batch = np.stack([rx.y for rx in rx_list])
    lm = LikelihoodModel(y=y_batch, encoders=tuple(encs), scheme=point.scheme,
                         dims=dims_n, noise_var=noise_var)
    pfm_cfg = PfmConfig(delta_tau=cfg.delta_tau, beta_h=cfg.beta_h, beta_s=cfg.beta_s,
                        seed=int(split_rng(cfg.master_seed, 8401, point.idx).integers(2**31)),
                        n_avg=cfg.n_avg)
    source_priors = [source_prior] * dims.n_t
    t0 = time.perf_counter()
    result = pfm_decode(lm, channel_prior, source_priors, pfm_cfg, row_keys=ok_trials)
    pfm_ms = 1e3 * (time.perf_counter() - t0) / len(ok_trials)

    est_lmmse = None
    t0 = time.perf_counter()
    if point.scheme.kind != "none":
        interference = 0.0
        if point.scheme.kind == "superimposed":
            mu_h, cov_h = channel_prior.mean_cov()
            gain = (np.trace(cov_h) + mu_h @ mu_h) / (dims.n_f * dims.n_t * dims.n_r)
            interference = ((1.0 - point.scheme.pilot_power_fraction)
                            * dims.power_p * dims.n_t * gain)
        est_lmmse = baselines.lmmse_for_scheme(channel_prior, point.scheme, dims_n,
                                               data_interference_power=interference)
        y_pil = baselines.extract_pilot_observation(y_batch, point.scheme, dims_n)
        h_lmmse = baselines.lmmse_channel_estimate(y_pil, est_lmmse)
    lmmse_ms = 1e3 * (time.perf_counter() - t0) / len(ok_trials)

    n_diverged = 0
    for i, t in enumerate(ok_trials):
        realized = channel_sim.csnr(rx_list[i])
        finite = np.all(np.isfinite(result.h_hat[i])) and np.all(np.isfinite(result.x_hat[i]))
        if finite:
            met = compute_metrics(h_true[i], result.h_hat[i], x_true[i], result.x_hat[i])
            rows.append(TrialResult(trial=t, method="pfm", csnr_realized_db=realized,
                                    nmse_h_db=met["nmse_h_db"], nmse_x_db=met["nmse_x_db"],
                                    seed=trial_seed(t), runtime_ms=pfm_ms,
                                    **base, **bcrb_cols))
        else:  # guided flow diverged (guidance weight too large for this noise level)
            n_diverged += 1
            rows.append(TrialResult(trial=t, method="pfm", csnr_realized_db=realized,
                                    nmse_h_db=float("nan"), nmse_x_db=float("nan"),
                                    failed=True, seed=trial_seed(t), runtime_ms=pfm_ms,
                                    **base, **bcrb_cols))
        if est_lmmse is not None:
            x_hat_b = _baseline_block_estimate(y_batch[i], h_lmmse[i], point.scheme, dims_n)
            met_b = compute_metrics(h_true[i], h_lmmse[i], x_true[i], x_hat_b)
            rows.append(TrialResult(trial=t, method="lmmse", csnr_realized_db=realized,
                                    nmse_h_db=met_b["nmse_h_db"], nmse_x_db=met_b["nmse_x_db"],
                                    seed=trial_seed(t), runtime_ms=lmmse_ms,
                                    **base, **bcrb_cols))
    if len(failures) + n_diverged > FAILURE_ABORT_FRACTION * cfg.n_trials:
        raise RuntimeError(
            f"aborting point {point.idx}: {len(failures) + n_diverged}/{cfg.n_trials} "
            "trials failed (overflow or diverged flow)")
    if dump_dir is not None:
        _dump_point_tensors(dump_dir, cfg, point, np.stack(h_true), np.stack(x_true), y_batch)
    return rows


def _baseline_block_estimate(y, h_hat, scheme: PilotScheme, dims: SystemDims) -> np.ndarray:
    """LS transmit-block estimate given a channel estimate, scheme aware.

    Known pilots are reinserted; only data symbols are detected.  Falls
    back to the pilot-only block (data zeroed) when the channel estimate
    is too ill-conditioned to invert.
    """
    x_hat = np.zeros((dims.n_f, dims.t_s, dims.n_t), dtype=complex)
    pilots = encoders.pilot_matrices(scheme, dims)
    try:
        if scheme.kind == "orthogonal":
            n_pil = encoders.n_pilot_symbols(scheme, dims.t_s)
            x_hat[:, :n_pil, :] = pilots
            x_hat[:, n_pil:, :] = baselines.ls_detect(y[:, n_pil:, :], h_hat)
        else:  # superimposed
            rho = scheme.pilot_power_fraction
            y_eq = y - np.sqrt(rho) * (pilots @ h_hat)
            data = baselines.ls_detect(y_eq, h_hat) / np.sqrt(1.0 - rho)
            x_hat = np.sqrt(1.0 - rho) * data + np.sqrt(rho) * pilots
    except ValueError:
        if scheme.kind == "orthogonal":
            pass  # pilot part already placed, data stays zero
        else:
            x_hat = np.sqrt(scheme.pilot_power_fraction) * pilots
    return x_hat


def _dump_point_tensors(dump_dir, cfg: ExperimentConfig, point: GridPoint, h, x, y) -> None:
    import os

    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"point{point.idx:03d}_tensors.bin")
    diskio.write_blob(path, {"kind": "trial_tensors", "point": point.idx,
                             "dims": cfg.dims.to_dict(), "scheme": point.scheme.kind},
                      {"h": h, "x": x, "y": y})


RESULT_COLUMNS = [
    "point", "trial", "method", "scheme", "alpha", "cbr", "m", "csnr_target_db",
    "csnr_realized_db", "noise_var", "nmse_h_db", "nmse_x_db", "bcrb_h_db",
    "bcrb_x_db", "failed", "seed",
]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_results_csv(rows, path) -> None:
    rows = sorted(rows, key=lambda r: (r.point, r.trial, r.method))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def write_manifest(cfg: ExperimentConfig, path, extra=None) -> None:
    manifest = {
        "config": dataclasses.asdict(cfg),
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _run_point_job(args):
    cfg_dict, point, with_bcrb = args
    cfg = ExperimentConfig(**cfg_dict)
    return run_point(cfg, point, with_bcrb=with_bcrb)


def run_sweep(cfg: ExperimentConfig, out_dir, with_bcrb: bool = False,
              dump_tensors: bool = False) -> str:
    """Run the full grid and write results.csv plus a run manifest.

    Returns the results path.  Trials execute point-by-point (each point
    internally batched); points run concurrently when cfg.workers > 1,
    with deterministic aggregation order either way.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    points = grid_points(cfg)
    dump_dir = os.path.join(out_dir, "tensors") if dump_tensors else None
    rows = []
    if cfg.workers > 1:
        cfg_dict = dataclasses.asdict(cfg)
        cfg_dict["dims"] = cfg.dims  # keep the dataclass, not a dict
        jobs = [(cfg_dict, p, with_bcrb) for p in points]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for out in pool.map(_run_point_job, jobs):
                rows.extend(out)
    else:
        for p in points:
            rows.extend(run_point(cfg, p, with_bcrb=with_bcrb, dump_dir=dump_dir))
    results_path = os.path.join(out_dir, "results.csv")
    write_results_csv(rows, results_path)
    extra = {"n_points": len(points), "with_bcrb": with_bcrb}
    if with_bcrb:
        extra["bound_check"] = check_bound_discipline(aggregate_results(results_path))
    write_manifest(cfg, os.path.join(out_dir, "manifest.json"), extra=extra)
    return results_path


def aggregate_results(results_path) -> list:
    """Group trial rows into per-(point, method) means and standard errors."""
    with open(results_path, newline="") as fh:
        reader = csv.DictReader(fh)
        raw = [r for r in reader]
    groups = {}
    for r in raw:
        if r["failed"] == "1":
            continue
        key = (int(r["point"]), r["method"])
        groups.setdefault(key, []).append(r)
    out = []
    for (point, method), rows in sorted(groups.items()):
        nh = np.array([float(r["nmse_h_db"]) for r in rows])
        nx = np.array([float(r["nmse_x_db"]) for r in rows])
        n = len(rows)
        out.append({
            "point": point, "method": method, "scheme": rows[0]["scheme"],
            "alpha": float(rows[0]["alpha"]), "cbr": float(rows[0]["cbr"]),
            "m": int(rows[0]["m"]), "csnr_target_db": float(rows[0]["csnr_target_db"]),
            "n_trials": n,
            "nmse_h_db_mean": float(nh.mean()),
            "nmse_h_db_se": float(nh.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            "nmse_x_db_mean": float(nx.mean()),
            "nmse_x_db_se": float(nx.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            "bcrb_h_db": float(rows[0]["bcrb_h_db"]),
            "bcrb_x_db": float(rows[0]["bcrb_x_db"]),
        })
    return out


def check_bound_discipline(aggregates: list) -> dict:
    """Verify every per-(point, method) mean NMSE sits above its BCRB.

    The comparison allows one standard error on the Monte-Carlo side;
    per-trial rows fluctuate below the bound legitimately, the mean must
    not.  Returns {"ok": bool, "violations": [...]} for the manifest.
    """
    violations = []
    for a in aggregates:
        for metric in ("h", "x"):
            bound = a[f"bcrb_{metric}_db"]
            if not np.isfinite(bound):
                continue
            mean = a[f"nmse_{metric}_db_mean"]
            se = a[f"nmse_{metric}_db_se"]
            if mean + se < bound:
                violations.append({"point": a["point"], "method": a["method"],
                                   "metric": metric, "nmse_db": mean, "se": se,
                                   "bcrb_db": bound})
    return {"ok": not violations, "violations": violations}

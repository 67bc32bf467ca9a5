"""Command-line front end.

Subcommands:
  simulate     one end-to-end block with per-step diagnostics
  sweep        full Monte-Carlo grid -> results.csv (+ manifest, optional bound)
  bcrb         Bayesian bound across a CSNR range -> CSV
  rank-check   Fisher matrix rank-deficiency check on random instances
  train-prior  fit a small velocity-field network to the source prior
  emit-plots   aggregate a results.csv into per-point plot data

Exit codes: 0 success, 2 bad configuration or usage, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import baselines, channel_sim, encoders, fim_bcrb, harness
from .flow_priors import MlpVf, cfm_train, score_error
from .harness import ConfigError, ExperimentConfig
from .pfm_decoder import LikelihoodModel, PfmConfig, pfm_decode, write_trace_csv
from .seeding import split_rng

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowmimo", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="single block end-to-end with diagnostics")
    sim.add_argument("--config", required=True)
    sim.add_argument("--point", type=int, default=0, help="grid point index (default 0)")
    sim.add_argument("--trial", type=int, default=0, help="trial stream index (default 0)")
    sim.add_argument("--dump-tensors", metavar="DIR", default=None)
    sim.add_argument("--trace-csv", metavar="FILE", default=None,
                     help="write the per-step trace as CSV")
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run the configured Monte-Carlo grid")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out", required=True, help="output directory")
    sw.add_argument("--with-bcrb", action="store_true")
    sw.add_argument("--dump-tensors", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    bc = sub.add_parser("bcrb", help="Bayesian bound vs channel SNR")
    bc.add_argument("--config", required=True)
    bc.add_argument("--csnr", default=None,
                    help="lo:hi:step inclusive range or comma list, dB (default: config)")
    bc.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    bc.add_argument("--known-x", action="store_true",
                    help="bound the channel block only, transmit block known")
    bc.set_defaults(func=cmd_bcrb)

    rk = sub.add_parser("rank-check", help="Fisher matrix null-space verification")
    rk.add_argument("--dims", default="1,2,3,2", help="n_f,n_t,n_r,t_s")
    rk.add_argument("--trials", type=int, default=100)
    rk.add_argument("--seed", type=int, default=0)
    rk.set_defaults(func=cmd_rank_check)

    tr = sub.add_parser("train-prior", help="fit a velocity-field net to the source prior")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.set_defaults(func=cmd_train_prior)

    ep = sub.add_parser("emit-plots", help="aggregate results.csv for plotting")
    ep.add_argument("--results", required=True)
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_emit_plots)
    return p


def _parse_csnr(text: str) -> list:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("csnr range must be lo:hi:step")
        lo, hi, step = (float(v) for v in parts)
        if step <= 0:
            raise ConfigError("csnr step must be positive")
        return list(np.arange(lo, hi + 0.5 * step, step))
    return [float(v) for v in text.split(",")]


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    points = harness.grid_points(cfg)
    if not 0 <= args.point < len(points):
        raise ConfigError(f"point index {args.point} outside grid of {len(points)}")
    point = points[args.point]
    dims = cfg.dims
    channel_prior = harness.build_channel_prior(cfg.channel_prior, dims)
    source_prior = harness.build_source_prior(cfg.source_prior, point.m)
    encs = harness._point_encoders(cfg, point, source_prior)
    noise_var = harness.calibrate_noise_var(cfg, point, encs, channel_prior, source_prior)
    dims_n = replace(dims, noise_var=noise_var)

    rng = split_rng(cfg.master_seed, point.idx, args.trial)
    h = channel_sim.generate_channel(channel_prior, dims_n, rng)
    s = [source_prior.sample(1, rng)[0] for _ in range(dims.n_t)]
    cw = [encoders.encode(e, sk) for e, sk in zip(encs, s)]
    x = encoders.assemble_block(cw, point.scheme, dims_n)
    rx = channel_sim.transmit(x, h, noise_var, rng)

    print(f"dims: n_f={dims.n_f} n_t={dims.n_t} n_r={dims.n_r} t_s={dims.t_s}")
    print(f"scheme={point.scheme.kind} alpha={point.scheme.alpha} m={point.m} "
          f"cbr={harness.realized_cbr(dims, point.m):.4g}")
    print(f"noise_var={noise_var:.6g} csnr_target={point.csnr_db:+.1f} dB "
          f"csnr_realized={channel_sim.csnr(rx):+.2f} dB")

    lm = LikelihoodModel(y=rx.y, encoders=tuple(encs), scheme=point.scheme,
                         dims=dims_n, noise_var=noise_var)
    pfm_cfg = PfmConfig(delta_tau=cfg.delta_tau, beta_h=cfg.beta_h, beta_s=cfg.beta_s,
                        seed=int(split_rng(cfg.master_seed, 8401, point.idx).integers(2**31)),
                        n_avg=cfg.n_avg, record_trace=True)
    result = pfm_decode(lm, channel_prior, [source_prior] * dims.n_t, pfm_cfg,
                        truth=(h, x), row_keys=[args.trial])

    tr = result.trace
    stride = max(1, len(tr["tau"]) // 10)
    print("  tau    resid_rms   nmse_h_dB   nmse_x_dB")
    for i in range(0, len(tr["tau"]), stride):
        print(f"  {tr['tau'][i]:.3f}  {tr['residual_rms'][i]:9.4f}  "
              f"{tr['nmse_h_db'][i]:+9.2f}   {tr['nmse_x_db'][i]:+9.2f}")
    met = harness.compute_metrics(h, result.h_hat, x, result.x_hat)
    print(f"pfm: nmse_h={met['nmse_h_db']:+.2f} dB  nmse_x={met['nmse_x_db']:+.2f} dB  "
          f"nfe={result.nfe_per_variable}")
    if point.scheme.kind != "none":
        est = baselines.lmmse_for_scheme(channel_prior, point.scheme, dims_n)
        y_pil = baselines.extract_pilot_observation(rx.y, point.scheme, dims_n)
        h_lmmse = baselines.lmmse_channel_estimate(y_pil, est)
        x_lmmse = harness._baseline_block_estimate(rx.y, h_lmmse, point.scheme, dims_n)
        met_b = harness.compute_metrics(h, h_lmmse, x, x_lmmse)
        print(f"lmmse: nmse_h={met_b['nmse_h_db']:+.2f} dB  nmse_x={met_b['nmse_x_db']:+.2f} dB")
    if args.trace_csv:
        write_trace_csv(result.trace, args.trace_csv)
        print(f"trace written to {args.trace_csv}")
    if args.dump_tensors:
        harness._dump_point_tensors(args.dump_tensors, cfg, point,
                                    h[None], x[None], rx.y[None])
        print(f"tensors written to {args.dump_tensors}")
    return 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    path = harness.run_sweep(cfg, args.out, with_bcrb=args.with_bcrb,
                             dump_tensors=args.dump_tensors)
    agg = harness.aggregate_results(path)
    print(f"wrote {path}")
    for row in agg:
        bound = f"  bcrb_h={row['bcrb_h_db']:+.2f}" if np.isfinite(row["bcrb_h_db"]) else ""
        print(f"point {row['point']:3d} {row['method']:<6} {row['scheme']:<12} "
              f"cbr={row['cbr']:.3g} csnr={row['csnr_target_db']:+.1f} "
              f"nmse_h={row['nmse_h_db_mean']:+.2f}({row['nmse_h_db_se']:.2f}) "
              f"nmse_x={row['nmse_x_db_mean']:+.2f}({row['nmse_x_db_se']:.2f}) dB"
              f"{bound}")
    return 0


def cmd_bcrb(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    csnr_list = _parse_csnr(args.csnr) if args.csnr else list(cfg.csnr_db)
    from dataclasses import asdict

    raw = asdict(cfg)
    cfg = ExperimentConfig(**{**raw, "dims": cfg.dims, "csnr_db": tuple(csnr_list)})
    lines = ["scheme,alpha,cbr,m,csnr_db,noise_var,bcrb_h,bcrb_h_db,bcrb_x,bcrb_x_db,cond"]
    for point in harness.grid_points(cfg):
        channel_prior = harness.build_channel_prior(cfg.channel_prior, cfg.dims)
        source_prior = harness.build_source_prior(cfg.source_prior, point.m)
        encs = harness._point_encoders(cfg, point, source_prior)
        noise_var = harness.calibrate_noise_var(cfg, point, encs, channel_prior, source_prior)
        res = harness.point_bcrb(cfg, point, encs, channel_prior, source_prior, noise_var,
                                 known_x=args.known_x)
        alpha = point.scheme.alpha if point.scheme.kind == "orthogonal" else float("nan")
        bx = "" if args.known_x else f"{res.bcrb_x:.12g}"
        bxdb = "" if args.known_x else f"{res.bcrb_x_db:.6f}"
        lines.append(f"{point.scheme.kind},{alpha:.12g},"
                     f"{harness.realized_cbr(cfg.dims, point.m):.12g},{point.m},"
                     f"{point.csnr_db:.12g},{noise_var:.12g},{res.bcrb_h:.12g},"
                     f"{res.bcrb_h_db:.6f},{bx},{bxdb},{res.cond:.6g}")
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out} ({len(lines) - 1} rows)")
    return 0


def cmd_rank_check(args) -> int:
    try:
        n_f, n_t, n_r, t_s = (int(v) for v in args.dims.split(","))
    except ValueError as err:
        raise ConfigError(f"--dims must be n_f,n_t,n_r,t_s: {err}") from err
    dims = channel_sim.SystemDims(n_f=n_f, n_t=n_t, n_r=n_r, t_s=t_s)
    rng = split_rng(args.seed, 4201)
    n_pass = 0
    for _ in range(args.trials):
        x = (rng.standard_normal((n_f, t_s, n_t)) + 1j * rng.standard_normal((n_f, t_s, n_t)))
        h = (rng.standard_normal((n_f, n_t, n_r)) + 1j * rng.standard_normal((n_f, n_t, n_r)))
        report = fim_bcrb.verify_rank_deficiency(x, h)
        n_pass += bool(report.passed)
    print(f"{n_pass}/{args.trials} pass, bound {fim_bcrb.rank_bound(dims)}")
    return 0 if n_pass == args.trials else 3


def cmd_train_prior(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    tr = cfg.train
    m = int(tr.get("dim", max(1, round(cfg.dims.n_f * cfg.dims.t_s / cfg.cbr[0]))))
    hidden = [int(w) for w in tr.get("hidden", [32, 32])]
    steps = int(tr.get("steps", 400))
    lr = float(tr.get("lr", 5e-3))
    batch = int(tr.get("batch", 128))
    eps = float(tr.get("eps", 0.05))
    seed = int(tr.get("seed", cfg.master_seed))

    prior = harness.build_source_prior(cfg.source_prior, m)
    net = MlpVf.init([m, *hidden, m], seed=seed)
    trace = cfm_train(net, prior.sample, steps, batch, lr, split_rng(seed, 9001))
    delta = score_error(net, prior, eps, 2000, split_rng(seed, 9002))
    net.save(args.out)
    print(f"trained dim={m} hidden={hidden} steps={steps}: "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}, score gap delta={delta:.4f} at eps={eps}")
    return 0


def cmd_emit_plots(args) -> int:
    rows = harness.aggregate_results(args.results)
    if not rows:
        raise ConfigError(f"no usable rows in {args.results}")
    cols = list(rows[0].keys())
    with open(args.out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(harness._fmt(r[c]) for c in cols) + "\n")
    print(f"wrote {args.out} ({len(rows)} aggregate rows)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

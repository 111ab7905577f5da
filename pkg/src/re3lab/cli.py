"""Command-line entry point: ``python -m re3lab <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import config as cfgmod
from .nn import ConfigurationError, DivergenceError

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _load_cfg(args) -> cfgmod.RunConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"out_dir={args.out}")
    if args.config:
        return cfgmod.load(args.config, overrides)
    return cfgmod.parse("", overrides)


def _progress(row):
    print(f"step {row.env_step:>9d}  return {row.eval_return_mean:.3f} +/- {row.eval_return_std:.3f}  "
          f"r_i {row.intrinsic_mean:.4g}  beta {row.beta:.3g}", flush=True)


def cmd_train(args):
    from .run import train

    res = train(_load_cfg(args), progress=None if args.quiet else _progress)
    print(f"metrics: {res.metrics_path}\ncheckpoint: {res.checkpoint}")


def cmd_pretrain(args):
    from .run import pretrain

    res = pretrain(_load_cfg(args), progress=None if args.quiet else _progress)
    print(f"metrics: {res.metrics_path}\ncheckpoint: {res.checkpoint}")


def cmd_finetune(args):
    from .run import finetune

    res = finetune(_load_cfg(args), args.from_ckpt, progress=None if args.quiet else _progress)
    print(f"metrics: {res.metrics_path}\ncheckpoint: {res.checkpoint}")


def cmd_eval(args):
    from .run import evaluate_checkpoint

    rets = evaluate_checkpoint(args.from_ckpt, args.episodes, args.task, args.seed, not args.stochastic)
    print(f"episodes {len(rets)}  mean {rets.mean():.4f}  std {rets.std():.4f}")


def cmd_flops(args):
    from .flops import REFERENCE_SCHEDULE, distance_flops, flops_per_iteration

    if args.preset == "reference":
        p = REFERENCE_SCHEDULE
        total = distance_flops(p["m"], p["buffer_cap"], p["d"], p["start"], p["stop"])
        print(f"distance_flops(m={p['m']}, |B|={p['buffer_cap']}, d={p['d']}, "
              f"n={p['start']}..{p['stop']}) = {total} ({total:.4e})")
        return
    vals = [args.E, args.M, args.b, args.F, args.B]
    if any(v is None for v in vals):
        raise ConfigurationError("flops: give --preset or all of --E --M --b --F --B")
    print(flops_per_iteration(*vals))


def cmd_entropy(args):
    from .entropy import entropy_full, entropy_simplified

    if args.buffer:
        from .encoder import ReplayBuffer

        pts = ReplayBuffer.load(args.buffer).latent_pool().astype(np.float64)
    elif args.csv:
        pts = np.loadtxt(args.csv, delimiter=",", ndmin=2, comments="#")
    else:
        raise ConfigurationError("entropy-estimate: give --csv or --buffer")
    if pts.shape[0] <= args.k:
        raise ConfigurationError(f"--k {args.k}: need more than k points, got {pts.shape[0]}")
    print(f"points {pts.shape[0]}  dim {pts.shape[1]}  k {args.k}")
    print(f"full       {entropy_full(pts, args.k):.10g}")
    print(f"simplified {entropy_simplified(pts, args.k):.10g}")


def cmd_plot(args):
    from .metrics import MetricsFormatError
    from .plot import plot_files

    try:
        curves = plot_files(args.out, args.inputs, args.column, args.title)
    except MetricsFormatError as e:
        raise ConfigurationError(str(e)) from None
    print(f"wrote {args.out} ({len(curves)} curve(s))")


def cmd_sweep(args):
    from .run import sweep

    cfg = _load_cfg(args)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else list(cfgmod.BETA_GRID)
    seeds = [int(x) for x in args.seeds.split(",")]
    table = sweep(cfg, grid, seeds, args.out or cfg.out_dir, args.processes)
    print(f"{'beta':>10} {'final':>8} {'std':>8} {'auc':>8}")
    for r in table:
        star = "  <- best" if r["best"] else ""
        print(f"{r['beta']:>10.3g} {r['final_mean']:>8.3f} {r['final_std']:>8.3f} {r['auc_mean']:>8.3f}{star}")


def cmd_config(args):
    sys.stdout.write(cfgmod.serialize(_load_cfg(args)))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="re3lab", description="State-entropy exploration lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        p.add_argument("--out", help="output directory (out_dir)")
        p.add_argument("--quiet", action="store_true")
        return p

    with_config(sub.add_parser("train", help="train one run")).set_defaults(fn=cmd_train)
    with_config(sub.add_parser("pretrain", help="reward-free pretraining")).set_defaults(fn=cmd_pretrain)
    p = with_config(sub.add_parser("finetune", help="train from a pretrained checkpoint"))
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of argmax")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="FLOP formulas")
    p.add_argument("--preset", choices=["reference"])
    for name in ("E", "M", "b", "F", "B"):
        p.add_argument(f"--{name}", type=int)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("entropy-estimate", help="k-NN entropy of a point cloud")
    p.add_argument("--csv", help="comma-separated points, one per row")
    p.add_argument("--buffer", help="replay buffer dump; uses its latents")
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(fn=cmd_entropy)

    p = sub.add_parser("plot", help="SVG learning curves")
    p.add_argument("out")
    p.add_argument("inputs", nargs="+", help="metrics CSVs, optionally LABEL=path")
    p.add_argument("--column", default="eval_return_mean")
    p.add_argument("--title", default="")
    p.set_defaults(fn=cmd_plot)

    p = with_config(sub.add_parser("sweep", help="beta grid across seeds"))
    p.add_argument("--grid", help="comma-separated beta values (default: standard grid)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--processes", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    with_config(sub.add_parser("config", help="print the resolved config")).set_defaults(fn=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``vde {train,sample,bench,trace,nfe}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .estimator import plan_schedule
from .experiment import ConfigError, load_config, run_bench, run_sample, run_trace
from .training import PointMass, ToyDataset, TrainConfig, TrainingDiverged, train_flow_matching


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment config (a run.json also works)")
    p.add_argument("--field", help="gaussian | controlled | mlp:<weights.json>")
    p.add_argument("-T", type=int, dest="T")
    p.add_argument("-W", type=int, dest="W")
    p.add_argument("-n", dest="n", help="anchor interval, or comma list for sweeps")
    p.add_argument("--calls-per-step", type=int, dest="calls_per_step")
    p.add_argument("--seeds", type=int, help="number of trajectories")
    p.add_argument("--base-seed", type=int, dest="base_seed")
    p.add_argument("--shape", help="latent shape, e.g. 8x8 or 2")
    p.add_argument("--mode", choices=["fixed", "dynamic"])
    p.add_argument("--grid-shift", type=float, dest="grid_shift")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")


_EXPERIMENT_KEYS = ("field", "T", "W", "n", "calls_per_step", "seeds", "base_seed", "shape",
                    "mode", "grid_shift", "workers", "out")


def _config(args):
    return load_config(args.config, {k: getattr(args, k) for k in _EXPERIMENT_KEYS})


def cmd_train(args) -> int:
    if args.dataset.startswith("point:"):
        dataset = PointMass(tuple(float(v) for v in args.dataset[6:].split(",")))
    else:
        dataset = ToyDataset(args.dataset)
    cfg = TrainConfig(iterations=args.iterations, batch_size=args.batch_size, lr=args.lr,
                      hidden=tuple(int(h) for h in args.hidden.split(",")),
                      activation=args.activation, seed=args.seed)
    try:
        res = train_flow_matching(dataset, cfg)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    res.field.save(args.out)
    print(f"loss {res.initial_loss:.5f} -> {res.final_loss:.5f} "
          f"(held-out {res.heldout_loss:.5f}, zero predictor {res.zero_predictor_loss:.5f})")
    print(f"wrote {args.out}")
    return 0


def cmd_sample(args) -> int:
    return 1 if run_sample(_config(args), args.method) else 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    table, failures = run_bench(cfg)
    for r in table:
        if r["seed"] == "mean" and "rel_l2" in r:
            extra = f" ssim {r['ssim']:.4f}" if r.get("ssim") is not None else ""
            print(f"n={r['n']} NFE {r['nfe']:.0f} ratio {r['nfe_ratio']:.2f}x "
                  f"rel_l2 {100 * r['rel_l2']:.3f}%{extra} [{r['status']}]")
    print(f"wrote {Path(cfg.out) / 'bench.csv'}")
    return 1 if failures else 0


def cmd_trace(args) -> int:
    cfg = _config(args)
    s = run_trace(cfg)
    print(f"alpha error {s.alpha_err_pct:.2f}%")
    print(f"beta error {s.beta_err_pct:.2f}%")
    print(f"direction error {s.direction_err_pct:.2f}% (mean cos {s.mean_cos:.5f})")
    print(f"wrote {Path(cfg.out) / 'trace.csv'}")
    return 1 if s.failures else 0


def cmd_nfe(args) -> int:
    sched = plan_schedule(args.T, args.W, args.n, args.calls_per_step)
    if args.json:
        print(json.dumps(sched.to_json()))
    else:
        print(sched)
        print(f"NFE {sched.nfe}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vde", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an MLP velocity field on a toy dataset")
    p.add_argument("--dataset", default="two-moons",
                   help="two-moons | gaussian-ring | checkerboard | point:x,y")
    p.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--hidden", default=",".join(map(str, TrainConfig.hidden)))
    p.add_argument("--activation", default=TrainConfig.activation, choices=["tanh", "gelu", "relu"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weight file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="run full and/or VDE sampling and dump results")
    _add_experiment_flags(p)
    p.add_argument("--method", choices=["full", "vde", "both"], default="both")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="sweep anchor intervals against the full baseline")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", help="velocity-component dynamics of full sampling")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("nfe", help="print a schedule and its NFE")
    p.add_argument("-T", type=int, dest="T", default=50)
    p.add_argument("-W", type=int, dest="W", default=7)
    p.add_argument("-n", type=int, dest="n", default=2)
    p.add_argument("--calls-per-step", type=int, dest="calls_per_step", default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_nfe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

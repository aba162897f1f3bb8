"""Command-line interface.

Subcommands: train, transfer-eval, wd-vs-js, selfcheck, sweep, plot.
Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import TrainConfig, config_from_dict, load_config
from .errors import ConfigError
from . import harness


def _parse_floats(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_ints(text: str) -> list:
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _load_cfg(args) -> TrainConfig:
    overrides = {}
    for field in ("seed", "alpha", "env", "total_timesteps", "regularizer"):
        val = getattr(args, field, None)
        if val is not None:
            overrides[field] = val
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return config_from_dict(overrides)


def _add_common(p):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--alpha", type=float, help="override regularizer coefficient")
    p.add_argument("--env", help="override environment name")
    p.add_argument("--out-dir", required=True, help="artifact directory")


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    art = harness.train(cfg, args.out_dir, resume_from=args.resume)
    print(f"run {art.run_id}: {art.updates} updates, {art.timesteps} steps, "
          f"final mean return {art.final_return}")
    print(f"metrics:  {art.metrics_path}")
    print(f"manifest: {art.manifest_path}")
    print(f"last checkpoint: {art.last_checkpoint}")
    return 0


def _cmd_transfer(args) -> int:
    cfg = _load_cfg(args)
    art = harness.transfer_eval(args.checkpoint, cfg, args.out_dir,
                                resample_task=not args.same_task)
    print(f"adaptation {art.run_id}: {art.updates} master updates, "
          f"final mean return {art.final_return}")
    print(f"metrics: {art.metrics_path}")
    return 0


def _cmd_wd_vs_js(args) -> int:
    rows = harness.wd_js_table(_parse_floats(args.offsets), out_csv=args.out)
    print(f"{'offset':>8} {'wd':>12} {'js':>12}")
    for r in rows:
        print(f"{r['offset']:>8.4g} {r['wd']:>12.6g} {r['js']:>12.6g}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_selfcheck(args) -> int:
    report = harness.selfcheck(seed=args.seed)
    for suite in report["suites"]:
        status = "PASS" if suite["passed"] else "FAIL"
        detail = {k: v for k, v in suite.items() if k not in ("name", "passed")}
        print(f"{status} {suite['name']}: {json.dumps(detail)}")
    print("all passed" if report["all_passed"] else "some suites failed")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    results = harness.sweep(cfg, args.out_dir,
                            alphas=tuple(_parse_floats(args.alphas)),
                            seeds=tuple(_parse_ints(args.seeds)))
    for r in results:
        print(f"alpha={r['alpha']} seed={r['seed']} "
              f"final_return={r['final_return']} -> {r['out_dir']}")
    return 0


def _cmd_plot(args) -> int:
    out = harness.plot_run(args.metrics, args.out, window=args.window)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wdhrl",
        description="Hierarchical RL with a minimum-pairwise transport-distance "
                    "diversity regularizer: training, transfer, estimator checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-level training loop")
    _add_common(p)
    p.add_argument("--total-timesteps", type=int, dest="total_timesteps")
    p.add_argument("--regularizer", choices=("wd", "js", "none"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("transfer-eval",
                       help="freeze subpolicies, re-train master on a new task")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="source agent checkpoint")
    p.add_argument("--same-task", action="store_true",
                   help="adapt on the training task instead of resampling")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("wd-vs-js",
                       help="transport distance vs JS divergence for separating "
                            "point masses")
    p.add_argument("--offsets", default="0,0.25,0.5,1,2",
                   help="comma-separated nonnegative offsets")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=_cmd_wd_vs_js)

    p = sub.add_parser("selfcheck", help="estimator-vs-oracle validation battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=_cmd_selfcheck)

    p = sub.add_parser("sweep", help="train over an alpha/seed grid")
    _add_common(p)
    p.add_argument("--total-timesteps", type=int, dest="total_timesteps")
    p.add_argument("--alphas", default="0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot", help="render curves from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary, reported as JSON
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())

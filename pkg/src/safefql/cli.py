"""Command-line entry point: ``safefql <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import conformal, pipeline
from .nn import ConfigError

log = logging.getLogger("safefql")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (default: OUT/config.yaml when it exists)")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                   help="base configuration: full-size 'paper' or reduced 'desk'")
    p.add_argument("--seed", type=int, help="master seed; section seeds are offsets from it")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--checkpoint-dir", help="checkpoint directory (default OUT/checkpoints)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set critics.steps=1000")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config keys (same dotted names as the config file)")
    for key in cfgmod.field_hints(cfgmod.RunConfig()):
        group.add_argument(f"--{key}", dest=f"key:{key}", metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safefql", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate the random-policy boat dataset")
    p.add_argument("--n-traj", type=int)
    p.add_argument("--horizon", type=int)
    _add_common(p)

    p = sub.add_parser("train", help="train critics, flow teacher, actor, or all three in order")
    p.add_argument("phase", choices=("critics", "flow", "actor", "all"))
    p.add_argument("--check-exclusivity", action="store_true",
                   help="count per-sample gate exclusivity during actor training")
    _add_common(p)

    p = sub.add_parser("calibrate", help="conformal calibration of the safety threshold")
    _add_common(p)

    p = sub.add_parser("eval", help="roll out a policy from the evaluation initial states")
    p.add_argument("--mode", action="append",
                   help="safefql, rejection:N, random or zero (repeatable; default safefql)")
    _add_common(p)

    p = sub.add_parser("bench", help="per-action latency of actor, flow and rejection sampling")
    p.add_argument("--calls", type=int)
    _add_common(p)

    p = sub.add_parser("oracle", help="grid value iteration and critic sign agreement")
    _add_common(p)
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for name, value in vars(args).items():
        if name.startswith("key:") and value is not None:
            overrides[name[4:]] = value
    if getattr(args, "n_traj", None) is not None:
        overrides["env.n_traj"] = args.n_traj
    if getattr(args, "horizon", None) is not None:
        overrides["env.horizon"] = args.horizon
    path = args.config
    if path is None and args.preset is None:
        saved = Path(args.out) / "config.yaml"
        path = saved if saved.exists() else None
    return cfgmod.load_config(path, overrides, args.seed, args.preset)


def _print(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def run(args) -> int:
    cfg = resolve_config(args)
    paths = pipeline.RunPaths.create(args.out, args.checkpoint_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    cfg.save(paths.out / "config.yaml")
    if args.command == "gen-data":
        path = pipeline.cmd_gen_data(cfg, paths)
        print(path)
    elif args.command == "train":
        pipeline.cmd_train(cfg, paths, args.phase, args.check_exclusivity)
        print(f"trained {args.phase}; checkpoints in {paths.checkpoints}")
    elif args.command == "calibrate":
        rep = pipeline.cmd_calibrate(cfg, paths)
        sel = rep.selected
        _print({"delta_star": rep.delta_star, "delta_0": rep.delta_0,
                "violations": sel.violations, "epsilon": sel.epsilon, "n_inside": sel.n_inside})
    elif args.command == "eval":
        for mode in args.mode or ["safefql"]:
            rep = pipeline.cmd_eval(cfg, paths, mode)
            _print({"mode": mode, "episodes": rep.n_episodes, "mean_reward": rep.mean_reward,
                    "safety_rate": rep.safety_rate, "total_violations": rep.total_violations})
    elif args.command == "bench":
        _print(pipeline.cmd_bench(cfg, paths, args.calls))
    elif args.command == "oracle":
        _print(pipeline.cmd_oracle(cfg, paths))
    return pipeline.EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    except pipeline.OrderingError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return pipeline.EXIT_ORDER
    except conformal.CalibrationInfeasible as exc:
        msg = f"calibration infeasible: {exc}"
        if exc.min_epsilon is not None:
            msg += f" (smallest achievable epsilon {exc.min_epsilon:.4g})"
        print(msg, file=sys.stderr)
        return pipeline.EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())

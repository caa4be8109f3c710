"""``cos-marl`` command line: train, eval, dump-embeddings, sweep-groups, report-groups."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from ..env import WorldConfig
from ..numerics import ConfigError, ContractError
from ..trainer import TrainConfig
from . import runs
from .config import ENV_PRESETS, ExperimentConfig, _resolve_types, apply_overrides, load_config


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_field_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config fields (override the config file)")
    seen = set()
    for cls in (ExperimentConfig, WorldConfig, TrainConfig):
        for name, tp in _resolve_types(cls).items():
            if name in ("world", "train") or name in seen:
                continue
            seen.add(name)
            if tp is bool and name.startswith("no_"):
                # ablation switches: a negated form would read "--no-no-gcp"
                g.add_argument(_flag(name), dest=f"cfg__{name}", action="store_const", const=True, default=None)
            elif tp is bool:
                g.add_argument(_flag(name), dest=f"cfg__{name}", action=argparse.BooleanOptionalAction, default=None)
            else:
                g.add_argument(_flag(name), dest=f"cfg__{name}", default=None, metavar=tp.__name__.upper())


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--env", choices=sorted(ENV_PRESETS), help="dcn (discrete) or ccn (continuous)")
    p.add_argument("--agents", type=int, help="agent count; must be 2 x landmarks")
    p.add_argument("--groups", type=int, help="codebook size K (default: agent count)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="generic override, e.g. --set train.gamma=0.9")
    _add_field_flags(p)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides: dict = {}
    if args.env:
        overrides["action_mode"] = ENV_PRESETS[args.env]
    if args.agents is not None:
        if "cfg__n_landmarks" not in vars(args) or args.cfg__n_landmarks is None:
            if args.agents % 2:
                raise ConfigError(f"n_agents must equal 2*n_landmarks; {args.agents} agents is odd")
            overrides["n_landmarks"] = args.agents // 2
        overrides["n_agents"] = args.agents
    if args.groups is not None:
        overrides["n_groups"] = args.groups
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            overrides[key[5:]] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    return apply_overrides(cfg, overrides) if overrides else cfg


def _world_from(args: argparse.Namespace) -> Optional[WorldConfig]:
    if getattr(args, "config", None) is None and getattr(args, "env", None) is None:
        return None
    return resolve_config(args).world


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cos-marl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one experiment")
    _add_experiment_args(p)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.add_argument("--random-baseline", action="store_true", help="also evaluate uniform-random actions")
    _add_experiment_args(p)

    p = sub.add_parser("dump-embeddings", help="write per-step group embeddings")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--out", type=Path, required=True)
    _add_experiment_args(p)

    p = sub.add_parser("sweep-groups", help="train/eval one run per codebook size")
    p.add_argument("--k", type=int, nargs="+", required=True, dest="k_values")
    p.add_argument("--out", type=Path)
    _add_experiment_args(p)

    p = sub.add_parser("report-groups", help="per-step group assignments from greedy replays")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", type=Path, help="CSV output (stdout if omitted)")
    _add_experiment_args(p)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            cfg = resolve_config(args)
            run_dir = runs.run_train(cfg)
            with open(run_dir / "eval.json") as fh:
                ev = json.load(fh)
            print(f"run directory: {run_dir}")
            print(f"mean end step {ev['mean_end_step']:.2f} (std {ev['std_end_step']:.2f}), "
                  f"mean reward {ev['mean_reward']:.2f}, success {ev['success_rate']:.2f}")
        elif args.command == "eval":
            world = _world_from(args)
            report = runs.run_eval(args.checkpoint, args.episodes, world)
            out = runs._report_dict(report)
            if args.random_baseline:
                w, tcfg, _, _ = runs._load(args.checkpoint, world)
                out["random_baseline"] = runs.random_baseline(w, tcfg.seed, args.episodes).summary()
            if args.out:
                args.out.write_text(json.dumps(out, indent=1))
            print(json.dumps({k: v for k, v in out.items() if k != "records"}, indent=1))
        elif args.command == "dump-embeddings":
            n = runs.dump_embeddings(args.checkpoint, args.out, args.steps, _world_from(args))
            print(f"wrote {n} records to {args.out}")
        elif args.command == "sweep-groups":
            cfg = resolve_config(args)
            rows = runs.sweep_groups(cfg, args.k_values, args.out)
            print(runs.format_table(rows))
            best = max(rows, key=lambda r: r["mean_eval_reward"])
            print(f"best K = {best['K']}")
        elif args.command == "report-groups":
            rows = runs.report_group_assignments(args.checkpoint, args.episodes, _world_from(args))
            if args.out:
                runs.write_table(rows, args.out)
            else:
                w = sys.stdout
                w.write("episode,seed,step,agent,group\n")
                for r in rows:
                    w.write(f"{r['episode']},{r['seed']},{r['step']},{r['agent']},{r['group']}\n")
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

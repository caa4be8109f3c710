"""Training, evaluation, sweeps and data dumps on top of the trainer."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import IO, Iterable, Optional, Union

import numpy as np
import torch

from .. import env as cn
from ..evaluation import EvalReport, evaluate, evaluate_random, eval_seeds
from ..numerics import ConfigError, ContractError
from ..policy import select_action
from ..trainer import ActorState, PolicyBundle, TrainConfig, Trainer, act, action_vector, load_checkpoint
from ..vqgc import write_embedding_record
from .config import ExperimentConfig, save_config

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _report_dict(report: EvalReport, cfg: Optional[ExperimentConfig] = None, **extra) -> dict:
    out = {**report.summary(), **extra}
    if cfg is not None:
        out["config"] = cfg.to_dict()
    out["records"] = [asdict(r) for r in report.records]
    return out


def run_train(cfg: ExperimentConfig) -> Path:
    """Train one experiment; returns the run directory.

    Writes ``config.yaml``, ``metrics.jsonl``, checkpoints, optional
    ``embeddings.jsonl`` and a final ``eval.json``.
    """
    cfg.validate()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    dump_fh: Optional[IO[str]] = open(run_dir / "embeddings.jsonl", "w") if cfg.dump_embeddings else None
    with open(run_dir / "metrics.jsonl", "w") as metrics:
        metrics.write(json.dumps({"kind": "config", **cfg.to_dict()}) + "\n")
        trainer = Trainer(cfg.world, cfg.train, metrics=metrics, embed_dump=dump_fh)
        if dump_fh is not None:
            trainer.embed_dump_from = max(0, cfg.train.total_steps - cfg.dump_embedding_steps)

        def periodic_eval(tr: Trainer) -> dict:
            rep = evaluate(tr.bundle, tr.world, tr.cfg, tr.cfg.eval_episodes, gc_on=tr.last_gc_on)
            return rep.summary()

        try:
            trainer.train(run_dir, evaluate_fn=periodic_eval)
        finally:
            if dump_fh is not None:
                dump_fh.close()
    report = run_eval(run_dir / "checkpoint_final.pt", cfg.train.eval_episodes)
    with open(run_dir / "eval.json", "w") as fh:
        json.dump(_report_dict(report, cfg), fh, indent=1)
    return run_dir


def _load(checkpoint: PathLike, world: Optional[cn.WorldConfig] = None):
    ck_world, cfg, bundle, ck = load_checkpoint(checkpoint)
    if world is not None:
        if world.action_mode != ck_world.action_mode:
            raise ContractError(
                f"checkpoint was trained with {ck_world.action_mode} actions, env config asks for {world.action_mode}"
            )
        if world.n_agents != ck_world.n_agents:
            raise ContractError(f"checkpoint has {ck_world.n_agents} agents, env config has {world.n_agents}")
    else:
        world = ck_world
    return world, cfg, bundle, ck


def run_eval(checkpoint: PathLike, episodes: int = 100, world: Optional[cn.WorldConfig] = None,
             record_groups: bool = False) -> EvalReport:
    """Greedy evaluation on seeds disjoint from every training episode seed."""
    world, cfg, bundle, ck = _load(checkpoint, world)
    return evaluate(bundle, world, cfg, episodes, gc_on=ck["gcp_active"], record_groups=record_groups)


def random_baseline(world: cn.WorldConfig, seed: int, episodes: int = 100) -> EvalReport:
    return evaluate_random(world, eval_seeds(seed, episodes), rng_seed=seed)


def dump_embeddings(checkpoint: PathLike, out_path: PathLike, steps: int = 5000,
                    world: Optional[cn.WorldConfig] = None, seed: int = 0) -> int:
    """Roll the trained policy for ``steps`` env steps, one record per (step, agent)."""
    world, cfg, bundle, ck = _load(checkpoint, world)
    actor = ActorState(world, cfg.context, bundle.ggp.rnn_hidden)
    episode = 0
    seeds = eval_seeds(cfg.seed + 1 + seed, 1_000_000)
    actor.reset(seeds[episode])
    rng = np.random.default_rng(seed)
    n = 0
    with open(out_path, "w") as fh:
        for step in range(steps):
            out = act(bundle, actor.win, actor.obs, actor.hidden, ck["gcp_active"], cfg)
            for i in range(world.n_agents):
                write_embedding_record(fh, step, i, out["group"][i], out["embed"][i], out["z_e"][i])
                n += 1
            a = select_action(out["command"], world.action_mode, "eval", rng)
            obs, r, done, info = actor.env.step(a)
            actor.hidden = out["hidden"]
            actor.window.record(action_vector(a, world.action_mode, world.action_dim), r)
            if done:
                episode += 1
                actor.reset(seeds[episode])
            else:
                actor.obs = obs
                actor.win = actor.window.push(obs)
    return n


def report_group_assignments(checkpoint: PathLike, episodes: int = 1,
                             world: Optional[cn.WorldConfig] = None) -> list[dict]:
    """Per (episode, step, agent) group index from greedy evaluation replays."""
    report = run_eval(checkpoint, episodes, world, record_groups=True)
    rows = []
    for ep, rec in enumerate(report.records):
        for t, groups in enumerate(rec.groups):
            for agent, g in enumerate(groups):
                rows.append({"episode": ep, "seed": rec.seed, "step": t, "agent": agent, "group": int(g)})
    return rows


def sweep_groups(base: ExperimentConfig, k_values: Iterable[int], out_dir: Optional[PathLike] = None) -> list[dict]:
    """Train and evaluate one run per codebook size ``K`` with a shared seed."""
    k_values = list(k_values)
    if any(k < 1 for k in k_values):
        raise ConfigError("group counts must be >= 1")
    root = Path(out_dir) if out_dir is not None else base.run_dir()
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_values:
        cfg = replace(base, name=f"{base.name}_K{k}", output_dir=str(root / f"K{k}"),
                      train=replace(base.train, n_groups=k))
        run_dir = run_train(cfg)
        with open(run_dir / "eval.json") as fh:
            ev = json.load(fh)
        rows.append({"K": k, "mean_eval_reward": ev["mean_reward"], "mean_end_step": ev["mean_end_step"],
                     "success_rate": ev["success_rate"]})
    write_table(rows, root / "sweep.csv")
    with open(root / "sweep.json", "w") as fh:
        json.dump({"config": base.to_dict(), "rows": rows}, fh, indent=1)
    return rows


def write_table(rows: list[dict], path: PathLike) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    fmt = lambda v: f"{v:.3f}" if isinstance(v, float) else str(v)
    lines = [" | ".join(cols), " | ".join("---" for _ in cols)]
    lines += [" | ".join(fmt(r[c]) for c in cols) for r in rows]
    return "\n".join(lines)

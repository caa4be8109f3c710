"""Deterministic evaluation episodes and summary statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import env as cn
from .policy import select_action
from .trainer import EVAL_SEED_BASE, ActorState, PolicyBundle, TrainConfig, act, action_vector


@dataclass
class EpisodeRecord:
    seed: int
    end_step: int
    reward: float
    success: bool
    groups: list = field(default_factory=list)  # per step: group index per agent


@dataclass
class EvalReport:
    episodes: int
    mean_end_step: float
    std_end_step: float  # population
    sample_std_end_step: float
    mean_reward: float
    success_rate: float
    records: list

    @classmethod
    def from_records(cls, records: list[EpisodeRecord]) -> "EvalReport":
        ends = np.array([r.end_step for r in records], dtype=np.float64)
        rewards = np.array([r.reward for r in records], dtype=np.float64)
        n = len(records)
        return cls(
            episodes=n,
            mean_end_step=float(ends.mean()),
            std_end_step=float(ends.std()),
            sample_std_end_step=float(ends.std(ddof=1)) if n > 1 else 0.0,
            mean_reward=float(rewards.mean()),
            success_rate=float(np.mean([r.success for r in records])),
            records=records,
        )

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def eval_seeds(train_seed: int, episodes: int) -> list[int]:
    return [EVAL_SEED_BASE + train_seed * 1_000_000 + k for k in range(episodes)]


def evaluate(bundle: PolicyBundle, world: cn.WorldConfig, cfg: TrainConfig, episodes: int = 100,
             gc_on: bool = True, seeds: Optional[list[int]] = None,
             record_groups: bool = False) -> EvalReport:
    """Run ``episodes`` greedy episodes in lock-step and summarize them."""
    seeds = seeds if seeds is not None else eval_seeds(cfg.seed, episodes)
    N = world.n_agents
    actors = [ActorState(world, cfg.context, bundle.ggp.rnn_hidden) for _ in seeds]
    for a, s in zip(actors, seeds):
        a.reset(s)
    records: list[Optional[EpisodeRecord]] = [None] * len(seeds)
    groups: list[list] = [[] for _ in seeds]
    live = list(range(len(seeds)))
    dummy_rng = np.random.default_rng(0)
    while live:
        window = np.stack([actors[e].win for e in live])
        obs = np.stack([actors[e].obs for e in live])
        hidden = np.stack([actors[e].hidden for e in live])
        B = len(live)
        out = act(bundle, window.reshape(B * N, *window.shape[2:]), obs.reshape(B * N, -1),
                  hidden.reshape(B * N, -1), gc_on, cfg)
        command = out["command"].reshape(B, N, -1)
        actions = select_action(command, world.action_mode, "eval", dummy_rng)
        grp = out["group"].reshape(B, N)
        new_hidden = out["hidden"].reshape(B, N, -1)
        still = []
        for b, e in enumerate(live):
            actor = actors[e]
            if record_groups:
                groups[e].append(grp[b].tolist())
            obs_next, r, done, info = actor.env.step(actions[b])
            actor.ep_reward += r
            actor.hidden = new_hidden[b].copy()
            actor.window.record(action_vector(actions[b], world.action_mode, world.action_dim), r)
            if done:
                records[e] = EpisodeRecord(seeds[e], info.end_step, actor.ep_reward, info.success, groups[e])
            else:
                actor.obs = obs_next
                actor.win = actor.window.push(obs_next)
                still.append(e)
        live = still
    return EvalReport.from_records(records)


def evaluate_random(world: cn.WorldConfig, seeds: list[int], rng_seed: int = 0) -> EvalReport:
    """Uniform-random joint actions on the same episode seeds."""
    rng = np.random.default_rng(rng_seed)
    records = []
    for s in seeds:
        state = cn.reset(world, s)
        total, done = 0.0, False
        while not done:
            if world.action_mode == "discrete":
                a = rng.integers(0, cn.N_DISCRETE_ACTIONS, size=world.n_agents)
            else:
                a = rng.uniform(-1.0, 1.0, size=(world.n_agents, 2))
            state, r, done, info = cn.step(state, a, world)
            total += r
        records.append(EpisodeRecord(s, info.end_step, total, info.success))
    return EvalReport.from_records(records)

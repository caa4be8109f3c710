"""Centralized-critic training loop for the two-level group strategy.

Each round collects on-policy rollouts from a pool of environments, then
updates (in order) the group consensus policy, the group-guided policy, the
VQGC module, and the critic.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Callable, Iterator, Optional

import numpy as np
import torch
from torch import nn

from . import env as cn
from .numerics import DTYPE, Adam, ConfigError, ContractError, init_uniform_
from .policy import GroupConsensusPolicy, GroupGuidedPolicy, combine_actions, gcp_active, select_action
from .vqgc import VQGC, TransitionWindow, write_embedding_record

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVAL_SEED_BASE = 1 << 40
TRAIN_EPISODES_PER_SEED = 10_000_000


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lr_policy: float = 5e-4
    lr_vqgc: float = 5e-4
    lr_critic: float = 1e-3
    vqgc_weight_decay: float = 0.01
    beta: float = 1.0
    jump: float = 0.3
    jdi_unit: str = "steps"
    clip_eps: float = 0.2
    n_groups: Optional[int] = None
    embed_dim: int = 32
    context: int = 1
    buffer_len: int = 16
    n_parallel_envs: int = 8
    rollout_length: int = 400
    total_steps: int = 2_000_000
    eval_interval: int = 400_000
    eval_episodes: int = 100
    seed: int = 0
    no_gcp: bool = False
    no_ggp: bool = False
    epochs: int = 10
    minibatch_size: int = 256
    target_sync: int = 200
    max_grad_norm: float = 10.0
    epsilon: float = 0.05
    sigma_explore: float = 0.1
    combine: str = "mixture"
    gae_lambda: float = 0.95
    normalize_advantage: bool = True
    entropy_coef: float = 0.01
    use_poincare: bool = True
    success_bootstrap: str = "absorbing"

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        for name in ("lr_policy", "lr_vqgc", "lr_critic", "beta", "clip_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.jump <= 1.0:
            raise ConfigError("jump must lie in [0, 1]")
        if self.jdi_unit not in ("steps", "episodes"):
            raise ConfigError("jdi_unit must be 'steps' or 'episodes'")
        if self.no_gcp and self.no_ggp:
            raise ConfigError("no_gcp and no_ggp cannot both be set")
        if self.combine not in ("mixture", "logits"):
            raise ConfigError("combine must be 'mixture' or 'logits'")
        if self.n_groups is not None and self.n_groups < 1:
            raise ConfigError("n_groups must be >= 1")
        if self.total_steps < 0 or self.n_parallel_envs < 1 or self.rollout_length < 1:
            raise ConfigError("total_steps, n_parallel_envs and rollout_length must be sensible")
        if self.success_bootstrap not in ("absorbing", "terminal"):
            raise ConfigError("success_bootstrap must be 'absorbing' or 'terminal'")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")


class Critic(nn.Module):
    def __init__(self, state_dim: int, joint_action_dim: int, hidden: int = 64,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.input_dim = state_dim + joint_action_dim
        self.net = nn.Sequential(
            nn.Linear(self.input_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, 1),
        )
        init_uniform_(self, generator)
        self.to(DTYPE)

    def forward(self, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        x = torch.cat([s, u], dim=-1)
        if x.shape[-1] != self.input_dim:
            raise ConfigError(f"critic expects input width {self.input_dim}, got {x.shape[-1]}")
        return self.net(x).squeeze(-1)


def critic_forward(critic: Critic, s: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    return critic(s, u)


class PolicyBundle(nn.Module):
    """All learnable parts of one experiment."""

    def __init__(self, world: cn.WorldConfig, cfg: TrainConfig, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n_groups = cfg.n_groups or world.n_agents
        self.mode = world.action_mode
        self.n_agents = world.n_agents
        self.action_dim = world.action_dim
        self.vqgc = VQGC(world.obs_dim, world.action_dim, n_groups, cfg.embed_dim, cfg.context,
                         buffer_len=cfg.buffer_len, generator=g)
        self.gcp = GroupConsensusPolicy(cfg.embed_dim, world.action_dim, world.action_mode, generator=g)
        self.ggp = GroupGuidedPolicy(world.obs_dim, cfg.embed_dim, world.action_dim, world.action_mode, generator=g)
        self.critic = Critic(world.state_dim, world.n_agents * world.action_dim, generator=g)


@dataclass
class RolloutBuffer:
    """Time-major arrays ``(steps, envs, ...)`` from one collection round."""

    state: np.ndarray
    obs: np.ndarray
    window: np.ndarray
    z_e: np.ndarray
    group: np.ndarray
    embed: np.ndarray
    hidden: np.ndarray
    a_gc: np.ndarray
    a_gg: np.ndarray
    command: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    success: np.ndarray
    gc_on: np.ndarray
    next_state: np.ndarray
    next_command: np.ndarray
    episodes: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.reward.size

    def critic_action(self, mode: str) -> np.ndarray:
        """Joint action fed to the critic: executed vector, or the executed distributions."""
        a = self.action if mode == "continuous" else self.command
        return a.reshape(*a.shape[:2], -1)


class ActorState:
    """Per-environment episode bookkeeping during rollouts."""

    def __init__(self, world: cn.WorldConfig, context: int, rnn_hidden: int):
        self.world = world
        self.env = cn.CoopNavEnv(world)
        self.window = TransitionWindow(world.n_agents, world.obs_dim, world.action_dim, context)
        self.hidden = np.zeros((world.n_agents, rnn_hidden))
        self.obs: Optional[np.ndarray] = None
        self.win: Optional[np.ndarray] = None
        self.ep_reward = 0.0
        self.ep_record: list = []

    def reset(self, seed: int) -> None:
        self.obs = self.env.reset(seed)
        self.win = self.window.reset(self.obs)
        self.hidden[:] = 0.0
        self.ep_reward = 0.0


def action_vector(action: np.ndarray, mode: str, action_dim: int) -> np.ndarray:
    if mode == "discrete":
        return np.eye(action_dim)[np.asarray(action, dtype=np.int64)]
    return np.asarray(action, dtype=np.float64)


@torch.no_grad()
def act(bundle: PolicyBundle, window: np.ndarray, obs: np.ndarray, hidden: np.ndarray,
        gc_on: bool, cfg: TrainConfig) -> dict:
    """One batched policy forward over ``(batch, ...)`` agent inputs."""
    w = torch.as_tensor(window, dtype=DTYPE)
    z_e, j, e_j = bundle.vqgc.assign(w)
    o = torch.as_tensor(obs, dtype=DTYPE)
    h = torch.as_tensor(hidden, dtype=DTYPE)
    a_gg, h_new = bundle.ggp(o, e_j, h)
    a_gc = bundle.gcp(e_j)
    # gate already resolved by the caller: t=1 >= 0 activates, t=0 < 1 does not
    u = combine_actions(a_gc, a_gg, bundle.mode, 1 if gc_on else 0, 0.0 if gc_on else 1.0, 1,
                        cfg.combine, cfg.no_gcp, cfg.no_ggp)
    return {
        "z_e": z_e.numpy(), "group": j.numpy(), "embed": e_j.numpy(),
        "a_gc": a_gc.numpy(), "a_gg": a_gg.numpy(), "command": u.numpy(),
        "hidden": h_new.numpy(),
    }


class Trainer:
    def __init__(self, world: cn.WorldConfig, cfg: TrainConfig,
                 metrics: Optional[IO[str]] = None, embed_dump: Optional[IO[str]] = None):
        world.validate()
        cfg.validate()
        self.world = world
        self.cfg = cfg
        self.mode = world.action_mode
        torch.manual_seed(cfg.seed)
        self.bundle = PolicyBundle(world, cfg, seed=cfg.seed)
        self.target_critic = copy.deepcopy(self.bundle.critic)
        for p in self.target_critic.parameters():
            p.requires_grad_(False)
        self.opt_gcp = Adam(self.bundle.gcp.parameters(), cfg.lr_policy, max_grad_norm=cfg.max_grad_norm)
        self.opt_ggp = Adam(self.bundle.ggp.parameters(), cfg.lr_policy, max_grad_norm=cfg.max_grad_norm)
        self.opt_vqgc = Adam(self.bundle.vqgc.parameters(), cfg.lr_vqgc, weight_decay=cfg.vqgc_weight_decay,
                             variant="adamw", max_grad_norm=cfg.max_grad_norm)
        self.opt_critic = Adam(self.bundle.critic.parameters(), cfg.lr_critic, max_grad_norm=cfg.max_grad_norm)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 7919)
        self.t_global = 0
        self.episodes_done = 0
        self.critic_updates = 0
        self.vqgc_updates = 0
        self.next_episode_seed = 0
        self.actors = [ActorState(world, cfg.context, self.bundle.ggp.rnn_hidden)
                       for _ in range(cfg.n_parallel_envs)]
        for a in self.actors:
            a.reset(self._episode_seed())
        self.metrics = metrics
        self.embed_dump = embed_dump
        self.embed_dump_from = 0
        # gate state of the most recent rollout step; the one evaluation should use
        self.last_gc_on = self.gcp_on()
        self.bundle.vqgc.codebook.push_snapshot(0)

    # -- bookkeeping -----------------------------------------------------

    def _episode_seed(self) -> int:
        s = self.cfg.seed * TRAIN_EPISODES_PER_SEED + self.next_episode_seed
        self.next_episode_seed += 1
        return s

    def gcp_on(self) -> bool:
        if self.cfg.no_gcp:
            return False
        if self.cfg.no_ggp:
            return True
        if self.cfg.jdi_unit == "episodes":
            horizon = self.cfg.total_steps / self.world.max_steps
            return self.episodes_done >= self.cfg.jump * horizon
        return gcp_active(self.t_global, self.cfg.jump, self.cfg.total_steps)

    def _emit(self, record: dict) -> None:
        if self.metrics is not None:
            self.metrics.write(json.dumps(record) + "\n")
            self.metrics.flush()

    # -- rollouts --------------------------------------------------------

    def collect_rollouts(self, length: Optional[int] = None) -> RolloutBuffer:
        cfg, world = self.cfg, self.world
        length = length or cfg.rollout_length
        E, N = len(self.actors), world.n_agents
        rec: dict[str, list] = {k: [] for k in (
            "state", "obs", "window", "z_e", "group", "embed", "hidden", "a_gc", "a_gg",
            "command", "action", "reward", "done", "success", "gc_on")}
        episodes = []
        for _ in range(length):
            gc_on = self.last_gc_on = self.gcp_on()
            window = np.stack([a.win for a in self.actors])
            obs = np.stack([a.obs for a in self.actors])
            hidden = np.stack([a.hidden for a in self.actors])
            out = act(self.bundle, window.reshape(E * N, *window.shape[2:]), obs.reshape(E * N, -1),
                      hidden.reshape(E * N, -1), gc_on, cfg)
            command = out["command"].reshape(E, N, -1)
            actions = select_action(command, self.mode, "train", self.rng, cfg.epsilon, cfg.sigma_explore)
            rec["state"].append(np.stack([a.env.global_state() for a in self.actors]))
            rec["obs"].append(obs)
            rec["window"].append(window)
            rec["hidden"].append(hidden)
            for k in ("z_e", "group", "embed", "a_gc", "a_gg"):
                rec[k].append(out[k].reshape(E, N, *out[k].shape[1:]))
            rec["command"].append(command)
            rec["action"].append(actions)
            rec["gc_on"].append(np.full(E, gc_on))
            if self.embed_dump is not None and self.t_global >= self.embed_dump_from:
                for e in range(E):
                    for i in range(N):
                        k = e * N + i
                        write_embedding_record(self.embed_dump, self.t_global + e, i, out["group"][k],
                                               out["embed"][k], out["z_e"][k])
            new_hidden = out["hidden"].reshape(E, N, -1)
            rewards = np.zeros(E)
            dones = np.zeros(E, dtype=bool)
            successes = np.zeros(E, dtype=bool)
            for e, actor in enumerate(self.actors):
                obs_next, r, done, info = actor.env.step(actions[e])
                rewards[e] = r
                dones[e] = done
                successes[e] = info.success
                actor.ep_reward += r
                actor.hidden = new_hidden[e].copy()
                actor.window.record(action_vector(actions[e], self.mode, world.action_dim), r)
                if done:
                    episodes.append({"reward": actor.ep_reward, "end_step": info.end_step,
                                     "success": info.success})
                    self.episodes_done += 1
                    actor.reset(self._episode_seed())
                else:
                    actor.obs = obs_next
                    actor.win = actor.window.push(obs_next)
            rec["reward"].append(rewards)
            rec["done"].append(dones)
            rec["success"].append(successes)
            self.t_global += E
        # bootstrap inputs for the final step: current states and commands, no env step
        window = np.stack([a.win for a in self.actors])
        obs = np.stack([a.obs for a in self.actors])
        hidden = np.stack([a.hidden for a in self.actors])
        tail = act(self.bundle, window.reshape(E * N, *window.shape[2:]), obs.reshape(E * N, -1),
                   hidden.reshape(E * N, -1),
                   self.gcp_on() if self.t_global < cfg.total_steps else self.last_gc_on, cfg)
        tail_state = np.stack([a.env.global_state() for a in self.actors])
        tail_cmd = tail["command"].reshape(E, N, -1)
        arr = {k: np.stack(v) for k, v in rec.items()}
        next_state = np.concatenate([arr["state"][1:], tail_state[None]], axis=0)
        next_command = np.concatenate([arr["command"][1:], tail_cmd[None]], axis=0)
        return RolloutBuffer(**arr, next_state=next_state, next_command=next_command, episodes=episodes)

    # -- updates ---------------------------------------------------------

    def _critic_inputs(self, buf: RolloutBuffer) -> tuple[torch.Tensor, ...]:
        T, E = buf.reward.shape
        s = torch.as_tensor(buf.state.reshape(T * E, -1), dtype=DTYPE)
        u = torch.as_tensor(buf.critic_action(self.mode).reshape(T * E, -1), dtype=DTYPE)
        s2 = torch.as_tensor(buf.next_state.reshape(T * E, -1), dtype=DTYPE)
        u2 = torch.as_tensor(buf.next_command.reshape(T * E, -1), dtype=DTYPE)
        r = torch.as_tensor(buf.reward.reshape(-1), dtype=DTYPE)
        d = torch.as_tensor(buf.done.reshape(-1).astype(np.float64), dtype=DTYPE)
        if self.cfg.success_bootstrap == "absorbing":
            d = d + torch.as_tensor(buf.success.reshape(-1).astype(np.float64), dtype=DTYPE)
        return s, u, s2, u2, r, d

    def td_targets(self, r: torch.Tensor, d: torch.Tensor, s2: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
        """``y = r + gamma (1 - done) Q_target(s', u')``.

        ``d`` is 0 (continue), 1 (terminal) or 2 (success under the absorbing
        rule: the final reward is treated as repeating forever, ``y = r / (1 - gamma)``).
        """
        g = self.cfg.gamma
        with torch.no_grad():
            y = r + g * (d == 0).to(DTYPE) * self.target_critic(s2, u2)
            return torch.where(d == 2, r / (1.0 - g), y)

    def advantages(self, buf: RolloutBuffer) -> torch.Tensor:
        """TD residual ``y - Q(s, u)``, optionally smoothed over time with GAE(lambda)."""
        s, u, s2, u2, r, d = self._critic_inputs(buf)
        with torch.no_grad():
            delta = (self.td_targets(r, d, s2, u2) - self.bundle.critic(s, u)).reshape(buf.reward.shape)
        lam = self.cfg.gae_lambda
        if lam == 0.0:
            return delta.reshape(-1)
        adv = torch.zeros_like(delta)
        running = torch.zeros(delta.shape[1], dtype=DTYPE)
        notdone = 1.0 - torch.as_tensor((buf.done | buf.success).astype(np.float64), dtype=DTYPE)
        for t in reversed(range(delta.shape[0])):
            running = delta[t] + self.cfg.gamma * lam * notdone[t] * running
            adv[t] = running
        return adv.reshape(-1)

    def _minibatches(self, n: int) -> Iterator[torch.Tensor]:
        for _ in range(self.cfg.epochs):
            perm = torch.randperm(n, generator=self.torch_gen)
            for i in range(0, n, self.cfg.minibatch_size):
                yield perm[i : i + self.cfg.minibatch_size]

    @staticmethod
    def _apply(loss: torch.Tensor, opt: Adam, term: str) -> None:
        grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
        for p, g in zip(opt.params, grads):
            if g is not None and not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {term}")
            p.grad = g
        opt.step()
        opt.zero_grad()

    def critic_update(self, buf: RolloutBuffer) -> float:
        if buf.n_steps == 0:
            raise ContractError("critic_update on an empty batch")
        s, u, s2, u2, r, d = self._critic_inputs(buf)
        losses = []
        for idx in self._minibatches(len(r)):
            y = self.td_targets(r[idx], d[idx], s2[idx], u2[idx])
            loss = ((self.bundle.critic(s[idx], u[idx]) - y) ** 2).mean()
            self._apply(loss, self.opt_critic, "td_loss")
            losses.append(loss.item())
            self.critic_updates += 1
            if self.critic_updates % self.cfg.target_sync == 0:
                self.sync_target()
        return float(np.mean(losses))

    def sync_target(self) -> None:
        self.target_critic.load_state_dict(self.bundle.critic.state_dict())

    def _policy_tensors(self, buf: RolloutBuffer) -> dict:
        T, E = buf.reward.shape
        B = T * E
        N = self.world.n_agents
        return {
            "state": torch.as_tensor(buf.state.reshape(B, -1), dtype=DTYPE),
            "obs": torch.as_tensor(buf.obs.reshape(B, N, -1), dtype=DTYPE),
            "embed": torch.as_tensor(buf.embed.reshape(B, N, -1), dtype=DTYPE),
            "hidden": torch.as_tensor(buf.hidden.reshape(B, N, -1), dtype=DTYPE),
            "command": torch.as_tensor(buf.command.reshape(B, N, -1), dtype=DTYPE),
            "action": torch.as_tensor(buf.action.reshape(B, N, *buf.action.shape[3:])),
            "gc_on": torch.as_tensor(buf.gc_on.reshape(B)),
        }

    def _components(self, data: dict, idx: torch.Tensor, grad_gcp: bool, grad_ggp: bool):
        e = data["embed"][idx]
        with torch.set_grad_enabled(grad_gcp):
            a_gc = self.bundle.gcp(e)
        with torch.set_grad_enabled(grad_ggp):
            a_gg, _ = self.bundle.ggp(data["obs"][idx], e, data["hidden"][idx])
        return a_gc, a_gg

    def _combined(self, a_gc, a_gg, gc_on: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        full = combine_actions(a_gc, a_gg, self.mode, 1, 0.0, 1, cfg.combine, cfg.no_gcp, cfg.no_ggp)
        if cfg.no_gcp or cfg.no_ggp:
            return full
        mask = gc_on.view(-1, *([1] * (a_gg.dim() - 1)))
        return torch.where(mask, full, a_gg)

    def _surrogate(self, data: dict, idx: torch.Tensor, adv: torch.Tensor, grad_gcp: bool, grad_ggp: bool):
        a_gc, a_gg = self._components(data, idx, grad_gcp, grad_ggp)
        if self.mode == "discrete":
            p = self._combined(a_gc, a_gg, data["gc_on"][idx])
            act_idx = data["action"][idx].long().unsqueeze(-1)
            p_new = p.gather(-1, act_idx).squeeze(-1)
            p_old = data["command"][idx].gather(-1, act_idx).squeeze(-1)
            ratio = p_new / p_old.clamp(min=1e-12)
            a = adv[idx].unsqueeze(-1)
            clipped = ratio.clamp(1.0 - self.cfg.clip_eps, 1.0 + self.cfg.clip_eps)
            loss = -torch.minimum(ratio * a, clipped * a).mean()
            if self.cfg.entropy_coef:
                ent = -(p * torch.log(p.clamp(min=1e-12))).sum(-1).mean()
                loss = loss - self.cfg.entropy_coef * ent
            return loss
        u = self._combined(a_gc, a_gg, data["gc_on"][idx])
        q = self.bundle.critic(data["state"][idx], u.reshape(len(idx), -1))
        return -q.mean()

    def policy_update(self, buf: RolloutBuffer) -> tuple[Optional[float], Optional[float]]:
        data = self._policy_tensors(buf)
        adv = self.advantages(buf) if self.mode == "discrete" else None
        if adv is not None and self.cfg.normalize_advantage and adv.numel() > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        update_gcp = not self.cfg.no_gcp and bool(data["gc_on"].any())
        update_ggp = not self.cfg.no_ggp
        l_gc, l_gg = [], []
        for p in self.bundle.critic.parameters():
            p.requires_grad_(False)
        try:
            for idx in self._minibatches(len(data["state"])):
                if update_gcp and bool(data["gc_on"][idx].any()):
                    loss = self._surrogate(data, idx, adv, True, False)
                    self._apply(loss, self.opt_gcp, "group consensus policy loss")
                    l_gc.append(loss.item())
                if update_ggp:
                    loss = self._surrogate(data, idx, adv, False, True)
                    self._apply(loss, self.opt_ggp, "group-guided policy loss")
                    l_gg.append(loss.item())
        finally:
            for p in self.bundle.critic.parameters():
                p.requires_grad_(True)
        return (float(np.mean(l_gc)) if l_gc else None, float(np.mean(l_gg)) if l_gg else None)

    def vqgc_update(self, buf: RolloutBuffer) -> dict:
        w = torch.as_tensor(buf.window.reshape(-1, *buf.window.shape[3:]), dtype=DTYPE)
        out = self.bundle.vqgc.loss(w, self.cfg.beta, self.cfg.use_poincare)
        if self.opt_vqgc.state.lr > 0:
            self._apply(out.total, self.opt_vqgc, "VQGC loss")
            self.bundle.vqgc.codebook.project_()
        self.vqgc_updates += 1
        self.bundle.vqgc.codebook.push_snapshot(self.vqgc_updates)
        return {
            "L_VQGC": out.total.item(), "L_P": out.poincare.item(), "L_recon": out.recon.item(),
            "groups_used": int(torch.unique(out.index).numel()),
        }

    def train_round(self) -> dict:
        buf = self.collect_rollouts()
        loss_gcp, loss_ggp = self.policy_update(buf)
        vq = self.vqgc_update(buf)
        td = self.critic_update(buf)
        eps = buf.episodes
        rec = {
            "kind": "train",
            "step": self.t_global,
            "episodes": len(eps),
            "mean_episode_reward": float(np.mean([e["reward"] for e in eps])) if eps else None,
            "mean_end_step": float(np.mean([e["end_step"] for e in eps])) if eps else None,
            "success_rate": float(np.mean([e["success"] for e in eps])) if eps else None,
            "td_loss": td,
            "loss_gcp": loss_gcp,
            "loss_ggp": loss_ggp,
            "gcp_active": bool(buf.gc_on.any()),
            **vq,
        }
        return rec

    # -- checkpoints -----------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "world": asdict(self.world),
            "train": asdict(self.cfg),
            "t_global": self.t_global,
            "episodes_done": self.episodes_done,
            "critic_updates": self.critic_updates,
            "vqgc_updates": self.vqgc_updates,
            "next_episode_seed": self.next_episode_seed,
            "bundle": self.bundle.state_dict(),
            "target_critic": self.target_critic.state_dict(),
            "snapshots": list(self.bundle.vqgc.codebook.snapshots),
            "optim": {k: getattr(self, f"opt_{k}").state_dict() for k in ("gcp", "ggp", "vqgc", "critic")},
            "rng": {"numpy": self.rng.bit_generator.state, "torch": self.torch_gen.get_state()},
            "gcp_active": self.last_gc_on,
        }

    def save(self, path: Path) -> None:
        torch.save(self.checkpoint(), path)

    # -- full loop -------------------------------------------------------

    def train(self, out_dir: Optional[Path] = None,
              evaluate_fn: Optional[Callable[["Trainer"], dict]] = None) -> list[dict]:
        """Run until ``total_steps`` env steps; returns the metric records."""
        records = []
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.save(out_dir / "checkpoint_0.pt")
        next_eval = self.cfg.eval_interval
        t0 = time.time()
        while self.t_global < self.cfg.total_steps:
            try:
                rec = self.train_round()
            except FloatingPointError:
                if out_dir is not None:
                    self.save(out_dir / "diagnostic_checkpoint.pt")
                raise
            rec["wall_time"] = time.time() - t0
            records.append(rec)
            self._emit(rec)
            log.info("step %d reward %s end %s", rec["step"], rec["mean_episode_reward"], rec["mean_end_step"])
            if evaluate_fn is not None and self.cfg.eval_interval > 0 and self.t_global >= next_eval:
                ev = {"kind": "eval", "step": self.t_global, **evaluate_fn(self)}
                records.append(ev)
                self._emit(ev)
                next_eval += self.cfg.eval_interval
            if out_dir is not None:
                self.save(out_dir / "checkpoint_last.pt")
        if out_dir is not None:
            self.save(out_dir / "checkpoint_final.pt")
        return records


def load_checkpoint(path) -> tuple[cn.WorldConfig, TrainConfig, PolicyBundle, dict]:
    ck = torch.load(path, weights_only=False)
    if ck.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {ck.get('format_version')}")
    world = cn.WorldConfig(**ck["world"])
    cfg = TrainConfig(**ck["train"])
    bundle = PolicyBundle(world, cfg, seed=cfg.seed)
    bundle.load_state_dict(ck["bundle"])
    bundle.vqgc.codebook.snapshots.extend(ck["snapshots"])
    return world, cfg, bundle, ck


def trainer_from_checkpoint(path, metrics: Optional[IO[str]] = None) -> Trainer:
    world, cfg, bundle, ck = load_checkpoint(path)
    tr = Trainer(world, cfg, metrics=metrics)
    tr.bundle.load_state_dict(ck["bundle"])
    tr.bundle.vqgc.codebook.snapshots.clear()
    tr.bundle.vqgc.codebook.snapshots.extend(ck["snapshots"])
    tr.target_critic.load_state_dict(ck["target_critic"])
    for k in ("gcp", "ggp", "vqgc", "critic"):
        getattr(tr, f"opt_{k}").load_state_dict(ck["optim"][k])
    tr.rng.bit_generator.state = ck["rng"]["numpy"]
    tr.torch_gen.set_state(ck["rng"]["torch"])
    tr.t_global = ck["t_global"]
    tr.episodes_done = ck["episodes_done"]
    tr.critic_updates = ck["critic_updates"]
    tr.vqgc_updates = ck["vqgc_updates"]
    tr.next_episode_seed = ck["next_episode_seed"]
    tr.last_gc_on = ck["gcp_active"]
    for a in tr.actors:
        a.reset(tr._episode_seed())
    return tr

"""Group consensus policy (hypernetwork), group-guided policy, and their combination."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, ConfigError, ContractError, init_uniform_, softmax


class GroupConsensusPolicy(nn.Module):
    """Hyper-MLP maps a group embedding to the weights of a bias-free base MLP.

    The base MLP is ``W1 @ tanh(W2.T @ e)`` with ``W2: (D, base_hidden)`` and
    ``W1: (action_dim, base_hidden)``; the mode head (softmax or tanh) follows.
    """

    def __init__(self, embed_dim: int, action_dim: int, mode: str, hyper_hidden: int = 32,
                 base_hidden: int = 32, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.embed_dim = embed_dim
        self.action_dim = action_dim
        self.base_hidden = base_hidden
        self.mode = mode
        self.n_w2 = embed_dim * base_hidden
        self.n_w1 = base_hidden * action_dim
        self.hyper = nn.Sequential(
            nn.Linear(embed_dim, hyper_hidden), nn.Tanh(),
            nn.Linear(hyper_hidden, hyper_hidden), nn.Tanh(),
            nn.Linear(hyper_hidden, self.n_w1 + self.n_w2),
        )
        if self.hyper[-1].out_features != self.n_w1 + self.n_w2:
            raise ConfigError("hypernetwork output does not match base network size")
        init_uniform_(self, generator)
        self.to(DTYPE)

    def base_weights(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        flat = self.hyper(e)
        w2 = flat[..., : self.n_w2].reshape(*e.shape[:-1], self.embed_dim, self.base_hidden)
        w1 = flat[..., self.n_w2 :].reshape(*e.shape[:-1], self.action_dim, self.base_hidden)
        return w1, w2

    def pre_head(self, e: torch.Tensor) -> torch.Tensor:
        w1, w2 = self.base_weights(e)
        h = torch.tanh((w2.transpose(-1, -2) @ e.unsqueeze(-1)))
        return (w1 @ h).squeeze(-1)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        out = self.pre_head(e)
        return softmax(out) if self.mode == "discrete" else torch.tanh(out)


class GroupGuidedPolicy(nn.Module):
    """MLP -> tanh RNN cell -> MLP over ``obs ++ e_j``; hidden state is per agent."""

    def __init__(self, obs_dim: int, embed_dim: int, action_dim: int, mode: str,
                 hidden: int = 64, rnn_hidden: int = 64, out_hidden: int = 32,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.mode = mode
        self.input_dim = obs_dim + embed_dim
        self.rnn_hidden = rnn_hidden
        self.inp = nn.Linear(self.input_dim, hidden)
        self.rnn = nn.RNNCell(hidden, rnn_hidden, nonlinearity="tanh")
        self.mid = nn.Linear(rnn_hidden, out_hidden)
        self.head = nn.Linear(out_hidden, action_dim)
        init_uniform_(self, generator)
        self.to(DTYPE)

    def initial_hidden(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.rnn_hidden, dtype=DTYPE)

    def forward(self, obs: torch.Tensor, e: torch.Tensor, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lead = obs.shape[:-1]
        x = torch.tanh(self.inp(torch.cat([obs, e], dim=-1)))
        h = self.rnn(x.reshape(-1, x.shape[-1]), hidden.reshape(-1, hidden.shape[-1])).reshape(*lead, -1)
        logits = self.head(torch.tanh(self.mid(h)))
        out = softmax(logits) if self.mode == "discrete" else torch.tanh(logits)
        return out, h


def gcp_active(t: int, jump: float, total_steps: int) -> bool:
    return t >= jump * total_steps


def combine_actions(a_gc: Optional[torch.Tensor], a_gg: Optional[torch.Tensor], mode: str,
                    t: int, jump: float, total_steps: int, combine: str = "mixture",
                    no_gcp: bool = False, no_ggp: bool = False) -> torch.Tensor:
    """Executed action command.

    Before ``jump * total_steps`` (or with the GCP ablated) this is ``a_gg``
    itself. Otherwise continuous commands are summed and clamped to [-1, 1];
    discrete distributions are mixed with equal weight (or, with
    ``combine="logits"``, renormalized from the sum of their logs).
    """
    if not 0.0 <= jump <= 1.0:
        raise ContractError("jump must lie in [0, 1]")
    if no_gcp and no_ggp:
        raise ConfigError("cannot ablate both policy components")
    if no_ggp:
        return a_gc
    if no_gcp or not gcp_active(t, jump, total_steps):
        return a_gg
    if a_gc.shape != a_gg.shape:
        raise ContractError(f"component shapes differ: {tuple(a_gc.shape)} vs {tuple(a_gg.shape)}")
    if mode == "continuous":
        return torch.clamp(a_gc + a_gg, -1.0, 1.0)
    if combine == "logits":
        return softmax(torch.log(a_gc) + torch.log(a_gg))
    return 0.5 * (a_gc + a_gg)


def select_action(u: np.ndarray, mode: str, phase: str, rng: np.random.Generator,
                  epsilon: float = 0.05, sigma: float = 0.1) -> np.ndarray:
    """Environment actions from a batch of commands (rows are agents)."""
    u = np.asarray(u, dtype=np.float64)
    if mode == "discrete":
        if phase == "eval":
            return np.argmax(u, axis=-1)  # first maximum wins ties
        cdf = np.cumsum(u, axis=-1)
        draws = rng.random(u.shape[:-1])[..., None]
        a = np.minimum((draws > cdf).sum(-1), u.shape[-1] - 1)
        if epsilon > 0:
            explore = rng.random(a.shape) < epsilon
            a = np.where(explore, rng.integers(0, u.shape[-1], size=a.shape), a)
        return a
    if phase == "eval" or sigma == 0:
        return np.clip(u, -1.0, 1.0)
    return np.clip(u + rng.normal(0.0, sigma, size=u.shape), -1.0, 1.0)

"""Vector-quantized group consensus.

Each agent's recent transitions are encoded to ``z_e``, snapped to the nearest
row of a learnable group codebook, and decoded back. The codebook lives in the
Poincare ball and is regularized against a ring of its own recent snapshots:
the same row across time is pulled together, different rows are pushed apart.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import IO, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .numerics import DTYPE, ContractError, DimensionError, DomainError, init_uniform_, straight_through

EPS_BALL = 1e-5


def token_dim(obs_dim: int, action_dim: int) -> int:
    return obs_dim + action_dim + 1


class TransitionWindow:
    """Rolling ``c``-token history per agent: ``(o_l, a_{l-1}, r_{l-1})``.

    Missing previous action/reward at episode start are zero-filled, and so
    are tokens before the first observation when ``c > 1``.
    """

    def __init__(self, n_agents: int, obs_dim: int, action_dim: int, context: int = 1):
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.context = context
        self.tokens = np.zeros((n_agents, context, token_dim(obs_dim, action_dim)))
        self._prev_action = np.zeros((n_agents, action_dim))
        self._prev_reward = 0.0

    def reset(self, obs: np.ndarray) -> np.ndarray:
        self.tokens[:] = 0.0
        self._prev_action = np.zeros((self.n_agents, self.action_dim))
        self._prev_reward = 0.0
        return self.push(obs)

    def record(self, action_vec: np.ndarray, reward: float) -> None:
        self._prev_action = np.asarray(action_vec, dtype=np.float64).reshape(self.n_agents, self.action_dim)
        self._prev_reward = float(reward)

    def push(self, obs: np.ndarray) -> np.ndarray:
        tok = np.concatenate(
            [obs, self._prev_action, np.full((self.n_agents, 1), self._prev_reward)], axis=1
        )
        self.tokens = np.roll(self.tokens, -1, axis=1)
        self.tokens[:, -1] = tok
        return self.tokens.copy()


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, n_heads: int, context: int):
        super().__init__()
        if width % n_heads:
            raise ValueError("attention width must be divisible by the head count")
        self.n_heads = n_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.register_buffer("mask", torch.tril(torch.ones(context, context, dtype=torch.bool)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, w = x.shape
        hd = w // self.n_heads
        q, k, v = self.qkv(x).split(w, dim=-1)
        q = q.view(b, c, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, c, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, c, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~self.mask[:c, :c], float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, c, w)
        return self.proj(y)


class HistoryEncoder(nn.Module):
    """Token projection + learned positions + one causal attention layer -> ``z_e``."""

    def __init__(self, token_dim: int, embed_dim: int = 32, context: int = 1, n_heads: int = 4):
        super().__init__()
        self.token_dim = token_dim
        self.context = context
        self.embed = nn.Linear(token_dim, embed_dim)
        self.pos = nn.Parameter(torch.zeros(context, embed_dim))
        self.attn = CausalSelfAttention(embed_dim, n_heads, context)
        self.out = nn.Linear(embed_dim, embed_dim)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        if window.shape[-1] != self.token_dim or window.shape[-2] != self.context:
            raise DimensionError(
                f"window shape {tuple(window.shape)} does not match (context={self.context}, "
                f"token_dim={self.token_dim})"
            )
        x = self.embed(window) + self.pos
        h = x + self.attn(x)
        return self.out(F.relu(h[:, -1]))


class HistoryDecoder(nn.Module):
    def __init__(self, embed_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.net(z_q)


class GroupCodebook(nn.Module):
    """``K x D`` group embeddings plus a ring of the latest ``L`` snapshots."""

    def __init__(self, n_groups: int, embed_dim: int = 32, buffer_len: int = 16,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if n_groups < 1:
            raise ValueError("codebook needs at least one entry")
        self.entries = nn.Parameter(
            torch.empty(n_groups, embed_dim, dtype=DTYPE).uniform_(-0.1, 0.1, generator=generator)
        )
        self.snapshots: deque = deque(maxlen=buffer_len)

    @property
    def n_groups(self) -> int:
        return self.entries.shape[0]

    def push_snapshot(self, timestamp: int) -> None:
        push_codebook_snapshot(self.snapshots, self.entries, timestamp)

    def snapshot_tensors(self) -> list[torch.Tensor]:
        return [e for _, e in self.snapshots]

    def project_(self, margin: float = EPS_BALL) -> None:
        with torch.no_grad():
            self.entries.copy_(project_to_ball(self.entries, margin))


def push_codebook_snapshot(buffer: deque, entries: torch.Tensor, timestamp: int) -> deque:
    if buffer and timestamp <= buffer[-1][0]:
        raise ContractError(f"snapshot timestamps must increase ({timestamp} after {buffer[-1][0]})")
    buffer.append((timestamp, entries.detach().clone()))
    return buffer


def nearest_code(entries: torch.Tensor, z_e: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for each query (lowest index on ties)."""
    if entries.shape[0] == 0:
        raise ContractError("quantize against an empty codebook")
    dist = ((z_e.unsqueeze(-2) - entries) ** 2).sum(-1)
    return torch.argmin(dist, dim=-1)


def quantize(entries: torch.Tensor, z_e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    j = nearest_code(entries, z_e.detach())
    return j, entries[j]


class _Arcosh(torch.autograd.Function):
    # gradient stays finite at argument 1, where every caller's inner derivative vanishes
    @staticmethod
    def forward(ctx, x):
        x = x.clamp(min=1.0)
        ctx.save_for_backward(x)
        return torch.acosh(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad / torch.sqrt((x * x - 1.0).clamp(min=1e-30))


def poincare_distance(x: torch.Tensor, y: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Hyperbolic distance in the unit Poincare ball (broadcasts over leading dims)."""
    xx = (x * x).sum(-1)
    yy = (y * y).sum(-1)
    if check and (bool((xx >= 1.0).any()) or bool((yy >= 1.0).any())):
        raise DomainError("poincare_distance inputs must lie strictly inside the unit ball")
    sq = ((x - y) ** 2).sum(-1)
    arg = 1.0 + 2.0 * sq / ((1.0 - xx) * (1.0 - yy))
    return _Arcosh.apply(arg)


def poincare_regularizer(entries: torch.Tensor, snapshots: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of ``log sigmoid(sign * D)`` over anchors and candidate sets.

    The live ``entries`` are the anchors and stand for the newest snapshot's
    time step. For anchor ``j``: the positive set is row ``j`` of every older
    snapshot, the negative set is every other row across all snapshots, and
    ``D`` is the smallest distance from the anchor to the set.
    """
    if len(snapshots) == 0:
        return entries.sum() * 0.0
    snaps = torch.stack([s.detach() for s in snapshots])  # (L, K, D)
    n_snap, k, _ = snaps.shape
    dist = poincare_distance(entries.unsqueeze(0).unsqueeze(2), snaps.unsqueeze(1))  # (L, K_anchor, K_cand)
    total = entries.sum() * 0.0
    if n_snap > 1:
        same = torch.diagonal(dist[:-1], dim1=1, dim2=2)  # (L-1, K)
        total = total + F.logsigmoid(same.min(dim=0).values).sum()
    if k > 1:
        eye = torch.eye(k, dtype=torch.bool)
        other = dist.masked_fill(eye, float("inf")).amin(dim=(0, 2))
        total = total + F.logsigmoid(-other).sum()
    return total


def embedding_separability(entries: torch.Tensor, snapshots: Sequence[torch.Tensor]) -> dict:
    """Mean distance between distinct codebook rows vs. mean drift of each row over time.

    Drift averages ``D(S_a[j], S_b[j])`` over every pair of buffered snapshots
    ``a < b`` and every row ``j``.
    """
    with torch.no_grad():
        k = entries.shape[0]
        if k < 2 or len(snapshots) < 2:
            raise ContractError("separability needs at least two rows and two snapshots")
        d = poincare_distance(entries.unsqueeze(1), entries.unsqueeze(0))
        inter = d[~torch.eye(k, dtype=torch.bool)].mean()
        snaps = torch.stack([s.detach() for s in snapshots])
        ia, ib = torch.triu_indices(len(snaps), len(snaps), offset=1)
        drift = poincare_distance(snaps[ia], snaps[ib]).mean()
    ratio = float(inter / drift) if drift > 0 else math.inf
    return {"inter_group": float(inter), "intra_drift": float(drift), "ratio": ratio}


def project_to_ball(entries: torch.Tensor, margin: float = EPS_BALL) -> torch.Tensor:
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must lie in (0, 1)")
    limit = 1.0 - margin
    norms = entries.norm(dim=-1, keepdim=True)
    scale = torch.where(norms > limit, limit / norms.clamp(min=1e-300), torch.ones_like(norms))
    return entries * scale


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((recon - target) ** 2).mean()


@dataclass
class VQGCLoss:
    total: torch.Tensor
    recon: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    poincare: torch.Tensor
    index: torch.Tensor
    z_e: torch.Tensor


class VQGC(nn.Module):
    """Encoder, decoder and codebook bundled with the training objective."""

    def __init__(self, obs_dim: int, action_dim: int, n_groups: int, embed_dim: int = 32,
                 context: int = 1, n_heads: int = 4, decoder_hidden: int = 64, buffer_len: int = 16,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.token_dim = token_dim(obs_dim, action_dim)
        self.context = context
        self.encoder = HistoryEncoder(self.token_dim, embed_dim, context, n_heads)
        self.decoder = HistoryDecoder(embed_dim, context * self.token_dim, decoder_hidden)
        init_uniform_(self.encoder, generator)
        init_uniform_(self.decoder, generator)
        self.to(DTYPE)
        self.codebook = GroupCodebook(n_groups, embed_dim, buffer_len, generator)

    def encode(self, window: torch.Tensor) -> torch.Tensor:
        return self.encoder(window)

    def quantize(self, z_e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return quantize(self.codebook.entries, z_e)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_q)

    @torch.no_grad()
    def assign(self, window: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Inference path: ``(z_e, index, e_j)`` with no graph."""
        z_e = self.encoder(window)
        j, e_j = self.quantize(z_e)
        return z_e, j, e_j.clone()

    def loss(self, window: torch.Tensor, beta: float = 1.0, use_poincare: bool = True) -> VQGCLoss:
        if beta <= 0:
            raise ValueError("beta must be positive")
        z_e = self.encoder(window)
        j, e_j = self.quantize(z_e)
        z_q = straight_through(z_e, e_j)
        recon = reconstruction_loss(self.decoder(z_q), window.reshape(window.shape[0], -1))
        codebook = ((z_e.detach() - e_j) ** 2).sum(-1).mean()
        commitment = ((z_e - e_j.detach()) ** 2).sum(-1).mean()
        if use_poincare:
            reg = poincare_regularizer(self.codebook.entries, self.codebook.snapshot_tensors())
        else:
            reg = self.codebook.entries.sum() * 0.0
        total = recon + codebook + beta * commitment + reg
        return VQGCLoss(total, recon, codebook, commitment, reg, j, z_e)


def write_embedding_record(fh: IO[str], step: int, agent: int, group: int,
                           e_j: Sequence[float], z_e: Sequence[float]) -> None:
    fh.write(json.dumps({
        "step": int(step),
        "agent": int(agent),
        "group": int(group),
        "e_j": [float(v) for v in e_j],
        "z_e": [float(v) for v in z_e],
    }) + "\n")

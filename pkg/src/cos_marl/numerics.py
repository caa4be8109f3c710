"""Dense float64 tensor helpers on top of torch autograd.

Torch provides the reverse-mode tape. This module pins the contracts the rest
of the package relies on: strict shape checks, a stop-gradient, an exact
straight-through estimator, a central-difference gradient checker, and a
small Adam/AdamW implementation with explicit state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import torch

DTYPE = torch.float64


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


_UNARY = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "exp": torch.exp,
    "log": torch.log,
    "square": torch.square,
}
_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
}


def elementwise(opcode: str, a: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if opcode in _UNARY:
        if b is not None:
            raise ContractError(f"{opcode} takes one operand")
        if opcode == "log" and bool((a <= 0).any()):
            raise DomainError("log of non-positive input")
        return _UNARY[opcode](a)
    if opcode not in _BINARY:
        raise ValueError(f"unknown opcode {opcode!r}")
    if b is None:
        raise ContractError(f"{opcode} takes two operands")
    b = b if isinstance(b, torch.Tensor) else tensor(b)
    # scalar-with-tensor is the only broadcast allowed
    if a.shape != b.shape and a.numel() != 1 and b.numel() != 1:
        raise DimensionError(f"{opcode} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _BINARY[opcode](a, b)


def softmax(a: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    z = a / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def stop_gradient(a: torch.Tensor) -> torch.Tensor:
    return a.detach()


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_e, e_j):
        return e_j.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z_e: torch.Tensor, e_j: torch.Tensor) -> torch.Tensor:
    """Forward returns ``e_j`` bitwise; backward hands the incoming adjoint to ``z_e`` unchanged.

    Equivalent to ``z_e + sg(e_j - z_e)`` without the rounding that form
    introduces in the forward value.
    """
    if z_e.shape != e_j.shape:
        raise DimensionError(f"straight_through shape mismatch: {tuple(z_e.shape)} vs {tuple(e_j.shape)}")
    return _StraightThrough.apply(z_e, e_j)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return  # nothing upstream is differentiable; leaf grads stay as they are
    loss.backward()


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6
) -> float:
    """Max over coordinates of ``|g_analytic - g_fd| / max(1, |g_fd|)``.

    ``g_fd`` uses central differences on a detached copy of ``x``.
    """
    x0 = x.detach().clone().to(DTYPE)
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    (g_analytic,) = torch.autograd.grad(out, xa, allow_unused=True)
    if g_analytic is None:
        g_analytic = torch.zeros_like(x0)
    flat = x0.reshape(-1)
    g_fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x0).item()
            flat[i] = orig - eps
            fm = f(x0).item()
            flat[i] = orig
            g_fd[i] = (fp - fm) / (2 * eps)
    err = (g_analytic.reshape(-1) - g_fd).abs() / g_fd.abs().clamp(min=1.0)
    return float(err.max()) if err.numel() else 0.0


def init_uniform_(module: torch.nn.Module, generator: Optional[torch.Generator] = None) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every Linear/recurrent cell in ``module``."""
    for m in module.modules():
        if isinstance(m, torch.nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (torch.nn.RNNCell, torch.nn.GRUCell)):
            bound = 1.0 / math.sqrt(m.hidden_size)
            with torch.no_grad():
                for p in m.parameters():
                    p.uniform_(-bound, bound, generator=generator)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
            "exp_avg": [m.clone() for m in self.exp_avg],
            "exp_avg_sq": [v.clone() for v in self.exp_avg_sq],
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamState":
        return cls(**{**d, "exp_avg": list(d["exp_avg"]), "exp_avg_sq": list(d["exp_avg_sq"])})


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: AdamState,
    variant: str = "adam",
) -> None:
    """In-place Adam / AdamW update with bias correction.

    ``adamw`` shrinks each parameter by ``lr * weight_decay * param`` before the
    moment-based step (decoupled decay); ``adam`` ignores ``weight_decay``.
    """
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    if variant not in ("adam", "adamw"):
        raise ConfigError(f"unknown Adam variant {variant!r}")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {tuple(g.shape)} vs parameter {tuple(p.shape)}")
        if variant == "adamw" and state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


class Adam:
    """Thin optimizer object over :func:`adam_step` for a fixed parameter list."""

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        variant: str = "adam",
        max_grad_norm: Optional[float] = None,
    ):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.params = [p for p in params]
        self.variant = variant
        self.max_grad_norm = max_grad_norm
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.state.lr == 0:
            return
        if self.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.max_grad_norm)
        adam_step(self.params, [p.grad for p in self.params], self.state, self.variant)

    def state_dict(self) -> dict:
        return {"variant": self.variant, "state": self.state.state_dict()}

    def load_state_dict(self, d: dict) -> None:
        self.variant = d["variant"]
        self.state = AdamState.from_state_dict(d["state"])

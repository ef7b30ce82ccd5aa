"""Differentiable tensor primitives and the Adam optimizer.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
delegated to ``torch.autograd``. This module pins down the handful of
operations every later stage depends on (convolution, group normalization,
attention, timestep embeddings) so that their contracts can be checked in one
place, and provides a functional Adam/AdamW update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

GN_EPS = 1e-5


def forward_backward(root: Tensor, leaves: Sequence[Tensor]) -> List[Tensor]:
    """Differentiates a scalar ``root`` with respect to ``leaves``.

    Leaves that do not participate in the graph receive an all-zero gradient
    instead of ``None``.
    """
    if root.numel() != 1:
        raise ValueError(f"root must be a scalar, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        return [torch.zeros_like(leaf) for leaf in leaves]
    grads = torch.autograd.grad(
        root.reshape(()), list(leaves), allow_unused=True, retain_graph=True
    )
    return [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: List[Tensor] = field(default_factory=list)
    second_moment: List[Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState) -> AdamState:
    """Applies one bias-corrected Adam update in place.

    ``weight_decay > 0`` switches to the decoupled (AdamW) form, where decay is
    applied to the parameter directly rather than folded into the gradient.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p) for p in params]
        state.second_moment = [torch.zeros_like(p) for p in params]
    for p, m in zip(params, state.first_moment):
        if p.shape != m.shape:
            raise ValueError("moment buffers do not match parameter shapes")

    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay > 0:
            p.mul_(1.0 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` with a torch-like interface."""

    def __init__(self, params: Iterable[Tensor], lr=2e-4, betas=(0.0, 0.99), eps=1e-8,
                 weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state)

    def state_dict(self) -> Dict[str, object]:
        s = self.state
        return {"step_count": s.step_count, "m": s.first_moment, "v": s.second_moment}


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded 2D cross-correlation over NCHW input."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.shape[-3] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[-3]} channels, kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[-2:]
    if kh > x.shape[-2] + 2 * padding or kw > x.shape[-1] + 2 * padding:
        raise ValueError("kernel larger than padded input")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    Frequencies are ``max_period ** (-i / (dim/2))``, so the first pair uses
    frequency 1. ``t`` may be an int or a 1-D tensor of steps; the result has
    shape ``(dim,)`` or ``(len(t), dim)`` respectively.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    scalar = not torch.is_tensor(t)
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = steps[:, None] * freqs[None]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(len(steps), dim)
    emb = emb.float()
    return emb[0] if scalar else emb


def group_norm(x: Tensor, n_groups: int, scale: Optional[Tensor] = None,
               shift: Optional[Tensor] = None, eps: float = GN_EPS) -> Tensor:
    """Group normalization of an ``(N, C, ...)`` tensor.

    ``scale``/``shift`` may be per-channel ``(C,)`` or per-sample ``(N, C)``;
    the latter is how conditional group norm injects its condition.
    """
    n, c = x.shape[:2]
    if c % n_groups:
        raise ValueError(f"{c} channels not divisible into {n_groups} groups")
    h = F.group_norm(x, n_groups, eps=eps)
    extra = (1,) * (x.dim() - 2)
    if scale is not None:
        h = h * (scale.reshape(-1, c, *extra) if scale.dim() == 2 else scale.reshape(1, c, *extra))
    if shift is not None:
        h = h + (shift.reshape(-1, c, *extra) if shift.dim() == 2 else shift.reshape(1, c, *extra))
    return h


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over ``(N, L, D)`` tensors."""
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return w @ v


def clamped_softplus(logits: Tensor, bound: float = 10.0) -> Tensor:
    return F.softplus(torch.clamp(logits, -bound, bound))


def finite_difference_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, entry by entry."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = fn(x).item()
            flat[i] = orig - h
            fm = fn(x).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradient_relative_error(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Relative L2 error between autograd and central-difference gradients."""
    xa = x.detach().clone().requires_grad_(True)
    (analytic,) = forward_backward(fn(xa), [xa])
    numeric = finite_difference_grad(fn, x, h)
    scale = max(numeric.norm().item(), analytic.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


# --- gradient-check registry ---------------------------------------------------------------
#
# Each entry maps a name to ``case(generator) -> (fn, x)`` where ``fn`` is a scalar
# function of the float64 tensor ``x``. Modules register their differentiable
# primitives here so a single sweep can check them all against finite differences.

GRADCHECK_CASES: Dict[str, Callable[[torch.Generator], tuple]] = {}


def register_gradcheck(name: str):
    def deco(case):
        if name in GRADCHECK_CASES:
            raise ValueError(f"gradcheck case {name!r} registered twice")
        GRADCHECK_CASES[name] = case
        return case
    return deco


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


@register_gradcheck("add_mul")
def _case_add_mul(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 3, 4)
    w = _randn(gen, 3, 4)
    return (lambda x: ((x + a) * b * x * w).sum()), _randn(gen, 3, 4)


@register_gradcheck("matmul")
def _case_matmul(gen):
    b, w = _randn(gen, 4, 5), _randn(gen, 3, 5)
    return (lambda x: ((x @ b) * w).sum()), _randn(gen, 3, 4)


@register_gradcheck("exp_log")
def _case_exp_log(gen):
    w = _randn(gen, 6)
    return (lambda x: (torch.log(1 + torch.exp(x)) * w).sum()), _randn(gen, 6)


@register_gradcheck("clamped_softplus")
def _case_softplus(gen):
    w = _randn(gen, 8)
    # stay away from the clamp kinks at +-10
    return (lambda x: (clamped_softplus(x) * w).sum()), _randn(gen, 8) * 3


@register_gradcheck("silu")
def _case_silu(gen):
    w = _randn(gen, 8)
    return (lambda x: (F.silu(x) * w).sum()), _randn(gen, 8)


@register_gradcheck("conv2d_input")
def _case_conv_in(gen):
    k = _randn(gen, 3, 2, 3, 3)
    w = _randn(gen, 1, 3, 3, 3)
    return (lambda x: (conv2d(x, k, stride=2, padding=1) * w).sum()), _randn(gen, 1, 2, 5, 5)


@register_gradcheck("conv2d_kernel")
def _case_conv_k(gen):
    inp = _randn(gen, 1, 2, 5, 5)
    w = _randn(gen, 1, 3, 5, 5)
    return (lambda k: (conv2d(inp, k, padding=1) * w).sum()), _randn(gen, 3, 2, 3, 3)


@register_gradcheck("group_norm")
def _case_gn(gen):
    scale, shift = _randn(gen, 2, 4), _randn(gen, 2, 4)
    w = _randn(gen, 2, 4, 3, 3)
    return (lambda x: (group_norm(x, 2, scale, shift) * w).sum()), _randn(gen, 2, 4, 3, 3)


@register_gradcheck("group_norm_scale")
def _case_gn_scale(gen):
    inp = _randn(gen, 2, 4, 3, 3)
    w = _randn(gen, 2, 4, 3, 3)
    return (lambda s: (group_norm(inp, 2, s) * w).sum()), _randn(gen, 2, 4)


@register_gradcheck("attention")
def _case_attention(gen):
    k, v = _randn(gen, 2, 5, 4), _randn(gen, 2, 5, 3)
    w = _randn(gen, 2, 6, 3)
    return (lambda q: (attention(q, k, v) * w).sum()), _randn(gen, 2, 6, 4)


@register_gradcheck("softmax_cross_entropy")
def _case_ce(gen):
    target = torch.randint(0, 5, (4,), generator=gen)
    return (lambda x: F.cross_entropy(x, target)), _randn(gen, 4, 5)

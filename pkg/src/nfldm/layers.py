"""Network building blocks shared by the encoders, decoders and denoisers."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from nfldm.tensor_core import attention, group_norm, timestep_embedding


def num_groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class CondGroupNorm(nn.Module):
    """Group norm whose scale and shift are affine in a condition vector.

    Projections start at zero, so a freshly built layer (or a zero condition)
    behaves exactly like plain group norm with unit scale and zero shift.
    """

    def __init__(self, channels: int, cond_dim: int = 0, n_groups: Optional[int] = None):
        super().__init__()
        self.n_groups = n_groups or num_groups(channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.cond_dim = cond_dim
        if cond_dim:
            self.to_scale = nn.Linear(cond_dim, channels)
            self.to_shift = nn.Linear(cond_dim, channels)
            for lin in (self.to_scale, self.to_shift):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, x, cond=None):
        scale, shift = self.weight, self.bias
        if self.cond_dim and cond is not None:
            scale = scale[None] + self.to_scale(cond)
            shift = shift[None] + self.to_shift(cond)
        return group_norm(x, self.n_groups, scale, shift)


class ResBlock(nn.Module):
    """Two norm-SiLU-conv stages with a residual connection.

    ``cond_dim`` turns the norms into conditional group norms, ``temb_dim``
    adds a projected timestep embedding between the two convolutions.
    """

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int = 0, temb_dim: int = 0):
        super().__init__()
        self.norm1 = CondGroupNorm(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = CondGroupNorm(out_ch, cond_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, cond=None, temb=None):
        h = self.conv1(F.silu(self.norm1(x, cond)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h, cond)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head attention over spatial positions.

    With ``context_dim == 0`` this is self-attention; otherwise it is
    cross-attention against a ``(N, L, context_dim)`` context, and a learned
    null token stands in when no context is supplied.
    """

    def __init__(self, channels: int, context_dim: int = 0, cond_dim: int = 0):
        super().__init__()
        self.norm = CondGroupNorm(channels, cond_dim)
        kv_dim = context_dim or channels
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(kv_dim, channels)
        self.v = nn.Linear(kv_dim, channels)
        self.out = nn.Linear(channels, channels)
        self.context_dim = context_dim
        if context_dim:
            self.null_context = nn.Parameter(torch.zeros(1, 1, context_dim))

    def forward(self, x, cond=None, context=None):
        n, c, h, w = x.shape
        tokens = self.norm(x, cond).flatten(2).transpose(1, 2)
        if self.context_dim:
            if context is None:
                context = self.null_context.expand(n, 1, -1)
            src = context
        else:
            src = tokens
        a = attention(self.q(tokens), self.k(src), self.v(src))
        return x + self.out(a).transpose(1, 2).reshape(n, c, h, w)


class UNet2D(nn.Module):
    """Compact diffusion U-net over ``(N, C, H, W)`` latents.

    Conditioning routes: ``cond`` (a vector, e.g. the global latent) enters
    through conditional group norms; ``context`` (a token sequence, e.g. a BEV
    embedding) enters through attention; ``class_labels`` add a learned
    embedding to the timestep embedding.
    """

    def __init__(self, in_ch: int, out_ch: int, base: int = 32, mults: Sequence[int] = (1, 2),
                 cond_dim: int = 0, context_dim: int = 0, attn_min_res: int = 8,
                 n_classes: int = 0, resolution: int = 16):
        super().__init__()
        self.temb_dim = base * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.class_emb = nn.Embedding(n_classes, self.temb_dim) if n_classes else None
        self.base = base
        self.conv_in = nn.Conv2d(in_ch, base, 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        chans = [base]
        ch, res = base, resolution
        for i, m in enumerate(mults):
            blk = nn.ModuleDict({"res": ResBlock(ch, base * m, cond_dim, self.temb_dim)})
            ch = base * m
            if res <= attn_min_res:
                blk["attn"] = AttnBlock(ch, context_dim, cond_dim)
            self.down.append(blk)
            chans.append(ch)
            if i < len(mults) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                res //= 2
        self.mid1 = ResBlock(ch, ch, cond_dim, self.temb_dim)
        self.mid_attn = AttnBlock(ch, context_dim, cond_dim)
        self.mid2 = ResBlock(ch, ch, cond_dim, self.temb_dim)
        self.up = nn.ModuleList()
        for i, m in reversed(list(enumerate(mults))):
            skip = chans.pop()
            blk = nn.ModuleDict({"res": ResBlock(ch + skip, base * m, cond_dim, self.temb_dim)})
            ch = base * m
            if res <= attn_min_res:
                blk["attn"] = AttnBlock(ch, context_dim, cond_dim)
            self.up.append(blk)
            if i > 0:
                res *= 2
        self.norm_out = CondGroupNorm(ch, cond_dim)
        self.conv_out = nn.Conv2d(ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, cond=None, context=None, class_labels=None):
        temb = self.time_mlp(timestep_embedding(t, self.base).to(x.dtype))
        if self.class_emb is not None and class_labels is not None:
            temb = temb + self.class_emb(class_labels)
        h = self.conv_in(x)
        skips = []
        for i, blk in enumerate(self.down):
            h = blk["res"](h, cond, temb)
            if "attn" in blk:
                h = blk["attn"](h, cond, context)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid1(h, cond, temb)
        h = self.mid_attn(h, cond, context)
        h = self.mid2(h, cond, temb)
        for j, blk in enumerate(self.up):
            h = blk["res"](torch.cat([h, skips.pop()], dim=1), cond, temb)
            if "attn" in blk:
                h = blk["attn"](h, cond, context)
            if j < len(self.up) - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.silu(self.norm_out(h, cond)))


class LinearBlock(nn.Module):
    """Residual linear block conditioned on a timestep embedding."""

    def __init__(self, in_dim: int, out_dim: int, temb_dim: int):
        super().__init__()
        self.lin_in = nn.Linear(in_dim, out_dim)
        self.lin_emb = nn.Linear(temb_dim, out_dim)
        self.lin_mid = nn.Linear(out_dim, out_dim)
        self.lin_skip = nn.Linear(in_dim, out_dim)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, x, temb):
        h = self.lin_in(x) + self.lin_emb(temb)
        h = self.lin_mid(F.silu(self.norm(h)))
        return self.lin_skip(x) + h


class LinearUNet(nn.Module):
    """Stack of linear blocks with U-net style skips between the two halves.

    An optional ``context_dim`` vector (e.g. a pooled BEV embedding) is
    concatenated with the timestep embedding before it enters the blocks.
    """

    def __init__(self, dim: int, hidden: int = 256, n_blocks: int = 6, context_dim: int = 0,
                 temb_dim: int = 64):
        super().__init__()
        if n_blocks % 2:
            raise ValueError("n_blocks must be even")
        self.temb_dim = temb_dim
        emb_in = temb_dim + context_dim
        self.context_dim = context_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_in, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        half = n_blocks // 2
        self.first = nn.ModuleList(
            [LinearBlock(dim if i == 0 else hidden, hidden, hidden) for i in range(half)]
        )
        self.second = nn.ModuleList([LinearBlock(2 * hidden, hidden, hidden) for _ in range(half)])
        self.out = nn.Linear(hidden, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t, context=None):
        temb = timestep_embedding(t, self.temb_dim).to(x.dtype)
        if self.context_dim:
            if context is None:
                context = torch.zeros(x.shape[0], self.context_dim, dtype=x.dtype)
            temb = torch.cat([temb, context], dim=-1)
        temb = self.time_mlp(temb)
        skips = []
        h = x
        for blk in self.first:
            h = blk(h, temb)
            skips.append(h)
        for blk in self.second:
            h = blk(torch.cat([h, skips.pop()], dim=-1), temb)
        return self.out(F.silu(h))

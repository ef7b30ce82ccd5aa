"""Latent voxel auto-encoder: voxel grid <-> (global g, coarse c, fine f).

All networks are 2D: the vertical axis of the ``(K, Z, X, Y)`` voxel tensor
is folded into channels before encoding and unfolded after decoding. ``g``
is a Gaussian latent trained with a small KL penalty; ``c`` (3D, downsampled)
and ``f`` (2D, full horizontal resolution) are vector-quantized.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from nfldm.config import LAEConfig
from nfldm.layers import AttnBlock, CondGroupNorm, ResBlock
from nfldm.tensor_core import Adam

log = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)


def fold_z(v: torch.Tensor) -> torch.Tensor:
    """``(N, K, Z, X, Y)`` -> ``(N, K*Z, X, Y)``."""
    n, k, z, x, y = v.shape
    return v.reshape(n, k * z, x, y)


def unfold_z(v: torch.Tensor, k: int) -> torch.Tensor:
    n, kz, x, y = v.shape
    return v.reshape(n, k, kz // k, x, y)


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.logvar = self.logvar.clamp(*LOGVAR_RANGE)

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype)
        return self.mu + torch.exp(0.5 * self.logvar) * eps

    def kl(self) -> torch.Tensor:
        """KL to the standard normal, summed over dims and averaged over the batch."""
        per = 0.5 * (self.mu**2 + self.logvar.exp() - 1 - self.logvar)
        return per.reshape(per.shape[0], -1).sum(-1).mean() if per.dim() > 1 else per.sum()


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int = 4):
        super().__init__()
        bound = 1.0 / max(size, 1)
        self.entries = nn.Parameter(torch.empty(size, dim).uniform_(-bound, bound))
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))

    def __len__(self):
        return self.entries.shape[0]

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        """Index of the nearest entry (squared L2, ties to the lowest index)."""
        d = ((z[:, None, :] - self.entries[None].detach()) ** 2).sum(-1)
        return d.argmin(-1)

    @torch.no_grad()
    def reseed_dead(self, vectors: torch.Tensor, generator: Optional[torch.Generator] = None) -> int:
        """Replaces never-used entries with random batch vectors; resets usage."""
        dead = (self.usage_counts == 0).nonzero().reshape(-1)
        if len(dead) and len(vectors):
            pick = torch.randint(len(vectors), (len(dead),), generator=generator)
            self.entries[dead] = vectors[pick].detach()
        self.usage_counts.zero_()
        return len(dead)


def vector_quantize(z: torch.Tensor, book: Codebook, beta: float = 0.25):
    """Snaps the trailing-dim vectors of ``z`` to their nearest codebook rows.

    Returns ``(z_q, indices, vq_loss)``. ``z_q`` carries the straight-through
    gradient (identity with respect to ``z``).
    """
    if len(book) == 0:
        raise ValueError("empty codebook")
    if z.shape[-1] != book.entries.shape[1]:
        raise ValueError(f"vector dim {z.shape[-1]} != codebook dim {book.entries.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    idx = book.nearest(flat)
    q = book.entries[idx]
    if book.training:
        book.usage_counts.index_add_(0, idx, torch.ones_like(idx))
    loss = F.mse_loss(q, flat.detach()) + beta * F.mse_loss(flat, q.detach())
    # forward value is exactly the codebook row; gradient passes straight to z
    q_st = q.detach() + (flat - flat.detach())
    return q_st.reshape(z.shape), idx.reshape(z.shape[:-1]), loss


def channels_last_quantize(x: torch.Tensor, book: Codebook, beta: float):
    """Quantizes a channels-first tensor ``(N, 4, ...)`` along the channel axis."""
    moved = x.movedim(1, -1)
    q, idx, loss = vector_quantize(moved, book, beta)
    return q.movedim(-1, 1), idx, loss


class GlobalEncoder(nn.Module):
    def __init__(self, in_ch: int, width: int, dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, width, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(width, width) for _ in range(2)])
        self.down = nn.ModuleList([nn.Conv2d(width, width, 3, stride=2, padding=1) for _ in range(2)])
        self.norm = CondGroupNorm(width)
        self.head = nn.Linear(width, 2 * dim)

    def forward(self, x):
        h = self.conv_in(x)
        for blk, down in zip(self.blocks, self.down):
            h = down(blk(h))
        h = F.silu(self.norm(h)).mean((-2, -1))
        mu, logvar = self.head(h).chunk(2, -1)
        return GaussianLatent(mu, logvar)


class CoarseEncoder(nn.Module):
    def __init__(self, in_ch: int, width: int, out_ch: int, downsample: int):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        self.conv_in = nn.Conv2d(in_ch, width, 3, padding=1)
        layers = []
        for _ in range(n_down):
            layers += [ResBlock(width, width), nn.Conv2d(width, width, 3, stride=2, padding=1)]
        self.body = nn.Sequential(*layers)
        self.mid = nn.ModuleList([ResBlock(width, width), AttnBlock(width), ResBlock(width, width)])
        self.norm = CondGroupNorm(width)
        self.conv_out = nn.Conv2d(width, out_ch, 3, padding=1)

    def forward(self, x):
        h = self.body(self.conv_in(x))
        for m in self.mid:
            h = m(h)
        return self.conv_out(F.silu(self.norm(h)))


class FineEncoder(nn.Module):
    """Full-resolution encoder with CGN on ``g`` and U-net skips."""

    def __init__(self, in_ch: int, width: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, width, 3, padding=1)
        self.first = nn.ModuleList([ResBlock(width, width, cond_dim) for _ in range(2)])
        self.mid = ResBlock(width, width, cond_dim)
        self.unet = nn.ModuleList([ResBlock(2 * width, width, cond_dim) for _ in range(2)])
        self.norm = CondGroupNorm(width, cond_dim)
        self.conv_out = nn.Conv2d(width, out_ch, 3, padding=1)

    def forward(self, x, g):
        h = self.conv_in(x)
        skips = []
        for blk in self.first:
            h = blk(h, g)
            skips.append(h)
        h = self.mid(h, g)
        for blk in self.unet:
            h = blk(torch.cat([h, skips.pop()], 1), g)
        return self.conv_out(F.silu(self.norm(h, g)))


class LatentDecoder(nn.Module):
    def __init__(self, coarse_ch: int, fine_ch: int, out_ch: int, width: int, cond_dim: int,
                 upsample: int):
        super().__init__()
        n_up = int(round(math.log2(upsample)))
        self.conv_in = nn.Conv2d(coarse_ch, width, 3, padding=1)
        self.mid = nn.ModuleList([ResBlock(width, width, cond_dim), AttnBlock(width, cond_dim=cond_dim),
                                  ResBlock(width, width, cond_dim)])
        self.ups = nn.ModuleList([ResBlock(width, width, cond_dim) for _ in range(n_up)])
        self.fine_in = nn.Conv2d(fine_ch, width // 2, 3, padding=1)
        self.post = nn.ModuleList([ResBlock(width + width // 2, width, cond_dim),
                                   ResBlock(width, width, cond_dim)])
        self.norm = CondGroupNorm(width, cond_dim)
        self.conv_out = nn.Conv2d(width, out_ch, 3, padding=1)

    def forward(self, c_folded, f, g):
        h = self.conv_in(c_folded)
        for m in self.mid:
            h = m(h, g)
        for blk in self.ups:
            h = F.interpolate(blk(h, g), scale_factor=2, mode="nearest")
        h = torch.cat([h, self.fine_in(f)], 1)
        for blk in self.post:
            h = blk(h, g)
        return self.conv_out(F.silu(self.norm(h, g)))


@dataclass
class LatentTriple:
    g: torch.Tensor  # (N, G [+ trajectory])
    c: torch.Tensor  # (N, 4, Zc, Xc, Yc)
    f: torch.Tensor  # (N, 4, X, Y)
    c_indices: Optional[torch.Tensor] = None
    f_indices: Optional[torch.Tensor] = None
    trajectory: Optional[torch.Tensor] = None


class LatentAutoEncoder(nn.Module):
    def __init__(self, cfg: LAEConfig, voxel_channels: int, grid_dims: Tuple[int, int, int]):
        super().__init__()
        self.cfg = cfg
        self.voxel_channels = voxel_channels
        self.grid_dims = tuple(grid_dims)
        z, x, y = grid_dims
        folded = voxel_channels * z
        lc = cfg.latent_channels
        self.coarse_shape = (lc, cfg.coarse_z, x // cfg.downsample, y // cfg.downsample)
        self.fine_shape = (lc, x, y)
        self.global_enc = GlobalEncoder(folded, cfg.width, cfg.global_dim)
        self.coarse_enc = CoarseEncoder(folded, cfg.width, lc * cfg.coarse_z, cfg.downsample)
        self.fine_enc = FineEncoder(folded, cfg.width, lc, cfg.global_dim)
        self.decoder = LatentDecoder(lc * cfg.coarse_z, lc, folded, cfg.width, cfg.global_dim,
                                     cfg.downsample)
        self.coarse_book = Codebook(cfg.coarse_codebook, lc)
        self.fine_book = Codebook(cfg.fine_codebook, lc)

    def _check(self, v: torch.Tensor):
        if tuple(v.shape[1:]) != (self.voxel_channels, *self.grid_dims):
            raise ValueError(f"voxel tensor {tuple(v.shape[1:])} does not match "
                             f"{(self.voxel_channels, *self.grid_dims)}")

    def encode_global(self, v: torch.Tensor, generator=None) -> Tuple[GaussianLatent, torch.Tensor]:
        self._check(v)
        post = self.global_enc(fold_z(v))
        return post, post.sample(generator)

    def encode_coarse(self, v: torch.Tensor) -> torch.Tensor:
        self._check(v)
        return unfold_z(self.coarse_enc(fold_z(v)), self.cfg.latent_channels)

    def encode_fine(self, v: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        self._check(v)
        return self.fine_enc(fold_z(v), g)

    def quantize(self, c: torch.Tensor, f: torch.Tensor):
        cq, ci, cl = channels_last_quantize(c, self.coarse_book, self.cfg.vq_beta)
        fq, fi, fl = channels_last_quantize(f, self.fine_book, self.cfg.vq_beta)
        return cq, ci, fq, fi, cl + fl

    def decode_latents(self, g: torch.Tensor, c: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        """Decodes latents to a ``(N, 1 + C, Z, X, Y)`` voxel tensor with density >= 0."""
        if tuple(c.shape[1:]) != self.coarse_shape or tuple(f.shape[1:]) != self.fine_shape:
            raise ValueError("latent shapes do not match the auto-encoder configuration")
        g = g[:, : self.cfg.global_dim]
        out = unfold_z(self.decoder(fold_z(c), f, g), self.voxel_channels)
        return torch.cat([F.softplus(out[:, :1]), out[:, 1:]], 1)

    def forward(self, v: torch.Tensor, generator=None, sample: bool = True):
        post, g = self.encode_global(v, generator)
        if not sample:
            g = post.mu
        c = self.encode_coarse(v)
        f = self.encode_fine(v, g)
        cq, ci, fq, fi, vq = self.quantize(c, f)
        vhat = self.decode_latents(g, cq, fq)
        return vhat, LatentTriple(g, cq, fq, ci, fi), post.kl(), vq, (c, f)

    @torch.no_grad()
    def encode(self, v: torch.Tensor) -> LatentTriple:
        """Deterministic encoding (posterior mean for ``g``)."""
        post, _ = self.encode_global(v)
        c = self.encode_coarse(v)
        f = self.encode_fine(v, post.mu)
        cq, ci, fq, fi, _ = self.quantize(c, f)
        return LatentTriple(post.mu, cq, fq, ci, fi)

    @torch.no_grad()
    def snap(self, c: torch.Tensor, f: torch.Tensor):
        """Projects continuous c/f onto their codebooks (used after diffusion sampling)."""
        cq, ci, _ = channels_last_quantize(c, self.coarse_book, 0.0)
        fq, fi, _ = channels_last_quantize(f, self.fine_book, 0.0)
        return cq, ci, fq, fi


def voxel_recon_loss(v: torch.Tensor, vhat: torch.Tensor, fill_mask: torch.Tensor,
                     w_density: float = 2.5) -> torch.Tensor:
    """Filled and empty voxels each contribute their own mean; the two are added.

    Per-voxel error: ``w_density * (density error)^2`` plus the mean squared
    feature error. ``fill_mask`` is ``(N, Z, X, Y)``.
    """
    err = w_density * (vhat[:, 0] - v[:, 0]) ** 2 + ((vhat[:, 1:] - v[:, 1:]) ** 2).mean(1)
    mask = fill_mask.to(err.dtype)
    total = err.new_zeros(())
    for m in (mask, 1 - mask):
        n = m.sum()
        if n > 0:
            total = total + (err * m).sum() / n
    return total


@dataclass
class LAELossReport:
    voxel_recon: torch.Tensor
    kl: torch.Tensor
    vq: torch.Tensor
    image_recon: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("voxel_recon", "kl", "vq", "image_recon", "total")}


def lae_loss(v, vhat, fill_mask, kl, vq, image_recon=None, cfg: Optional[LAEConfig] = None) -> LAELossReport:
    cfg = cfg or LAEConfig()
    rec = voxel_recon_loss(v, vhat, fill_mask, cfg.w_density)
    img = image_recon if image_recon is not None else rec.new_zeros(())
    total = rec + cfg.w_kl * kl + cfg.w_vq * vq + cfg.w_image * img
    return LAELossReport(rec, kl, vq, img, total)


def train_lae(model: LatentAutoEncoder, voxels: torch.Tensor, fill: torch.Tensor, seed: int = 0,
              steps: Optional[int] = None, time_budget_s: Optional[float] = None, batch_size: int = 8,
              image_loss_fn=None, log_every: int = 200) -> List[Dict[str, float]]:
    """Trains the LAE on a stack of encoded voxels ``(N, 1 + C, Z, X, Y)``.

    ``image_loss_fn(index_batch, vhat) -> scalar`` renders reconstructions
    through the frozen scene auto-encoder; omit it to train on voxels only.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    budget = cfg.time_budget_s if time_budget_s is None else time_budget_s
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    history, start = [], time.time()
    for step in range(steps):
        idx = torch.randint(len(voxels), (min(batch_size, len(voxels)),), generator=gen)
        v, m = voxels[idx], fill[idx]
        vhat, lat, kl, vq, (c, f) = model(v, gen)
        img = image_loss_fn(idx, vhat) if image_loss_fn is not None else None
        rep = lae_loss(v, vhat, m, kl, vq, img, cfg)
        opt.zero_grad()
        rep.total.backward()
        opt.step()
        if cfg.reseed_every and (step + 1) % cfg.reseed_every == 0:
            model.coarse_book.reseed_dead(c.detach().movedim(1, -1).reshape(-1, c.shape[1]), gen)
            model.fine_book.reseed_dead(f.detach().movedim(1, -1).reshape(-1, f.shape[1]), gen)
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, **rep.as_floats(), "elapsed_s": time.time() - start}
            history.append(row)
            log.info("lae %s", row)
        if time.time() - start > budget:
            break
    return history


@torch.no_grad()
def eval_voxel_recon(model: LatentAutoEncoder, voxels: torch.Tensor, fill: torch.Tensor,
                     batch_size: int = 16) -> float:
    """Mean voxel reconstruction loss with deterministic encoding."""
    model.eval()
    vals = []
    try:
        for i in range(0, len(voxels), batch_size):
            v, m = voxels[i:i + batch_size], fill[i:i + batch_size]
            lat = model.encode(v)
            vhat = model.decode_latents(lat.g, lat.c, lat.f)
            vals.append(float(voxel_recon_loss(v, vhat, m, model.cfg.w_density)) * len(v))
    finally:
        model.train()
    return sum(vals) / len(voxels)

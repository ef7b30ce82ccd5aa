"""Variance-preserving diffusion with v-prediction, DDIM/DDPM samplers and
the three hierarchical latent denoisers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from nfldm.config import DDMConfig
from nfldm.layers import LinearUNet, UNet2D, num_groups
from nfldm.tensor_core import Adam

log = logging.getLogger(__name__)

ModelFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray  # float64, (T,)
    sigmas: np.ndarray
    log_snr: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alphas)

    def at(self, t, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
        """``(alpha_t, sigma_t)`` as tensors broadcastable over a leading batch axis."""
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T})")
        a = torch.from_numpy(self.alphas)[t].to(dtype)
        s = torch.from_numpy(self.sigmas)[t].to(dtype)
        return a, s


def make_vp_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta variance-preserving schedule."""
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    abar = np.cumprod(1.0 - betas)
    alphas, sigmas = np.sqrt(abar), np.sqrt(1.0 - abar)
    return NoiseSchedule(alphas, sigmas, np.log(abar / (1.0 - abar)))


def _bcast(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return coef.reshape(coef.shape + (1,) * (x.dim() - coef.dim()))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    a, s = schedule.at(t, x0.dtype)
    return _bcast(a, x0) * x0 + _bcast(s, x0) * eps


def v_target(x0, eps, t, schedule: NoiseSchedule):
    a, s = schedule.at(t, x0.dtype)
    return _bcast(a, x0) * eps - _bcast(s, x0) * x0


def x0_from_v(x_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.at(t, x_t.dtype)
    return _bcast(a, x_t) * x_t - _bcast(s, x_t) * v


def eps_from_v(x_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.at(t, x_t.dtype)
    return _bcast(s, x_t) * x_t + _bcast(a, x_t) * v


def v_from_eps(x_t, eps, t, schedule: NoiseSchedule):
    """Inverse of :func:`eps_from_v`."""
    a, s = schedule.at(t, x_t.dtype)
    a, s = _bcast(a, x_t), _bcast(s, x_t)
    return (eps - s * x_t) / a


def ddm_loss(model: ModelFn, x0: torch.Tensor, schedule: NoiseSchedule,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean squared v-prediction error with uniform timesteps and unit weighting."""
    t = torch.randint(schedule.T, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(x_t, t)
    if pred.shape != x0.shape:
        raise ValueError(f"model output {tuple(pred.shape)} != data {tuple(x0.shape)}")
    return ((v_target(x0, eps, t, schedule) - pred) ** 2).mean()


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced descending timesteps from ``T-1`` down to 0."""
    if not 1 <= n_steps <= T:
        raise ValueError("n_steps must lie in [1, T]")
    return np.unique(np.round(np.linspace(0, T - 1, n_steps)).astype(np.int64))[::-1].copy()


def ddim_step(x_t, v, t: int, s: int, schedule: NoiseSchedule, eta: float,
              noise: Optional[torch.Tensor]):
    """One DDIM move from step ``t`` to ``s < t`` (``s = -1`` means clean data).

    Returns ``(x_s, x0_hat)``.
    """
    a_t, s_t = (float(schedule.alphas[t]), float(schedule.sigmas[t]))
    a_s, s_s = (1.0, 0.0) if s < 0 else (float(schedule.alphas[s]), float(schedule.sigmas[s]))
    x0 = a_t * x_t - s_t * v
    eps = s_t * x_t + a_t * v
    if s < 0:
        return x0, x0
    sig = 0.0
    if eta > 0:
        sig = eta * np.sqrt(max((s_s**2 / s_t**2) * (1 - (a_t**2 / a_s**2)), 0.0))
    dir_coef = np.sqrt(max(s_s**2 - sig**2, 0.0))
    x_s = a_s * x0 + dir_coef * eps
    if sig > 0:
        x_s = x_s + sig * noise
    return x_s, x0


@torch.no_grad()
def sample_ddim(model: ModelFn, schedule: NoiseSchedule, shape, n_steps: int = 250, eta: float = 0.0,
                generator: Optional[torch.Generator] = None, x_T: Optional[torch.Tensor] = None) -> torch.Tensor:
    """DDIM sampling from pure noise; ``eta=0`` is deterministic given the seed."""
    ts = ddim_timesteps(schedule.T, n_steps)
    x = torch.randn(shape, generator=generator) if x_T is None else x_T.clone()
    for i, t in enumerate(ts):
        s = int(ts[i + 1]) if i + 1 < len(ts) else -1
        tt = torch.full((shape[0],), int(t), dtype=torch.long)
        v = model(x, tt)
        noise = torch.randn(shape, generator=generator) if (eta > 0 and s >= 0) else None
        x, _ = ddim_step(x, v, int(t), s, schedule, eta, noise)
    return x


@torch.no_grad()
def sample_ddpm(model: ModelFn, schedule: NoiseSchedule, shape,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Ancestral sampling through the Gaussian posteriors ``q(x_{t-1} | x_t, x0_hat)``."""
    abar = schedule.alphas**2
    x = torch.randn(shape, generator=generator)
    for t in range(schedule.T - 1, -1, -1):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        x0 = x0_from_v(x, model(x, tt), tt, schedule)
        if t == 0:
            return x0
        ab_t, ab_s = abar[t], abar[t - 1]
        beta = 1 - ab_t / ab_s
        mean = (np.sqrt(ab_s) * beta / (1 - ab_t)) * x0 + (np.sqrt(1 - beta) * (1 - ab_s) / (1 - ab_t)) * x
        var = beta * (1 - ab_s) / (1 - ab_t)
        x = mean + np.sqrt(var) * torch.randn(shape, generator=generator)
    return x


def gaussian_optimal_v(x_t: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule,
                       data_std: float = 1.0) -> torch.Tensor:
    """Exact v-prediction for zero-mean Gaussian data with std ``data_std``.

    Posterior mean ``E[x0 | x_t] = a s2 x_t / (a^2 s2 + sigma^2)`` with ``s2 = data_std^2``.
    """
    a, s = schedule.at(t, x_t.dtype)
    a, s = _bcast(a, x_t), _bcast(s, x_t)
    var = data_std**2
    x0 = a * var * x_t / (a**2 * var + s**2)
    eps = (x_t - a * x0) / s
    return a * eps - s * x0


# --- hierarchical denoisers ---------------------------------------------------------------


class BEVEncoder(nn.Module):
    """Conv encoder from a one-hot BEV map to a token grid at 1/``downsample`` resolution."""

    def __init__(self, in_ch: int, dim: int, downsample: int = 4):
        super().__init__()
        layers, ch = [], in_ch
        n = int(round(np.log2(downsample)))
        for _ in range(n):
            layers += [nn.Conv2d(ch, dim, 3, stride=2, padding=1), nn.GroupNorm(num_groups(dim), dim), nn.SiLU()]
            ch = dim
        layers.append(nn.Conv2d(ch, dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, bev):
        return self.net(bev)


class DenoiserBundle(nn.Module):
    """psi_g (+ optional trajectory net), psi_c, psi_f and an optional BEV encoder.

    Latents are standardised with per-channel statistics stored as buffers.
    """

    def __init__(self, cfg: DDMConfig, global_dim: int, traj_dim: int, coarse_shape, fine_shape,
                 bev_channels: int = 3, downsample: int = 4):
        super().__init__()
        self.cfg = cfg
        self.global_dim, self.traj_dim = global_dim, traj_dim
        self.coarse_shape, self.fine_shape = tuple(coarse_shape), tuple(fine_shape)
        lc, zc, xc, yc = self.coarse_shape
        fc, x, y = self.fine_shape
        ctx = cfg.bev_embed_dim if cfg.use_bev else 0
        gdim = global_dim + (0 if cfg.split_trajectory_net else traj_dim)
        self.psi_g = LinearUNet(gdim, cfg.g_hidden, cfg.g_blocks, context_dim=ctx)
        self.psi_traj = (LinearUNet(traj_dim, cfg.g_hidden, cfg.g_blocks, context_dim=ctx)
                         if cfg.split_trajectory_net and traj_dim else None)
        self.psi_c = UNet2D(lc * zc, lc * zc, cfg.unet_base, (1, 2), cond_dim=global_dim,
                            context_dim=ctx, attn_min_res=xc, resolution=xc)
        self.psi_f = UNet2D(fc + lc * zc, fc, cfg.unet_base, (1, 2, 2), cond_dim=global_dim,
                            context_dim=ctx, attn_min_res=x // 4, resolution=x)
        self.bev_encoder = BEVEncoder(bev_channels, ctx, downsample) if cfg.use_bev else None
        self.register_buffer("g_mean", torch.zeros(global_dim + traj_dim))
        self.register_buffer("g_std", torch.ones(global_dim + traj_dim))
        self.register_buffer("c_mean", torch.zeros(lc))
        self.register_buffer("c_std", torch.ones(lc))
        self.register_buffer("f_mean", torch.zeros(fc))
        self.register_buffer("f_std", torch.ones(fc))

    # standardisation -------------------------------------------------------------------
    @torch.no_grad()
    def fit_stats(self, g: torch.Tensor, c: torch.Tensor, f: torch.Tensor) -> None:
        self.g_mean.copy_(g.mean(0))
        self.g_std.copy_(g.std(0).clamp(min=1e-3))
        self.c_mean.copy_(c.transpose(0, 1).reshape(c.shape[1], -1).mean(1))
        self.c_std.copy_(c.transpose(0, 1).reshape(c.shape[1], -1).std(1).clamp(min=1e-3))
        self.f_mean.copy_(f.transpose(0, 1).reshape(f.shape[1], -1).mean(1))
        self.f_std.copy_(f.transpose(0, 1).reshape(f.shape[1], -1).std(1).clamp(min=1e-3))

    def norm_g(self, g):
        return (g - self.g_mean) / self.g_std

    def denorm_g(self, g):
        return g * self.g_std + self.g_mean

    def norm_c(self, c):
        return (c - self.c_mean.reshape(1, -1, 1, 1, 1)) / self.c_std.reshape(1, -1, 1, 1, 1)

    def denorm_c(self, c):
        return c * self.c_std.reshape(1, -1, 1, 1, 1) + self.c_mean.reshape(1, -1, 1, 1, 1)

    def norm_f(self, f):
        return (f - self.f_mean.reshape(1, -1, 1, 1)) / self.f_std.reshape(1, -1, 1, 1)

    def denorm_f(self, f):
        return f * self.f_std.reshape(1, -1, 1, 1) + self.f_mean.reshape(1, -1, 1, 1)

    # conditioning ------------------------------------------------------------------------
    def bev_context(self, bev: Optional[torch.Tensor]):
        """``(tokens (N, L, D), pooled (N, D))`` or ``(None, None)``."""
        if self.bev_encoder is None or bev is None:
            return None, None
        emb = self.bev_encoder(bev)
        return emb.flatten(2).transpose(1, 2), emb.mean((-2, -1))

    # predictions (all in standardised space, v-parameterised) ------------------------------
    def predict_g(self, x_t, t, pooled=None):
        if self.psi_traj is None:
            return self.psi_g(x_t, t, pooled)
        g, tr = x_t[:, : self.global_dim], x_t[:, self.global_dim:]
        return torch.cat([self.psi_g(g, t, pooled), self.psi_traj(tr, t, pooled)], -1)

    def predict_c(self, x_t, t, g, tokens=None):
        n = x_t.shape[0]
        lc, zc, xc, yc = self.coarse_shape
        out = self.psi_c(x_t.reshape(n, lc * zc, xc, yc), t, cond=g[:, : self.global_dim], context=tokens)
        return out.reshape(x_t.shape)

    def predict_f(self, x_t, t, g, c, tokens=None):
        n = x_t.shape[0]
        lc, zc, xc, yc = self.coarse_shape
        c_up = F.interpolate(c.reshape(n, lc * zc, xc, yc), size=x_t.shape[-2:], mode="bilinear",
                             align_corners=False)
        return self.psi_f(torch.cat([x_t, c_up], 1), t, cond=g[:, : self.global_dim], context=tokens)


def bundle_loss(bundle: DenoiserBundle, g, c, f, schedule: NoiseSchedule, generator, bev=None):
    """Sum of the three hierarchical v-losses on standardised latents."""
    gn, cn, fn = bundle.norm_g(g), bundle.norm_c(c), bundle.norm_f(f)
    tokens, pooled = bundle.bev_context(bev)
    lg = ddm_loss(lambda x, t: bundle.predict_g(x, t, pooled), gn, schedule, generator)
    lc = ddm_loss(lambda x, t: bundle.predict_c(x, t, gn, tokens), cn, schedule, generator)
    lf = ddm_loss(lambda x, t: bundle.predict_f(x, t, gn, cn, tokens), fn, schedule, generator)
    return lg, lc, lf


def train_ddm(bundle: DenoiserBundle, g, c, f, schedule: NoiseSchedule, seed: int = 0,
              steps: Optional[int] = None, time_budget_s: Optional[float] = None, bev=None,
              log_every: int = 200) -> List[Dict[str, float]]:
    cfg = bundle.cfg
    steps = cfg.steps if steps is None else steps
    budget = cfg.time_budget_s if time_budget_s is None else time_budget_s
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(bundle.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    history, start = [], time.time()
    for step in range(steps):
        idx = torch.randint(len(g), (min(cfg.batch_size, len(g)),), generator=gen)
        lg, lc, lf = bundle_loss(bundle, g[idx], c[idx], f[idx], schedule, gen,
                                 None if bev is None else bev[idx])
        loss = lg + lc + lf
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, "loss_g": lg.item(), "loss_c": lc.item(), "loss_f": lf.item(),
                   "elapsed_s": time.time() - start}
            history.append(row)
            log.info("ddm %s", row)
        if time.time() - start > budget:
            break
    return history


@dataclass
class HierarchySample:
    g: torch.Tensor  # destandardised global latent (without trajectory)
    trajectory: Optional[torch.Tensor]
    c: torch.Tensor  # continuous samples (destandardised)
    f: torch.Tensor


@torch.no_grad()
def sample_hierarchy(bundle: DenoiserBundle, schedule: NoiseSchedule, n: int, seed: int = 0,
                     n_steps: Optional[int] = None, eta: Optional[float] = None,
                     bev: Optional[torch.Tensor] = None) -> HierarchySample:
    """Samples g, then c given g, then f given (g, c)."""
    if schedule is None:
        raise ValueError("missing noise schedule")
    cfg = bundle.cfg
    n_steps = cfg.ddim_steps if n_steps is None else n_steps
    eta = cfg.eta if eta is None else eta
    gen = torch.Generator().manual_seed(seed)
    tokens, pooled = bundle.bev_context(bev)
    gdim = bundle.global_dim + bundle.traj_dim
    gn = sample_ddim(lambda x, t: bundle.predict_g(x, t, pooled), schedule, (n, gdim), n_steps, eta, gen)
    cn = sample_ddim(lambda x, t: bundle.predict_c(x, t, gn, tokens), schedule,
                     (n, *bundle.coarse_shape), n_steps, eta, gen)
    fn = sample_ddim(lambda x, t: bundle.predict_f(x, t, gn, cn, tokens), schedule,
                     (n, *bundle.fine_shape), n_steps, eta, gen)
    g = bundle.denorm_g(gn)
    traj = g[:, bundle.global_dim:] if bundle.traj_dim else None
    return HierarchySample(g[:, : bundle.global_dim], traj, bundle.denorm_c(cn), bundle.denorm_f(fn))


@torch.no_grad()
def sample_fine_given(bundle: DenoiserBundle, schedule: NoiseSchedule, g: torch.Tensor, c: torch.Tensor,
                      seed: int = 0, n_steps: Optional[int] = None, eta: float = 0.0, bev=None) -> torch.Tensor:
    """Re-samples f conditioned on destandardised ``(g, c)`` (g may include trajectory)."""
    n_steps = bundle.cfg.ddim_steps if n_steps is None else n_steps
    gen = torch.Generator().manual_seed(seed)
    tokens, _ = bundle.bev_context(bev)
    gfull = g if g.shape[1] == bundle.global_dim + bundle.traj_dim else torch.cat(
        [g, bundle.g_mean[bundle.global_dim:].expand(len(g), -1)], 1)
    gn, cn = bundle.norm_g(gfull), bundle.norm_c(c)
    fn = sample_ddim(lambda x, t: bundle.predict_f(x, t, gn, cn, tokens), schedule,
                     (len(g), *bundle.fine_shape), n_steps, eta, gen)
    return bundle.denorm_f(fn)

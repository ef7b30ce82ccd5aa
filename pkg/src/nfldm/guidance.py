"""Guided prediction, latent inpainting, SDS post-optimisation and voxel splicing."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from nfldm.camera import CameraPose, look_rotation
from nfldm.diffusion import (NoiseSchedule, ddim_step, ddim_timesteps, ddm_loss, eps_from_v, q_sample,
                             v_from_eps)
from nfldm.layers import UNet2D
from nfldm.scene_encoder import VoxelGrid
from nfldm.tensor_core import Adam

log = logging.getLogger(__name__)

CLEAN, ARTIFACT, UNCOND = 0, 1, 2


@dataclass
class GuidanceConfig:
    gamma: float = 2.0
    positive_cond: object = CLEAN
    negative_cond: object = ARTIFACT

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("guidance scale gamma must be >= 1")


def combine_guidance(cond_out, neg_out, gamma: float):
    """``gamma * cond + (1 - gamma) * neg``; exactly ``cond`` when gamma is 1."""
    if gamma < 1:
        raise ValueError("guidance scale gamma must be >= 1")
    if gamma == 1:
        return cond_out
    return gamma * cond_out + (1 - gamma) * neg_out


def guided_predict(model: Callable, x_t, t, cfg: GuidanceConfig, schedule: Optional[NoiseSchedule] = None):
    """Classifier-free (or negative) guidance applied in epsilon space.

    ``model(x_t, t, cond)`` returns a v-prediction when ``schedule`` is given
    (converted to epsilon before combining) and a score/epsilon otherwise.
    """
    def to_eps(out):
        return out if schedule is None else eps_from_v(x_t, out, t, schedule)

    cond = to_eps(model(x_t, t, cfg.positive_cond))
    if cfg.gamma == 1 or cfg.negative_cond is cfg.positive_cond:
        return cond
    neg = to_eps(model(x_t, t, cfg.negative_cond))
    return combine_guidance(cond, neg, cfg.gamma)


def negative_guidance_identity_check(s_y, s_yneg, gamma: float):
    """Both sides of ``g s_y + (1-g) s_y' = (g-1)(g/(g-1) s_y - s_y')``."""
    if gamma == 1:
        raise ValueError("identity undefined at gamma = 1")
    lhs = gamma * s_y + (1 - gamma) * s_yneg
    alpha = gamma / (gamma - 1)
    rhs = (gamma - 1) * (alpha * s_y - s_yneg)
    return lhs, rhs


# --- masked resampling -------------------------------------------------------------------


def inpaint_resample(model: Callable, c_init: torch.Tensor, keep: torch.Tensor, schedule: NoiseSchedule,
                     guidance_weight: float = 1.0, seed: int = 0, n_steps: int = 250,
                     eta: float = 0.0) -> torch.Tensor:
    """Resamples the ``~keep`` region of ``c_init`` with a v-prediction model.

    At each reverse step the kept region is replaced by a fresh forward-noised
    copy of ``c_init``; with ``guidance_weight > 0`` the x0 estimate is pulled
    towards ``c_init`` on the kept region through the model's input gradient.
    The main noise stream matches :func:`nfldm.diffusion.sample_ddim` for the
    same seed; the kept-region noise uses a separate stream.
    """
    keep = torch.as_tensor(keep, dtype=torch.bool).expand_as(c_init)
    gen = torch.Generator().manual_seed(seed)
    keep_gen = torch.Generator().manual_seed(seed + 1_000_003)
    shape = tuple(c_init.shape)
    ts = ddim_timesteps(schedule.T, n_steps)
    x = torch.randn(shape, generator=gen)
    for i, t in enumerate(ts):
        s = int(ts[i + 1]) if i + 1 < len(ts) else -1
        tt = torch.full((shape[0],), int(t), dtype=torch.long)
        known = q_sample(c_init, tt, torch.randn(shape, generator=keep_gen), schedule)
        x_in = torch.where(keep, known, x)
        noise = torch.randn(shape, generator=gen) if (eta > 0 and s >= 0) else None
        if guidance_weight == 0:
            with torch.no_grad():
                v = model(x_in, tt)
            x, _ = ddim_step(x_in, v, int(t), s, schedule, eta, noise)
            continue
        a_t, s_t = float(schedule.alphas[t]), float(schedule.sigmas[t])
        with torch.enable_grad():
            xg = x_in.detach().requires_grad_(True)
            v = model(xg, tt)
            x0 = a_t * xg - s_t * v
            err = ((x0 - c_init) * keep).pow(2).sum()
            (grad,) = torch.autograd.grad(err, xg)
        x0 = x0.detach() - guidance_weight * 0.5 * a_t * grad
        v_corr = (a_t * x_in - x0) / s_t
        x, _ = ddim_step(x_in, v_corr, int(t), s, schedule, eta, noise)
    return torch.where(keep, c_init, x.detach())


# --- voxel splicing ----------------------------------------------------------------------


def center_region(dims: Sequence[int], size: Sequence[int]) -> Tuple[slice, slice, slice]:
    return tuple(slice((d - s) // 2, (d - s) // 2 + s) for d, s in zip(dims, size))


def splice_voxels(a: VoxelGrid, b: VoxelGrid, region) -> VoxelGrid:
    """``a`` outside ``region`` and ``b`` inside it.

    ``region`` is a ``(Z, X, Y)`` boolean mask or a tuple of three slices.
    """
    if a.spec != b.spec or a.feature.shape != b.feature.shape:
        raise ValueError("grids must share a GridSpec and channel count")
    if isinstance(region, tuple):
        mask = torch.zeros(a.density.shape, dtype=torch.bool)
        mask[region] = True
    else:
        mask = torch.as_tensor(region, dtype=torch.bool)
    return VoxelGrid(torch.where(mask, b.density, a.density),
                     torch.where(mask[None], b.feature, a.feature), a.spec,
                     torch.where(mask, b.fill_mask, a.fill_mask))


# --- image prior and SDS -----------------------------------------------------------------


class ImagePrior(nn.Module):
    """Small class-conditional v-prediction diffusion model over RGB images.

    Classes: 0 = clean (ground-truth renders), 1 = artifact (early
    auto-encoder renders), 2 = unconditional.
    """

    def __init__(self, resolution: int = 32, base: int = 32):
        super().__init__()
        self.net = UNet2D(3, 3, base, (1, 2, 2), attn_min_res=resolution // 4, n_classes=3,
                          resolution=resolution)

    def forward(self, x_t, t, labels):
        if not torch.is_tensor(labels):
            labels = torch.full((x_t.shape[0],), int(labels), dtype=torch.long)
        return self.net(x_t, t, class_labels=labels)


def to_model_space(images: torch.Tensor) -> torch.Tensor:
    return images * 2 - 1


def train_image_prior(prior: ImagePrior, clean: torch.Tensor, artifact: torch.Tensor,
                      schedule: NoiseSchedule, steps: int = 1500, time_budget_s: float = 240.0,
                      batch_size: int = 32, lr: float = 2e-4, seed: int = 0, p_uncond: float = 0.1):
    """Trains on clean and artifact images, dropping labels to unconditional at ``p_uncond``."""
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(prior.parameters(), lr=lr, betas=(0.9, 0.999))
    data = torch.cat([to_model_space(clean), to_model_space(artifact)])
    labels = torch.cat([torch.full((len(clean),), CLEAN), torch.full((len(artifact),), ARTIFACT)])
    history, start = [], time.time()
    for step in range(steps):
        idx = torch.randint(len(data), (batch_size,), generator=gen)
        lab = labels[idx].clone()
        lab[torch.rand(batch_size, generator=gen) < p_uncond] = UNCOND
        loss = ddm_loss(lambda x, t: prior(x, t, lab), data[idx], schedule, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            history.append({"step": step, "loss": loss.item(), "elapsed_s": time.time() - start})
            log.info("image prior %s", history[-1])
        if time.time() - start > time_budget_s:
            break
    return history


def jitter_poses(poses: Sequence[CameraPose], rng: np.random.Generator, translation: float = 3.0,
                 rotation_deg: float = 10.0) -> List[CameraPose]:
    """Applies one shared planar offset and yaw offset to a camera rig."""
    dx, dy = rng.uniform(-translation, translation, 2)
    yaw = math.radians(rng.uniform(-rotation_deg, rotation_deg))
    rz = look_rotation(yaw, 0.0) @ look_rotation(0.0, 0.0).T
    out = []
    for p in poses:
        t = p.translation + np.array([dx, dy, 0.0])
        out.append(CameraPose(rz @ p.rotation, t, p.fx, p.fy, p.cx, p.cy))
    return out


def sds_step(stacked: torch.Tensor, render_fn: Callable, prior_eps: Callable, cameras: Sequence[CameraPose],
             cfg: GuidanceConfig, schedule: NoiseSchedule, t_range=(20, 200),
             rng: Optional[np.random.Generator] = None, generator: Optional[torch.Generator] = None,
             translation: float = 3.0, rotation_deg: float = 10.0) -> torch.Tensor:
    """Score-distillation gradient for a ``(1 + C, Z, X, Y)`` voxel tensor.

    ``render_fn(stacked, poses)`` returns images in [0, 1] through a frozen
    decoder; ``prior_eps(x_t, t, cond)`` is the prior's epsilon prediction.
    The per-image residual ``sigma_t^2 (eps_hat - eps)`` is pushed back
    through the renderer only.
    """
    rng = rng or np.random.default_rng()
    poses = jitter_poses(cameras, rng, translation, rotation_deg)
    vol = stacked if stacked.requires_grad else stacked.detach().requires_grad_(True)
    images = render_fn(vol, poses)
    x = to_model_space(images)
    n = x.shape[0]
    t = torch.randint(t_range[0], t_range[1] + 1, (n,), generator=generator)
    eps = torch.randn(x.shape, generator=generator)
    with torch.no_grad():
        x_t = q_sample(x.detach(), t, eps, schedule)
        eps_hat = guided_predict(lambda xx, tt, cc: prior_eps(xx, tt, cc), x_t, t, cfg)
        w = torch.from_numpy(schedule.sigmas[t.numpy()] ** 2).float().reshape(n, 1, 1, 1)
        residual = w * (eps_hat - eps)
    if x.shape != residual.shape:
        raise ValueError("prior and render shapes differ")
    (grad,) = torch.autograd.grad(x, vol, grad_outputs=residual)
    return grad


@torch.no_grad()
def prior_denoising_loss(stacked: torch.Tensor, render_fn: Callable, prior_eps: Callable,
                         cameras: Sequence[CameraPose], schedule: NoiseSchedule, cond=CLEAN,
                         t_range=(20, 200), n_draws: int = 8, seed: int = 0, translation: float = 3.0,
                         rotation_deg: float = 10.0) -> float:
    """Mean epsilon-prediction error of the prior on renders of ``stacked``.

    Cameras, timesteps and noise come from ``seed`` so two voxel states can be
    compared under identical draws.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(n_draws):
        poses = jitter_poses(cameras, rng, translation, rotation_deg)
        x = to_model_space(render_fn(stacked, poses))
        t = torch.randint(t_range[0], t_range[1] + 1, (x.shape[0],), generator=gen)
        eps = torch.randn(x.shape, generator=gen)
        x_t = q_sample(x, t, eps, schedule)
        total += float(((prior_eps(x_t, t, cond) - eps) ** 2).mean())
    return total / n_draws


def run_sds(stacked: torch.Tensor, render_fn, prior_eps, cameras, cfg: GuidanceConfig,
            schedule: NoiseSchedule, steps: int = 200, lr: float = 1e-3, betas=(0.9, 0.99),
            eps: float = 1e-15, t_range=(20, 200), seed: int = 0, translation: float = 3.0,
            rotation_deg: float = 10.0, snapshot_fn=None, snapshot_every: int = 50) -> torch.Tensor:
    """Optimises voxels with Adam on SDS gradients; density is kept nonnegative."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    # the optimiser skips tensors that do not require grad
    vol = stacked.detach().clone().requires_grad_(True)
    opt = Adam([vol], lr=lr, betas=betas, eps=eps)
    for step in range(steps):
        g = sds_step(vol, render_fn, prior_eps, cameras, cfg, schedule, t_range, rng, gen,
                     translation, rotation_deg)
        vol.grad = g
        opt.step()
        with torch.no_grad():
            vol[0].clamp_(min=0)
        if snapshot_fn is not None and (step % snapshot_every == 0 or step == steps - 1):
            snapshot_fn(step, vol)
    return vol.detach()

"""Volume rendering of voxel grids and the scene auto-encoder objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from nfldm.camera import CameraPose, GridSpec
from nfldm.layers import num_groups
from nfldm.scene_encoder import VoxelGrid, occupancy_weights
from nfldm.tensor_core import register_gradcheck

log = logging.getLogger(__name__)

ENTROPY_CLIP = 1e-6


def _local_coords(points: torch.Tensor, spec: GridSpec) -> torch.Tensor:
    """World ``(..., 3)`` points to continuous voxel-centre coordinates ``(z, x, y)``."""
    zxy = points[..., [2, 0, 1]]
    origin = torch.tensor(spec.origin, dtype=points.dtype)
    size = torch.tensor(spec.voxel_size, dtype=points.dtype)
    return (zxy - origin) / size - 0.5


def sample_stacked(volume: torch.Tensor, points: torch.Tensor, spec: GridSpec) -> torch.Tensor:
    """Trilinear samples of a ``(K, Z, X, Y)`` volume at world points ``(..., 3)``.

    Points outside the hull of voxel centres sample to zero. Returns
    ``(..., K)``. Gradients flow to ``volume``.
    """
    dims = torch.tensor(spec.dims)
    u = _local_coords(points.to(volume.dtype), spec)
    inside = torch.all((u >= 0) & (u <= (dims - 1).to(u.dtype)), dim=-1)
    i0 = torch.minimum(torch.floor(u).clamp(min=0).long(), (dims - 2).clamp(min=0))
    frac = u - i0.to(u.dtype)
    k = volume.shape[0]
    rows = volume.reshape(k, -1).T  # row gathers are much cheaper than column gathers
    zs, xs, ys = spec.dims
    out = 0
    for dz in (0, 1):
        for dx in (0, 1):
            for dy in (0, 1):
                iz = (i0[..., 0] + dz).clamp(max=zs - 1)
                ix = (i0[..., 1] + dx).clamp(max=xs - 1)
                iy = (i0[..., 2] + dy).clamp(max=ys - 1)
                w = ((frac[..., 0] if dz else 1 - frac[..., 0])
                     * (frac[..., 1] if dx else 1 - frac[..., 1])
                     * (frac[..., 2] if dy else 1 - frac[..., 2]))
                out = out + w[..., None] * rows[(iz * xs + ix) * ys + iy]
    return out * inside[..., None].to(volume.dtype)


def sample_trilinear(grid: VoxelGrid, point):
    """Density scalar and feature vector at one world point (or a batch)."""
    pts = torch.as_tensor(np.asarray(point, dtype=np.float64), dtype=grid.density.dtype)
    s = sample_stacked(grid.stacked(), pts, grid.spec)
    return s[..., 0], s[..., 1:]


@dataclass
class RenderOutput:
    feature_map: torch.Tensor  # (V, C, H, W)
    expected_depth: torch.Tensor  # (V, H, W)
    sample_opacities: torch.Tensor  # (V, H, W, S)
    background_transmittance: torch.Tensor  # (V, H, W)


def ray_samples(poses: Sequence[CameraPose], height: int, width: int, n_samples: int,
                near: float, far: float):
    """Sample points ``(V, H, W, S, 3)``, depths ``(S,)`` and path lengths ``(V, H, W, S)``.

    Poses must carry intrinsics at the render resolution. Samples are spaced
    uniformly in optical-axis depth; the last path length repeats the
    previous one.
    """
    if n_samples < 2 or not near < far:
        raise ValueError("need n_samples >= 2 and near < far")
    z = np.linspace(near, far, n_samples)
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    pts, lens = [], []
    for p in poses:
        d = np.stack([(u - p.cx) / p.fx, (v - p.cy) / p.fy, np.ones_like(u)], -1) @ p.rotation.T
        pts.append(p.translation + z[:, None] * d[..., None, :])
        lens.append(np.linalg.norm(d, axis=-1))
    dz = np.append(np.diff(z), z[-1] - z[-2])
    pts = torch.from_numpy(np.stack(pts)).float()
    deltas = torch.from_numpy(np.stack(lens)[..., None] * dz).float()
    return pts, torch.from_numpy(z).float(), deltas


def composite(samples: torch.Tensor, depths: torch.Tensor, deltas: torch.Tensor, far: float) -> RenderOutput:
    """Alpha-composites sampled ``(..., S, 1 + C)`` density/features along rays."""
    sigma = samples[..., 0].clamp(min=0)
    w = occupancy_weights(sigma, deltas)
    feat = (w[..., None] * samples[..., 1:]).sum(-2)
    tbg = torch.exp(-(sigma * deltas).sum(-1))
    wsum = w.sum(-1)
    depth = torch.where(wsum > 1e-6, (w * depths).sum(-1) / wsum.clamp(min=1e-6),
                        torch.full_like(wsum, far))
    return RenderOutput(feat.movedim(-1, 1), depth, w, tbg)


def render_rays(grid: VoxelGrid, poses: Sequence[CameraPose], n_samples: int, near: float,
                far: float, height: int, width: int, stacked: Optional[torch.Tensor] = None) -> RenderOutput:
    """Renders ``grid`` from each pose into a feature map plus expected depth.

    ``stacked`` may override the grid contents with an equally shaped
    ``(1 + C, Z, X, Y)`` tensor (used when optimising voxels directly).
    """
    vol = grid.stacked() if stacked is None else stacked
    pts, z, deltas = ray_samples(poses, height, width, n_samples, near, far)
    samples = sample_stacked(vol, pts, grid.spec)
    return composite(samples, z, deltas, far)


class FeatureDecoder(nn.Module):
    """Small conv decoder from rendered features to RGB at twice the resolution.

    A learned background feature is blended in by the background
    transmittance so rays that leave the grid can still be coloured.
    """

    def __init__(self, channels: int = 8, width: int = 64, upsample: int = 2):
        super().__init__()
        self.channels = channels
        self.background = nn.Parameter(torch.zeros(channels))
        self.conv_in = nn.Conv2d(channels + 1, width, 3, padding=1)
        self.block = nn.Sequential(nn.GroupNorm(num_groups(width), width), nn.SiLU(),
                                   nn.Conv2d(width, width, 3, padding=1))
        self.up = nn.Upsample(scale_factor=upsample, mode="bilinear", align_corners=False)
        self.tail = nn.Sequential(nn.GroupNorm(num_groups(width), width), nn.SiLU(),
                                  nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(width, 3, 3, padding=1))

    def forward(self, feature_map, transmittance=None):
        if transmittance is None:
            transmittance = feature_map.new_zeros(feature_map.shape[0], *feature_map.shape[2:])
        t = transmittance[:, None]
        x = feature_map + t * self.background[None, :, None, None]
        h = self.conv_in(torch.cat([x, t], 1))
        h = self.up(h + self.block(h))
        return torch.sigmoid(self.tail(h))


def decode_features(feature_map: torch.Tensor, decoder: FeatureDecoder,
                    transmittance: Optional[torch.Tensor] = None) -> torch.Tensor:
    if feature_map.shape[1] != decoder.channels:
        raise ValueError(f"feature map has {feature_map.shape[1]} channels, decoder expects {decoder.channels}")
    return decoder(feature_map, transmittance)


@dataclass
class SceneAELossReport:
    image_recon: torch.Tensor
    depth_mse: torch.Tensor
    opacity_entropy: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("image_recon", "depth_mse", "opacity_entropy", "total")}


def opacity_entropy(o: torch.Tensor) -> torch.Tensor:
    o = o.clamp(ENTROPY_CLIP, 1 - ENTROPY_CLIP)
    return -(o * torch.log(o) + (1 - o) * torch.log(1 - o)).mean()


def scene_ae_loss(pred_image, image, pred_depth, depth, opacities, depth_mask=None,
                  weights=(1.0, 5.0, 0.01)) -> SceneAELossReport:
    """L1 image loss + masked depth MSE + mean Bernoulli entropy of opacities."""
    if pred_image.shape != image.shape or pred_depth.shape != depth.shape:
        raise ValueError("prediction and target shapes differ")
    if depth_mask is None:
        depth_mask = depth > 0
    img = (pred_image - image).abs().mean()
    n_valid = int(depth_mask.sum())
    if n_valid == 0:
        log.warning("no valid depth pixels; depth term set to zero")
        dmse = pred_depth.sum() * 0.0
    else:
        dmse = ((pred_depth - depth)[depth_mask] ** 2).mean()
    ent = opacity_entropy(opacities)
    total = weights[0] * img + weights[1] * dmse + weights[2] * ent
    return SceneAELossReport(img, dmse, ent, total)


def pool_depth(depth: torch.Tensor, factor: int) -> torch.Tensor:
    """Average valid (>0) depths over ``factor`` blocks; empty blocks stay 0."""
    if factor == 1:
        return depth
    valid = (depth > 0).to(depth.dtype)
    s = F.avg_pool2d((depth * valid)[:, None], factor)[:, 0]
    c = F.avg_pool2d(valid[:, None], factor)[:, 0]
    return torch.where(c > 0, s / c.clamp(min=1e-12), torch.zeros_like(s))


def _gradcheck_grid():
    from nfldm.camera import centered_grid
    return centered_grid((3, 4, 4), (1.0, 1.0, 1.0))


def _interior_points(gen, spec, n):
    """World points whose voxel-centre coordinates avoid cell boundaries."""
    cell = torch.stack([torch.randint(0, d - 1, (n,), generator=gen) for d in spec.dims], -1)
    frac = 0.1 + 0.8 * torch.rand(n, 3, generator=gen, dtype=torch.float64)
    u = cell.double() + frac + 0.5
    zxy = torch.tensor(spec.origin, dtype=torch.float64) + u * torch.tensor(spec.voxel_size, dtype=torch.float64)
    return zxy[:, [1, 2, 0]]


@register_gradcheck("trilinear_volume")
def _case_trilinear_volume(gen):
    spec = _gradcheck_grid()
    pts = _interior_points(gen, spec, 7)
    w = torch.randn(7, 2, generator=gen, dtype=torch.float64)
    return (lambda v: (sample_stacked(v, pts, spec) * w).sum()), torch.randn(2, *spec.dims, generator=gen,
                                                                             dtype=torch.float64)


@register_gradcheck("trilinear_points")
def _case_trilinear_points(gen):
    spec = _gradcheck_grid()
    vol = torch.randn(2, *spec.dims, generator=gen, dtype=torch.float64)
    w = torch.randn(5, 2, generator=gen, dtype=torch.float64)
    return (lambda p: (sample_stacked(vol, p, spec) * w).sum()), _interior_points(gen, spec, 5)


@register_gradcheck("composite")
def _case_composite(gen):
    depths = torch.linspace(0.5, 4.0, 6, dtype=torch.float64)
    deltas = torch.full((2, 6), 0.7, dtype=torch.float64)
    w = torch.randn(2, 3, generator=gen, dtype=torch.float64)

    def fn(s):
        out = composite(s, depths, deltas, 5.0)
        return (out.feature_map * w).sum() + out.expected_depth.sum() + out.background_transmittance.sum()
    samples = torch.randn(2, 6, 4, generator=gen, dtype=torch.float64)
    samples[..., 0] = samples[..., 0].abs() + 0.2
    return fn, samples

"""Image encoder, occupancy-weighted frustums and voxel fusion.

Each posed image is encoded into per-pixel densities over ``D`` depth bins
plus a ``C``-channel feature vector. Occupancy weights turn densities into
per-bin termination probabilities, frustum entries are lifted to world
space, and all entries falling in a voxel are mean-pooled into a shared
density/feature grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from nfldm.camera import CameraPose, DepthBins, GridSpec, flat_voxel_index, lift_pixels, world_to_voxel_many
from nfldm.layers import num_groups
from nfldm.tensor_core import clamped_softplus, register_gradcheck

log = logging.getLogger(__name__)


@dataclass
class PixelFieldMap:
    sigma: torch.Tensor  # (..., H, W, D), nonnegative
    phi: torch.Tensor  # (..., H, W, C)


@dataclass
class Frustum:
    entries: torch.Tensor  # (H, W, D, C+1)
    bins: DepthBins
    pose: CameraPose

    @property
    def occupancy_features(self) -> torch.Tensor:
        return self.entries[..., :-1]

    @property
    def density(self) -> torch.Tensor:
        return self.entries[..., -1]


@dataclass
class VoxelGrid:
    density: torch.Tensor  # (Z, X, Y)
    feature: torch.Tensor  # (C, Z, X, Y)
    spec: GridSpec
    fill_mask: Optional[torch.Tensor] = None  # (Z, X, Y) bool

    def __post_init__(self):
        if self.fill_mask is None:
            self.fill_mask = torch.ones(self.density.shape, dtype=torch.bool)

    @property
    def channels(self) -> int:
        return self.feature.shape[0]

    def stacked(self) -> torch.Tensor:
        """``(1 + C, Z, X, Y)`` tensor with density first."""
        return torch.cat([self.density[None], self.feature], 0)

    @classmethod
    def from_stacked(cls, x: torch.Tensor, spec: GridSpec, fill_mask=None) -> "VoxelGrid":
        return cls(x[0], x[1:], spec, fill_mask)

    def detach(self) -> "VoxelGrid":
        return VoxelGrid(self.density.detach(), self.feature.detach(), self.spec,
                         self.fill_mask.clone())


@dataclass
class FusionDiagnostics:
    entries_total: int = 0
    entries_dropped: int = 0


class SceneEncoder(nn.Module):
    """Four conv blocks (the first ``log2(downsample)`` strided) and two heads.

    With ``coord_channels`` the input is augmented with normalised pixel
    coordinates; a shallow convolutional stack cannot otherwise tell where in
    the image a pixel sits, and ground depth is mostly a function of the row.
    """

    def __init__(self, n_depth: int = 16, channels: int = 8, downsample: int = 2, width: int = 48,
                 coord_channels: bool = True):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2**n_down != downsample or n_down > 4:
            raise ValueError("downsample must be a power of two <= 16")
        self.n_depth, self.channels, self.downsample = n_depth, channels, downsample
        self.coord_channels = coord_channels
        layers, ch = [], 5 if coord_channels else 3
        for i in range(4):
            layers += [nn.Conv2d(ch, width, 3, stride=2 if i < n_down else 1, padding=1),
                       nn.GroupNorm(num_groups(width), width), nn.SiLU()]
            ch = width
        self.body = nn.Sequential(*layers)
        self.density_head = nn.Conv2d(width, n_depth, 1)
        self.feature_head = nn.Conv2d(width, channels, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.coord_channels:
            n, _, hh, ww = images.shape
            v, u = torch.meshgrid(torch.linspace(-1, 1, hh, dtype=images.dtype),
                                  torch.linspace(-1, 1, ww, dtype=images.dtype), indexing="ij")
            images = torch.cat([images, torch.stack([u, v]).expand(n, -1, -1, -1)], 1)
        h = self.body(images)
        return torch.cat([self.density_head(h), self.feature_head(h)], 1)


def heads_to_fieldmap(raw: torch.Tensor, n_depth: int) -> PixelFieldMap:
    """Splits raw ``(..., D + C, H, W)`` encoder output into densities and features."""
    sigma = clamped_softplus(raw[..., :n_depth, :, :])
    phi = raw[..., n_depth:, :, :]
    return PixelFieldMap(sigma.movedim(-3, -1), phi.movedim(-3, -1))


def encode_image(image: torch.Tensor, encoder: SceneEncoder) -> PixelFieldMap:
    """Encodes ``(3, H, W)`` or ``(V, 3, H, W)`` RGB into a :class:`PixelFieldMap`."""
    single = image.dim() == 3
    x = image[None] if single else image
    h, w = x.shape[-2:]
    if h % encoder.downsample or w % encoder.downsample:
        raise ValueError(f"image extents {(h, w)} not divisible by {encoder.downsample}")
    fm = heads_to_fieldmap(encoder(x), encoder.n_depth)
    if single:
        return PixelFieldMap(fm.sigma[0], fm.phi[0])
    return fm


def occupancy_weights(sigma, deltas):
    """Per-bin termination probabilities along the last axis.

    ``O[d] = exp(-sum_{j<d} sigma_j delta_j) * (1 - exp(-sigma_d delta_d))``
    """
    sigma = torch.as_tensor(sigma)
    deltas = torch.as_tensor(deltas, dtype=sigma.dtype)
    if torch.any(sigma < 0):
        raise ValueError("densities must be nonnegative")
    tau = sigma * deltas
    before = torch.cumsum(tau, -1) - tau
    return torch.exp(-before) * (1 - torch.exp(-tau))


def build_frustum(fm: PixelFieldMap, bins: DepthBins, pose: CameraPose) -> Frustum:
    if fm.sigma.shape[-1] != len(bins):
        raise ValueError(f"{fm.sigma.shape[-1]} density bins but {len(bins)} depths")
    occ = occupancy_weights(fm.sigma, torch.as_tensor(bins.deltas, dtype=fm.sigma.dtype))
    feat = occ[..., None] * fm.phi[..., None, :]
    return Frustum(torch.cat([feat, fm.sigma[..., None]], -1), bins, pose)


def frustum_voxel_index(pose: CameraPose, bins: DepthBins, spec: GridSpec, h: int, w: int) -> np.ndarray:
    """Flat voxel index ``(h, w, D)`` of every frustum entry, -1 when outside.

    ``pose`` must carry intrinsics at the frustum's own resolution.
    """
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pts = lift_pixels(pose, u[..., None], v[..., None], bins.depths[None, None, :])
    return flat_voxel_index(world_to_voxel_many(pts, spec), spec)


def pool_entries(entries: torch.Tensor, index: torch.Tensor, spec: GridSpec,
                 diagnostics: Optional[FusionDiagnostics] = None) -> VoxelGrid:
    """Mean-pools frustum entries ``(..., C+1)`` into voxels by flat ``index``."""
    flat_e = entries.reshape(-1, entries.shape[-1])
    flat_i = index.reshape(-1)
    keep = flat_i >= 0
    if diagnostics is not None:
        diagnostics.entries_total += int(flat_i.numel())
        diagnostics.entries_dropped += int((~keep).sum())
    n = spec.n_voxels
    sums = torch.zeros(n, flat_e.shape[-1], dtype=flat_e.dtype).index_add(0, flat_i[keep], flat_e[keep])
    counts = torch.zeros(n, dtype=flat_e.dtype).index_add(
        0, flat_i[keep], torch.ones(int(keep.sum()), dtype=flat_e.dtype))
    if not bool(keep.any()):
        log.warning("no frustum entry landed inside the grid")
    mean = sums / counts.clamp(min=1)[:, None]
    grid = mean.T.reshape(flat_e.shape[-1], *spec.dims)
    fill = (counts > 0).reshape(spec.dims)
    return VoxelGrid(grid[-1], grid[:-1], spec, fill)


def fuse_frustums(frustums: Sequence[Frustum], spec: GridSpec,
                  diagnostics: Optional[FusionDiagnostics] = None) -> VoxelGrid:
    """Lifts every frustum entry to world space and mean-pools per voxel.

    Summation order is fixed (frustum order, then entry order), so the result
    does not depend on how the list was assembled beyond float rounding.
    """
    if not frustums:
        raise ValueError("need at least one frustum")
    entries, indices = [], []
    for fr in frustums:
        h, w = fr.entries.shape[:2]
        indices.append(torch.from_numpy(frustum_voxel_index(fr.pose, fr.bins, spec, h, w)))
        entries.append(fr.entries)
    return pool_entries(torch.stack(entries), torch.stack(indices), spec, diagnostics)


@register_gradcheck("occupancy_weights")
def _case_occupancy(gen):
    deltas = torch.rand(6, generator=gen, dtype=torch.float64) + 0.1
    w = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    return (lambda s: (occupancy_weights(s, deltas) * w).sum()), torch.rand(3, 6, generator=gen,
                                                                            dtype=torch.float64) * 2

"""Scene auto-encoder: posed RGB-D views -> voxel grid -> rendered views."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from nfldm.camera import CameraPose, DepthBins
from nfldm.config import SceneAEConfig
from nfldm.metrics import psnr
from nfldm.renderer import (FeatureDecoder, RenderOutput, decode_features, pool_depth, render_rays,
                            scene_ae_loss)
from nfldm.scene_encoder import (FusionDiagnostics, SceneEncoder, VoxelGrid, build_frustum,
                                 frustum_voxel_index, heads_to_fieldmap, pool_entries)
from nfldm.synthworld import DatasetRecord, WorldConfig
from nfldm.tensor_core import Adam, clamped_softplus

log = logging.getLogger(__name__)


class SceneAutoEncoder(nn.Module):
    def __init__(self, cfg: SceneAEConfig, world: WorldConfig):
        super().__init__()
        self.cfg = cfg
        self.world = world
        self.spec = world.grid_spec(cfg.grid_dims)
        self.bins = DepthBins.uniform(cfg.near, cfg.far, cfg.n_depth)
        self.image_size = world.image_size
        self.render_size = world.image_size // 2
        self.encoder = SceneEncoder(cfg.n_depth, cfg.channels, cfg.downsample, cfg.encoder_width,
                                    cfg.coord_channels)
        self.decoder = FeatureDecoder(cfg.channels, cfg.decoder_width, upsample=2)
        if not cfg.explicit_density:
            self.density_mlp = nn.Sequential(nn.Linear(cfg.channels, 32), nn.SiLU(), nn.Linear(32, 1))
        self.diagnostics = FusionDiagnostics()

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def encode(self, images: torch.Tensor, poses: Sequence[CameraPose]) -> VoxelGrid:
        """Fuses ``(V, 3, H, W)`` posed images into a voxel grid."""
        raw = self.encoder(images)
        fm = heads_to_fieldmap(raw, self.cfg.n_depth)
        h, w = fm.sigma.shape[1:3]
        scale = h / images.shape[-2]
        index = torch.stack([torch.from_numpy(frustum_voxel_index(p.scaled(scale), self.bins, self.spec, h, w))
                             for p in poses])
        if self.cfg.explicit_density:
            entries = torch.stack([build_frustum(type(fm)(fm.sigma[i], fm.phi[i]), self.bins, p).entries
                                   for i, p in enumerate(poses)])
            return pool_entries(entries, index, self.spec, self.diagnostics)
        # implicit variant: unweighted features everywhere along the ray, density from an MLP
        feat = fm.phi[..., None, :].expand(*fm.sigma.shape, self.channels)
        entries = torch.cat([feat, torch.zeros_like(fm.sigma)[..., None]], -1)
        grid = pool_entries(entries, index, self.spec, self.diagnostics)
        logits = self.density_mlp(grid.feature.movedim(0, -1))[..., 0]
        density = clamped_softplus(logits) * grid.fill_mask
        return VoxelGrid(density, grid.feature, self.spec, grid.fill_mask)

    def render(self, grid: VoxelGrid, poses: Sequence[CameraPose],
               stacked: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, RenderOutput]:
        scale = self.render_size / self.image_size
        out = render_rays(grid, [p.scaled(scale) for p in poses], self.cfg.n_samples, self.cfg.near,
                          self.cfg.far, self.render_size, self.render_size, stacked)
        rgb = decode_features(out.feature_map, self.decoder, out.background_transmittance)
        return rgb, out

    def render_stacked(self, stacked: torch.Tensor, poses: Sequence[CameraPose]):
        grid = VoxelGrid.from_stacked(stacked, self.spec)
        return self.render(grid, poses, stacked)

    def loss(self, rgb, out: RenderOutput, images, depths):
        cfg = self.cfg
        target_depth = pool_depth(depths, self.image_size // self.render_size)
        return scene_ae_loss(rgb, images, out.expected_depth, target_depth, out.sample_opacities,
                             weights=(cfg.w_image, cfg.w_depth, cfg.w_entropy))


@dataclass
class SceneTensors:
    """Dataset records as stacked tensors: images ``(N, V, 3, H, W)``, depths ``(N, V, H, W)``."""

    images: torch.Tensor
    depths: torch.Tensor
    poses: List[List[CameraPose]]

    @classmethod
    def from_records(cls, records: Sequence[DatasetRecord]) -> "SceneTensors":
        imgs = torch.from_numpy(np.stack([r.images for r in records])).permute(0, 1, 4, 2, 3).contiguous()
        deps = torch.from_numpy(np.stack([r.depths for r in records]))
        return cls(imgs.float(), deps.float(), [list(r.poses) for r in records])

    def __len__(self):
        return len(self.poses)


def view_indices(world: WorldConfig, frames: Sequence[int]) -> List[int]:
    n_cams = 6
    return [f * n_cams + c for f in frames for c in range(n_cams)]


def encode_scene(model: SceneAutoEncoder, data: SceneTensors, i: int) -> VoxelGrid:
    idx = view_indices(model.world, model.cfg.input_frames)
    return model.encode(data.images[i, idx], [data.poses[i][j] for j in idx])


def train_scene_ae(model: SceneAutoEncoder, data: SceneTensors, seed: int = 0,
                   steps: Optional[int] = None, time_budget_s: Optional[float] = None,
                   log_every: int = 200) -> List[Dict[str, float]]:
    """Trains encoder and decoder jointly, one scene per step.

    Supervision uses the input views plus ``heldout_per_step`` random views
    from frames that were not fed to the encoder.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    budget = cfg.time_budget_s if time_budget_s is None else time_budget_s
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    inputs = view_indices(model.world, cfg.input_frames)
    others = [v for v in range(data.images.shape[1]) if v not in inputs]
    history, start = [], time.time()
    for step in range(steps):
        i = int(rng.integers(len(data)))
        rendered = inputs
        if 0 < cfg.input_views_per_step < len(inputs):
            rendered = [inputs[int(j)] for j in rng.choice(len(inputs), cfg.input_views_per_step, replace=False)]
        sup = rendered + [int(v) for v in rng.choice(others, cfg.heldout_per_step, replace=False)]
        grid = model.encode(data.images[i, inputs], [data.poses[i][j] for j in inputs])
        rgb, out = model.render(grid, [data.poses[i][j] for j in sup])
        rep = model.loss(rgb, out, data.images[i, sup], data.depths[i, sup])
        opt.zero_grad()
        rep.total.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, **rep.as_floats(), "elapsed_s": time.time() - start}
            history.append(row)
            log.info("scene-ae %s", row)
        if time.time() - start > budget:
            log.info("scene-ae time budget reached at step %d", step)
            break
    return history


@torch.no_grad()
def heldout_psnr(model: SceneAutoEncoder, data: SceneTensors, frame: Optional[int] = None) -> float:
    """Mean per-view PSNR on all cameras of a frame the encoder never saw."""
    if frame is None:
        frame = model.world.n_frames // 2
    views = view_indices(model.world, [frame])
    vals = []
    for i in range(len(data)):
        grid = encode_scene(model, data, i)
        rgb, _ = model.render(grid, [data.poses[i][j] for j in views])
        vals += [psnr(rgb[k], data.images[i, v]) for k, v in enumerate(views)]
    return float(np.mean(vals))


def refine_voxels(model: SceneAutoEncoder, grid: VoxelGrid, images: torch.Tensor,
                  poses: Sequence[CameraPose], steps: int = 60, lr: float = 1e-2,
                  seed: int = 0, views_per_step: int = 2) -> VoxelGrid:
    """Per-scene optimisation of an encoded grid against its input views.

    Decoder weights stay fixed; only voxel values move.
    """
    rng = np.random.default_rng(seed)
    stacked = grid.stacked().detach().clone().requires_grad_(True)
    opt = Adam([stacked], lr=lr, betas=(0.9, 0.99))
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(steps):
            pick = rng.choice(len(poses), min(views_per_step, len(poses)), replace=False)
            rgb, _ = model.render_stacked(stacked, [poses[j] for j in pick])
            loss = (rgb - images[pick]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                stacked[0].clamp_(min=0)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    out = stacked.detach()
    return VoxelGrid(out[0], out[1:], grid.spec, grid.fill_mask.clone())

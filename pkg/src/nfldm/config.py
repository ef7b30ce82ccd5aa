"""Pipeline configuration: nested dataclasses with strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Tuple

from nfldm.synthworld import WorldConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class SceneAEConfig:
    grid_dims: Tuple[int, int, int] = (8, 16, 16)
    channels: int = 16
    n_depth: int = 16
    downsample: int = 2
    near: float = 0.3
    far: float = 14.0
    n_samples: int = 32
    encoder_width: int = 48
    decoder_width: int = 64
    explicit_density: bool = True
    coord_channels: bool = True
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.0, 0.99)
    w_image: float = 1.0
    w_depth: float = 5.0
    w_entropy: float = 0.01
    steps: int = 4000
    time_budget_s: float = 540.0
    input_frames: Tuple[int, ...] = (0, 8)
    heldout_per_step: int = 1
    input_views_per_step: int = 4  # 0 renders every input view
    refine_steps: int = 60
    refine_lr: float = 1e-2


@dataclass
class LAEConfig:
    global_dim: int = 16
    coarse_z: int = 2
    downsample: int = 4
    latent_channels: int = 4
    coarse_codebook: int = 1024
    fine_codebook: int = 128
    width: int = 64
    w_density: float = 2.5
    w_kl: float = 2e-5
    w_vq: float = 1.0
    w_image: float = 10.0
    vq_beta: float = 0.25
    reseed_every: int = 200
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.0, 0.99)
    steps: int = 3000
    time_budget_s: float = 420.0
    image_views: int = 2
    image_scenes: int = 2  # scenes of each batch rendered for the image term


@dataclass
class DDMConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 250
    eta: float = 0.0
    g_hidden: int = 256
    g_blocks: int = 6
    split_trajectory_net: bool = False
    unet_base: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.01
    steps: int = 3000
    time_budget_s: float = 480.0
    batch_size: int = 32
    use_bev: bool = False
    bev_embed_dim: int = 32
    n_samples: int = 16


@dataclass
class GuidanceConfigSection:
    gamma: float = 2.0
    recon_weight: float = 1.0
    sds_steps: int = 200
    sds_lr: float = 1e-4
    sds_betas: Tuple[float, float] = (0.9, 0.99)
    sds_eps: float = 1e-15
    sds_t_range: Tuple[int, int] = (20, 200)
    sds_translation: float = 3.0
    sds_rotation_deg: float = 10.0
    prior_steps: int = 1500
    prior_time_budget_s: float = 240.0
    prior_base: int = 32
    splice_region: Tuple[int, int, int] = (8, 10, 10)


@dataclass
class PipelineConfig:
    seed: int = 0
    n_train_scenes: int = 160
    n_test_scenes: int = 24
    mesh_iso: float = 0.5
    world: WorldConfig = field(default_factory=WorldConfig)
    scene_ae: SceneAEConfig = field(default_factory=SceneAEConfig)
    lae: LAEConfig = field(default_factory=LAEConfig)
    ddm: DDMConfig = field(default_factory=DDMConfig)
    guidance: GuidanceConfigSection = field(default_factory=GuidanceConfigSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        path = name if where == "config" else f"{where}.{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}: expected a number")
            if isinstance(default, int) and not isinstance(default, bool) and value != int(value):
                raise ConfigError(f"{path}: expected an integer")
            kwargs[name] = type(default)(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "config")
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def validate(cfg: PipelineConfig) -> None:
    sa, lae = cfg.scene_ae, cfg.lae
    z, x, y = sa.grid_dims
    if cfg.world.image_size % (sa.downsample * 2):
        raise ConfigError("scene_ae.downsample: image size must be divisible by 2*downsample")
    if x % lae.downsample or y % lae.downsample:
        raise ConfigError("lae.downsample: must divide the grid's horizontal extents")
    if z % lae.coarse_z:
        raise ConfigError("lae.coarse_z: must divide the grid's vertical extent")
    if max(sa.input_frames) >= cfg.world.n_frames:
        raise ConfigError("scene_ae.input_frames: frame index beyond trajectory length")
    if not 0 < cfg.ddm.beta_start < cfg.ddm.beta_end < 1:
        raise ConfigError("ddm.beta_start/beta_end: need 0 < start < end < 1")
    if not 1 <= cfg.ddm.ddim_steps <= cfg.ddm.timesteps:
        raise ConfigError("ddm.ddim_steps: must lie in [1, timesteps]")
    if cfg.guidance.gamma < 1:
        raise ConfigError("guidance.gamma: must be >= 1")
    if cfg.n_test_scenes < 1 or cfg.n_train_scenes < 1:
        raise ConfigError("n_train_scenes/n_test_scenes: must be positive")

"""Toy-scale ablations along one design axis at a time.

Each axis trains the affected component under a fixed step count (no wall-clock
budget, so runs are reproducible), evaluates one metric per variant and checks
the expected direction. Magnitudes are not compared against anything.

    voxel-dims        scene AE validation recon L1 for coarse -> fine voxel grids
    explicit-density  scene AE validation recon L1, implicit vs explicit density
    lae-downsample    LAE voxel recon loss for large -> small downsampling
    ddim-steps        DDIM discretisation error for few -> many steps
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from nfldm.config import ConfigError, PipelineConfig, load_config, validate
from nfldm.diffusion import gaussian_optimal_v, make_vp_schedule, sample_ddim
from nfldm.latent_ae import LatentAutoEncoder, eval_voxel_recon, train_lae
from nfldm.metrics import psnr
from nfldm.pipeline import Artifacts, seed_everything, write_report
from nfldm.plotting import bar_chart
from nfldm.scene_ae import SceneAutoEncoder, SceneTensors, encode_scene, train_scene_ae, view_indices
from nfldm.synthworld import make_record

log = logging.getLogger(__name__)

AXES = ("voxel-dims", "lae-downsample", "explicit-density", "ddim-steps")
TEST_SEED_OFFSET = 100_000


@dataclass
class AblationResult:
    axis: str
    metric: str
    rows: List[Dict] = field(default_factory=list)
    # True when the metric is non-increasing along the listed variant order
    direction_holds: bool = False

    def values(self) -> List[float]:
        return [r[self.metric] for r in self.rows]


def _monotone_non_increasing(vals: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(vals, vals[1:]))


def _splits(cfg: PipelineConfig):
    train = SceneTensors.from_records([make_record(s, cfg.world) for s in range(cfg.n_train_scenes)])
    test = SceneTensors.from_records([make_record(TEST_SEED_OFFSET + s, cfg.world)
                                      for s in range(cfg.n_test_scenes)])
    return train, test


@torch.no_grad()
def validation_l1(model: SceneAutoEncoder, data: SceneTensors) -> Dict[str, float]:
    """L1 on validation scenes: the encoder's own input views and the unseen middle frame."""
    inputs = view_indices(model.world, model.cfg.input_frames)
    novel = view_indices(model.world, [model.world.n_frames // 2])
    recon, nov, ps = [], [], []
    for i in range(len(data)):
        grid = encode_scene(model, data, i)
        for views, acc in ((inputs, recon), (novel, nov)):
            rgb, _ = model.render(grid, [data.poses[i][j] for j in views])
            target = data.images[i, views]
            acc.append(float((rgb - target).abs().mean()))
            if views is novel:
                ps += [psnr(rgb[k], target[k]) for k in range(len(views))]
    return {"recon_l1": float(np.mean(recon)), "novel_view_l1": float(np.mean(nov)),
            "novel_view_psnr_db": float(np.mean(ps))}


def _train_scene_ae(cfg: PipelineConfig, train, test, seed: int) -> Dict[str, float]:
    seed_everything(seed, "ablation-scene-ae")
    model = SceneAutoEncoder(cfg.scene_ae, cfg.world)
    start = time.time()
    hist = train_scene_ae(model, train, seed=seed, time_budget_s=float("inf"))
    model.eval()
    return {**validation_l1(model, test), "train_loss": hist[-1]["total"], "steps": hist[-1]["step"] + 1,
            "time_s": time.time() - start}


def ablate_voxel_dims(cfg: PipelineConfig, variants: Optional[Sequence] = None) -> AblationResult:
    variants = variants or [(4, 8, 8), (8, 16, 16), (16, 32, 32)]
    train, test = _splits(cfg)
    res = AblationResult("voxel-dims", "recon_l1")
    for dims in variants:
        c = copy.deepcopy(cfg)
        c.scene_ae.grid_dims = tuple(dims)
        row = _train_scene_ae(c, train, test, cfg.seed)
        res.rows.append({"variant": "x".join(map(str, dims)), **row})
        log.info("voxel-dims %s", res.rows[-1])
    res.direction_holds = _monotone_non_increasing(res.values())
    return res


def ablate_explicit_density(cfg: PipelineConfig) -> AblationResult:
    train, test = _splits(cfg)
    res = AblationResult("explicit-density", "recon_l1")
    for explicit in (False, True):
        c = copy.deepcopy(cfg)
        c.scene_ae.explicit_density = explicit
        row = _train_scene_ae(c, train, test, cfg.seed)
        res.rows.append({"variant": "explicit" if explicit else "implicit", **row})
        log.info("explicit-density %s", res.rows[-1])
    res.direction_holds = res.values()[1] < res.values()[0]
    return res


@torch.no_grad()
def _encode_all(model: SceneAutoEncoder, data: SceneTensors):
    grids = [encode_scene(model, data, i) for i in range(len(data))]
    return torch.stack([g.stacked() for g in grids]), torch.stack([g.fill_mask for g in grids])


def ablate_lae_downsample(cfg: PipelineConfig, variants: Sequence[int] = (8, 4, 2)) -> AblationResult:
    """Trains one scene AE, then one LAE per downsampling factor on its voxels."""
    train, test = _splits(cfg)
    seed_everything(cfg.seed, "ablation-scene-ae")
    scene_ae = SceneAutoEncoder(cfg.scene_ae, cfg.world)
    train_scene_ae(scene_ae, train, seed=cfg.seed, time_budget_s=float("inf"))
    scene_ae.eval()
    vox, fill = _encode_all(scene_ae, train)
    vox_test, fill_test = _encode_all(scene_ae, test)
    res = AblationResult("lae-downsample", "voxel_recon_test")
    for ds in variants:
        c = copy.deepcopy(cfg)
        c.lae.downsample = ds
        validate(c)
        seed_everything(cfg.seed, "ablation-lae")
        lae = LatentAutoEncoder(c.lae, 1 + c.scene_ae.channels, c.scene_ae.grid_dims)
        start = time.time()
        train_lae(lae, vox, fill, seed=cfg.seed, time_budget_s=float("inf"))
        res.rows.append({"variant": f"ds{ds}", "voxel_recon_train": eval_voxel_recon(lae, vox, fill),
                         "voxel_recon_test": eval_voxel_recon(lae, vox_test, fill_test),
                         "fine_shape": "x".join(map(str, lae.fine_shape)), "time_s": time.time() - start})
        log.info("lae-downsample %s", res.rows[-1])
    res.direction_holds = _monotone_non_increasing(res.values())
    return res


def ablate_ddim_steps(cfg: PipelineConfig, variants: Sequence[int] = (10, 25, 50, 125, 250),
                      n: int = 4096, dim: int = 16) -> AblationResult:
    """Sampler error with the exact denoiser for N(0, 1) data.

    With a perfect model the only error left is the discretisation, so the
    Fréchet distance of the sample moments to N(0, I) isolates the effect of
    the step count. The same initial noise is shared by every variant.
    """
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    gen = torch.Generator().manual_seed(seed_everything(cfg.seed, "ablation-ddim"))
    x_T = torch.randn(n, dim, generator=gen, dtype=torch.float64)
    model = lambda x, t: gaussian_optimal_v(x, t, schedule)
    res = AblationResult("ddim-steps", "frechet_to_target")
    for steps in variants:
        x = sample_ddim(model, schedule, x_T.shape, n_steps=steps, x_T=x_T)
        var = x.var(0, unbiased=False)
        mu = x.mean(0)
        # Fréchet distance between N(mu, diag var) and N(0, I)
        fd = float((mu ** 2).sum() + ((var.sqrt() - 1) ** 2).sum())
        res.rows.append({"variant": steps, "frechet_to_target": fd, "mean_variance": float(var.mean())})
    res.direction_holds = _monotone_non_increasing(res.values())
    return res


def ablation_runner(axis: str, cfg: PipelineConfig, out: Optional[str] = None) -> AblationResult:
    """Runs one ablation axis; with ``out`` also writes a CSV/JSON report and a bar chart."""
    runners = {"voxel-dims": ablate_voxel_dims, "lae-downsample": ablate_lae_downsample,
               "explicit-density": ablate_explicit_density, "ddim-steps": ablate_ddim_steps}
    if axis not in runners:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
    res = runners[axis](cfg)
    if out is not None:
        art = Artifacts(out)
        name = f"ablation-{axis}"
        write_report(art, name, {"axis": axis, "metric": res.metric, "direction_holds": res.direction_holds,
                                 "rows": res.rows}, res.rows)
        bar_chart([r["variant"] for r in res.rows], res.values(), art.path("reports", f"{name}.png"),
                  res.metric, axis)
    return res


def main(argv: Optional[List[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="nfldm-ablate", description="Run one toy-scale ablation axis.")
    p.add_argument("axis")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        res = ablation_runner(args.axis, cfg, args.out)
    except ConfigError as exc:
        print(f"nfldm-ablate: config error: {exc}", file=sys.stderr)
        return 2
    for r in res.rows:
        print(f"{r['variant']}\t{res.metric}={r[res.metric]:.6g}")
    print(f"direction holds: {res.direction_holds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

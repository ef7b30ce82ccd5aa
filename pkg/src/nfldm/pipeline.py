"""Stage implementations behind the ``nfldm`` command.

Every stage reads its upstream artifacts from the output directory, seeds
torch and numpy from a stage-named substream of the config seed, and writes
``reports/<stage>.json`` plus ``reports/<stage>.csv``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from nfldm import nft
from nfldm.camera import CameraPose, pose_from_yaw
from nfldm.config import ConfigError, PipelineConfig
from nfldm.diffusion import (DenoiserBundle, eps_from_v, make_vp_schedule, sample_fine_given,
                             sample_hierarchy, train_ddm)
from nfldm.guidance import (ARTIFACT, CLEAN, GuidanceConfig, ImagePrior, center_region, inpaint_resample,
                            prior_denoising_loss, run_sds, splice_voxels, train_image_prior)
from nfldm.latent_ae import LatentAutoEncoder, eval_voxel_recon, train_lae
from nfldm.mesh import marching_cubes, write_ply
from nfldm.metrics import pixel_frechet
from nfldm.plotting import bar_chart, image_grid, plot_history
from nfldm.scene_ae import (SceneAutoEncoder, SceneTensors, encode_scene, heldout_psnr, refine_voxels,
                            train_scene_ae, view_indices)
from nfldm.scene_encoder import VoxelGrid
from nfldm.synthworld import (BEV_LEGEND, RIG_YAWS_DEG, WorldConfig, bev_to_onehot, load_png, make_record,
                              read_dataset, save_png, write_dataset)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-scene-ae", "train-lae", "train-ddm", "sample", "sample-bev", "edit",
          "post-opt", "export-mesh", "eval")
TEST_SEED_OFFSET = 100_000


class MissingArtifactError(RuntimeError):
    """An upstream stage has not produced a required file (CLI exit code 3)."""


@dataclass
class StageOptions:
    refine_steps: Optional[int] = None
    bev_path: Optional[str] = None
    mask_path: Optional[str] = None


def substream(seed: int, name: str) -> int:
    """Deterministic 31-bit seed for a named RNG substream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def seed_everything(seed: int, name: str) -> int:
    s = substream(seed, name)
    torch.manual_seed(s)
    np.random.seed(s % (2 ** 32))
    return s


class Artifacts:
    def __init__(self, root: str):
        self.root = root

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def require(self, *parts: str) -> str:
        p = self.path(*parts)
        if not os.path.exists(p):
            raise MissingArtifactError(f"missing upstream artifact {p}")
        return p

    def mkdir(self, *parts: str) -> str:
        p = self.path(*parts)
        os.makedirs(p, exist_ok=True)
        return p


def write_report(art: Artifacts, stage: str, summary: Dict, rows: Sequence[Dict] = ()) -> None:
    art.mkdir("reports")
    with open(art.path("reports", f"{stage}.json"), "w") as fh:
        json.dump({"stage": stage, **summary}, fh, indent=2, default=float)
    rows = list(rows) or [{"key": k, "value": v} for k, v in summary.items() if not isinstance(v, (dict, list))]
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(art.path("reports", f"{stage}.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def read_report(art: Artifacts, stage: str) -> Dict:
    with open(art.require("reports", f"{stage}.json")) as fh:
        return json.load(fh)


# --- model construction / loading ---------------------------------------------------------


def traj_dim(world: WorldConfig) -> int:
    return 2 * world.n_frames


def build_scene_ae(cfg: PipelineConfig) -> SceneAutoEncoder:
    return SceneAutoEncoder(cfg.scene_ae, cfg.world)


def build_lae(cfg: PipelineConfig) -> LatentAutoEncoder:
    return LatentAutoEncoder(cfg.lae, 1 + cfg.scene_ae.channels, cfg.scene_ae.grid_dims)


def build_bundle(cfg: PipelineConfig, lae: LatentAutoEncoder) -> DenoiserBundle:
    return DenoiserBundle(cfg.ddm, cfg.lae.global_dim, traj_dim(cfg.world), lae.coarse_shape, lae.fine_shape,
                          bev_channels=len(BEV_LEGEND))


def load_scene_ae(cfg, art) -> SceneAutoEncoder:
    m = build_scene_ae(cfg)
    _load(m, art.require("scene_ae", "model.nft"))
    return m.eval()


def load_lae(cfg, art) -> LatentAutoEncoder:
    m = build_lae(cfg)
    _load(m, art.require("lae", "model.nft"))
    return m.eval()


def load_bundle(cfg, art, lae) -> DenoiserBundle:
    b = build_bundle(cfg, lae)
    _load(b, art.require("ddm", "model.nft"))
    return b.eval()


def _load(module, path):
    try:
        nft.load_module(path, module)
    except (KeyError, RuntimeError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path} does not match the configured shapes: {exc}") from exc


def load_split(cfg, art, split: str) -> SceneTensors:
    recs = read_dataset(art.require("data", split))
    return SceneTensors.from_records(recs)


def load_voxels(art, split: str):
    b = nft.load_bundle(art.require("voxels", f"{split}.nft"))
    return torch.from_numpy(b["voxels"]), torch.from_numpy(b["fill"]), b["trajectory"]


def load_bevs(art, split: str) -> torch.Tensor:
    recs = read_dataset(art.require("data", split))
    return torch.from_numpy(np.stack([bev_to_onehot(r.bev) for r in recs]))


def rig_from_trajectory(traj: np.ndarray, world: WorldConfig, frame: int) -> List[CameraPose]:
    """Rig cameras at ``frame`` of a flattened ``(2 * n_frames,)`` trajectory."""
    pts = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
    d = pts[-1] - pts[0]
    heading = math.atan2(d[1], d[0])
    f, c = world.focal, world.image_size / 2
    x, y = pts[frame]
    return [pose_from_yaw((x, y, world.camera_height), heading + math.radians(yaw),
                          math.radians(world.pitch_deg), f, f, c, c) for yaw in RIG_YAWS_DEG]


def render_frames(model: SceneAutoEncoder, stacked: torch.Tensor, traj, frames: Sequence[int]) -> torch.Tensor:
    poses = [p for k in frames for p in rig_from_trajectory(traj, model.world, k)]
    with torch.no_grad():
        rgb, _ = model.render_stacked(stacked, poses)
    return rgb.clamp(0, 1)


def sample_frames(world: WorldConfig) -> List[int]:
    return [0, world.n_frames // 2]


def save_views(dirpath: str, images: torch.Tensor) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, img in enumerate(images):
        save_png(os.path.join(dirpath, f"view_{i:02d}.png"), img.permute(1, 2, 0).numpy())


# --- stages -------------------------------------------------------------------------------


def stage_gen_data(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    base = cfg.seed * 1_000_000
    start = time.time()
    train = [make_record(base + i, cfg.world) for i in range(cfg.n_train_scenes)]
    test = [make_record(base + TEST_SEED_OFFSET + i, cfg.world) for i in range(cfg.n_test_scenes)]
    write_dataset(train, art.path("data", "train"))
    write_dataset(test, art.path("data", "test"))
    art.mkdir("reports")
    image_grid(train[0].images[:12], art.path("reports", "gen-data_views.png"))
    image_grid(np.stack([r.bev for r in train[:12]]).astype(np.float32) / 255, art.path("reports", "gen-data_bev.png"))
    return {"n_train": len(train), "n_test": len(test), "views_per_scene": len(train[0].images),
            "elapsed_s": time.time() - start}


def _export_voxels(model: SceneAutoEncoder, data: SceneTensors, trajs: np.ndarray, path: str,
                   refine_steps: int, seed: int) -> None:
    vox, fill = [], []
    for i in range(len(data)):
        with torch.no_grad():
            grid = encode_scene(model, data, i).detach()
        if refine_steps > 0:
            grid = refine_voxels(model, grid, data.images[i], data.poses[i], refine_steps,
                                 model.cfg.refine_lr, seed=seed + i)
        vox.append(grid.stacked().detach())
        fill.append(grid.fill_mask.float())
    nft.save_bundle(path, {"voxels": torch.stack(vox), "fill": torch.stack(fill),
                           "trajectory": torch.from_numpy(trajs).float()})


def _trajectories(art, split, world) -> np.ndarray:
    recs = read_dataset(art.require("data", split))
    return np.stack([r.scene.trajectory(world.n_frames, world.frame_step).reshape(-1) for r in recs])


def stage_train_scene_ae(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "train-scene-ae")
    train, test = load_split(cfg, art, "train"), load_split(cfg, art, "test")
    model = build_scene_ae(cfg)
    start = time.time()
    history = train_scene_ae(model, train, seed=seed)
    train_time = time.time() - start
    model.eval()
    art.mkdir("scene_ae")
    nft.save_module(art.path("scene_ae", "model.nft"), model)
    psnr_val = heldout_psnr(model, test)
    refine = cfg.scene_ae.refine_steps if opts.refine_steps is None else opts.refine_steps
    art.mkdir("voxels")
    _export_voxels(model, train, _trajectories(art, "train", cfg.world), art.path("voxels", "train.nft"), refine, seed)
    _export_voxels(model, test, _trajectories(art, "test", cfg.world), art.path("voxels", "test.nft"), refine,
                   seed + 7)
    plot_history(history, ["image_recon", "depth_mse", "total"], art.path("reports", "train-scene-ae_loss.png"),
                 "scene auto-encoder")
    frame = cfg.world.n_frames // 2
    views = view_indices(cfg.world, [frame])
    with torch.no_grad():
        rgb, _ = model.render(encode_scene(model, test, 0), [test.poses[0][j] for j in views])
    pair = torch.cat([test.images[0, views], rgb.clamp(0, 1)]).permute(0, 2, 3, 1).numpy()
    image_grid(pair, art.path("reports", "train-scene-ae_heldout.png"))
    return {"heldout_psnr_db": psnr_val, "steps": history[-1]["step"] + 1, "train_time_s": train_time,
            "refine_steps": refine, "final": history[-1], "history": history}


def stage_train_lae(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "train-lae")
    voxels, fill, trajs = load_voxels(art, "train")
    scene_ae = load_scene_ae(cfg, art)
    for p in scene_ae.parameters():
        p.requires_grad_(False)
    data = load_split(cfg, art, "train")
    rng = np.random.default_rng(seed)
    n_views = data.images.shape[1]

    def image_loss(idx, vhat):
        losses = []
        for k, i in enumerate(idx.tolist()[: cfg.lae.image_scenes]):
            views = rng.choice(n_views, cfg.lae.image_views, replace=False)
            rgb, _ = scene_ae.render_stacked(vhat[k], [data.poses[i][j] for j in views])
            losses.append((rgb - data.images[i, views]).abs().mean())
        return torch.stack(losses).mean()

    lae = build_lae(cfg)
    initial = eval_voxel_recon(lae, voxels, fill)
    history = train_lae(lae, voxels, fill, seed=seed, image_loss_fn=image_loss)
    final = eval_voxel_recon(lae, voxels, fill)
    art.mkdir("lae")
    nft.save_module(art.path("lae", "model.nft"), lae)
    lat = lae.encode(voxels)
    nft.save_bundle(art.path("lae", "latents.nft"), {"g": lat.g, "c": lat.c, "f": lat.f,
                                                     "trajectory": torch.from_numpy(trajs)})
    plot_history(history, ["voxel_recon", "vq", "image_recon"], art.path("reports", "train-lae_loss.png"),
                 "latent auto-encoder")
    return {"voxel_recon_initial": initial, "voxel_recon_final": final,
            "reduction_factor": initial / max(final, 1e-12),
            "coarse_codes_used": int(lat.c_indices.unique().numel()),
            "fine_codes_used": int(lat.f_indices.unique().numel()),
            "final": history[-1], "history": history}


def stage_train_ddm(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "train-ddm")
    lat = nft.load_bundle(art.require("lae", "latents.nft"))
    lae = load_lae(cfg, art)
    g = torch.cat([torch.from_numpy(lat["g"]), torch.from_numpy(lat["trajectory"])], 1)
    c, f = torch.from_numpy(lat["c"]), torch.from_numpy(lat["f"])
    bundle = build_bundle(cfg, lae)
    bundle.fit_stats(g, c, f)
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    bev = load_bevs(art, "train") if cfg.ddm.use_bev else None
    history = train_ddm(bundle, g, c, f, schedule, seed=seed, bev=bev)
    art.mkdir("ddm")
    nft.save_module(art.path("ddm", "model.nft"), bundle)
    plot_history(history, ["loss_g", "loss_c", "loss_f"], art.path("reports", "train-ddm_loss.png"),
                 "latent diffusion")
    return {"final": history[-1], "history": history}


def _decode_samples(cfg, lae, scene_ae, hs, out_dir: str, art: Artifacts, name: str) -> Dict:
    cq, _, fq, _ = lae.snap(hs.c, hs.f)
    with torch.no_grad():
        voxels = lae.decode_latents(hs.g, cq, fq)
    frames = sample_frames(cfg.world)
    trajs = hs.trajectory.numpy()
    renders = []
    for i in range(len(voxels)):
        imgs = render_frames(scene_ae, voxels[i], trajs[i], frames)
        save_views(os.path.join(out_dir, f"sample_{i:03d}"), imgs)
        renders.append(imgs)
    renders = torch.stack(renders)
    nft.save_bundle(os.path.join(out_dir, "samples.nft"),
                    {"voxels": voxels, "trajectory": hs.trajectory, "g": hs.g, "renders": renders})
    image_grid(renders[:4].flatten(0, 1).permute(0, 2, 3, 1).numpy(), art.path("reports", f"{name}_grid.png"))
    return {"n_samples": len(voxels), "views_per_sample": renders.shape[1],
            "mean_density": float(voxels[:, 0].mean())}


def stage_sample(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "sample")
    scene_ae, lae = load_scene_ae(cfg, art), load_lae(cfg, art)
    bundle = load_bundle(cfg, art, lae)
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    bev = None
    if cfg.ddm.use_bev:
        # an unconditional request on a BEV-trained model still needs a layout; use held-out maps
        bev = load_bevs(art, "test")[: cfg.ddm.n_samples]
    n = cfg.ddm.n_samples if bev is None else len(bev)
    start = time.time()
    hs = sample_hierarchy(bundle, schedule, n, seed=seed, bev=bev)
    out = art.mkdir("samples")
    rep = _decode_samples(cfg, lae, scene_ae, hs, out, art, "sample")
    return {**rep, "ddim_steps": cfg.ddm.ddim_steps, "sampling_time_s": time.time() - start}


def _read_bev(path: str, size: int) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing BEV map {path}")
    bev = load_png(path)
    if bev.shape[:2] != (size, size):
        raise ConfigError(f"--bev: expected a {size}x{size} map, got {bev.shape[1]}x{bev.shape[0]}")
    return bev_to_onehot(bev)


def stage_sample_bev(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    if not cfg.ddm.use_bev:
        raise ConfigError("ddm.use_bev: sample-bev needs a BEV-conditioned denoiser")
    seed = seed_everything(cfg.seed, "sample-bev")
    scene_ae, lae = load_scene_ae(cfg, art), load_lae(cfg, art)
    bundle = load_bundle(cfg, art, lae)
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    if opts.bev_path:
        one = torch.from_numpy(_read_bev(opts.bev_path, load_bevs(art, "test").shape[-1]))
        bev = one[None].expand(cfg.ddm.n_samples, -1, -1, -1).contiguous()
    else:
        bev = load_bevs(art, "test")[: cfg.ddm.n_samples]
    hs = sample_hierarchy(bundle, schedule, len(bev), seed=seed, bev=bev)
    out = art.mkdir("samples_bev")
    rep = _decode_samples(cfg, lae, scene_ae, hs, out, art, "sample-bev")
    # agreement between sampled occupancy and the requested layout (building class)
    occ = (nft.load_bundle(os.path.join(out, "samples.nft"))["voxels"][:, 0] > 1.0).any(1)
    building = torch.nn.functional.adaptive_max_pool2d(bev[:, 2:3], occ.shape[-2:])[:, 0] > 0.5
    iou = float((torch.from_numpy(occ) & building).sum() / max(1, int((torch.from_numpy(occ) | building).sum())))
    return {**rep, "bev_source": opts.bev_path or "test split", "building_iou": iou}


def _read_mask(path: Optional[str], shape) -> torch.Tensor:
    """Top-down resample mask at coarse-latent resolution; white pixels are resampled."""
    xc, yc = shape
    if path is None:
        m = torch.zeros(xc, yc, dtype=torch.bool)
        m[xc // 4: xc - xc // 4, yc // 4: yc - yc // 4] = True
        return m
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing mask {path}")
    img = Image.open(path).convert("L").resize((yc, xc), Image.NEAREST)
    return torch.from_numpy(np.asarray(img) > 127)


def stage_edit(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "edit")
    scene_ae, lae = load_scene_ae(cfg, art), load_lae(cfg, art)
    bundle = load_bundle(cfg, art, lae)
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    voxels, fill, trajs = load_voxels(art, "test")
    n = min(4, len(voxels))
    voxels, trajs = voxels[:n], torch.from_numpy(trajs[:n])
    lat = lae.encode(voxels)
    g_full = torch.cat([lat.g, trajs], 1)
    gn, cn = bundle.norm_g(g_full), bundle.norm_c(lat.c)
    bev = load_bevs(art, "test")[:n] if cfg.ddm.use_bev else None
    tokens, _ = bundle.bev_context(bev)
    resample = _read_mask(opts.mask_path, lae.coarse_shape[2:])
    keep = ~resample.expand(n, lae.coarse_shape[0], lae.coarse_shape[1], -1, -1)
    c_new_n = inpaint_resample(lambda x, t: bundle.predict_c(x, t, gn, tokens), cn, keep, schedule,
                               cfg.guidance.recon_weight, seed, cfg.ddm.ddim_steps, cfg.ddm.eta)
    # splice in destandardised space so the kept region survives the round trip bit-exactly
    c_new = torch.where(keep, lat.c, bundle.denorm_c(c_new_n))
    f_new = sample_fine_given(bundle, schedule, g_full, c_new, seed=seed + 1, bev=bev)
    cq, _, fq, _ = lae.snap(c_new, f_new)
    with torch.no_grad():
        edited = lae.decode_latents(lat.g, cq, fq)
    region = center_region(cfg.scene_ae.grid_dims, cfg.guidance.splice_region)
    spec = scene_ae.spec
    out = art.mkdir("edit")
    frames = sample_frames(cfg.world)
    rows, grid_imgs = [], []
    for i in range(n):
        spliced = splice_voxels(VoxelGrid.from_stacked(voxels[i], spec), VoxelGrid.from_stacked(edited[i], spec),
                                region).stacked()
        for name, vol in (("original", voxels[i]), ("edited", edited[i]), ("spliced", spliced)):
            imgs = render_frames(scene_ae, vol, trajs[i].numpy(), frames)
            save_views(os.path.join(out, f"scene_{i:02d}", name), imgs)
            if i == 0:
                grid_imgs.append(imgs[:6])
        kept = keep[i]
        rows.append({"scene": i,
                     "kept_max_abs_change": float((c_new[i] - lat.c[i])[kept].abs().max()) if kept.any() else 0.0,
                     "resampled_mean_abs_change": float((c_new[i] - lat.c[i])[~kept].abs().mean())
                     if (~kept).any() else 0.0})
    nft.save_bundle(os.path.join(out, "edited.nft"), {"voxels": edited, "c": c_new, "f": f_new})
    image_grid(torch.cat(grid_imgs).permute(0, 2, 3, 1).numpy(), art.path("reports", "edit_grid.png"))
    return {"n_scenes": n, "resample_fraction": float(resample.float().mean()), "rows": rows}, rows


def _prior_eps(prior, schedule):
    def fn(x_t, t, cond):
        return eps_from_v(x_t, prior(x_t, t, cond), t, schedule)
    return fn


def stage_post_opt(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "post-opt")
    gcfg = cfg.guidance
    scene_ae = load_scene_ae(cfg, art)
    for p in scene_ae.parameters():
        p.requires_grad_(False)
    samples = nft.load_bundle(art.require("samples", "samples.nft"))
    train_vox, _, train_traj = load_voxels(art, "train")
    data = load_split(cfg, art, "train")
    schedule = make_vp_schedule(cfg.ddm.timesteps, cfg.ddm.beta_start, cfg.ddm.beta_end)
    rng = np.random.default_rng(seed)
    # clean: ground-truth views; artifact: renders of sampled voxels
    n_imgs = min(2048, data.images.shape[0] * data.images.shape[1])
    flat = data.images.flatten(0, 1)
    clean = flat[torch.from_numpy(rng.choice(len(flat), n_imgs, replace=False))]
    artifact = torch.from_numpy(samples["renders"]).flatten(0, 1)
    prior = ImagePrior(cfg.world.image_size, gcfg.prior_base)
    hist = train_image_prior(prior, clean, artifact, schedule, gcfg.prior_steps, gcfg.prior_time_budget_s,
                             seed=seed)
    prior.eval()
    for p in prior.parameters():
        p.requires_grad_(False)
    art.mkdir("post_opt")
    nft.save_module(art.path("post_opt", "prior.nft"), prior)
    prior_eps = _prior_eps(prior, schedule)
    gc = GuidanceConfig(gamma=gcfg.gamma, positive_cond=CLEAN, negative_cond=ARTIFACT)

    def render_fn(stacked, poses):
        rgb, _ = scene_ae.render_stacked(stacked, poses)
        return rgb.clamp(0, 1)

    rows, optimised = [], []
    n = min(2, len(samples["voxels"]))
    for i in range(n):
        vol = torch.from_numpy(samples["voxels"][i])
        cams = rig_from_trajectory(samples["trajectory"][i], cfg.world, 0)
        kw = dict(t_range=gcfg.sds_t_range, translation=gcfg.sds_translation, rotation_deg=gcfg.sds_rotation_deg)
        before = prior_denoising_loss(vol, render_fn, prior_eps, cams, schedule, seed=seed + i, **kw)
        new = run_sds(vol, render_fn, prior_eps, cams, gc, schedule, gcfg.sds_steps, gcfg.sds_lr, gcfg.sds_betas,
                      gcfg.sds_eps, seed=seed + i, **kw)
        after = prior_denoising_loss(new, render_fn, prior_eps, cams, schedule, seed=seed + i, **kw)
        rows.append({"sample": i, "prior_loss_before": before, "prior_loss_after": after})
        optimised.append(new)
        imgs = render_frames(scene_ae, new, samples["trajectory"][i], sample_frames(cfg.world))
        save_views(art.path("post_opt", f"sample_{i:03d}"), imgs)
    nft.save_bundle(art.path("post_opt", "voxels.nft"), {"voxels": torch.stack(optimised)})
    bar_chart([f"{r['sample']}/{k}" for r in rows for k in ("pre", "post")],
              [v for r in rows for v in (r["prior_loss_before"], r["prior_loss_after"])],
              art.path("reports", "post-opt_prior_loss.png"), "prior denoising loss")
    return {"n_samples": n, "prior_history": hist, "rows": rows}, rows


def stage_export_mesh(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed_everything(cfg.seed, "export-mesh")
    samples = nft.load_bundle(art.require("samples", "samples.nft"))
    test_vox, _, _ = load_voxels(art, "test")
    spec = cfg.world.grid_spec(cfg.scene_ae.grid_dims)
    out = art.mkdir("meshes")
    rows = []
    sources = [("sample", samples["voxels"][:4]), ("encoded", test_vox[:4].numpy())]
    for kind, vols in sources:
        for i, vol in enumerate(vols):
            mesh = marching_cubes(vol[0], cfg.mesh_iso, spec)
            path = os.path.join(out, f"{kind}_{i:03d}.ply")
            write_ply(mesh, path)
            rows.append({"mesh": os.path.basename(path), "vertices": len(mesh.vertices),
                         "triangles": len(mesh.triangles)})
    return {"iso": cfg.mesh_iso, "rows": rows}, rows


def _heldout_renders(art, cfg) -> torch.Tensor:
    test = load_split(cfg, art, "test")
    views = view_indices(cfg.world, sample_frames(cfg.world))
    return test.images[:, views].flatten(0, 1)


def stage_eval(cfg: PipelineConfig, art: Artifacts, opts: StageOptions) -> Dict:
    seed = seed_everything(cfg.seed, "eval")
    scene_ae = load_scene_ae(cfg, art)
    test = load_split(cfg, art, "test")
    psnr_val = heldout_psnr(scene_ae, test)
    real = _heldout_renders(art, cfg)
    samples = torch.from_numpy(nft.load_bundle(art.require("samples", "samples.nft"))["renders"]).flatten(0, 1)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.rand(samples.shape, generator=gen)
    fd_samples = pixel_frechet(samples, real)
    fd_noise = pixel_frechet(noise, real)
    summary = {"heldout_psnr_db": psnr_val, "pixel_frechet_samples": fd_samples,
               "pixel_frechet_uniform_noise": fd_noise, "n_real": len(real), "n_generated": len(samples)}
    for stage, key in (("train-lae", "reduction_factor"),):
        p = art.path("reports", f"{stage}.json")
        if os.path.exists(p):
            summary[f"lae_{key}"] = read_report(art, stage)[key]
    bar_chart(["samples", "uniform noise"], [fd_samples, fd_noise], art.path("reports", "eval_frechet.png"),
              "pixel Fréchet (8x8)")
    return summary


STAGE_FUNCS: Dict[str, Callable] = {
    "gen-data": stage_gen_data, "train-scene-ae": stage_train_scene_ae, "train-lae": stage_train_lae,
    "train-ddm": stage_train_ddm, "sample": stage_sample, "sample-bev": stage_sample_bev, "edit": stage_edit,
    "post-opt": stage_post_opt, "export-mesh": stage_export_mesh, "eval": stage_eval,
}


def run_stage(stage: str, cfg: PipelineConfig, out: str, opts: Optional[StageOptions] = None) -> Dict:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    art = Artifacts(out)
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.json"))
    start = time.time()
    result = STAGE_FUNCS[stage](cfg, art, opts or StageOptions())
    summary, rows = result if isinstance(result, tuple) else (result, [])
    summary["stage_time_s"] = time.time() - start
    history = summary.get("history")
    write_report(art, stage, summary, rows or history or ())
    log.info("%s finished in %.1fs", stage, summary["stage_time_s"])
    return summary

"""Procedural multi-camera box world with an analytic RGB-D renderer.

Each scene is a finite square ground plate carrying a handful of axis-aligned
boxes under a constant sky. A six-camera rig drives along a straight
nine-frame trajectory, which gives multi-view RGB-D captures with known
poses. Everything is a deterministic function of ``(seed, WorldConfig)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from nfldm import nft
from nfldm.camera import CameraPose, GridSpec, centered_grid, pose_from_yaw

# BEV legend (RGB, 0-255): one flat colour per class.
BEV_LEGEND = {
    "void": (0, 0, 0),
    "ground": (128, 64, 128),
    "building": (70, 70, 70),
}
RIG_YAWS_DEG = (60.0, 0.0, -60.0, 120.0, 180.0, -120.0)
RIG_NAMES = ("front_left", "front", "front_right", "back_left", "back", "back_right")


@dataclass
class WorldConfig:
    half_extent: float = 8.0
    height: float = 4.0
    min_boxes: int = 2
    max_boxes: int = 6
    box_half_xy: Tuple[float, float] = (0.75, 2.0)
    box_half_z: Tuple[float, float] = (0.5, 1.75)
    sky_color: Tuple[float, float, float] = (0.55, 0.7, 0.9)
    image_size: int = 32
    fov_deg: float = 80.0
    camera_height: float = 1.6
    pitch_deg: float = 12.0
    n_frames: int = 9
    frame_step: float = 0.5
    start_jitter: float = 1.0
    far: float = 14.0
    depth_keep: float = 1.0

    def grid_spec(self, dims=(8, 16, 16)) -> GridSpec:
        z, x, y = dims
        return centered_grid(dims, (self.height / z, 2 * self.half_extent / x,
                                    2 * self.half_extent / y))

    @property
    def focal(self) -> float:
        return (self.image_size / 2) / math.tan(math.radians(self.fov_deg) / 2)


@dataclass
class Box:
    center: Tuple[float, float, float]
    half: Tuple[float, float, float]
    albedo: Tuple[float, float, float]


@dataclass
class SceneDescription:
    seed: int
    ground_color: Tuple[float, float, float]
    sky_color: Tuple[float, float, float]
    boxes: List[Box]
    global_style: float
    start: Tuple[float, float]
    heading: float
    half_extent: float = 8.0

    def brightness(self) -> float:
        return 0.55 + 0.45 * self.global_style

    def trajectory(self, n_frames: int, step: float) -> np.ndarray:
        """Rig positions ``(n_frames, 2)`` along the heading."""
        k = np.arange(n_frames)[:, None]
        d = np.array([math.cos(self.heading), math.sin(self.heading)])
        return np.asarray(self.start)[None] + k * step * d[None]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneDescription":
        d = dict(d)
        d["boxes"] = [Box(*(tuple(b[k]) for k in ("center", "half", "albedo"))) for b in d["boxes"]]
        for k in ("ground_color", "sky_color", "start"):
            d[k] = tuple(d[k])
        return cls(**d)


def generate_scene(seed: int, cfg: WorldConfig) -> SceneDescription:
    rng = np.random.default_rng(seed)
    style = float(rng.uniform())
    heading = float(rng.uniform(-math.pi, math.pi))
    start = tuple(float(v) for v in rng.uniform(-cfg.start_jitter, cfg.start_jitter, 2))
    ground = tuple(float(v) for v in rng.uniform(0.25, 0.6, 3))
    n_boxes = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    scene = SceneDescription(seed, ground, tuple(cfg.sky_color), [], style, start, heading,
                             cfg.half_extent)
    path = scene.trajectory(cfg.n_frames, cfg.frame_step)
    boxes = []
    attempts = 0
    while len(boxes) < n_boxes and attempts < 200:
        attempts += 1
        hx, hy = rng.uniform(*cfg.box_half_xy, 2)
        hz = rng.uniform(*cfg.box_half_z)
        lim_x, lim_y = cfg.half_extent - hx, cfg.half_extent - hy
        cx, cy = rng.uniform(-lim_x, lim_x), rng.uniform(-lim_y, lim_y)
        albedo = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
        # keep the rig's drive corridor clear
        if np.any((np.abs(path[:, 0] - cx) < hx + 0.75) & (np.abs(path[:, 1] - cy) < hy + 0.75)):
            continue
        boxes.append(Box((float(cx), float(cy), float(hz)), (float(hx), float(hy), float(hz)),
                         albedo))
    scene.boxes = boxes
    return scene


def rig_poses(scene: SceneDescription, cfg: WorldConfig, frame: int) -> List[CameraPose]:
    pos = scene.trajectory(cfg.n_frames, cfg.frame_step)[frame]
    f, c = cfg.focal, cfg.image_size / 2
    return [pose_from_yaw((pos[0], pos[1], cfg.camera_height),
                          scene.heading + math.radians(y), math.radians(cfg.pitch_deg), f, f, c, c)
            for y in RIG_YAWS_DEG]


def all_poses(scene: SceneDescription, cfg: WorldConfig) -> List[CameraPose]:
    """Every rig camera at every frame, frame-major."""
    return [p for k in range(cfg.n_frames) for p in rig_poses(scene, cfg, k)]


def _pixel_rays(pose: CameraPose, size: int) -> np.ndarray:
    v, u = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    d = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], -1)
    return d @ pose.rotation.T


def render_ground_truth(scene: SceneDescription, pose: CameraPose, resolution: int,
                        far: float = 14.0) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic RGB ``(H, W, 3)`` in [0, 1] and optical-axis depth ``(H, W)``.

    Ray parameters are measured along directions with unit camera-frame z, so
    the hit parameter is the optical-axis depth. Misses get the sky colour
    and depth ``far``.
    """
    d = _pixel_rays(pose, resolution)
    o = pose.translation
    best = np.full(d.shape[:2], np.inf)
    color = np.broadcast_to(np.asarray(scene.sky_color), d.shape).copy()

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -o[2] / d[..., 2]
        hit = o[None, None, :2] + t_ground[..., None] * d[..., :2]
        ok = (t_ground > 1e-6) & np.all(np.abs(hit) <= scene.half_extent, axis=-1)
        best = np.where(ok, t_ground, best)
        color[ok] = np.asarray(scene.ground_color) * scene.brightness()

        for box in scene.boxes:
            lo = np.asarray(box.center) - np.asarray(box.half)
            hi = np.asarray(box.center) + np.asarray(box.half)
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            hitb = (tmax >= tmin) & (tmin > 1e-6) & (tmin < best)
            best = np.where(hitb, tmin, best)
            color[hitb] = np.asarray(box.albedo) * scene.brightness()

    depth = np.where(np.isfinite(best), np.minimum(best, far), far)
    return np.clip(color, 0, 1).astype(np.float32), depth.astype(np.float32)


def rasterize_bev(scene: SceneDescription, size: int) -> np.ndarray:
    """Bird's-eye-view class map ``(size, size, 3)`` uint8; rows index x, cols y."""
    c = (np.arange(size) + 0.5) / size * 2 * scene.half_extent - scene.half_extent
    gx, gy = np.meshgrid(c, c, indexing="ij")
    bev = np.empty((size, size, 3), np.uint8)
    bev[:] = BEV_LEGEND["ground"]
    for box in scene.boxes:
        m = (np.abs(gx - box.center[0]) <= box.half[0]) & (np.abs(gy - box.center[1]) <= box.half[1])
        bev[m] = BEV_LEGEND["building"]
    return bev


def bev_to_onehot(bev: np.ndarray) -> np.ndarray:
    """Colour BEV raster to a ``(n_classes, H, W)`` float one-hot map."""
    classes = list(BEV_LEGEND.values())
    arr = np.asarray(bev)[..., :3].astype(np.int64)
    dist = np.stack([np.abs(arr - np.array(c)).sum(-1) for c in classes], 0)
    return np.eye(len(classes), dtype=np.float32)[dist.argmin(0)].transpose(2, 0, 1)


@dataclass
class DatasetRecord:
    scene_id: int
    images: np.ndarray  # (V, H, W, 3) float32 in [0, 1]
    depths: np.ndarray  # (V, H, W) float32 meters; 0 marks no return
    poses: List[CameraPose]
    scene: Optional[SceneDescription] = None
    bev: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (len(self.images) == len(self.depths) == len(self.poses)):
            raise ValueError("images, depths and poses differ in length")


def make_record(seed: int, cfg: WorldConfig, bev_size: int = 16) -> DatasetRecord:
    scene = generate_scene(seed, cfg)
    poses = all_poses(scene, cfg)
    rgb, dep = zip(*(render_ground_truth(scene, p, cfg.image_size, cfg.far) for p in poses))
    depths = np.stack(dep)
    depths[depths >= cfg.far] = 0.0
    if cfg.depth_keep < 1.0:
        keep = np.random.default_rng(seed + 7919).uniform(size=depths.shape) < cfg.depth_keep
        depths = np.where(keep, depths, 0.0).astype(np.float32)
    return DatasetRecord(seed, np.stack(rgb), depths, poses, scene, rasterize_bev(scene, bev_size))


def save_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_dataset(records: Sequence[DatasetRecord], root) -> None:
    os.makedirs(root, exist_ok=True)
    index = []
    for rec in records:
        name = f"scene_{rec.scene_id:06d}"
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        for i, img in enumerate(rec.images):
            save_png(os.path.join(d, f"view_{i:03d}.png"), img)
        nft.save_tensor(os.path.join(d, "depth.nft"), rec.depths.astype(np.float32))
        meta = {"scene_id": rec.scene_id, "n_views": len(rec.images),
                "image_shape": list(rec.images.shape[1:3]),
                "poses": [p.to_json() for p in rec.poses],
                "scene": rec.scene.to_json() if rec.scene else None}
        with open(os.path.join(d, "meta.json"), "w") as fh:
            json.dump(meta, fh)
        if rec.bev is not None:
            save_png(os.path.join(d, "bev.png"), rec.bev)
        index.append(name)
    with open(os.path.join(root, "index.json"), "w") as fh:
        json.dump({"version": 1, "scenes": index}, fh)


def read_dataset(root) -> List[DatasetRecord]:
    with open(os.path.join(root, "index.json")) as fh:
        index = json.load(fh)
    records = []
    for name in index["scenes"]:
        d = os.path.join(root, name)
        with open(os.path.join(d, "meta.json")) as fh:
            meta = json.load(fh)
        imgs = np.stack([load_png(os.path.join(d, f"view_{i:03d}.png"))
                         for i in range(meta["n_views"])]).astype(np.float32) / 255.0
        depths = nft.load_tensor(os.path.join(d, "depth.nft"))
        if depths.shape != imgs.shape[:3] or list(imgs.shape[1:3]) != meta["image_shape"]:
            raise nft.NFTFormatError(f"{name}: extent mismatch between depth and images")
        bev_path = os.path.join(d, "bev.png")
        bev = load_png(bev_path) if os.path.exists(bev_path) else None
        scene = SceneDescription.from_json(meta["scene"]) if meta.get("scene") else None
        records.append(DatasetRecord(meta["scene_id"], imgs, depths,
                                     [CameraPose.from_json(p) for p in meta["poses"]], scene, bev))
    return records

import collections
import dataclasses
import math

import numpy as np
import pytest

from nfldm import nft
from nfldm.camera import CameraPose, lift_pixel, project_points
from nfldm.synthworld import (BEV_LEGEND, WorldConfig, all_poses, bev_to_onehot, generate_scene, make_record,
                              rasterize_bev, read_dataset, render_ground_truth, rig_poses, write_dataset)

CFG = WorldConfig()


def test_scene_determinism_and_bounds():
    a, b = generate_scene(3, CFG), generate_scene(3, CFG)
    assert a.to_json() == b.to_json()
    assert generate_scene(4, CFG).to_json() != a.to_json()
    for box in a.boxes:
        assert all(abs(c) + h <= CFG.half_extent + 1e-9 for c, h in zip(box.center[:2], box.half[:2]))
        assert all(0 <= v <= 1 for v in box.albedo)
        assert box.center[2] == pytest.approx(box.half[2])


def test_box_count_distribution():
    counts = collections.Counter(len(generate_scene(s, CFG).boxes) for s in range(1000))
    assert set(counts) <= set(range(CFG.min_boxes, CFG.max_boxes + 1))
    freq = np.array([counts[k] for k in range(CFG.min_boxes, CFG.max_boxes + 1)]) / 1000
    assert np.all(np.abs(freq - 1 / len(freq)) < 0.06)


def test_zero_box_scene():
    cfg = dataclasses.replace(CFG, min_boxes=0, max_boxes=0)
    scene = generate_scene(0, cfg)
    assert scene.boxes == []
    rgb, depth = render_ground_truth(scene, rig_poses(scene, cfg, 0)[1], 16)
    colours = {tuple(np.round(c, 5)) for c in rgb.reshape(-1, 3)}
    assert len(colours) <= 2


def test_camera_looking_down_sees_flat_ground():
    cfg = dataclasses.replace(CFG, min_boxes=0, max_boxes=0)
    scene = generate_scene(0, cfg)
    down = CameraPose(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 2.5]), 8.0, 8.0, 8.0, 8.0)
    rgb, depth = render_ground_truth(scene, down, 16)
    assert np.allclose(depth, 2.5, atol=1e-5)
    assert np.allclose(rgb, np.asarray(scene.ground_color) * scene.brightness(), atol=1e-6)


def test_sky_pixels():
    scene = generate_scene(0, CFG)
    up = CameraPose(np.diag([1.0, -1.0, -1.0]) @ np.diag([1.0, -1.0, -1.0]) @ np.diag([1.0, 1.0, 1.0]),
                    np.array([0.0, 0.0, 30.0]), 8.0, 8.0, 8.0, 8.0)
    up = CameraPose(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([0.0, 0.0, 30.0]), 8, 8, 8, 8)
    rgb, depth = render_ground_truth(scene, up, 8, far=14.0)
    assert np.allclose(depth, 14.0) and np.allclose(rgb, scene.sky_color)


def test_rig_layout():
    scene = generate_scene(1, CFG)
    poses = all_poses(scene, CFG)
    assert len(poses) == 6 * CFG.n_frames
    fwd = np.array([p.rotation[:, 2] for p in rig_poses(scene, CFG, 0)])
    yaws = np.degrees(np.arctan2(fwd[:, 1], fwd[:, 0]) - scene.heading)
    yaws = (yaws + 180) % 360 - 180
    assert np.allclose(np.sort(yaws), [-120, -60, 0, 60, 120, 180], atol=1e-6) or \
        np.allclose(np.sort(yaws), [-180, -120, -60, 0, 60, 120], atol=1e-6)


def test_multiview_consistency():
    rec = make_record(5, CFG)
    a, b = 1, 6 + 1  # front camera at frames 0 and 1
    pa, pb = rec.poses[a], rec.poses[b]
    checked = 0
    for v in range(0, 32, 3):
        for u in range(0, 32, 3):
            d = rec.depths[a, v, u]
            if d <= 0:
                continue
            x = lift_pixel(pa, (u + 0.5, v + 0.5), d)
            uv, z = project_points(pb, x[None])
            ub, vb = uv[0]
            if not (0 <= ub < 32 and 0 <= vb < 32) or z[0] <= 0:
                continue
            db = rec.depths[b, int(vb), int(ub)]
            if db > 0 and abs(db - z[0]) < 0.05 * z[0]:  # visible in both
                xb = lift_pixel(pb, (ub, vb), z[0])
                assert np.linalg.norm(xb - x) < 1e-6
                uv2, _ = project_points(pb, lift_pixel(pb, (int(ub) + 0.5, int(vb) + 0.5), db)[None])
                assert np.all(np.abs(uv2[0] - uv[0]) <= 1.0)
                checked += 1
    assert checked > 20


def test_bev_legend_and_onehot():
    scene = generate_scene(2, CFG)
    bev = rasterize_bev(scene, 16)
    oh = bev_to_onehot(bev)
    assert oh.shape == (len(BEV_LEGEND), 16, 16) and np.allclose(oh.sum(0), 1)
    assert oh[2].sum() > 0 and oh[0].sum() == 0


def test_dataset_round_trip(tmp_path):
    recs = [make_record(s, dataclasses.replace(CFG, image_size=16)) for s in (0, 1)]
    write_dataset(recs, tmp_path)
    back = read_dataset(tmp_path)
    for r, b in zip(recs, back):
        assert np.array_equal(b.depths, r.depths)
        assert np.array_equal(np.round(b.images * 255), np.round(r.images * 255))
        assert np.array_equal(b.bev, r.bev)
        assert all(np.allclose(p.rotation, q.rotation) for p, q in zip(r.poses, b.poses))
        assert b.scene.to_json() == r.scene.to_json()
    path = tmp_path / "scene_000000" / "depth.nft"
    raw = bytearray(path.read_bytes())
    raw[:4] = b"BAD!"
    path.write_bytes(bytes(raw))
    with pytest.raises(nft.NFTFormatError):
        read_dataset(tmp_path)


def test_extent_mismatch(tmp_path):
    rec = make_record(0, dataclasses.replace(CFG, image_size=16))
    write_dataset([rec], tmp_path)
    nft.save_tensor(tmp_path / "scene_000000" / "depth.nft", np.zeros((54, 8, 8), np.float32))
    with pytest.raises(nft.NFTFormatError):
        read_dataset(tmp_path)


def test_sparse_depth_flag():
    rec = make_record(0, dataclasses.replace(CFG, depth_keep=0.3, image_size=16))
    dense = make_record(0, dataclasses.replace(CFG, image_size=16))
    kept = (rec.depths > 0).sum() / (dense.depths > 0).sum()
    assert 0.2 < kept < 0.4
    assert np.array_equal(rec.depths[rec.depths > 0], dense.depths[rec.depths > 0])

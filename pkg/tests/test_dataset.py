import json
import os
import shutil

import numpy as np
import pytest

from nna.body import PoseParams, forward_skin, posed_capsule_segments
from nna.dataset import (
    BehindCameraError,
    CameraModel,
    SyntheticSceneSpec,
    generate_synthetic,
    leave_one_out_batches,
    load_capture,
    look_at_camera,
    pixel_rays,
    project,
    project_batch,
    ray_capsule_depth,
    shade_image,
    srgb_decode,
    srgb_encode,
    unproject,
)


def test_project_basics():
    cam = look_at_camera(np.array([0.0, 0.0, -2.0]), [0, 0, 0], 100.0, 64, 64)
    uv, depth = project(cam, np.array([0.0, 0.0, 0.0]))
    assert np.allclose(uv, [32.0, 32.0]) and abs(depth - 2.0) < 1e-12
    # focal 100: a 0.1-offset point at unit depth lands 10 px off center
    K = np.array([[100.0, 0, 32], [0, 100.0, 32], [0, 0, 1]])
    cam2 = CameraModel(K, np.eye(3), np.zeros(3), 64, 64)
    uv, depth = project(cam2, np.array([0.1, 0.0, 1.0]))
    assert np.allclose(uv, [42.0, 32.0]) and abs(depth - 1.0) < 1e-12
    with pytest.raises(BehindCameraError):
        project(cam2, np.array([0.0, 0.0, -1.0]))


def test_project_unproject_round_trip(rng):
    cam = look_at_camera(np.array([1.5, 1.2, -2.0]), [0, 1, 0], 80.0, 48, 48)
    pts = rng.uniform([-0.5, 0.3, -0.5], [0.5, 1.7, 0.5], size=(50, 3))
    uv, depth, valid = project_batch(cam, pts)
    assert valid.all()
    for i in range(len(pts)):
        back = unproject(cam, uv[i], depth[i])
        assert np.allclose(back, pts[i], atol=1e-9)
        uv2, d2 = project(cam, back)
        assert np.allclose(uv2, uv[i], atol=1e-9) and abs(d2 - depth[i]) < 1e-9


def test_pixel_rays_hit_their_pixels(rng):
    cam = look_at_camera(np.array([0.3, 1.0, -2.2]), [0, 1, 0], 60.0, 32, 32)
    pixels = rng.integers(0, 32, size=(20, 2))
    origins, dirs = pixel_rays(cam, pixels)
    t = rng.uniform(1.0, 3.0, size=20)
    pts = origins + t[:, None] * dirs
    uv, _, _ = project_batch(cam, pts)
    assert np.allclose(uv, pixels + 0.5, atol=1e-9)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(np.eye(3) * -1, np.eye(3), np.zeros(3), 8, 8)
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.eye(3) * 2, np.zeros(3), 8, 8)


def test_srgb_round_trip(rng):
    img = rng.uniform(size=(5, 5, 3))
    assert np.allclose(srgb_decode(srgb_encode(img)), img, atol=1e-12)


def test_capture_round_trip(tiny_capture):
    ds2 = load_capture(tiny_capture.root)
    assert ds2.n_frames == tiny_capture.n_frames
    for f in range(ds2.n_frames):
        assert np.array_equal(ds2.pose(f).joint_rotations, tiny_capture.pose(f).joint_rotations)
    for v, (a, b) in enumerate(zip(ds2.cameras, tiny_capture.cameras)):
        assert np.array_equal(a.intrinsics, b.intrinsics)
        assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(ds2.mask(1, 2), tiny_capture.mask(1, 2))
    assert np.array_equal(ds2.image(1, 2), tiny_capture.image(1, 2))
    tpl = ds2.template()
    tpl.validate()


def test_capture_missing_file_errors(tiny_capture, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(tiny_capture.root, broken)
    victim = broken / "masks" / "view_01" / "frame_000001.png"
    os.remove(victim)
    with pytest.raises(FileNotFoundError, match="frame_000001"):
        load_capture(str(broken))


def test_capture_pose_count_mismatch(tiny_capture, tmp_path):
    broken = tmp_path / "broken2"
    shutil.copytree(tiny_capture.root, broken)
    meta = json.loads((broken / "meta.json").read_text())
    meta["n_frames"] += 1
    (broken / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(FileNotFoundError, match="poses"):
        load_capture(str(broken))


def test_synthetic_mask_is_exact_zbuffer(tiny_capture):
    tpl = tiny_capture.template()
    pose = tiny_capture.pose(0)
    spec_palette = np.full((10, 3), 0.5)
    img, mask, depth = shade_image(tpl, pose, tiny_capture.cameras[0], spec_palette,
                                   np.array([0.3, 0.8, 0.5]))
    assert np.array_equal(mask, np.isfinite(depth) & (depth < np.inf))
    assert np.array_equal(tiny_capture.mask(0, 0), mask)
    # background stays black, foreground shaded
    assert np.all(img[~mask] == 0)
    assert img[mask].min() > 0


def test_mirrored_cameras_have_mirror_consistent_silhouettes(small_proxy):
    pose = PoseParams.identity(small_proxy.n_joints, small_proxy.n_shape)
    palette = np.full((10, 3), 0.5)
    light = np.array([0.0, 1.0, 0.0])
    res = 96
    areas = []
    for sign in (+1.0, -1.0):
        eye = np.array([sign * 1.8, 1.1, -1.9])
        cam = look_at_camera(eye, [0, 1.0, 0], 1.3 * res, res, res)
        _, mask, _ = shade_image(small_proxy, pose, cam, palette, light)
        areas.append(mask.sum())
    assert abs(areas[0] - areas[1]) / max(areas) < 0.01


def test_rasterized_depth_matches_analytic_capsules(proxy):
    """Interior silhouette depths agree with closed-form ray-capsule hits."""
    pose = PoseParams.identity(proxy.n_joints, proxy.n_shape)
    res = 64
    cam = look_at_camera(np.array([2.3, 1.3, 0.8]), [0, 1.0, 0], 1.3 * res, res, res)
    palette = np.full((10, 3), 0.5)
    _, mask, depth = shade_image(proxy, pose, cam, palette, np.array([0.3, 0.8, 0.5]))
    a, b, r = posed_capsule_segments(proxy, pose)
    from scipy import ndimage

    interior = ndimage.binary_erosion(mask, iterations=2)
    ys, xs = np.nonzero(interior)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(ys), size=min(80, len(ys)), replace=False)
    origins, dirs = pixel_rays(cam, np.stack([xs[pick], ys[pick]], axis=1))
    px_footprint = depth[ys[pick], xs[pick]] / cam.intrinsics[0, 0]
    errs = []
    for i in range(len(pick)):
        t = ray_capsule_depth(origins[i], dirs[i], a, b, r)
        d_analytic = t * (cam.rotation @ dirs[i])[2]
        errs.append(abs(depth[ys[pick][i], xs[pick][i]] - d_analytic))
    errs = np.asarray(errs)
    # half-pixel footprint plus tessellation chord error
    assert np.median(errs / np.maximum(px_footprint, 1e-9)) < 0.5 + 0.2
    assert np.percentile(errs, 90) < 0.02


def test_leave_one_out_protocol(tiny_capture):
    gen = leave_one_out_batches(tiny_capture, seed=1)
    counts = np.zeros(tiny_capture.n_views)
    for _ in range(10000):
        b = next(gen)
        assert b["target_view"] not in b["input_views"]
        assert len(b["input_views"]) == 3
        counts[b["target_view"]] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 1 / tiny_capture.n_views) < 0.02)
    # seeded streams replay
    g1 = leave_one_out_batches(tiny_capture, seed=9)
    g2 = leave_one_out_batches(tiny_capture, seed=9)
    for _ in range(20):
        assert next(g1) == next(g2)
    from nna.dataset import CaptureDataset

    class TwoView:
        n_views = 2
        n_frames = 3

    with pytest.raises(ValueError):
        next(leave_one_out_batches(TwoView(), seed=0))


def test_generator_capsule_gt_files(tiny_capture):
    gt = os.path.join(tiny_capture.root, "gt", "capsules_000000.json")
    with open(gt) as f:
        d = json.load(f)
    tpl = tiny_capture.template()
    a, b, r = posed_capsule_segments(tpl, tiny_capture.pose(0))
    assert np.allclose(np.asarray(d["a"]), a)
    assert np.allclose(np.asarray(d["r"]), r)

"""Capture ingestion and the synthetic multi-view benchmark generator.

A capture directory holds cameras.json, per-frame pose JSONs, per-view PNG
images and binary masks, the body model container, and meta.json. The
synthetic generator rasterizes the capsule proxy with per-part albedo and a
fixed lambertian light, so every image comes with exact geometry for oracles.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _geomkernels as gk
from .body import (
    PoseParams,
    builtin_capsule_proxy,
    compute_joint_transforms,
    forward_skin,
    load_body_model,
    posed_capsule_segments,
    save_body_model,
)

GAMMA = 2.2


@dataclass
class CameraModel:
    intrinsics: np.ndarray   # [3, 3] upper-triangular, pixels
    rotation: np.ndarray     # [3, 3] world -> camera
    translation: np.ndarray  # [3]
    width: int
    height: int

    def __post_init__(self):
        K = self.intrinsics
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 1e-9:
            raise ValueError("intrinsics must be upper-triangular with positive focals")
        RtR = self.rotation @ self.rotation.T
        if np.max(np.abs(RtR - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "K": self.intrinsics.reshape(-1).tolist(),
            "R": self.rotation.reshape(-1).tolist(),
            "t": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["K"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["t"], dtype=np.float64).reshape(3),
            int(d["width"]),
            int(d["height"]),
        )


class BehindCameraError(ValueError):
    pass


def project(camera, x):
    """Pinhole projection of one point: ((u, v), depth). Raises behind camera."""
    xc = camera.rotation @ np.asarray(x, dtype=np.float64) + camera.translation
    if xc[2] <= 1e-6:
        raise BehindCameraError("point projects behind the camera")
    K = camera.intrinsics
    u = K[0, 0] * xc[0] / xc[2] + K[0, 2]
    v = K[1, 1] * xc[1] / xc[2] + K[1, 2]
    return np.array([u, v]), float(xc[2])


def project_batch(camera, pts):
    """Vectorized projection: (uv [N,2], depth [N], valid [N]); no exceptions."""
    pts = np.atleast_2d(pts)
    xc = pts @ camera.rotation.T + camera.translation
    depth = xc[:, 2]
    valid = depth > 1e-6
    z = np.where(valid, depth, 1.0)
    K = camera.intrinsics
    uv = np.stack(
        [K[0, 0] * xc[:, 0] / z + K[0, 2], K[1, 1] * xc[:, 1] / z + K[1, 2]], axis=1
    )
    return uv, depth, valid


def unproject(camera, uv, depth):
    K = camera.intrinsics
    x = (uv[0] - K[0, 2]) / K[0, 0] * depth
    y = (uv[1] - K[1, 2]) / K[1, 1] * depth
    return camera.rotation.T @ (np.array([x, y, depth]) - camera.translation)


def pixel_rays(camera, pixels=None):
    """World-space rays through pixel centers. pixels: [N, 2] (col, row) ints
    or None for the full image; returns (origins [N,3], dirs [N,3] unit)."""
    H, W = camera.height, camera.width
    if pixels is None:
        jj, ii = np.meshgrid(np.arange(W), np.arange(H))
        pixels = np.stack([jj.reshape(-1), ii.reshape(-1)], axis=1)
    pixels = np.atleast_2d(pixels)
    K = camera.intrinsics
    u = pixels[:, 0] + 0.5
    v = pixels[:, 1] + 0.5
    d_cam = np.stack(
        [(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones(len(pixels))], axis=1
    )
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def srgb_encode(img):
    return np.clip(img, 0.0, 1.0) ** (1.0 / GAMMA)


def srgb_decode(img):
    return np.clip(img, 0.0, 1.0) ** GAMMA


def save_image_png(path, img_linear):
    """Store a linear [0,1] float image as gamma-encoded 8-bit PNG."""
    data = np.round(srgb_encode(img_linear) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(arr)


def save_mask_png(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path).convert("L")) >= 128


# ---------------------------------------------------------------------------
# capture directory


class CaptureDataset:
    def __init__(self, root):
        self.root = root
        cam_path = os.path.join(root, "cameras.json")
        meta_path = os.path.join(root, "meta.json")
        for p in (cam_path, meta_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing capture file: {p}")
        with open(meta_path) as f:
            self.meta = json.load(f)
        with open(cam_path) as f:
            cams = json.load(f)
        self.cameras = [CameraModel.from_dict(c) for c in cams]
        self.n_views = int(self.meta["n_views"])
        self.n_frames = int(self.meta["n_frames"])
        self.fps = float(self.meta.get("fps", 30.0))
        if len(self.cameras) != self.n_views:
            raise ValueError(f"{cam_path}: expected {self.n_views} cameras, found {len(self.cameras)}")
        hw = {(c.height, c.width) for c in self.cameras}
        if len(hw) != 1:
            raise ValueError(f"{cam_path}: cameras disagree on image size")
        self.height, self.width = hw.pop()
        self.poses = []
        for fidx in range(self.n_frames):
            p = os.path.join(root, "poses", f"frame_{fidx:06d}.json")
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing pose file: {p}")
            with open(p) as f:
                self.poses.append(PoseParams.from_dict(json.load(f)))
        for fidx in range(self.n_frames):
            for v in range(self.n_views):
                for kind in ("images", "masks"):
                    p = self._path(kind, v, fidx)
                    if not os.path.exists(p):
                        raise FileNotFoundError(f"missing capture file: {p}")
        self.body_path = os.path.join(root, "body_model.nar")
        if not os.path.exists(self.body_path):
            raise FileNotFoundError(f"missing capture file: {self.body_path}")
        self._template = None
        self._cache = {}
        self._cache_cap = 64

    def _path(self, kind, view, frame):
        return os.path.join(self.root, kind, f"view_{view:02d}", f"frame_{frame:06d}.png")

    def template(self):
        if self._template is None:
            self._template = load_body_model(self.body_path)
        return self._template

    def _cached(self, key, loader):
        if key not in self._cache:
            if len(self._cache) >= self._cache_cap:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = loader()
        return self._cache[key]

    def image(self, frame, view):
        path = self._path("images", view, frame)
        img = self._cached(("i", frame, view), lambda: load_image_png(path))
        if img.shape[:2] != (self.height, self.width):
            raise ValueError(f"{path}: image size mismatch")
        return img

    def mask(self, frame, view):
        path = self._path("masks", view, frame)
        m = self._cached(("m", frame, view), lambda: load_mask_png(path))
        if m.shape != (self.height, self.width):
            raise ValueError(f"{path}: mask size mismatch")
        return m

    def pose(self, frame):
        return self.poses[frame]


def load_capture(root):
    return CaptureDataset(root)


def leave_one_out_batches(dataset, seed, n_input=3):
    """Endless stream of {frame, input_views, target_view} dicts."""
    if dataset.n_views < n_input + 1:
        raise ValueError(f"need at least {n_input + 1} views, capture has {dataset.n_views}")
    rng = np.random.default_rng(seed)
    while True:
        frame = int(rng.integers(dataset.n_frames))
        perm = rng.permutation(dataset.n_views)
        yield {
            "frame": frame,
            "target_view": int(perm[0]),
            "input_views": sorted(int(v) for v in perm[1 : 1 + n_input]),
        }


# ---------------------------------------------------------------------------
# synthetic generator


DEFAULT_PALETTE = np.array([
    [0.82, 0.32, 0.26],  # torso
    [0.93, 0.78, 0.62],  # head
    [0.26, 0.47, 0.80],  # l upper arm
    [0.35, 0.68, 0.84],  # l forearm
    [0.24, 0.62, 0.33],  # r upper arm
    [0.55, 0.78, 0.35],  # r forearm
    [0.56, 0.36, 0.66],  # l thigh
    [0.74, 0.52, 0.82],  # l shin
    [0.83, 0.63, 0.23],  # r thigh
    [0.90, 0.78, 0.38],  # r shin
])


@dataclass
class SyntheticSceneSpec:
    n_frames: int = 50
    n_views: int = 6
    resolution: int = 128
    seed: int = 0
    shape_coeff: float = 0.0
    palette: np.ndarray | None = None
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.8, 0.55]))
    rig_radius: float = 2.6
    rig_elevations: tuple = (10.0, 25.0)
    rig_target_height: float = 1.0
    motion_amplitude: float = 1.0
    proxy_segments: int = 8
    proxy_radial: int = 24
    fps: float = 30.0

    def resolved_palette(self):
        if self.palette is not None:
            return np.asarray(self.palette)
        rng = np.random.default_rng(self.seed + 77)
        jitter = rng.uniform(-0.08, 0.08, DEFAULT_PALETTE.shape)
        return np.clip(DEFAULT_PALETTE + jitter, 0.05, 0.95)


def look_at_camera(eye, target, focal, width, height):
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    if abs(z @ up) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ np.asarray(eye, dtype=np.float64)
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, t, width, height)


def synthetic_rig(spec):
    cams = []
    res = spec.resolution
    focal = 1.25 * res
    target = np.array([0.0, spec.rig_target_height, 0.0])
    for k in range(spec.n_views):
        az = 2.0 * np.pi * k / spec.n_views + 0.35
        elev = np.deg2rad(spec.rig_elevations[k % len(spec.rig_elevations)])
        eye = target + spec.rig_radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(elev), np.sin(az) * np.cos(elev)]
        )
        cams.append(look_at_camera(eye, target, focal, res, res))
    return cams


_MOTION_LIMITS = {
    # joint index -> per-axis amplitude cap (radians)
    1: 0.12, 2: 0.15,
    3: 0.45, 4: 0.55, 5: 0.25,
    6: 0.45, 7: 0.55, 8: 0.25,
    9: 0.30, 10: 0.50, 11: 0.25,
    12: 0.30, 13: 0.50, 14: 0.25,
}


def motion_script(spec, n_joints=15, n_shape=1):
    """Smooth per-frame poses: sinusoidal joint angles with random phases."""
    rng = np.random.default_rng(spec.seed + 101)
    freqs = rng.uniform(0.3, 1.2, size=(n_joints, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_joints, 3))
    amps = np.zeros((n_joints, 3))
    for j, cap in _MOTION_LIMITS.items():
        amps[j] = rng.uniform(0.3, 1.0, size=3) * cap * spec.motion_amplitude
    root_amp = rng.uniform(0.2, 0.5) * spec.motion_amplitude
    poses = []
    for f in range(spec.n_frames):
        t = f / spec.fps
        rot = amps * np.sin(2.0 * np.pi * freqs * t + phases)
        trans = np.array([0.06 * np.sin(0.7 * t), 0.0, 0.06 * np.cos(0.9 * t)]) * spec.motion_amplitude
        rot[0] = np.array([0.0, root_amp * np.sin(0.5 * t + 0.3), 0.0])
        pose = PoseParams(rot, trans, np.full(n_shape, spec.shape_coeff))
        poses.append(pose)
    return poses


def shade_image(template, pose, camera, palette, light_dir):
    """Rasterize the posed proxy: lambertian per-part albedo, exact mask."""
    posed = forward_skin(template, pose)
    verts_cam = posed @ camera.rotation.T + camera.translation
    K = camera.intrinsics
    depth, face_id, bary = gk.rasterize(
        np.ascontiguousarray(verts_cam), np.ascontiguousarray(template.faces, dtype=np.int64),
        K[0, 0], K[1, 1], K[0, 2], K[1, 2], camera.height, camera.width,
    )
    mask = face_id >= 0
    img = np.zeros((camera.height, camera.width, 3))
    if mask.any():
        fids = face_id[mask]
        tri = template.faces[fids]
        v = posed[tri]                                   # [M, 3, 3]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        l = light_dir / np.linalg.norm(light_dir)
        lam = np.abs(n @ l)                              # double-sided, uniform-ish light
        part = template.part_ids[tri[:, 0]]
        albedo = palette[part]
        img[mask] = albedo * (0.35 + 0.65 * lam)[:, None]
    return img, mask, depth


def generate_synthetic(spec, out_root):
    """Write a full capture to disk; returns the loaded CaptureDataset."""
    os.makedirs(out_root, exist_ok=True)
    template = builtin_capsule_proxy(spec.proxy_segments, spec.proxy_radial)
    save_body_model(template, os.path.join(out_root, "body_model.nar"))
    cams = synthetic_rig(spec)
    with open(os.path.join(out_root, "cameras.json"), "w") as f:
        json.dump([c.to_dict() for c in cams], f, indent=1)
    poses = motion_script(spec)
    palette = spec.resolved_palette()
    os.makedirs(os.path.join(out_root, "poses"), exist_ok=True)
    gt_dir = os.path.join(out_root, "gt")
    os.makedirs(gt_dir, exist_ok=True)
    for v in range(spec.n_views):
        os.makedirs(os.path.join(out_root, "images", f"view_{v:02d}"), exist_ok=True)
        os.makedirs(os.path.join(out_root, "masks", f"view_{v:02d}"), exist_ok=True)
    for fidx, pose in enumerate(poses):
        with open(os.path.join(out_root, "poses", f"frame_{fidx:06d}.json"), "w") as f:
            json.dump(pose.to_dict(), f)
        a, b, r = posed_capsule_segments(template, pose)
        with open(os.path.join(gt_dir, f"capsules_{fidx:06d}.json"), "w") as f:
            json.dump({"a": a.tolist(), "b": b.tolist(), "r": r.tolist()}, f)
        for v, cam in enumerate(cams):
            img, mask, _ = shade_image(template, pose, cam, palette, spec.light_dir)
            save_image_png(os.path.join(out_root, "images", f"view_{v:02d}", f"frame_{fidx:06d}.png"), img)
            save_mask_png(os.path.join(out_root, "masks", f"view_{v:02d}", f"frame_{fidx:06d}.png"), mask)
    meta = {
        "n_frames": spec.n_frames,
        "n_views": spec.n_views,
        "fps": spec.fps,
        "generator_seed": spec.seed,
        "shape_coeff": spec.shape_coeff,
        "resolution": spec.resolution,
    }
    with open(os.path.join(out_root, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return CaptureDataset(out_root)


def ray_capsule_depth(origin, direction, seg_a, seg_b, radii):
    """Smallest positive ray parameter hitting any capsule (inf if none).

    Closed-form quadratic against the cylinder body plus both sphere caps."""
    best = np.inf
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    for a, b, r in zip(seg_a, seg_b, radii):
        axis = b - a
        L2 = axis @ axis
        # cylinder part
        oa = o - a
        dd = d - (d @ axis) / L2 * axis
        oo = oa - (oa @ axis) / L2 * axis
        A = dd @ dd
        B = 2.0 * (dd @ oo)
        C = oo @ oo - r * r
        if A > 1e-14:
            disc = B * B - 4 * A * C
            if disc > 0:
                for t in ((-B - np.sqrt(disc)) / (2 * A), (-B + np.sqrt(disc)) / (2 * A)):
                    if 1e-9 < t < best:
                        s = ((o + t * d) - a) @ axis / L2
                        if 0.0 <= s <= 1.0:
                            best = t
        # sphere caps
        for c in (a, b):
            oc = o - c
            B2 = 2.0 * (d @ oc)
            C2 = oc @ oc - r * r
            disc = B2 * B2 - 4 * C2
            if disc > 0:
                for t in ((-B2 - np.sqrt(disc)) / 2.0, (-B2 + np.sqrt(disc)) / 2.0):
                    if 1e-9 < t < best:
                        best = t
    return best

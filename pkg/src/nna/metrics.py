"""Masked image-quality metrics and the projected-bbox evaluation mask."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(pred, target, eval_mask):
    """10*log10(1/MSE) over masked pixels of [0,1] images; identical -> 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(eval_mask, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError("image shapes differ")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    diff = (pred - target)[mask]
    mse = float(np.mean(diff * diff))
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return w / w.sum()


def _window_means(img, w):
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    half = SSIM_WINDOW // 2
    return out[half:-half, half:-half]


def ssim(pred, target, eval_mask):
    """Gaussian-window SSIM averaged over fully-interior windows whose centers
    lie in the mask. Multichannel images average the per-channel scores."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(eval_mask, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError("image shapes differ")
    if pred.ndim == 3:
        return float(np.mean([ssim(pred[..., c], target[..., c], eval_mask)
                              for c in range(pred.shape[2])]))
    half = SSIM_WINDOW // 2
    centers = mask[half:-half, half:-half]
    if not centers.any():
        raise ValueError("empty evaluation mask")
    w = _gaussian_kernel()
    mu_p = _window_means(pred, w)
    mu_t = _window_means(target, w)
    pp = _window_means(pred * pred, w)
    tt = _window_means(target * target, w)
    pt = _window_means(pred * target, w)
    var_p = pp - mu_p * mu_p
    var_t = tt - mu_t * mu_t
    cov = pt - mu_p * mu_t
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    score = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
    )
    return float(score[centers].mean())


def _convex_hull_2d(points):
    """Andrew monotone chain; returns hull vertices counter-clockwise."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def eval_mask_from_bbox(bbox_min, bbox_max, camera, height=None, width=None):
    """Rasterized convex hull of the eight projected bbox corners.

    Degenerate (line-thin) hulls rasterize pixels within half a pixel of the
    segment so the mask is never empty."""
    H = camera.height if height is None else height
    W = camera.width if width is None else width
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    cam_pts = corners @ camera.rotation.T + camera.translation
    front = cam_pts[:, 2] > 1e-6
    if not front.any():
        raise ValueError("bounding box fully behind the camera")
    K = camera.intrinsics
    pts = cam_pts[front]
    uv = np.stack(
        [K[0, 0] * pts[:, 0] / pts[:, 2] + K[0, 2], K[1, 1] * pts[:, 1] / pts[:, 2] + K[1, 2]],
        axis=1,
    )
    hull = _convex_hull_2d(uv)
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    if len(hull) < 3:
        # thin mask along the projected segment
        a = hull[0]
        b = hull[-1] if len(hull) > 1 else hull[0]
        ab = b - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip(((jj - a[0]) * ab[0] + (ii - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dx = jj - (a[0] + t * ab[0])
        dy = ii - (a[1] + t * ab[1])
        return dx * dx + dy * dy <= 0.25
    inside = np.ones((H, W), dtype=bool)
    n = len(hull)
    area2 = sum(
        hull[i][0] * hull[(i + 1) % n][1] - hull[(i + 1) % n][0] * hull[i][1]
        for i in range(n)
    )
    sgn = 1.0 if area2 > 0 else -1.0
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        s = (b[0] - a[0]) * (ii - a[1]) - (b[1] - a[1]) * (jj - a[0])
        inside &= sgn * s >= 0
    return inside


def silhouette_iou(pred_mask, gt_mask):
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # {frame, view, psnr, ssim, iou}
    config: dict = field(default_factory=dict)

    def add(self, frame, view, psnr_db, ssim_score, iou=None):
        if not np.isfinite(psnr_db):
            psnr_db = PSNR_CAP
        if not (-1.0 <= ssim_score <= 1.0):
            raise ValueError("SSIM out of range")
        self.rows.append(
            {"frame": frame, "view": view, "psnr": psnr_db, "ssim": ssim_score, "iou": iou}
        )

    def summary(self):
        if not self.rows:
            return {"psnr": None, "ssim": None, "iou": None}
        mean = lambda k: float(np.mean([r[k] for r in self.rows if r[k] is not None]))
        return {"psnr": mean("psnr"), "ssim": mean("ssim"),
                "iou": mean("iou") if any(r["iou"] is not None for r in self.rows) else None}

    def to_dict(self):
        return {"rows": self.rows, "summary": self.summary(), "config": self.config}

"""Brute-force reference implementations the library is checked against.

Everything here is deliberately simple and independent of the library's
accelerated code paths.
"""

import numpy as np


def knn_brute(points, query, k):
    """Exhaustive scan; ties broken by lower vertex id."""
    d2 = np.sum((points - query) ** 2, axis=1)
    order = np.lexsort((np.arange(len(points)), d2))
    return order[:k], np.sqrt(d2[order[:k]])


def closest_point_triangle_np(p, a, b, c):
    """Ericson closest-point, written independently in plain numpy."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a.copy(), np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b.copy(), np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return a + t * ab, np.array([1 - t, t, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c.copy(), np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return a + t * ac, np.array([1 - t, 0.0, t])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), np.array([0.0, 1 - t, t])
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return a + ab * v + ac * w, np.array([1 - v - w, v, w])


def nearest_surface_brute(vertices, faces, p):
    """(distance, face id, point); ties to the lower face id."""
    best = (np.inf, -1, None)
    for fid, (ia, ib, ic) in enumerate(faces):
        cp, _ = closest_point_triangle_np(p, vertices[ia], vertices[ib], vertices[ic])
        d2 = float(np.sum((cp - p) ** 2))
        if d2 < best[0]:
            best = (d2, fid, cp)
    return np.sqrt(best[0]), best[1], best[2]


def moller_trumbore_np(p0, d, a, b, c):
    """Ray parameter of the intersection, or None (vectorizable scalar form)."""
    e1, e2 = b - a, c - a
    pv = np.cross(d, e2)
    det = e1 @ pv
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    tv = p0 - a
    u = (tv @ pv) * inv
    if u < 0 or u > 1:
        return None
    qv = np.cross(tv, e1)
    v = (d @ qv) * inv
    if v < 0 or u + v > 1:
        return None
    return (e2 @ qv) * inv


def segment_occluded_brute(vertices, faces, p0, p1, eps_t=1e-4):
    d = p1 - p0
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pv = np.cross(d, e2)
    det = np.einsum("fd,fd->f", e1, pv)
    ok = np.abs(det) >= 1e-14
    inv = np.where(ok, 1.0 / np.where(det == 0, 1.0, det), 0.0)
    tv = p0 - tri[:, 0]
    u = np.einsum("fd,fd->f", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = (qv @ d) * inv
    t = np.einsum("fd,fd->f", e2, qv) * inv
    hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > eps_t) & (t < 1 - eps_t)
    return bool(hit.any())


def neus_render_brute(sdf, k, colors):
    """Direct evaluation of the compositing formulas for one ray."""
    phi = 1.0 / (1.0 + np.exp(-k * np.asarray(sdf, dtype=np.float64)))
    alphas = np.maximum((phi[:-1] - phi[1:]) / phi[:-1], 0.0)
    rgb = np.zeros(3)
    T = 1.0
    mask = 0.0
    weights = []
    for i, a in enumerate(alphas):
        w = T * a
        rgb += w * colors[i]
        mask += w
        weights.append(w)
        T *= 1.0 - a
    return rgb, mask, np.asarray(weights)


def ssim_windows_brute(pred, target, mask, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window SSIM over valid windows whose centers are masked."""
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w1 = np.exp(-(x * x) / (2 * sigma * sigma))
    w1 /= w1.sum()
    W = np.outer(w1, w1)
    H, Wd = pred.shape
    scores = []
    c1, c2 = k1 * k1, k2 * k2
    for i in range(half, H - half):
        for j in range(half, Wd - half):
            if not mask[i, j]:
                continue
            p = pred[i - half : i + half + 1, j - half : j + half + 1]
            t = target[i - half : i + half + 1, j - half : j + half + 1]
            mp = (W * p).sum()
            mt = (W * t).sum()
            vp = (W * p * p).sum() - mp * mp
            vt = (W * t * t).sum() - mt * mt
            cov = (W * p * t).sum() - mp * mt
            scores.append(
                ((2 * mp * mt + c1) * (2 * cov + c2))
                / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
            )
    return float(np.mean(scores))


def psnr_brute(pred, target, mask):
    diff = (np.asarray(pred) - np.asarray(target))[np.asarray(mask, bool)]
    mse = np.mean(diff * diff)
    return min(10 * np.log10(1.0 / mse), 99.0) if mse > 0 else 99.0


def adam_scalar_steps(g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Hand-stepped Adam on one scalar parameter."""
    m = v = 0.0
    x = x0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x -= lr * mhat / (np.sqrt(vhat) + eps)
    return x

"""SDF volume rendering along geometry-guided rays: sigmoid-slope opacities
from consecutive SDF samples, transmittance compositing, and batched pixel,
patch, and image rendering. Compositing runs in posed-space depth order."""

from dataclasses import dataclass

import numpy as np

from .config import RenderConfig
from .deformation import canonicalize_batch
from .fields import sdf_with_gradient
from .neural import engine as E
from .spatial import sample_near_surface_batch


@dataclass
class RenderOutput:
    rgb: np.ndarray          # [3] in [0,1]
    mask: float              # accumulated opacity in [0,1]
    depth: float             # expected depth along the ray (diagnostic)
    weights: np.ndarray      # per-sample compositing weights (diagnostic)


def neus_alpha(s_i, s_next, k):
    """Opacity from two consecutive SDF samples: max((phi_i - phi_next)/phi_i, 0)."""
    if k <= 0:
        raise ValueError("k must be positive")
    s_i = np.asarray(s_i, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    phi_i = 1.0 / (1.0 + np.exp(-k * s_i))
    phi_n = 1.0 / (1.0 + np.exp(-k * s_next))
    return np.maximum((phi_i - phi_n) / np.maximum(phi_i, 1e-300), 0.0)


def composite(alphas, colors, depths=None):
    """Front-to-back transmittance compositing (plain numpy)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    T = np.concatenate([[1.0], np.cumprod(1.0 - alphas)[:-1]])
    w = T * alphas
    rgb = (w[:, None] * colors).sum(axis=0)
    # the weight sum is 1 - prod(1 - alpha) <= 1 exactly; clamp the few-ulp
    # excess the summed form can accumulate
    mask = float(min(w.sum(), 1.0))
    depth = float((w * depths).sum()) if depths is not None else 0.0
    return RenderOutput(rgb=rgb, mask=mask, depth=depth, weights=w)


def _neus_alpha_value(s_pairs_i, s_pairs_next, k_value):
    """Engine version of neus_alpha over [R, S-1] Values with scalar Value k."""
    dt = s_pairs_i.data.dtype.type
    phi_i = E.sigmoid(E.mul(k_value, s_pairs_i))
    phi_n = E.sigmoid(E.mul(k_value, s_pairs_next))
    denom = E.clip(phi_i, 1e-12, 1.0)
    return E.relu(E.div(E.sub(phi_i, phi_n), denom))


def _exclusive_transmittance(alpha):
    """T_i = prod_{j<i} (1 - alpha_j) along axis 1, as engine ops."""
    one_m = E.sub(E.constant(1.0, alpha.data.dtype.type), alpha)
    logs = E.log(E.clip(one_m, 1e-30, 1.0))
    csum = E.cumsum(logs, axis=1)
    R = alpha.data.shape[0]
    zeros = E.Value(np.zeros((R, 1), dtype=alpha.data.dtype))
    shifted = E.concat([zeros, E.getitem(csum, (slice(None), slice(0, -1)))], axis=1)
    return E.exp(shifted)


def _safe_unit(v):
    n = E.norm(v, axis=-1, keepdims=True, eps=1e-24)
    dt = v.data.dtype.type
    guard = n.data > 1e-9
    denom = E.where_mask(guard, n, E.Value(np.ones_like(n.data)))
    return E.div(v, denom)


def render_rays(scene, origins, dirs, rcfg: RenderConfig, jitter_coarse=None,
                jitter_fine=None, train=False):
    """Render a batch of rays through a SceneBundle.

    Returns a dict with per-ray Values 'rgb' [R,3] and 'mask' [R], per-sample
    'normals' (raw SDF gradients, for the Eikonal term), plus numpy
    diagnostics. With train=False everything is detached.
    """
    model = scene.model
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = len(origins)

    def sdf_probe(pts):
        with E.no_grad():
            f_geo = scene.geometry_features(pts)
            xt, _, _ = canonicalize_batch(scene.ctx_drive, pts, f_geo, model.residual)
            s, _ = model.sdf(xt)
        return s.data[:, 0].astype(np.float64)

    k_now = float(np.exp(model.log_k.data))
    sets = sample_near_surface_batch(
        origins, dirs, scene.ctx_drive.mesh_index, rcfg.band,
        rcfg.n_coarse, rcfg.n_fine, sdf_probe, k_now, jitter_coarse, jitter_fine,
    )
    hit = np.array([i for i, st in enumerate(sets) if len(st) >= 2], dtype=np.int64)
    dt = E.default_dtype()
    out = {
        "rgb": E.Value(np.zeros((n_rays, 3), dtype=dt)),
        "mask": E.Value(np.zeros(n_rays, dtype=dt)),
        "normals": None,
        "depth": np.zeros(n_rays),
        "hit": np.zeros(n_rays, dtype=bool),
        "weights": None,
    }
    if len(hit) == 0:
        return out
    out["hit"][hit] = True

    depths = np.stack([sets[i].depths for i in hit])          # [R, S]
    R, S = depths.shape
    pts = (origins[hit, None, :] + depths[:, :, None] * dirs[hit, None, :]).reshape(-1, 3)
    dirs_per_sample = np.repeat(dirs[hit], S, axis=0)

    with E._grad_mode(train):
        f_geo = scene.geometry_features(pts)
        x_tilde, phi, blend = canonicalize_batch(scene.ctx_drive, pts, f_geo, model.residual)
    if not train:
        x_tilde = E.variable(x_tilde.data)
    # the SDF forward always records its graph: normals are exact reverse-mode
    # gradients even at inference
    s, tail, n_raw = sdf_with_gradient(model.sdf, x_tilde, create_graph=train)
    if not train:
        s = E.Value(s.data)
        tail = None if tail is None else E.Value(tail.data)
        n_raw = E.Value(n_raw.data)
        x_tilde = E.Value(x_tilde.data)

    with E._grad_mode(train):
        d_can = np.einsum("bpq,bq->bp", blend, dirs_per_sample)
        d_can /= np.maximum(np.linalg.norm(d_can, axis=1, keepdims=True), 1e-12)
        n_unit = _safe_unit(n_raw)
        f_app = scene.appearance_features(x_tilde)

        k_value = model.neus_k() if train else E.Value(np.asarray(k_now, dtype=dt))
        s_mat = E.reshape(s, (R, S))
        alpha = _neus_alpha_value(
            E.getitem(s_mat, (slice(None), slice(0, -1))),
            E.getitem(s_mat, (slice(None), slice(1, None))),
            k_value,
        )
        T = _exclusive_transmittance(alpha)
        w = E.mul(T, alpha)                                   # [R, S-1]

        # color only where compositing weight can matter
        if rcfg.color_weight_cutoff > 0:
            keep_mat = w.data >= rcfg.color_weight_cutoff
            keep = np.zeros((R, S), dtype=bool)
            keep[:, :-1] = keep_mat
            keep_idx = np.nonzero(keep.reshape(-1))[0]
            if len(keep_idx) == 0:
                keep_idx = np.array([0])
        else:
            keep_idx = np.arange(R * S)

        def _sel(v):
            return E.take_axis(v, keep_idx, axis=0) if len(keep_idx) != R * S else v

        rgb_sel = model.color(
            _sel(x_tilde),
            _sel(E.Value(d_can.astype(dt))),
            _sel(n_unit),
            _sel(s),
            _sel(f_app),
            None if tail is None else _sel(tail),
        )
        if len(keep_idx) != R * S:
            rgb_samples = E.scatter_add_axis(rgb_sel, keep_idx, (R * S, 3), axis=0)
        else:
            rgb_samples = rgb_sel
        c_mat = E.getitem(E.reshape(rgb_samples, (R, S, 3)), (slice(None), slice(0, -1), slice(None)))

        w3 = E.reshape(w, (R, S - 1, 1))
        rgb_hit = E.vsum(E.mul(w3, c_mat), axis=1)            # [R, 3]
        mask_hit = E.vsum(w, axis=1)                          # [R]

        out["rgb"] = E.scatter_add_axis(rgb_hit, hit, (n_rays, 3), axis=0)
        out["mask"] = E.scatter_add_axis(mask_hit, hit, (n_rays,), axis=0)
        out["normals"] = n_raw
        out["weights"] = w.data
        out["depth"][hit] = (w.data * depths[:, :-1]).sum(axis=1)
    return out


def render_ray(scene, ray, rcfg: RenderConfig, jitter_coarse=None, jitter_fine=None):
    """Single-ray convenience wrapper; returns a RenderOutput."""
    res = render_rays(
        scene, ray.origin[None, :], ray.direction[None, :], rcfg,
        None if jitter_coarse is None else jitter_coarse[None, :],
        None if jitter_fine is None else jitter_fine[None, :],
        train=False,
    )
    w = res["weights"][0] if res["weights"] is not None else np.zeros(0)
    return RenderOutput(
        rgb=res["rgb"].data[0].astype(np.float64),
        mask=float(res["mask"].data[0]),
        depth=float(res["depth"][0]),
        weights=w,
    )


def pixel_jitters(seed, n_pixels, n_coarse, n_fine):
    """Stratified jitter for every pixel of an image, seeded once; slicing by
    global pixel index keeps patches identical to full-image renders."""
    gen = np.random.Generator(np.random.Philox(seed))
    jc = gen.random((n_pixels, n_coarse))
    jf = gen.random((n_pixels, max(n_fine, 1)))
    return jc, jf


def render_image(scene, camera, rcfg: RenderConfig, seed=0):
    """Full-frame render: (rgb [H,W,3], mask [H,W], depth [H,W])."""
    from .dataset import pixel_rays

    H, W = camera.height, camera.width
    jc, jf = pixel_jitters(seed, H * W, rcfg.n_coarse, rcfg.n_fine)
    origins, dirs = pixel_rays(camera)
    chunks = [
        (i, min(i + rcfg.chunk_rays, H * W)) for i in range(0, H * W, rcfg.chunk_rays)
    ]

    def run(span):
        a, b = span
        res = render_rays(scene, origins[a:b], dirs[a:b], rcfg, jc[a:b], jf[a:b], train=False)
        return res["rgb"].data.copy(), res["mask"].data.copy(), res["depth"].copy()

    if rcfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=rcfg.workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    rgb = np.concatenate([r[0] for r in results]).reshape(H, W, 3)
    mask = np.concatenate([r[1] for r in results]).reshape(H, W)
    depth = np.concatenate([r[2] for r in results]).reshape(H, W)
    return rgb, mask, depth


def render_patch(scene, camera, rect, rcfg: RenderConfig, seed=0, train=False):
    """Render a contiguous pixel rectangle (x0, y0, w, h).

    Uses the same per-pixel jitter stream as render_image, so an untrained
    crop comparison is exact. With train=True the returned dict carries the
    graph for loss terms."""
    from .dataset import pixel_rays

    x0, y0, w, h = rect
    H, W = camera.height, camera.width
    if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
        raise ValueError("patch rectangle out of image bounds")
    jj, ii = np.meshgrid(np.arange(x0, x0 + w), np.arange(y0, y0 + h))
    pixels = np.stack([jj.reshape(-1), ii.reshape(-1)], axis=1)
    pix_ids = pixels[:, 1] * W + pixels[:, 0]
    jc, jf = pixel_jitters(seed, H * W, rcfg.n_coarse, rcfg.n_fine)
    origins, dirs = pixel_rays(camera, pixels)
    res = render_rays(scene, origins, dirs, rcfg, jc[pix_ids], jf[pix_ids], train=train)
    if train:
        res["shape"] = (h, w)
        return res
    return res["rgb"].data.reshape(h, w, 3), res["mask"].data.reshape(h, w)

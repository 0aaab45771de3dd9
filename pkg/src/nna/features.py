"""Per-point conditioning features: occlusion-aware fused image features and
pose-aware surface features diffused from the proxy mesh.

Geometry features follow the driving pose; appearance features are anchored
to the canonical pose so they cannot depend on how the body is driven.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import project_batch
from .neural import engine as E
from .neural.conv import sample_bilinear
from .neural.layers import MLP, positional_encoding_dim
from .spatial import VertexKnnIndex

OCCLUSION_BIAS = -10.0


@dataclass
class MultiViewInput:
    images: list      # per view [H, W, 3] float in [0,1]
    masks: list       # per view [H, W] bool
    cameras: list     # CameraModel per view
    pose: object      # PoseParams at capture time

    def __post_init__(self):
        n = len(self.images)
        if not (1 <= n <= 8):
            raise ValueError("between 1 and 8 input views are supported")
        if not (len(self.masks) == len(self.cameras) == n):
            raise ValueError("images, masks, cameras must align")
        hw = {im.shape[:2] for im in self.images}
        hw |= {m.shape for m in self.masks}
        if len(hw) != 1:
            raise ValueError("all views must share the image size")

    @property
    def n_views(self):
        return len(self.images)

    @classmethod
    def from_capture(cls, dataset, frame, views):
        return cls(
            images=[dataset.image(frame, v) for v in views],
            masks=[dataset.mask(frame, v) for v in views],
            cameras=[dataset.cameras[v] for v in views],
            pose=dataset.pose(frame),
        )


@dataclass
class ViewFeatureSet:
    feature_maps: list          # per view Value [56, H, W]
    occluded_vertices: np.ndarray  # [N_v, C] bool (posed-mesh occlusion cache)
    cameras: list
    input_pose: object
    posed_vertices: np.ndarray  # proxy vertices at the input pose


@dataclass
class SurfaceFeatureSet:
    features: object            # Value [N_v, 56]
    tag: str                    # input-pose | target-pose | canonical-pose
    posed_vertices: np.ndarray  # vertex positions the features live on
    knn: VertexKnnIndex


def encode_views(encoder, mv_input, deform_ctx_input):
    """Run the image encoder per view and cache per-vertex occlusion flags
    against the proxy posed at the input pose."""
    maps = []
    dt = E.default_dtype()
    for img, msk in zip(mv_input.images, mv_input.masks):
        stacked = np.concatenate([img, msk[..., None].astype(np.float64)], axis=2)
        maps.append(encoder(E.Value(stacked.astype(dt))))
    posed_v = deform_ctx_input.posed_vertices
    occ = np.zeros((len(posed_v), mv_input.n_views), dtype=bool)
    for c, cam in enumerate(mv_input.cameras):
        centers = np.broadcast_to(cam.center, posed_v.shape)
        occ[:, c] = deform_ctx_input.mesh_index.segments_occluded(centers, posed_v)
        uv, depth, valid = project_batch(cam, posed_v)
        out = (
            ~valid
            | (uv[:, 0] < 0) | (uv[:, 0] > cam.width)
            | (uv[:, 1] < 0) | (uv[:, 1] > cam.height)
        )
        occ[:, c] |= out
    return ViewFeatureSet(
        feature_maps=maps,
        occluded_vertices=occ,
        cameras=mv_input.cameras,
        input_pose=mv_input.pose,
        posed_vertices=posed_v,
    )


def project_points_value(camera, x):
    """Differentiable pinhole projection of a [B, 3] Value.

    Returns (uv Value [B, 2], in_frame numpy bool [B]). Points behind the
    camera or outside the frame are flagged (their features are zeroed)."""
    dt = x.data.dtype.type
    R = E.Value(camera.rotation.T.astype(dt))
    t = E.Value(camera.translation.astype(dt))
    xc = E.add(E.matmul(x, R), t)
    z = E.getitem(xc, (slice(None), slice(2, 3)))
    valid = z.data[:, 0] > 1e-6
    z_safe = E.where_mask(valid[:, None], z, E.Value(np.ones_like(z.data)))
    K = camera.intrinsics
    fx = E.constant(K[0, 0], dt)
    fy = E.constant(K[1, 1], dt)
    u = E.add(E.mul(fx, E.div(E.getitem(xc, (slice(None), slice(0, 1))), z_safe)), E.constant(K[0, 2], dt))
    v = E.add(E.mul(fy, E.div(E.getitem(xc, (slice(None), slice(1, 2))), z_safe)), E.constant(K[1, 2], dt))
    uv = E.concat([u, v], axis=1)
    ud, vd = uv.data[:, 0], uv.data[:, 1]
    in_frame = valid & (ud >= 0) & (ud <= camera.width) & (vd >= 0) & (vd <= camera.height)
    return uv, in_frame


def pixel_aligned_features(vfs, x):
    """Sample every view's feature map at the projections of x.

    x: [B, 3] Value or ndarray. Returns (feats Value [B, C, 56],
    out_of_frame numpy bool [B, C]); out-of-frame samples are zero."""
    x = E.as_value(x)
    per_view = []
    flags = []
    for fmap, cam in zip(vfs.feature_maps, vfs.cameras):
        uv, in_frame = project_points_value(cam, x)
        feat = sample_bilinear(fmap, uv, in_frame=in_frame)
        per_view.append(E.reshape(feat, (feat.data.shape[0], 1, feat.data.shape[1])))
        flags.append(~in_frame)
    return E.concat(per_view, axis=1), np.stack(flags, axis=1)


def pixel_aligned_feature(vfs, view, x):
    """Single-view, single-point variant: (feature [56], occluded_flag)."""
    x = np.asarray(x, dtype=np.float64)[None, :]
    feats, flags = pixel_aligned_features(vfs, E.Value(x.astype(E.default_dtype())))
    return feats.data[0, view], bool(flags[0, view])


def fuse_views(head, feats, occluded, bias=OCCLUSION_BIAS, use_occlusion_bias=True):
    """Attention fusion over views with an additive logit penalty on occluded
    views. feats: [..., C, 56] Value; occluded: [..., C] bool."""
    dt = feats.data.dtype.type
    if use_occlusion_bias:
        b = E.Value((occluded.astype(np.float64) * bias).astype(dt))
    else:
        b = E.Value(np.zeros(occluded.shape, dtype=dt))
    return head(feats, b)


def diffuse_to_point(mlp, surface, x, K=8, eps=1e-6):
    """Inverse-distance learned blend of the K nearest vertex features.

    x: [B, 3] Value (gradients flow through offsets and weights; the KNN
    selection itself is frozen). Returns Value [B, 56]."""
    x = E.as_value(x)
    ids, _ = surface.knn.query(x.data.astype(np.float64), K)
    B, K_eff = ids.shape
    dt = x.data.dtype.type
    vk = surface.posed_vertices[ids.reshape(-1)].reshape(B, K_eff, 3)
    feats_k = E.reshape(
        E.take_axis(surface.features, ids.reshape(-1), axis=0), (B, K_eff, -1)
    )
    offs = E.sub(E.reshape(x, (B, 1, 3)), E.Value(vk.astype(dt)))
    dist = E.norm(offs, axis=-1, keepdims=True, eps=1e-24)
    inv = E.div(E.constant(1.0, dt), E.add(dist, E.constant(eps, dt)))
    w = E.div(inv, E.vsum(inv, axis=1, keepdims=True))
    blended = mlp(E.concat([feats_k, offs], axis=-1))
    return E.vsum(E.mul(w, blended), axis=1)


def make_diffusion_mlp(rng, dim, name):
    return MLP([dim + 3, 2 * dim, dim], rng, name, activation="relu")

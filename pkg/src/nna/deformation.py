"""Posed-space to canonical-space warping: blended inverse joint transforms
driven by nearest-surface skinning weights, plus a bounded learned residual.

Skinning weights (and the nearest-point selection behind them) are treated as
constants in backprop; the residual MLP is the differentiable part.
"""

from dataclasses import dataclass

import numpy as np

from .body import compute_joint_transforms, forward_skin, shape_displacements
from .neural import engine as E
from .neural.layers import MLP, Module, positional_encoding, positional_encoding_dim
from .spatial import MeshIndex, TriangleMesh

RESIDUAL_BOUND = 0.1   # meters
DJ_PE_FREQS = 2


@dataclass
class DeformationContext:
    template: object
    pose: object
    posed_vertices: np.ndarray
    mesh_index: MeshIndex
    inv_rot: np.ndarray        # [N_J, 3, 3] posed -> canonical
    inv_trans: np.ndarray      # [N_J, 3]
    posed_joints: np.ndarray   # [N_J, 3]
    shape_disp: np.ndarray     # [N_v, 3] per-vertex shape offset vs canonical
    root_rotation: np.ndarray  # [3, 3] world rotation of the root joint


def build_deformation_context(template, pose):
    fwd = compute_joint_transforms(template, pose)
    inv = fwd.inverse()
    posed_v = forward_skin(template, pose, transforms=fwd)
    mesh = TriangleMesh(posed_v, template.faces)
    comps = None
    if template.part_ids is not None:
        comps = template.part_ids[template.faces[:, 0]]
    return DeformationContext(
        template=template,
        pose=pose,
        posed_vertices=posed_v,
        mesh_index=MeshIndex(mesh, face_components=comps),
        inv_rot=inv.rotations,
        inv_trans=inv.translations,
        posed_joints=fwd.posed_joints(template.joints_rest),
        shape_disp=shape_displacements(template, pose.shape_coeffs),
        root_rotation=fwd.rotations[0],
    )


def skinning_at_points(ctx, x):
    """Nearest-surface skinning data for posed points x [B, 3].

    Returns (weights [B, N_J], shape offsets [B, 3], surface distance [B]).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, fid, bary, dist = ctx.mesh_index.nearest_surface_point(x)
    tri = ctx.template.faces[fid]                      # [B, 3]
    w = np.einsum("bk,bkj->bj", bary, ctx.template.skin_weights[tri])
    dv = np.einsum("bk,bkd->bd", bary, ctx.shape_disp[tri])
    return w, dv, dist


def inverse_skin_batch(ctx, x):
    """Blended inverse skinning of posed points [B, 3].

    Returns (canonical points [B, 3], blended rotations [B, 3, 3],
    weights [B, N_J]).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w, dv, _ = skinning_at_points(ctx, x)
    A = np.einsum("bj,jpq->bpq", w, ctx.inv_rot)
    phi = np.einsum("bpq,bq->bp", A, x - dv) + w @ ctx.inv_trans
    return phi, A, w


def inverse_skin(x, ctx):
    """Single-point canonicalization by inverse skinning only."""
    phi, _, _ = inverse_skin_batch(ctx, np.asarray(x, dtype=np.float64)[None, :])
    return phi[0]


def forward_skin_points(template, pose, canonical_index, x_canonical, fwd_transforms=None):
    """Map free canonical points into the pose's space (inverse of Eq.-10-style
    warping in single-weight regions): weights come from the nearest canonical
    surface point; the shape offset is added before the rigid blend."""
    if fwd_transforms is None:
        fwd_transforms = compute_joint_transforms(template, pose)
    x = np.atleast_2d(np.asarray(x_canonical, dtype=np.float64))
    _, fid, bary, _ = canonical_index.nearest_surface_point(x)
    tri = template.faces[fid]
    w = np.einsum("bk,bkj->bj", bary, template.skin_weights[tri])
    dv = np.einsum("bk,bkd->bd", bary, shape_displacements(template, pose.shape_coeffs)[tri])
    A = np.einsum("bj,jpq->bpq", w, fwd_transforms.rotations)
    return np.einsum("bpq,bq->bp", A, x + dv) + w @ fwd_transforms.translations


def joint_displacements_batch(ctx, x):
    """[B, 3*N_J] offsets from each posed joint to the query point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x[:, None, :] - ctx.posed_joints[None, :, :]
    return d.reshape(len(x), -1)


def joint_displacements(x, ctx):
    return joint_displacements_batch(ctx, np.asarray(x, dtype=np.float64)[None, :])[0]


class ResidualNet(Module):
    """Bounded correction field: tanh-squashed MLP over geometry features and
    encoded joint displacements. The output head starts at zero, so freshly
    built models deform by pure inverse skinning."""

    def __init__(self, rng, n_joints, feat_dim, name="residual", bound=RESIDUAL_BOUND,
                 hidden=128, n_hidden=4):
        self.bound = bound
        self.dj_dim = positional_encoding_dim(3 * n_joints, DJ_PE_FREQS)
        dims = [feat_dim + self.dj_dim] + [hidden] * n_hidden + [3]
        self.mlp = MLP(dims, rng, name, activation="softplus100", zero_init_last=True)

    def __call__(self, f_geo, d_j):
        """f_geo: [B, feat_dim] Value; d_j: [B, 3*N_J] Value or array."""
        dj = positional_encoding(E.as_value(d_j), DJ_PE_FREQS)
        raw = self.mlp(E.concat([E.as_value(f_geo), dj], axis=-1))
        dt = raw.data.dtype.type
        b = E.constant(self.bound, dt)
        # radial tanh squash: the displacement NORM never exceeds the bound,
        # and the map is the identity to first order near zero
        n = E.norm(raw, axis=-1, keepdims=True, eps=1e-24)
        factor = E.div(E.mul(b, E.tanh(E.div(n, b))), n)
        return E.mul(raw, factor)


def residual_deform(x, f_geo, d_j, net):
    """Single-point residual displacement (numpy in/out)."""
    out = net(
        E.as_value(np.atleast_2d(f_geo)),
        E.as_value(np.atleast_2d(d_j)),
    )
    return out.data[0]


def canonicalize_batch(ctx, x, f_geo, net):
    """Full warp of posed points into canonical space.

    x: [B, 3] numpy; f_geo: [B, F] Value (or None with net=None).
    Returns (x_tilde Value [B, 3], phi [B, 3] numpy, blend_rot [B, 3, 3]).
    """
    phi, A, _ = inverse_skin_batch(ctx, x)
    dt = E.default_dtype()
    if net is None:
        return E.Value(phi.astype(dt)), phi, A
    d_j = joint_displacements_batch(ctx, x)
    delta = net(f_geo, E.Value(d_j.astype(dt)))
    x_tilde = E.add(E.Value(phi.astype(dt)), delta)
    return x_tilde, phi, A


def canonicalize(x, ctx, f_geo=None, net=None):
    """Single-point x-tilde as plain numpy."""
    x = np.asarray(x, dtype=np.float64)[None, :]
    if net is None:
        phi, _, _ = inverse_skin_batch(ctx, x)
        return phi[0]
    xt, _, _ = canonicalize_batch(ctx, x, E.as_value(np.atleast_2d(f_geo)), net)
    return xt.data[0]

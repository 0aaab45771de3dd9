"""The full animatable-human model: image encoder, fusion heads, mesh GCNs,
diffusion MLPs, residual deformation, canonical fields, and the compositing
sharpness scalar. A SceneBundle binds a trained model to one multi-view input
and one driving pose and serves per-point features to the renderer."""

import numpy as np

from .body import shape_displacements
from .config import ModelConfig
from .deformation import (
    ResidualNet,
    build_deformation_context,
    forward_skin_points,
    inverse_skin_batch,
)
from .features import (
    MultiViewInput,
    SurfaceFeatureSet,
    diffuse_to_point,
    encode_views,
    fuse_views,
    make_diffusion_mlp,
    pixel_aligned_features,
)
from .fields import ColorNetwork, SdfNetwork
from .neural import engine as E
from .neural.conv import ConvEncoder
from .neural.graph import GraphNet, MeshGraph
from .neural.layers import AttentionHead, Module, Parameter
from .spatial import MeshIndex, TriangleMesh, VertexKnnIndex


class NnaModel(Module):
    def __init__(self, config: ModelConfig, n_joints, seed=0):
        self.config = config
        self.n_joints = n_joints
        rng = np.random.default_rng(seed)
        dim = config.feature_dim
        self.encoder = ConvEncoder(rng, "encoder")
        self.head_vertex = AttentionHead(dim, rng, "head_vertex")
        self.head_geo = AttentionHead(dim, rng, "head_geo")
        if config.ablation.separate_geo_app:
            self.head_app = AttentionHead(dim, rng, "head_app")
        else:
            self.head_app = self.head_geo
        self.gcn_input = GraphNet(dim, rng, "gcn_input")
        self.gcn_repose = GraphNet(dim, rng, "gcn_repose")
        self.diffuse_geo = make_diffusion_mlp(rng, dim, "diffuse_geo")
        self.diffuse_app = make_diffusion_mlp(rng, dim, "diffuse_app")
        self.residual = ResidualNet(
            rng, n_joints, 2 * dim, "residual",
            bound=config.residual_bound, hidden=config.residual_hidden,
            n_hidden=config.residual_layers,
        )
        self.sdf = SdfNetwork(
            rng, "sdf", feature_tail=config.feature_tail, radius=config.sdf_radius,
            sphere_fit_iters=config.sdf_sphere_fit_iters,
        )
        self.color = ColorNetwork(rng, 2 * dim, "color", feature_tail=config.feature_tail)
        self.log_k = Parameter(np.log(config.neus_k_init), "neus.log_k")

    def neus_k(self):
        return E.exp(self.log_k.value)

    def parameter_groups(self):
        groups = {
            "sdf": self.sdf.parameters(),
            "color": self.color.parameters(),
            "residual": self.residual.parameters(),
            "neus": [self.log_k],
        }
        feat = []
        for mod in (self.encoder, self.head_vertex, self.head_geo, self.head_app,
                    self.gcn_input, self.gcn_repose, self.diffuse_geo, self.diffuse_app):
            for p in mod.parameters():
                if p not in feat:
                    feat.append(p)
        groups["features"] = feat
        return groups


class SceneBundle:
    """Immutable per-(input, driving pose) state: encoded views, surface
    feature sets, deformation contexts, and canonical-space helpers."""

    def __init__(self, model, template, mv_input: MultiViewInput, driving_pose,
                 mesh_graph=None, canonical_index=None):
        self.model = model
        self.template = template
        self.mv_input = mv_input
        self.driving_pose = driving_pose
        cfg = model.config
        abl = cfg.ablation

        self.ctx_input = build_deformation_context(template, mv_input.pose)
        same_pose = _poses_equal(mv_input.pose, driving_pose)
        self.ctx_drive = self.ctx_input if same_pose else build_deformation_context(template, driving_pose)
        self.same_pose = same_pose

        self.graph = mesh_graph or MeshGraph(template.n_vertices, template.faces)
        if canonical_index is None:
            comps = None
            if template.part_ids is not None:
                comps = template.part_ids[template.faces[:, 0]]
            canonical_index = MeshIndex(
                TriangleMesh(template.vertices, template.faces), face_components=comps
            )
        self.canonical_index = canonical_index
        self.canonical_shape_disp = shape_displacements(template, driving_pose.shape_coeffs)

        self.vfs = encode_views(model.encoder, mv_input, self.ctx_input)

        # per-vertex fused image features -> input-pose surface features
        verts_value = E.Value(self.ctx_input.posed_vertices.astype(E.default_dtype()))
        u_v_per_view, _ = pixel_aligned_features(self.vfs, verts_value)
        u_v, _ = fuse_views(
            model.head_vertex, u_v_per_view, self.vfs.occluded_vertices,
            bias=cfg.occlusion_bias, use_occlusion_bias=abl.use_occlusion_bias,
        )
        root_in = self.ctx_input.root_rotation
        if abl.use_gcn:
            ef_in = self.graph.edge_features(self.ctx_input.posed_vertices, root_in)
            z_in = model.gcn_input(u_v, self.graph, E.Value(ef_in.astype(E.default_dtype())))
        else:
            z_in = u_v
        self.sfs_input = SurfaceFeatureSet(
            z_in, "input-pose", self.ctx_input.posed_vertices,
            VertexKnnIndex.from_mesh(TriangleMesh(self.ctx_input.posed_vertices, template.faces)),
        )
        self.sfs_geo = self._repose(z_in, self.ctx_drive.posed_vertices,
                                    self.ctx_drive.root_rotation, "target-pose")
        self.sfs_app = self._repose(z_in, template.vertices, np.eye(3), "canonical-pose")

    def _repose(self, z_in, verts, root_rotation, tag):
        model, abl = self.model, self.model.config.ablation
        if abl.use_gcn:
            ef = self.graph.edge_features(verts, root_rotation)
            z = model.gcn_repose(z_in, self.graph, E.Value(ef.astype(E.default_dtype())))
        else:
            z = z_in
        return SurfaceFeatureSet(
            z, tag, verts,
            VertexKnnIndex.from_mesh(TriangleMesh(verts, self.template.faces)),
        )

    # ------------------------------------------------------------------
    def _input_space_positions(self, x):
        """Posed driving-space points mapped into the input-pose space (numpy).

        Identity when driving the capture's own pose; otherwise bridged
        through the canonical space by skinning without the residual."""
        if self.same_pose:
            return np.atleast_2d(np.asarray(x, dtype=np.float64))
        phi, _, _ = inverse_skin_batch(self.ctx_drive, x)
        return forward_skin_points(
            self.template, self.mv_input.pose, self.canonical_index, phi
        )

    def _per_point_occlusion(self, pts_input_space):
        occ = np.zeros((len(pts_input_space), self.mv_input.n_views), dtype=bool)
        for c, cam in enumerate(self.mv_input.cameras):
            centers = np.broadcast_to(cam.center, pts_input_space.shape)
            occ[:, c] = self.ctx_input.mesh_index.segments_occluded(centers, pts_input_space)
        return occ

    def geometry_features(self, x):
        """F_geo for posed driving-space points x [B, 3] (numpy in, Value out)."""
        cfg, abl = self.model.config, self.model.config.ablation
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        x_in = self._input_space_positions(x)
        xin_value = E.Value(x_in.astype(E.default_dtype()))
        feats, oof = pixel_aligned_features(self.vfs, xin_value)
        occ = self._per_point_occlusion(x_in) | oof
        if abl.use_u_geo:
            u_geo, _ = fuse_views(self.model.head_geo, feats, occ,
                                  bias=cfg.occlusion_bias,
                                  use_occlusion_bias=abl.use_occlusion_bias)
        else:
            u_geo = E.Value(np.zeros((len(x), cfg.feature_dim), dtype=E.default_dtype()))
        z_geo = diffuse_to_point(
            self.model.diffuse_geo, self.sfs_geo, E.Value(x.astype(E.default_dtype())),
            K=cfg.k_neighbors, eps=cfg.diffuse_eps,
        )
        return E.concat([u_geo, z_geo], axis=-1)

    def appearance_features(self, x_tilde):
        """F_app for canonical points (Value in, Value out; differentiable)."""
        cfg, abl = self.model.config, self.model.config.ablation
        xt_np = x_tilde.data.astype(np.float64)
        # bridge to the input pose: rigid blend from the nearest canonical
        # surface point (selection frozen, transform differentiable)
        _, fid, bary, _ = self.canonical_index.nearest_surface_point(xt_np)
        tri = self.template.faces[fid]
        w = np.einsum("bk,bkj->bj", bary, self.template.skin_weights[tri])
        dv_in = np.einsum(
            "bk,bkd->bd", bary,
            shape_displacements(self.template, self.mv_input.pose.shape_coeffs)[tri],
        )
        fwd = _fwd_transforms(self.ctx_input)
        A = np.einsum("bj,jpq->bpq", w, fwd[0])
        t = w @ fwd[1]
        dt = E.default_dtype()
        x_shifted = E.add(x_tilde, E.Value(dv_in.astype(dt)))
        x_in = E.add(
            E.reshape(E.matmul(E.Value(A.astype(dt)), E.reshape(x_shifted, (-1, 3, 1))), (-1, 3)),
            E.Value(t.astype(dt)),
        )
        feats, oof = pixel_aligned_features(self.vfs, x_in)
        occ = self._per_point_occlusion(x_in.data.astype(np.float64)) | oof
        if abl.use_u_app:
            u_app, _ = fuse_views(self.model.head_app, feats, occ,
                                  bias=cfg.occlusion_bias,
                                  use_occlusion_bias=abl.use_occlusion_bias)
        else:
            u_app = E.Value(np.zeros((len(xt_np), cfg.feature_dim), dtype=dt))
        z_app = diffuse_to_point(
            self.model.diffuse_app, self.sfs_app, x_tilde,
            K=cfg.k_neighbors, eps=cfg.diffuse_eps,
        )
        return E.concat([u_app, z_app], axis=-1)


def _poses_equal(a, b):
    return (
        np.array_equal(a.joint_rotations, b.joint_rotations)
        and np.array_equal(a.root_translation, b.root_translation)
        and np.array_equal(a.shape_coeffs, b.shape_coeffs)
    )


def _fwd_transforms(ctx):
    """Forward (canonical -> posed) transforms recovered from the stored inverses."""
    rot = np.swapaxes(ctx.inv_rot, 1, 2)
    trans = -np.einsum("jab,jb->ja", rot, ctx.inv_trans)
    return rot, trans

import numpy as np
import pytest

from nna.body import PoseParams, forward_skin
from nna.deformation import (
    ResidualNet,
    build_deformation_context,
    canonicalize,
    canonicalize_batch,
    forward_skin_points,
    inverse_skin,
    inverse_skin_batch,
    joint_displacements,
    joint_displacements_batch,
    residual_deform,
)
from nna.neural import engine as E


@pytest.fixture(scope="module")
def tpl():
    from nna.body import builtin_capsule_proxy

    return builtin_capsule_proxy(5, 12)


def canonical_ctx(tpl):
    return build_deformation_context(tpl, PoseParams.identity(tpl.n_joints, tpl.n_shape))


def bent_pose(tpl, scale=1.0):
    pose = PoseParams.identity(tpl.n_joints, tpl.n_shape)
    pose.joint_rotations[4] = np.array([0.0, 0.0, 0.35]) * scale   # l elbow
    pose.joint_rotations[3] = np.array([0.2, 0.0, -0.3]) * scale   # l shoulder
    pose.joint_rotations[10] = np.array([0.3, 0.0, 0.0]) * scale   # l knee
    pose.joint_rotations[1] = np.array([0.0, 0.1, 0.05]) * scale   # spine
    pose.root_translation = np.array([0.05, 0.0, -0.1]) * scale
    return pose


def test_identity_at_canonical_pose(tpl, rng):
    ctx = canonical_ctx(tpl)
    x = rng.uniform([-0.6, 0.0, -0.6], [0.6, 1.8, 0.6], size=(200, 3))
    phi, A, w = inverse_skin_batch(ctx, x)
    assert np.max(np.abs(phi - x)) < 1e-9
    assert np.allclose(A, np.eye(3), atol=1e-9)
    net = ResidualNet(np.random.default_rng(0), tpl.n_joints, feat_dim=8)
    f = E.Value(rng.normal(size=(200, 8)))
    xt, _, _ = canonicalize_batch(ctx, x, f, net)
    assert np.max(np.abs(xt.data - x)) < 1e-9


def test_round_trip_single_weight_and_blend(tpl):
    # moderate pose (~0.2 rad at blend joints): the rigid-blend inverse is
    # exact in single-weight regions and approximate in blend bands
    pose = bent_pose(tpl, scale=0.65)
    posed = forward_skin(tpl, pose)
    ctx = build_deformation_context(tpl, pose)
    phi, _, _ = inverse_skin_batch(ctx, posed)
    err = np.linalg.norm(phi - tpl.vertices, axis=1)
    single = tpl.skin_weights.max(axis=1) == 1.0
    assert single.sum() > 0 and (~single).sum() > 0
    assert err[single].max() < 1e-6
    assert err[~single].max() < 1e-3
    # stronger bends: the blend error grows ~ theta^2 * radius / 4
    pose = bent_pose(tpl, scale=1.0)
    posed = forward_skin(tpl, pose)
    ctx = build_deformation_context(tpl, pose)
    phi, _, _ = inverse_skin_batch(ctx, posed)
    err = np.linalg.norm(phi - tpl.vertices, axis=1)
    assert err[single].max() < 1e-6
    assert err[~single].max() < 2.5e-3


def test_single_joint_rigid_inverse(tpl):
    # a point rigidly attached to one joint comes back exactly
    pose = PoseParams.identity(tpl.n_joints, tpl.n_shape)
    pose.joint_rotations[4] = [0.0, 0.0, 0.6]
    ctx = build_deformation_context(tpl, pose)
    vid = int(np.argmax(tpl.skin_weights[:, 4] == 1.0))
    assert tpl.skin_weights[vid, 4] == 1.0
    posed = forward_skin(tpl, pose)[vid]
    assert np.linalg.norm(inverse_skin(posed, ctx) - tpl.vertices[vid]) < 1e-9


def test_forward_skin_points_inverts_phi(tpl):
    pose = bent_pose(tpl, 0.8)
    ctx = build_deformation_context(tpl, pose)
    from nna.model import _fwd_transforms  # forward transforms from the ctx
    from nna.spatial import MeshIndex, TriangleMesh

    can_index = MeshIndex(TriangleMesh(tpl.vertices, tpl.faces))
    x = forward_skin(tpl, pose)[::50] + 0.01
    phi, _, _ = inverse_skin_batch(ctx, x)
    back = forward_skin_points(tpl, pose, can_index, phi)
    # approximate inverse pair: tight in near-rigid regions
    assert np.median(np.linalg.norm(back - x, axis=1)) < 2e-3


def test_joint_displacements(tpl, rng):
    pose = bent_pose(tpl)
    ctx = build_deformation_context(tpl, pose)
    x = ctx.posed_joints[7]
    d = joint_displacements(x, ctx)
    assert np.allclose(d.reshape(-1, 3)[7], 0.0, atol=1e-12)
    t = np.array([0.3, -0.2, 0.1])
    d2 = joint_displacements(x + t, ctx)
    assert np.allclose(d2.reshape(-1, 3) - d.reshape(-1, 3), t, atol=1e-12)
    # manual subtraction
    q = rng.normal(size=3)
    dq = joint_displacements(q, ctx)
    assert np.allclose(dq.reshape(-1, 3), q - ctx.posed_joints, atol=1e-12)


def test_residual_zero_init_and_bound(tpl, rng):
    net = ResidualNet(np.random.default_rng(3), tpl.n_joints, feat_dim=12)
    f = rng.normal(size=(50, 12))
    dj = rng.normal(size=(50, 3 * tpl.n_joints))
    assert np.array_equal(residual_deform(None, f[0], dj[0], net), np.zeros(3))
    out = net(E.Value(f), E.Value(dj)).data
    assert np.array_equal(out, np.zeros_like(out))
    # randomize the head: the displacement norm stays inside the bound
    for p in net.parameters():
        p.data = rng.normal(size=p.shape) * 3.0
    out = net(E.Value(f * 100), E.Value(dj * 100)).data
    assert np.all(np.linalg.norm(out, axis=1) <= net.bound + 1e-12)
    assert np.linalg.norm(out, axis=1).max() > 0.5 * net.bound  # squash engaged


def test_residual_gradient_wrt_point(tpl, rng):
    """Gradient through the joint-displacement pathway matches finite
    differences (features held constant)."""
    net = ResidualNet(np.random.default_rng(1), tpl.n_joints, feat_dim=4)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape) * 0.3
    ctx = canonical_ctx(tpl)
    f = E.Value(rng.normal(size=(1, 4)))
    joints = ctx.posed_joints

    def fn(xv):
        dj = E.reshape(E.sub(E.reshape(xv, (1, 1, 3)), E.Value(joints[None])), (1, -1))
        return E.vsum(net(f, dj))

    from nna.neural import finite_difference_check

    err = finite_difference_check(fn, rng.normal(size=(1, 3)))
    assert err < 1e-4


def test_canonicalize_differentiable_in_params(tpl, rng):
    net = ResidualNet(np.random.default_rng(2), tpl.n_joints, feat_dim=4)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape) * 0.2
    pose = bent_pose(tpl, 0.5)
    ctx = build_deformation_context(tpl, pose)
    x = forward_skin(tpl, pose)[::400] + 0.02
    f_np = rng.normal(size=(len(x), 4))

    def loss():
        xt, _, _ = canonicalize_batch(ctx, x, E.Value(f_np), net)
        return E.vsum(E.square(xt))

    grads = E.backward(loss())
    p = net.mlp.layers[0].w
    g = grads[p]
    flat = p.data.reshape(-1)
    h = 1e-6
    probe = np.random.default_rng(4).choice(flat.size, size=5, replace=False)
    nums, ads = [], []
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss().data)
        flat[i] = orig - h
        fm = float(loss().data)
        flat[i] = orig
        nums.append((fp - fm) / (2 * h))
        ads.append(g.reshape(-1)[i])
    nums, ads = np.asarray(nums), np.asarray(ads)
    scale = max(np.abs(nums).max(), np.abs(ads).max(), 1e-8)
    assert np.max(np.abs(nums - ads)) / scale < 1e-4


def test_posed_depth_order_is_preserved_not_canonical(tpl):
    """Canonical-space ordering may scramble, but the posed depths the
    compositor uses stay sorted by construction (documented behavior)."""
    pose = bent_pose(tpl)
    ctx = build_deformation_context(tpl, pose)
    origin = np.array([0.0, 1.2, -2.5])
    direction = np.array([0.0, 0.0, 1.0])
    depths = np.linspace(1.5, 3.5, 24)
    pts = origin + depths[:, None] * direction
    assert np.all(np.diff(depths) > 0)
    phi, _, _ = inverse_skin_batch(ctx, pts)  # no ordering claim on phi
    assert phi.shape == pts.shape

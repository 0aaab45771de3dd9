import numpy as np
import pytest

from nna.fields import (
    ColorNetwork,
    SdfNetwork,
    color_eval,
    pretrain_canonical_sdf,
    sample_pretrain_points,
    sdf_eval,
    sdf_gradient,
    sdf_with_gradient,
)
from nna.neural import engine as E
from nna.neural import finite_difference_check


@pytest.fixture(scope="module")
def sdf_net():
    return SdfNetwork(np.random.default_rng(0), radius=0.5)


def test_sphere_initialization_contract(sdf_net, rng):
    """A fresh field approximates ||x|| - r0 within 20% (median over a shell)."""
    pts = rng.normal(size=(2000, 3))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(0.1, 1.25, (2000, 1))
    s = sdf_eval(sdf_net, pts)
    target = np.linalg.norm(pts, axis=1) - 0.5
    rel = np.abs(s - target) / np.maximum(np.abs(target), 0.25 * 0.5)
    assert np.median(rel) < 0.20


def test_sphere_init_gradient_radial(sdf_net, rng):
    pts = rng.normal(size=(200, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0.3, 1.0, (200, 1))
    raw, unit, valid = sdf_gradient(sdf_net, pts)
    assert valid.all()
    assert np.allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-6)
    cos = np.sum(unit * (pts / np.linalg.norm(pts, axis=1, keepdims=True)), axis=1)
    assert np.median(cos) > 0.95


def test_sdf_gradient_matches_finite_differences(sdf_net, rng):
    pts = rng.normal(size=(4, 3)) * 0.6
    raw, _, _ = sdf_gradient(sdf_net, pts)
    h = 1e-5
    for i in range(len(pts)):
        for d in range(3):
            pp, pm = pts[i].copy(), pts[i].copy()
            pp[d] += h
            pm[d] -= h
            fd = (sdf_eval(sdf_net, pp[None])[0] - sdf_eval(sdf_net, pm[None])[0]) / (2 * h)
            assert abs(raw[i, d] - fd) / max(abs(fd), 1e-6) < 1e-4


def test_sdf_second_order_through_eikonal(rng):
    """d(eikonal)/d(params) matches finite differences on a reduced net."""
    net = SdfNetwork(rng, radius=0.5, sphere_fit_iters=0)
    pts = rng.normal(size=(3, 3)) * 0.5

    def loss():
        x = E.variable(pts)
        s, _, n = sdf_with_gradient(net, x, create_graph=True)
        return E.vsum(E.square(E.sub(E.norm(n, axis=1, eps=1e-24), 1.0)))

    base = loss()
    grads = E.backward(base)
    probe_rng = np.random.default_rng(1)
    layer = net.layers[2]
    g = grads[layer.w_dir]
    flat = layer.w_dir.data.reshape(-1)
    idx = probe_rng.choice(flat.size, size=5, replace=False)
    h = 1e-6
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss().data)
        flat[i] = orig - h
        fm = float(loss().data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        assert abs(g.reshape(-1)[i] - num) / max(abs(num), 1e-6) < 1e-3


def test_color_network_bounds_and_zero_head(rng):
    net = ColorNetwork(rng, app_dim=8, feature_tail=False)
    B = 16
    args = (
        rng.normal(size=(B, 3)), rng.normal(size=(B, 3)), rng.normal(size=(B, 3)),
        rng.normal(size=(B, 1)), rng.normal(size=(B, 8)) * 10,
    )
    rgb = color_eval(net, *args)
    assert np.all((rgb > 0) & (rgb < 1))
    last = net.layers[-1]
    last.w_dir.data = np.zeros_like(last.w_dir.data)
    last.w_scale.data = np.zeros_like(last.w_scale.data)
    last.b.data = np.zeros_like(last.b.data)
    rgb = color_eval(net, *args)
    assert np.allclose(rgb, 0.5)


def test_color_gradient_wrt_appearance(rng):
    net = ColorNetwork(rng, app_dim=6, feature_tail=False)
    B = 2
    x = rng.normal(size=(B, 3))
    d = rng.normal(size=(B, 3))
    n = rng.normal(size=(B, 3))
    s = rng.normal(size=(B, 1))

    def f(app):
        return E.vsum(net(E.Value(x), E.Value(d), E.Value(n), E.Value(s), app))

    err = finite_difference_check(f, rng.normal(size=(B, 6)) + 0.05)
    assert err < 1e-4


def test_pretrain_sample_distribution(small_proxy, rng):
    pts = sample_pretrain_points(small_proxy, rng, 2000, dilate=0.3, sigma=0.05)
    lo = small_proxy.vertices.min(axis=0) - 0.3
    hi = small_proxy.vertices.max(axis=0) + 0.3
    # uniform half inside the dilated box; surface half near the body
    assert np.all(pts[:1000] >= lo - 1e-9) and np.all(pts[:1000] <= hi + 1e-9)
    from nna.spatial import MeshIndex, TriangleMesh

    idx = MeshIndex(TriangleMesh(small_proxy.vertices, small_proxy.faces))
    _, _, _, d = idx.nearest_surface_point(pts[1000:])
    assert np.percentile(d, 90) < 3.5 * 0.05


def test_pretrain_improves_field(small_proxy):
    """A short pretraining run already pulls the field toward the proxy's
    signed distance (full-budget accuracy is checked in acceptance)."""
    E.set_default_dtype(np.float32)
    E.set_check_finite(False)
    net = SdfNetwork(np.random.default_rng(0), radius=0.5, sphere_fit_iters=50)
    from nna.body import posed_capsule_segments, PoseParams, capsule_union_sdf

    pose = PoseParams.identity(small_proxy.n_joints, small_proxy.n_shape)
    a, b, r = posed_capsule_segments(small_proxy, pose)
    rng = np.random.default_rng(5)
    probe = small_proxy.vertices[rng.integers(small_proxy.n_vertices, size=400)]
    probe = probe + rng.normal(0, 0.1, probe.shape)
    target = capsule_union_sdf(probe, a, b, r)

    before = np.median(np.abs(sdf_eval(net, probe) - target))
    pretrain_canonical_sdf(net, small_proxy, n_iters=250, batch=256, seed=0)
    after = np.median(np.abs(sdf_eval(net, probe) - target))
    assert after < before * 0.6
    assert after < 0.05

"""Finite-difference verification of every differentiable building block.

Each check runs the central-difference harness against reverse-mode gradients
at double precision and reports the worst relative error. The CLI command and
the acceptance suite both drive this module.
"""

import numpy as np

from .neural import engine as E
from .neural.conv import ConvEncoder, bilinear_upsample, conv2d, sample_bilinear
from .neural.engine import finite_difference_check
from .neural.graph import GraphNet, MeshGraph
from .neural.layers import AttentionHead, Dense, MLP, positional_encoding

TOL_PER_OP = 1e-4


def _check_params(build_loss, params, h=1e-6, probes=None):
    """Central differences on (a probe subset of) parameter entries."""
    loss = build_loss()
    grads = E.backward(loss)
    worst = 0.0
    rng = np.random.default_rng(0)
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idxs = range(flat.size) if probes is None else rng.choice(
            flat.size, size=min(probes, flat.size), replace=False
        )
        num = {}
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build_loss().data)
            flat[i] = orig - h
            fm = float(build_loss().data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        scale = max(max(abs(v) for v in num.values()), np.max(np.abs(gflat)), 1e-8)
        err = max(abs(gflat[i] - num[i]) for i in num) / scale
        worst = max(worst, err)
    return worst


def run_gradient_suite(seed=0, verbose=False):
    """Run every per-op check; returns the number of failures."""
    prev = E.default_dtype()
    E.set_default_dtype(np.float64)
    rng = np.random.default_rng(seed)
    results = []

    def record(name, err, tol=TOL_PER_OP):
        results.append((name, err, tol, err < tol))

    # dense (plain and weight-normalized)
    for wn in (False, True):
        d = Dense(5, 4, rng, "d", weight_norm=wn)
        err = finite_difference_check(lambda v: E.vsum(d(v)), rng.normal(size=(3, 5)))
        record(f"dense{'_wn' if wn else ''}/input", err)
        x_fixed = rng.normal(size=(3, 5))
        err = _check_params(lambda: E.vsum(E.square(d(E.Value(x_fixed)))), d.parameters())
        record(f"dense{'_wn' if wn else ''}/params", err)

    # activations and encodings through an MLP
    for act in ("relu", "leaky_relu", "softplus100", "tanh", "sigmoid"):
        net = MLP([4, 8, 1], rng, "m", activation=act)
        x0 = rng.normal(size=(2, 4)) + 0.13  # nudge off kinks
        err = finite_difference_check(lambda v: E.vsum(net(v)), x0)
        record(f"mlp/{act}", err)

    err = finite_difference_check(
        lambda v: E.vsum(E.square(positional_encoding(v, 4))), rng.normal(size=(2, 3))
    )
    record("positional_encoding", err)

    # attention fusion
    head = AttentionHead(6, rng, "att")
    bias = rng.normal(size=(2, 3))
    err = finite_difference_check(
        lambda v: E.vsum(E.square(head(E.reshape(v, (2, 3, 6)), E.Value(bias))[0])),
        rng.normal(size=(2, 3, 6)).reshape(2, 3, 6),
    )
    record("attention/input", err)

    # convolution + bilinear resampling
    w = E.variable(rng.normal(size=(2, 3, 3, 3)) * 0.2)
    xin = rng.normal(size=(1, 3, 6, 6))
    err = finite_difference_check(
        lambda v: E.vsum(E.square(conv2d(E.Value(xin), E.reshape(v, (2, 3, 3, 3)),
                                         E.Value(np.zeros(2)), stride=2, pad=1))),
        w.data.reshape(2, 3, 3, 3),
    )
    record("conv2d/weights", err)
    err = finite_difference_check(
        lambda v: E.vsum(E.square(bilinear_upsample(E.reshape(v, (1, 2, 3, 3)), 6, 6))),
        rng.normal(size=(1, 2, 3, 3)),
    )
    record("bilinear_upsample", err)
    fmap = rng.normal(size=(4, 8, 8))
    uv0 = rng.uniform(1.2, 6.8, size=(5, 2))
    err = finite_difference_check(
        lambda v: E.vsum(E.square(sample_bilinear(E.Value(fmap), v))), uv0
    )
    record("sample_bilinear/coords", err)

    # graph network over a small mesh
    faces = np.array([[0, 1, 2], [1, 2, 3], [2, 3, 4]])
    graph = MeshGraph(5, faces)
    gnet = GraphNet(6, rng, "g", n_blocks=1)
    ef = rng.normal(size=(len(graph.src), 4))
    err = finite_difference_check(
        lambda v: E.vsum(E.square(gnet(v, graph, E.Value(ef)))), rng.normal(size=(5, 6))
    )
    record("graph_net/input", err)

    # second order: eikonal-style loss through a weight-normalized MLP
    net = MLP([3, 16, 16, 1], rng, "sdf", activation="softplus100", weight_norm=True)
    pts = rng.normal(size=(4, 3))

    def eik_loss():
        x = E.variable(pts)
        s = E.vsum(net(x))
        (n,) = E.grad(s, [x], create_graph=True)
        return E.vsum(E.square(E.sub(E.norm(n, axis=1, eps=1e-24), 1.0)))

    err = _check_params(eik_loss, net.parameters(), probes=6)
    record("second_order/eikonal_params", err, tol=1e-3)

    E.set_default_dtype(prev)
    failures = 0
    for name, err, tol, ok in results:
        failures += 0 if ok else 1
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name:32s} rel err {err:.3e} (tol {tol:.0e})")
    if verbose:
        print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return failures

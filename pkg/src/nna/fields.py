"""Canonical-space implicit fields: the signed-distance MLP (with exact
reverse-mode surface normals) and the appearance-conditioned color MLP,
plus supervised pretraining of the SDF against the canonical proxy."""

from dataclasses import dataclass

import numpy as np

from .neural import engine as E
from .neural.layers import Dense, Module, positional_encoding, positional_encoding_dim
from .neural.optim import AdamState, adam_step
from .spatial import MeshIndex, TriangleMesh

PE_POS = 6   # frequencies for spatial positions
PE_DIR = 4   # frequencies for view directions
HIDDEN = 256
N_LAYERS = 8
SKIP_AT = 4  # input re-concatenated to the output of this hidden layer
FEATURE_TAIL = 256


@dataclass
class CanonicalSample:
    position: np.ndarray   # canonical-space point
    sdf: float
    normal: np.ndarray     # unit gradient (zeros when degenerate)
    color: np.ndarray      # rgb in (0,1)


def _geometric_init_dense(layer, n_in, n_out, rng, pe_zero_cols=None, last=False,
                          radius=0.5, skip_cols=None):
    """Sphere initialization: the freshly built net approximates ||x|| - radius."""
    if last:
        w = rng.normal(np.sqrt(np.pi) / np.sqrt(n_in), 1e-4, size=(n_out, n_in))
        b = np.full(n_out, -radius)
    else:
        w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(n_out), size=(n_out, n_in))
        b = np.zeros(n_out)
    if pe_zero_cols is not None:
        w[:, pe_zero_cols] = 0.0
    if skip_cols is not None:
        w[:, skip_cols] = 0.0
    layer.w_dir.data = w
    layer.w_scale.data = np.linalg.norm(w, axis=1)
    layer.b.data = b


class SdfNetwork(Module):
    """8x256 softplus(beta=100) MLP with an input skip at layer 4 and weight
    normalization; outputs the signed distance plus a 256-dim feature tail."""

    def __init__(self, rng, name="sdf", feature_tail=True, radius=0.5,
                 sphere_fit_iters=200):
        self.d_in = positional_encoding_dim(3, PE_POS)
        self.feature_tail = feature_tail
        d_out = 1 + (FEATURE_TAIL if feature_tail else 0)
        dims = []
        for i in range(N_LAYERS):
            n_in = self.d_in if i == 0 else HIDDEN
            if i == SKIP_AT:
                n_in = HIDDEN + self.d_in
            dims.append((n_in, HIDDEN))
        dims.append((HIDDEN, d_out))
        self.layers = [
            Dense(a, b, rng, f"{name}.l{i}", weight_norm=True) for i, (a, b) in enumerate(dims)
        ]
        # geometric (sphere) initialization
        for i, layer in enumerate(self.layers):
            n_in, n_out = dims[i]
            if i == 0:
                _geometric_init_dense(layer, n_in, n_out, rng, pe_zero_cols=slice(3, None))
            elif i == SKIP_AT:
                # zero the encoded part of the skip, keep raw xyz columns
                _geometric_init_dense(layer, n_in, n_out, rng,
                                      pe_zero_cols=slice(HIDDEN + 3, None))
            elif i == len(dims) - 1:
                w = rng.normal(np.sqrt(np.pi) / np.sqrt(n_in), 1e-4, size=(n_out, n_in))
                b = np.zeros(n_out)
                b[0] = -radius
                if n_out > 1:  # feature tail rows: ordinary small init
                    w[1:] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(n_out), size=(n_out - 1, n_in))
                layer.w_dir.data = w
                layer.w_scale.data = np.linalg.norm(w, axis=1)
                layer.b.data = b
            else:
                _geometric_init_dense(layer, n_in, n_out, rng)
        self._calibrate_sphere(radius)
        if sphere_fit_iters:
            self._distill_sphere(radius, sphere_fit_iters)

    def _calibrate_sphere(self, radius):
        """Fix the finite-width slope/offset error of the geometric init so the
        fresh field closely matches ||x|| - radius (deterministic probe)."""
        probe_rng = np.random.default_rng(1234)
        dirs = probe_rng.normal(size=(256, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = np.array([0.5, 1.0, 1.5, 2.0, 2.5]) * radius
        means = []
        with E.no_grad():
            for r in radii:
                s, _ = self(E.Value((dirs * r).astype(E.default_dtype())))
                means.append(float(np.mean(s.data)))
        slope = np.polyfit(radii, means, 1)[0]
        last = self.layers[-1]
        last.w_scale.data[0] /= slope
        last.b.data[0] /= slope
        with E.no_grad():
            s, _ = self(E.Value((dirs * radius).astype(E.default_dtype())))
        last.b.data[0] -= float(np.mean(s.data))

    def _distill_sphere(self, radius, iters, batch=256):
        """Brief data-free regression to the analytic sphere; removes the
        angular wobble the width-256 init leaves behind."""
        state = AdamState(self.parameters())
        rng = np.random.default_rng(4321)
        dt = E.default_dtype()
        for _ in range(iters):
            pts = rng.normal(size=(batch, 3))
            pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
            pts *= rng.uniform(0.1 * radius, 3.0 * radius, (batch, 1))
            target = np.linalg.norm(pts, axis=1)[:, None] - radius
            s, _ = self(E.Value(pts.astype(dt)))
            grads = E.backward(E.mean(E.abs_(E.sub(s, E.Value(target.astype(dt))))))
            adam_step(state, grads, 1e-3)

    def __call__(self, x):
        """x: [N, 3] Value -> (sdf [N, 1], feature tail [N, F] or None)."""
        pe = positional_encoding(x, PE_POS)
        h = pe
        for i, layer in enumerate(self.layers[:-1]):
            if i == SKIP_AT:
                h = E.concat([h, pe], axis=-1)
            h = E.softplus_beta(layer(h), 100.0)
        out = self.layers[-1](h)
        s = E.getitem(out, (slice(None), slice(0, 1)))
        feat = E.getitem(out, (slice(None), slice(1, None))) if self.feature_tail else None
        return s, feat


def sdf_eval(net, points):
    """Plain-numpy SDF evaluation (no graph)."""
    with E.no_grad():
        s, _ = net(E.Value(np.asarray(points, dtype=E.default_dtype())))
    return s.data[:, 0]


def sdf_with_gradient(net, x_value, create_graph=True):
    """(s, feat, n_raw) with n the exact reverse-mode gradient of s wrt input.

    ``x_value`` must be a Value; mark it requires_grad (variable) if nothing
    upstream does. Pass create_graph=True when the result feeds a loss.
    """
    s, feat = net(x_value)
    (n,) = E.grad(E.vsum(s), [x_value], create_graph=create_graph)
    return s, feat, n


def sdf_gradient(net, points):
    """Raw gradient and unit normal at ``points`` (numpy in, numpy out)."""
    x = E.variable(np.asarray(points, dtype=E.default_dtype()))
    _, _, n = sdf_with_gradient(net, x, create_graph=False)
    raw = n.data
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    valid = norms[:, 0] > 1e-9
    unit = np.where(valid[:, None], raw / np.where(norms == 0, 1.0, norms), raw)
    return raw, unit, valid


class ColorNetwork(Module):
    """8x256 ReLU MLP with input skip; sigmoid RGB head.

    Inputs: encoded position, encoded view direction, unit normal, sdf value,
    appearance features, and the SDF feature tail when enabled.
    """

    def __init__(self, rng, app_dim, name="color", feature_tail=True):
        self.app_dim = app_dim
        self.feature_tail = feature_tail
        self.d_in = (
            positional_encoding_dim(3, PE_POS)
            + positional_encoding_dim(3, PE_DIR)
            + 3 + 1 + app_dim
            + (FEATURE_TAIL if feature_tail else 0)
        )
        dims = []
        for i in range(N_LAYERS):
            n_in = self.d_in if i == 0 else HIDDEN
            if i == SKIP_AT:
                n_in = HIDDEN + self.d_in
            dims.append((n_in, HIDDEN))
        dims.append((HIDDEN, 3))
        self.layers = [
            Dense(a, b, rng, f"{name}.l{i}", weight_norm=True) for i, (a, b) in enumerate(dims)
        ]

    def __call__(self, x, view_dir, normal, sdf, app_feat, sdf_feat=None):
        parts = [
            positional_encoding(x, PE_POS),
            positional_encoding(view_dir, PE_DIR),
            normal,
            sdf,
            app_feat,
        ]
        if self.feature_tail:
            if sdf_feat is None:
                raise ValueError("color network expects the SDF feature tail")
            parts.append(sdf_feat)
        inp = E.concat([E.as_value(p) for p in parts], axis=-1)
        h = inp
        for i, layer in enumerate(self.layers[:-1]):
            if i == SKIP_AT:
                h = E.concat([h, inp], axis=-1)
            h = E.relu(layer(h))
        return E.sigmoid(self.layers[-1](h))


def color_eval(net, x, view_dir, normal, sdf, app_feat, sdf_feat=None):
    with E.no_grad():
        rgb = net(
            E.as_value(x), E.as_value(view_dir), E.as_value(normal),
            E.as_value(sdf), E.as_value(app_feat),
            None if sdf_feat is None else E.as_value(sdf_feat),
        )
    return rgb.data


def sample_pretrain_points(template, rng, n, dilate=0.3, sigma=0.05):
    """Half uniform in the dilated canonical bbox, half Gaussian off the surface."""
    v = template.vertices
    lo = v.min(axis=0) - dilate
    hi = v.max(axis=0) + dilate
    n_uni = n // 2
    uni = rng.uniform(lo, hi, size=(n_uni, 3))
    f = template.faces
    tri = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    fid = rng.choice(len(f), size=n - n_uni, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=(n - n_uni, 1)))
    r2 = rng.uniform(size=(n - n_uni, 1))
    bary = np.concatenate([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    surf = np.einsum("nk,nkd->nd", bary, tri[fid])
    surf = surf + rng.normal(0.0, sigma, size=surf.shape)
    return np.concatenate([uni, surf])


def pretrain_canonical_sdf(net, template, n_iters, lr=5e-4, batch=512, seed=0,
                           eikonal_weight=0.1, log_every=0, log_fn=print):
    """Regress the SDF onto exact signed distance of the canonical proxy mesh
    (sign from per-component ray parity), with an Eikonal penalty."""
    mesh = TriangleMesh(template.vertices, template.faces)
    comps = None
    if template.part_ids is not None:
        comps = template.part_ids[template.faces[:, 0]]
    index = MeshIndex(mesh, face_components=comps)
    rng = np.random.default_rng(seed)
    params = net.parameters()
    state = AdamState(params)
    dt = E.default_dtype()
    for it in range(n_iters):
        pts = sample_pretrain_points(template, rng, batch)
        target = index.signed_distance(pts)
        x = E.variable(pts.astype(dt))
        s, _, n = sdf_with_gradient(net, x, create_graph=True)
        l1 = E.mean(E.abs_(E.sub(s, E.Value(target[:, None].astype(dt)))))
        eik = E.mean(E.square(E.sub(E.norm(n, axis=1, eps=1e-24), E.constant(1.0, dt))))
        loss = E.add(l1, E.mul(E.constant(eikonal_weight, dt), eik))
        grads = E.backward(loss)
        # cosine decay to a small floor
        cur = 1e-6 + 0.5 * (lr - 1e-6) * (1.0 + np.cos(np.pi * it / max(n_iters, 1)))
        adam_step(state, grads, cur)
        if log_every and (it % log_every == 0 or it == n_iters - 1):
            log_fn(f"pretrain iter {it}: l1={float(l1.data):.5f} eik={float(eik.data):.5f}")
    return net

"""Message passing over the body mesh graph.

Encode-process-decode: an encoder MLP lifts per-vertex features, three
identical blocks scatter learned edge messages into nodes and run two
mean-aggregation graph convolutions each, and a decoder MLP reads out.
Edge features carry posed edge direction and length, which is how pose
information enters.
"""

import numpy as np

from . import engine as E
from .engine import Value
from .layers import Dense, Module, Parameter


class MeshGraph:
    """Directed 1-ring adjacency of a triangle mesh (both orientations)."""

    def __init__(self, n_vertices, faces):
        pairs = set()
        for a, b, c in np.asarray(faces, dtype=np.int64):
            pairs.update([(a, b), (b, a), (b, c), (c, b), (c, a), (a, c)])
        e = np.array(sorted(pairs), dtype=np.int64) if pairs else np.zeros((0, 2), np.int64)
        self.dst = e[:, 0]
        self.src = e[:, 1]
        self.n_vertices = n_vertices
        deg = np.bincount(self.dst, minlength=n_vertices).astype(np.float64)
        self.inv_deg = 1.0 / np.maximum(deg, 1.0)

    def edge_features(self, vertices, root_rotation=None):
        """[E, 4] features: unit direction (receiver -> sender) and length.

        Directions are expressed in the root joint frame when a root rotation
        is given, making them invariant to global rigid motion of the body.
        """
        v = np.asarray(vertices)
        d = v[self.src] - v[self.dst]
        if root_rotation is not None:
            d = d @ root_rotation  # world -> root frame (R^T x)
        length = np.linalg.norm(d, axis=1, keepdims=True)
        unit = d / np.maximum(length, 1e-12)
        return np.concatenate([unit, length], axis=1)


class NodeStandardize(Module):
    """Per-feature standardization over the node dimension with learned affine."""

    def __init__(self, dim, name, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), name + ".gamma")
        self.beta = Parameter(np.zeros(dim), name + ".beta")
        self.eps = eps

    def __call__(self, x):
        mu = E.mean(x, axis=0, keepdims=True)
        xc = E.sub(x, mu)
        var = E.mean(E.square(xc), axis=0, keepdims=True)
        dt = x.data.dtype.type
        y = E.div(xc, E.sqrt(E.add(var, E.constant(self.eps, dt))))
        return E.add(E.mul(y, self.gamma.value), self.beta.value)


class LayerNorm(Module):
    """Per-node standardization over the feature dimension with learned affine."""

    def __init__(self, dim, name, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), name + ".gamma")
        self.beta = Parameter(np.zeros(dim), name + ".beta")
        self.eps = eps

    def __call__(self, x):
        mu = E.mean(x, axis=-1, keepdims=True)
        xc = E.sub(x, mu)
        var = E.mean(E.square(xc), axis=-1, keepdims=True)
        dt = x.data.dtype.type
        y = E.div(xc, E.sqrt(E.add(var, E.constant(self.eps, dt))))
        return E.add(E.mul(y, self.gamma.value), self.beta.value)


class _TwoLayerMLP(Module):
    def __init__(self, d_in, d_hid, d_out, rng, name):
        self.l1 = Dense(d_in, d_hid, rng, name + ".l1")
        self.l2 = Dense(d_hid, d_hid, rng, name + ".l2")
        self.l3 = Dense(d_hid, d_out, rng, name + ".l3")

    def __call__(self, x):
        x = E.leaky_relu(self.l1(x), 0.01)
        x = E.leaky_relu(self.l2(x), 0.01)
        return self.l3(x)


class GraphConvLayer(Module):
    def __init__(self, dim, rng, name):
        self.w_self = Dense(dim, dim, rng, name + ".self")
        self.w_nbr = Dense(dim, dim, rng, name + ".nbr")
        self.norm = NodeStandardize(dim, name + ".norm")

    def __call__(self, h, graph):
        if len(graph.src):
            gathered = E.take_axis(h, graph.src, axis=0)
            summed = E.scatter_add_axis(gathered, graph.dst, h.data.shape, axis=0)
            nbr = E.mul(summed, Value(graph.inv_deg[:, None].astype(h.data.dtype)))
        else:
            nbr = Value(np.zeros_like(h.data))
        z = E.add(self.w_self(h), self.w_nbr(nbr))
        return E.leaky_relu(self.norm(z), 0.01)


class MessageBlock(Module):
    def __init__(self, dim, rng, name):
        self.edge_mlp = _TwoLayerMLP(4, dim, dim, rng, name + ".edge")
        self.conv1 = GraphConvLayer(dim, rng, name + ".conv1")
        self.conv2 = GraphConvLayer(dim, rng, name + ".conv2")

    def __call__(self, h, graph, edge_feats):
        if len(graph.src):
            msg = self.edge_mlp(edge_feats)
            msg = E.scatter_add_axis(msg, graph.dst, h.data.shape, axis=0)
            z = E.add(h, msg)
        else:
            z = h
        z = self.conv1(z, graph)
        z = self.conv2(z, graph)
        return E.add(h, z)


class GraphNet(Module):
    """Encoder MLP -> three message blocks -> decoder MLP, all width ``dim``."""

    def __init__(self, dim, rng, name, n_blocks=3):
        self.encoder = _TwoLayerMLP(dim, dim, dim, rng, name + ".enc")
        self.enc_norm = LayerNorm(dim, name + ".enc_norm")
        self.blocks = [MessageBlock(dim, rng, f"{name}.block{i}") for i in range(n_blocks)]
        self.decoder = _TwoLayerMLP(dim, dim, dim, rng, name + ".dec")

    def __call__(self, node_feats, graph, edge_feats):
        h = self.enc_norm(self.encoder(node_feats))
        ef = E.as_value(edge_feats)
        for block in self.blocks:
            h = block(h, graph, ef)
        return self.decoder(h)

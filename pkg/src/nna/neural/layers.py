"""Network building blocks: parameters, dense layers, encodings, attention."""

import numpy as np

from . import engine as E
from .engine import Value


class Parameter:
    """Named trainable array. Optionally stores a weight-norm decomposition."""

    def __init__(self, data, name="", trainable=True):
        self.value = Value(np.asarray(data, dtype=E.default_dtype()))
        self.value.requires_grad = trainable
        self.value._param = self
        self.name = name
        self.trainable = trainable

    @property
    def data(self):
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = np.asarray(arr, dtype=self.value.data.dtype)

    @property
    def shape(self):
        return self.value.data.shape

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        self.value.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _collect_params(obj, seen, out):
    if isinstance(obj, Parameter):
        if id(obj) not in seen:
            seen.add(id(obj))
            out.append(obj)
    elif isinstance(obj, Module):
        for v in vars(obj).values():
            _collect_params(v, seen, out)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _collect_params(v, seen, out)
    elif isinstance(obj, dict):
        for v in obj.values():
            _collect_params(v, seen, out)


class Module:
    """Minimal parameter container with recursive discovery."""

    def parameters(self):
        out, seen = [], set()
        _collect_params(self, seen, out)
        return out

    def state_arrays(self):
        return {p.name: p.data for p in self.parameters()}

    def load_state_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"missing parameter array {p.name!r}")
            arr = arrays[p.name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for {p.name!r}: file {arr.shape}, model {p.shape}"
                )
            p.data = arr


class Dense(Module):
    """Affine layer, optionally weight-normalized per output row.

    With weight_norm=True the effective weight is scale[i] * dir[i] / ||dir[i]||.
    Initializing scale to the row norms of the initial weight reproduces the
    plain layer exactly.
    """

    def __init__(self, n_in, n_out, rng, name, weight_norm=False, w_init=None, b_init=None):
        self.n_in = n_in
        self.n_out = n_out
        self.weight_norm = weight_norm
        if w_init is None:
            w_init = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        if b_init is None:
            b_init = np.zeros(n_out)
        if weight_norm:
            self.w_dir = Parameter(w_init, name + ".w_dir")
            self.w_scale = Parameter(
                np.linalg.norm(np.asarray(w_init, dtype=float), axis=1), name + ".w_scale"
            )
        else:
            self.w = Parameter(w_init, name + ".w")
        self.b = Parameter(b_init, name + ".b")

    def effective_weight(self):
        if not self.weight_norm:
            return self.w.value
        row = E.norm(self.w_dir.value, axis=1, keepdims=True, eps=1e-24)
        return E.mul(self.w_dir.value, E.div(E.reshape(self.w_scale.value, (-1, 1)), row))

    def __call__(self, x):
        w = self.effective_weight()
        return E.add(E.matmul(x, E.swapaxes(w, 0, 1)), self.b.value)


class MLP(Module):
    """Stack of Dense layers with one activation between them."""

    def __init__(self, dims, rng, name, activation="relu", weight_norm=False,
                 final_activation=None, zero_init_last=False):
        self.layers = [
            Dense(dims[i], dims[i + 1], rng, f"{name}.l{i}", weight_norm=weight_norm)
            for i in range(len(dims) - 1)
        ]
        if zero_init_last:
            last = self.layers[-1]
            if last.weight_norm:
                last.w_dir.data = np.zeros_like(last.w_dir.data)
                last.w_scale.data = np.zeros_like(last.w_scale.data)
            else:
                last.w.data = np.zeros_like(last.w.data)
            last.b.data = np.zeros_like(last.b.data)
        self.activation = activation
        self.final_activation = final_activation

    def __call__(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            act = self.activation if i < n - 1 else self.final_activation
            x = apply_activation(x, act)
        return x


def apply_activation(x, kind):
    if kind is None or kind == "linear":
        return x
    if kind == "relu":
        return E.relu(x)
    if kind == "leaky_relu":
        return E.leaky_relu(x, 0.01)
    if kind == "tanh":
        return E.tanh(x)
    if kind == "sigmoid":
        return E.sigmoid(x)
    if kind == "softplus100":
        return E.softplus_beta(x, 100.0)
    raise ValueError(f"unknown activation {kind!r}")


def positional_encoding(x, L):
    """[x, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)] along the last axis."""
    if L < 0:
        raise ValueError("L must be >= 0")
    x = E.as_value(x)
    parts = [x]
    for l in range(L):
        s = E.mul(x, E.constant(float(2**l), x.dtype.type))
        parts.append(E.sin(s))
        parts.append(E.cos(s))
    return E.concat(parts, axis=-1) if len(parts) > 1 else x


def positional_encoding_dim(d, L):
    return d * (2 * L + 1)


def scaled_dot_attention(q, k, v, bias):
    """Fuse per-view rows of v with softmax(q.k / sqrt(d) + bias) weights.

    q, k, v: [..., C, d]; bias: [..., C]. Returns ([..., d], weights [..., C]).
    Each view contributes a scalar logit from its own query/key pair.
    """
    q, k, v = E.as_value(q), E.as_value(k), E.as_value(v)
    d = q.data.shape[-1]
    logits = E.div(E.vsum(E.mul(q, k), axis=-1), E.constant(np.sqrt(d), q.dtype.type))
    logits = E.add(logits, E.as_value(bias))
    w = E.softmax(logits, axis=-1)
    out = E.vsum(E.mul(E.reshape(w, w.data.shape + (1,)), v), axis=-2)
    return out, w


class AttentionHead(Module):
    """Learned query/key/value embeddings for multi-view feature fusion."""

    def __init__(self, dim, rng, name):
        self.q = Dense(dim, dim, rng, name + ".q")
        self.k = Dense(dim, dim, rng, name + ".k")
        self.v = Dense(dim, dim, rng, name + ".v")

    def __call__(self, feats, bias):
        """feats: [..., C, dim]; bias: [..., C] additive logits."""
        return scaled_dot_attention(self.q(feats), self.k(feats), self.v(feats), bias)

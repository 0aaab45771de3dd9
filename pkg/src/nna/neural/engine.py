"""Reverse-mode autodiff over dense numpy arrays.

Values form a DAG through parent links; ``grad`` walks it in reverse
topological order. Backward rules are themselves written with engine ops, so
calling ``grad(..., create_graph=True)`` yields differentiable gradients
(needed to push training gradients through surface normals).
"""

import threading

import numpy as np


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tape = None


_state = _State()
_default_dtype = np.float64
_check_finite = True


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def default_dtype():
    return _default_dtype


def set_check_finite(flag):
    """Toggle the per-op NaN/Inf guard (on by default; costs memory bandwidth)."""
    global _check_finite
    _check_finite = bool(flag)


class no_grad:
    def __enter__(self):
        self.prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


class _grad_mode:
    def __init__(self, flag):
        self.flag = flag

    def __enter__(self):
        self.prev = _state.grad_enabled
        _state.grad_enabled = self.flag

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


class Value:
    """A dense array plus optional links into the computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_param")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_default_dtype)
        self.data = data
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Value(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class FiniteCheckError(FloatingPointError):
    pass


def as_value(x):
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=_default_dtype))


def constant(x, dtype=None):
    return Value(np.asarray(x, dtype=dtype or _default_dtype))


def variable(x, dtype=None):
    """Leaf that gradients can be taken with respect to."""
    v = Value(np.array(x, dtype=dtype or _default_dtype))
    v.requires_grad = True
    return v


def _make(data, parents, vjp):
    if _check_finite and not np.all(np.isfinite(data)):
        raise FiniteCheckError("non-finite values produced by an op")
    out = Value(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        if _state.tape is not None:
            _state.tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    """Sum a cotangent down to the shape it was broadcast from."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_value(a), as_value(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_value(a), as_value(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(neg(g), b.data.shape)),
    )


def mul(a, b):
    a, b = as_value(a), as_value(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), a.data.shape),
            _unbroadcast(mul(g, a), b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_value(a), as_value(b)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.data.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp)


def neg(a):
    a = as_value(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def pow_const(a, p):
    a = as_value(a)
    return _make(
        a.data**p,
        (a,),
        lambda g: (mul(g, mul(constant(p, a.dtype.type), pow_const(a, p - 1))),),
    )


def square(a):
    a = as_value(a)
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(constant(2.0, a.dtype.type), a)),))


def sqrt(a):
    a = as_value(a)
    out_data = np.sqrt(a.data)
    out_holder = []

    def vjp(g):
        return (div(g, mul(constant(2.0, a.dtype.type), out_holder[0])),)

    out = _make(out_data, (a,), vjp)
    out_holder.append(out)
    return out


def exp(a):
    a = as_value(a)
    out_holder = []
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, out_holder[0]),))
    out_holder.append(out)
    return out


def log(a):
    a = as_value(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def log1p(a):
    a = as_value(a)
    return _make(np.log1p(a.data), (a,), lambda g: (div(g, add(a, constant(1.0, a.dtype.type))),))


def sin(a):
    a = as_value(a)
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a):
    a = as_value(a)
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a):
    a = as_value(a)
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (mul(g, sub(constant(1.0, a.dtype.type), mul(y, y))),)

    out = _make(np.tanh(a.data), (a,), vjp)
    out_holder.append(out)
    return out


def sigmoid(a):
    a = as_value(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (mul(g, mul(y, sub(constant(1.0, a.dtype.type), y))),)

    out = _make(out_data, (a,), vjp)
    out_holder.append(out)
    return out


def relu(a):
    a = as_value(a)
    mask = (a.data > 0).astype(a.data.dtype)
    return _make(a.data * mask, (a,), lambda g: (mul(g, constant(mask, a.dtype.type)),))


def leaky_relu(a, slope=0.01):
    a = as_value(a)
    scale = np.where(a.data > 0, a.dtype.type(1.0), a.dtype.type(slope))
    return _make(a.data * scale, (a,), lambda g: (mul(g, Value(scale)),))


def softplus_beta(a, beta=100.0):
    """(1/beta) * log(1 + exp(beta * x)), switching to x for beta*x > 30."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    a = as_value(a)
    bx = beta * a.data
    out_data = np.where(bx > 30.0, a.data, np.log1p(np.exp(np.minimum(bx, 30.0))) / beta)
    out_data = out_data.astype(a.data.dtype)

    def vjp(g):
        return (mul(g, sigmoid(mul(constant(beta, a.dtype.type), a))),)

    return _make(out_data, (a,), vjp)


def abs_(a):
    a = as_value(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, Value(sign)),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_value(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, Value(mask)),))


def where_mask(mask, a, b):
    """Select a where boolean ``mask`` (plain ndarray) is true, else b."""
    a, b = as_value(a), as_value(b)
    m = np.asarray(mask, dtype=bool)
    fm = m.astype(a.data.dtype)

    def vjp(g):
        ga = _unbroadcast(mul(g, Value(fm)), a.data.shape)
        gb = _unbroadcast(mul(g, Value(1.0 - fm)), b.data.shape)
        return ga, gb

    return _make(np.where(m, a.data, b.data), (a, b), vjp)


def detach(a):
    return as_value(a).detach()


# ---------------------------------------------------------------------------
# linear algebra / shaping


def matmul(a, b):
    a, b = as_value(a), as_value(b)

    def vjp(g):
        ga = _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.data.shape)
        gb = _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def vsum(a, axis=None, keepdims=False):
    a = as_value(a)
    shape = a.data.shape

    def vjp(g):
        gd = g
        if not keepdims and axis is not None:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ks = list(g.data.shape)
            for i in sorted(a_ % len(shape) for a_ in ax):
                ks.insert(i, 1)
            gd = reshape(g, tuple(ks))
        elif axis is None and not keepdims:
            gd = reshape(g, (1,) * len(shape))
        return (broadcast_to(gd, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_value(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return div(vsum(a, axis=axis, keepdims=keepdims), constant(float(n), a.dtype.type))


def broadcast_to(a, shape):
    a = as_value(a)
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.data.shape),),
    )


def reshape(a, shape):
    a = as_value(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def swapaxes(a, ax1, ax2):
    a = as_value(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (swapaxes(g, ax1, ax2),))


def transpose(a, axes):
    a = as_value(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, tuple(inv)),))


def concat(values, axis=0):
    values = [as_value(v) for v in values]
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i in range(len(values)):
            sl = [slice(None)] * g.data.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(getitem(g, tuple(sl)))
        return tuple(outs)

    return _make(np.concatenate([v.data for v in values], axis=axis), tuple(values), vjp)


def getitem(a, key):
    """Basic slicing only (ints/slices/ellipsis); use take_axis for fancy indexing."""
    a = as_value(a)
    shape = a.data.shape
    return _make(np.ascontiguousarray(a.data[key]), (a,), lambda g: (embed(g, shape, key),))


def embed(a, shape, key):
    """Place ``a`` into a zero array of ``shape`` at ``key`` (adjoint of getitem)."""
    a = as_value(a)
    data = np.zeros(shape, dtype=a.data.dtype)
    data[key] = a.data
    return _make(data, (a,), lambda g: (getitem(g, key),))


def take_axis(a, idx, axis):
    """Fancy-gather along one axis with a 1-D integer index array."""
    a = as_value(a)
    idx = np.asarray(idx).ravel()
    shape = a.data.shape

    def vjp(g):
        return (scatter_add_axis(g, idx, shape, axis),)

    return _make(np.take(a.data, idx, axis=axis), (a,), vjp)


def scatter_add_axis(a, idx, shape, axis):
    """Adjoint of take_axis: sum-scatter slices of ``a`` along ``axis`` into zeros(shape)."""
    a = as_value(a)
    idx = np.asarray(idx).ravel()
    data = np.zeros(shape, dtype=a.data.dtype)
    np.add.at(np.moveaxis(data, axis, 0), idx, np.moveaxis(a.data, axis, 0))

    def vjp(g):
        return (take_axis(g, idx, axis),)

    return _make(data, (a,), vjp)


def cumsum(a, axis):
    a = as_value(a)

    def vjp(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


def flip(a, axis):
    a = as_value(a)
    return _make(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), lambda g: (flip(g, axis),))


def stack(values, axis=0):
    return concat([reshape(v, v.data.shape[:axis] + (1,) + v.data.shape[axis:]) for v in map(as_value, values)], axis=axis)


def softmax(a, axis=-1):
    a = as_value(a)
    shifted = sub(a, Value(np.max(a.data, axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, vsum(e, axis=axis, keepdims=True))


def norm(a, axis=-1, keepdims=False, eps=0.0):
    s = vsum(square(a), axis=axis, keepdims=keepdims)
    if eps:
        s = add(s, constant(eps, a.dtype.type))
    return sqrt(s)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def grad(output, wrt, create_graph=False):
    """Cotangents of ``output`` (summed if non-scalar) w.r.t. each Value in ``wrt``.

    With create_graph=True the returned Values carry their own graph, so the
    result can be differentiated again.
    """
    wrt = list(wrt)
    order = _toposort(output)
    wrt_ids = {id(w) for w in wrt}
    # restrict the sweep to nodes lying on a path from some wrt leaf to output
    reaches = {}
    for node in order:
        r = id(node) in wrt_ids
        if not r:
            for p in node._parents:
                if reaches.get(id(p), False):
                    r = True
                    break
        reaches[id(node)] = r

    cot = {id(output): Value(np.ones_like(output.data))}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = cot.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and id(node) in wrt_ids:
                    cot[id(node)] = g  # keep leaf cotangents
                continue
            if id(node) in wrt_ids:
                cot[id(node)] = g  # wrt may be an interior node
            if not any(reaches.get(id(p), False) for p in node._parents):
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not reaches.get(id(p), False):
                    continue
                have = cot.get(id(p))
                cot[id(p)] = pg if have is None else add(have, pg)
    out = []
    for w in wrt:
        g = cot.get(id(w))
        out.append(g if g is not None else Value(np.zeros_like(w.data)))
    return out


def backward(loss, params=None):
    """Accumulate d(loss)/d(param) for every trainable parameter under ``loss``.

    Returns {Parameter: ndarray}. ``loss`` must be scalar.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = _toposort(loss)
    leaves = []
    for node in order:
        if node._param is not None and node._param.trainable:
            if params is None or node._param in params:
                leaves.append(node)
    gs = grad(loss, leaves, create_graph=False)
    out = {}
    for node, g in zip(leaves, gs):
        p = node._param
        if p in out:
            out[p] = out[p] + g.data
        else:
            out[p] = g.data.copy()
    return out


class Tape:
    """Op log for one forward pass; mainly for diagnostics and scoping."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def backward(self, loss, params=None):
        return backward(loss, params)


def finite_difference_check(fn, x, h=1e-5):
    """Worst-case gradient error of scalar ``fn`` at ``x`` vs central differences.

    The error is max |g_ad - g_fd| scaled by the gradient's infinity norm
    (floored at 1e-8), which stays meaningful when individual entries vanish.
    """
    x = variable(np.asarray(x.data if isinstance(x, Value) else x, dtype=np.float64))
    out = fn(x)
    (g_ad,) = grad(out, [x])
    g_ad = g_ad.data
    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = float(fn(Value(x.data)).data)
        flat[i] = orig - h
        with no_grad():
            fm = float(fn(Value(x.data)).data)
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2 * h)
    scale = max(np.max(np.abs(g_fd)), np.max(np.abs(g_ad)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd)) / scale)

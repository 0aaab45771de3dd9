"""2-D convolution (im2col), bilinear resampling, and the multi-scale image encoder."""

import numpy as np

from . import engine as E
from .engine import Value
from .layers import Module, Parameter


_im2col_cache = {}


def _im2col_index(h, w, kh, kw, stride, pad):
    key = (h, w, kh, kw, stride, pad)
    idx = _im2col_cache.get(key)
    if idx is None:
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        r0 = (np.arange(oh) * stride)[:, None, None, None]
        c0 = (np.arange(ow) * stride)[None, :, None, None]
        dr = np.arange(kh)[None, None, :, None]
        dc = np.arange(kw)[None, None, None, :]
        idx = ((r0 + dr) * wp + (c0 + dc)).reshape(-1)  # [oh*ow*kh*kw]
        _im2col_cache[key] = (idx, oh, ow)
        return _im2col_cache[key]
    return idx


def conv2d(x, w, b, stride=1, pad=1):
    """x: [B, C, H, W]; w: [O, C, kh, kw]; b: [O]. Zero padding."""
    B, C, H, W = x.data.shape
    O, _, kh, kw = w.data.shape
    if pad:
        x = E.embed(
            x,
            (B, C, H + 2 * pad, W + 2 * pad),
            (slice(None), slice(None), slice(pad, pad + H), slice(pad, pad + W)),
        )
    hp, wp = H + 2 * pad, W + 2 * pad
    idx, oh, ow = _im2col_index(H, W, kh, kw, stride, pad)
    flat = E.reshape(x, (B, C, hp * wp))
    cols = E.take_axis(flat, idx, axis=2)            # [B, C, oh*ow*kh*kw]
    cols = E.reshape(cols, (B, C, oh * ow, kh * kw))
    cols = E.transpose(cols, (0, 2, 1, 3))           # [B, oh*ow, C, kh*kw]
    cols = E.reshape(cols, (B * oh * ow, C * kh * kw))
    wmat = E.reshape(w, (O, C * kh * kw))
    out = E.add(E.matmul(cols, E.swapaxes(wmat, 0, 1)), b)
    out = E.reshape(out, (B, oh, ow, O))
    return E.transpose(out, (0, 3, 1, 2))


def reflect_pad_hw(x, pad_h, pad_w):
    """Reflect-pad the trailing two axes of [B, C, H, W]."""
    B, C, H, W = x.data.shape
    ri = np.concatenate([np.arange(pad_h, 0, -1), np.arange(H), np.arange(H - 2, H - 2 - pad_h, -1)]) if pad_h else np.arange(H)
    ci = np.concatenate([np.arange(pad_w, 0, -1), np.arange(W), np.arange(W - 2, W - 2 - pad_w, -1)]) if pad_w else np.arange(W)
    x = E.take_axis(x, ri, axis=2)
    x = E.take_axis(x, ci, axis=3)
    return x


def bilinear_upsample(x, out_h, out_w):
    """Resize [B, C, h, w] to [B, C, out_h, out_w] with align-corners bilinear weights."""
    B, C, h, w = x.data.shape

    def axis_weights(n_in, n_out):
        if n_in == 1:
            return np.zeros(n_out, dtype=np.int64), np.zeros(n_out, dtype=np.int64), np.ones(n_out)
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
        i0 = np.floor(src).astype(np.int64)
        i0 = np.minimum(i0, n_in - 2)
        t = src - i0
        return i0, i0 + 1, 1.0 - t

    r0, r1, wr = axis_weights(h, out_h)
    c0, c1, wc = axis_weights(w, out_w)
    dt = x.data.dtype.type
    a = E.take_axis(x, r0, axis=2)
    bjs = E.take_axis(x, r1, axis=2)
    wr_v = Value(wr.astype(dt).reshape(1, 1, -1, 1))
    rows = E.add(E.mul(a, wr_v), E.mul(bjs, E.sub(E.constant(1.0, dt), wr_v)))
    a = E.take_axis(rows, c0, axis=3)
    bjs = E.take_axis(rows, c1, axis=3)
    wc_v = Value(wc.astype(dt).reshape(1, 1, 1, -1))
    return E.add(E.mul(a, wc_v), E.mul(bjs, E.sub(E.constant(1.0, dt), wc_v)))


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride, rng, name):
        fan = c_in * k * k
        self.w = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan), size=(c_out, c_in, k, k)), name + ".w")
        self.b = Parameter(np.zeros(c_out), name + ".b")
        self.stride = stride
        self.k = k

    def __call__(self, x):
        return conv2d(x, self.w.value, self.b.value, stride=self.stride, pad=self.k // 2)


class ConvEncoder(Module):
    """Three-stage image encoder producing a fused 56-channel map at input resolution.

    Stages output 8, 16 and 32 channels at full, half and quarter resolution;
    all three are bilinearly upsampled back and concatenated. The 4th input
    channel is the foreground mask.
    """

    def __init__(self, rng, name="encoder"):
        self.c1 = Conv2d(4, 8, 3, 1, rng, name + ".c1")
        self.c2 = Conv2d(8, 16, 3, 2, rng, name + ".c2")
        self.c3 = Conv2d(16, 32, 3, 2, rng, name + ".c3")

    def __call__(self, image):
        """image: [H, W, 4] in [0,1] -> [56, H, W] feature map."""
        H, W = image.data.shape[:2]
        x = E.reshape(E.transpose(image, (2, 0, 1)), (1, 4, H, W))
        ph = (-H) % 4
        pw = (-W) % 4
        if ph:
            x = E.take_axis(x, _extend_index(H, ph), axis=2)
        if pw:
            x = E.take_axis(x, _extend_index(W, pw), axis=3)
        f1 = E.relu(self.c1(x))
        f2 = E.relu(self.c2(f1))
        f3 = E.relu(self.c3(f2))
        Hp, Wp = H + ph, W + pw
        up2 = bilinear_upsample(f2, Hp, Wp)
        up3 = bilinear_upsample(f3, Hp, Wp)
        out = E.concat([f1, up2, up3], axis=1)
        if ph or pw:
            out = E.getitem(out, (slice(None), slice(None), slice(0, H), slice(0, W)))
        return E.reshape(out, (56, H, W))


def _extend_index(n, extra):
    """Indices that reflect-extend an axis of length n by ``extra`` entries."""
    return np.concatenate([np.arange(n), np.arange(n - 2, n - 2 - extra, -1)])


def sample_bilinear(fmap, uv, in_frame=None):
    """Sample a [C, H, W] feature map at continuous pixel coordinates.

    uv: [N, 2] Value with u along width, v along height; texel (i, j) sits at
    (j + 0.5, i + 0.5). Coordinates outside [0, W] x [0, H] must be masked by
    the caller (pass ``in_frame`` to zero them here). Differentiable in both
    the map and the coordinates.
    """
    C, H, W = fmap.data.shape
    if H < 2 or W < 2:
        raise ValueError("feature map too small for bilinear sampling")
    dt = fmap.data.dtype.type
    u = E.getitem(uv, (slice(None), slice(0, 1)))
    v = E.getitem(uv, (slice(None), slice(1, 2)))
    fu = E.sub(u, E.constant(0.5, dt))
    fv = E.sub(v, E.constant(0.5, dt))
    j0 = np.clip(np.floor(fu.data[:, 0]).astype(np.int64), 0, W - 2)
    i0 = np.clip(np.floor(fv.data[:, 0]).astype(np.int64), 0, H - 2)
    tu = E.clip(E.sub(fu, Value(j0[:, None].astype(dt))), 0.0, 1.0)
    tv = E.clip(E.sub(fv, Value(i0[:, None].astype(dt))), 0.0, 1.0)
    flat = E.reshape(fmap, (C, H * W))

    def gather(ii, jj):
        g = E.take_axis(flat, ii * W + jj, axis=1)  # [C, N]
        return E.swapaxes(g, 0, 1)                  # [N, C]

    one = E.constant(1.0, dt)
    w00 = E.mul(E.sub(one, tu), E.sub(one, tv))
    w10 = E.mul(tu, E.sub(one, tv))
    w01 = E.mul(E.sub(one, tu), tv)
    w11 = E.mul(tu, tv)
    out = E.add(
        E.add(E.mul(w00, gather(i0, j0)), E.mul(w10, gather(i0, j0 + 1))),
        E.add(E.mul(w01, gather(i0 + 1, j0)), E.mul(w11, gather(i0 + 1, j0 + 1))),
    )
    if in_frame is not None:
        out = E.mul(out, Value(np.asarray(in_frame, dtype=dt)[:, None]))
    return out

"""Dense float tensors with a recording tape for reverse-mode gradients.

Canonical image layout is batch x height x width x channels (BHWC). All
kernels are pure: the same inputs always produce bit-identical outputs.
Set HDT_DEBUG_CHECKS=1 to assert finiteness after every kernel.
"""
from __future__ import annotations

import os

import numpy as np

DEBUG_CHECKS = os.environ.get("HDT_DEBUG_CHECKS", "0") not in ("", "0")

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when tensor dimensions do not match a kernel's contract."""


class Tape:
    """Append-only record of a forward computation.

    Tensors created by kernels register themselves on the tape of their
    inputs; ``backward`` replays the records in reverse order exactly once.
    """

    def __init__(self):
        self.nodes = []

    def record(self, t):
        self.nodes.append(t)

    def leaf(self, data, name=None):
        """Wrap a raw array as a differentiable leaf (e.g. a parameter)."""
        return Tensor(data, tape=self, name=name)


class Tensor:
    """Immutable dense float array, optionally recorded on a tape."""

    def __init__(self, data, tape=None, parents=(), vjp=None, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name
        if tape is not None:
            tape.record(self)
        if DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def constant(data):
    """A tensor that participates in kernels but receives no gradient."""
    return Tensor(data)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _tape(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _make(data, parents, vjp):
    tape = _tape(*parents)
    # keep vjp outputs aligned with parents: wrap raw arrays as constants
    parents = tuple(p if isinstance(p, Tensor) else constant(p) for p in parents)
    return Tensor(data, tape=tape, parents=parents, vjp=vjp if tape else None)


def backward(loss):
    """Accumulate gradients of a scalar loss w.r.t. every taped tensor.

    Returns a dict keyed by Tensor identity; look up leaves to read their
    gradients. Traverses the tape in reverse recording order exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("loss is not recorded on a tape")
    grads = {loss: np.ones_like(loss.data)}
    for t in reversed(loss.tape.nodes):
        g = grads.get(t)
        if g is None or t.vjp is None:
            continue
        for p, pg in zip(t.parents, t.vjp(g)):
            if pg is None or p.tape is None:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} != tensor shape {p.data.shape}")
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return grads


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd)

    def vjp(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _make(ad + bd, (a, b), vjp)


def mul(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd)

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp)


def sub(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd)

    def vjp(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

    return _make(ad - bd, (a, b), vjp)


def neg(x):
    return _make(-_data(x), (x,), lambda g: (-g,))


def mul_scalar(x, c):
    c = float(c)
    return _make(_data(x) * c, (x,), lambda g: (g * c,))


def add_scalar(x, c):
    return _make(_data(x) + float(c), (x,), lambda g: (g,))


def log(x):
    xd = _data(x)
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def abs_(x):
    xd = _data(x)
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clip(x, lo, hi):
    xd = _data(x)
    mask = ((xd > lo) & (xd < hi)).astype(xd.dtype)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


def sigmoid(x):
    xd = _data(x)
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x, slope=0.01):
    xd = _data(x)
    mask = np.where(xd >= 0, 1.0, slope).astype(xd.dtype)
    return _make(xd * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions

def sum_(x, axis=None, keepdims=False):
    xd = _data(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xd.shape).copy(),)

    return _make(xd.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    xd = _data(x)
    if axis is None:
        n = xd.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for a in axes:
            n *= xd.shape[a]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, xd.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, xd.shape).copy(),)

    return _make(xd.mean(axis=axis, keepdims=keepdims), (x,), vjp)


def global_avg_pool(x):
    """Mean over the spatial axes of a BHWC tensor, returning B x C."""
    xd = _data(x)
    if xd.ndim != 4:
        raise ShapeError(f"global_avg_pool expects BHWC, got ndim {xd.ndim}")
    _, h, w, _ = xd.shape

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), xd.shape).copy(),)

    return _make(xd.mean(axis=(1, 2)), (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape):
    xd = _data(x)
    return _make(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def transpose(x, axes):
    xd = _data(x)
    inv = np.argsort(axes)
    return _make(np.transpose(xd, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def roll2d(x, shift_y, shift_x):
    """Cyclic roll over the spatial axes of a BHWC tensor."""
    xd = _data(x)
    out = np.roll(xd, (shift_y, shift_x), axis=(1, 2))
    return _make(out, (x,),
                 lambda g: (np.roll(g, (-shift_y, -shift_x), axis=(1, 2)),))


def concat(xs, axis):
    datas = [_data(x) for x in xs]
    sizes = [d.shape[axis] for d in datas]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(offs[i], offs[i + 1]), axis=axis)
                     for i in range(len(datas)))

    return _make(np.concatenate(datas, axis=axis), tuple(xs), vjp)


def narrow(x, axis, start, length):
    xd = _data(x)
    idx = [slice(None)] * xd.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[idx] = g
        return (gx,)

    return _make(xd[idx].copy(), (x,), vjp)


def pad2d(x, pads, mode="zero"):
    """Pad the spatial axes of a BHWC tensor. pads = (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    xd = _data(x)
    _, h, w, _ = xd.shape
    if mode == "zero":
        out = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

        def vjp(g):
            return (g[:, pt:pt + h, pl:pl + w, :],)

        return _make(out, (x,), vjp)
    if mode == "reflect":
        idx_h = np.pad(np.arange(h), (pt, pb), mode="reflect")
        idx_w = np.pad(np.arange(w), (pl, pr), mode="reflect")
        out = xd[:, idx_h][:, :, idx_w]

        def vjp(g):
            tmp = np.zeros((xd.shape[0], h, g.shape[2], xd.shape[3]), dtype=g.dtype)
            np.add.at(tmp, (slice(None), idx_h), g)
            gx = np.zeros_like(xd)
            np.add.at(gx, (slice(None), slice(None), idx_w), tmp)
            return (gx,)

        return _make(out, (x,), vjp)
    raise ValueError(f"unknown pad mode {mode!r}")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {ad.shape[-1]} vs {bd.shape[-2]}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(
            f"matmul leading dims differ: {ad.shape[:-2]} vs {bd.shape[:-2]}")

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), vjp)


def linear(x, w, b=None):
    """Affine map on the last axis: x @ w + b."""
    xd, wd = _data(x), _data(w)
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(
            f"linear input dim {xd.shape[-1]} != weight rows {wd.shape[0]}")
    out = xd @ wd
    if b is not None:
        out = out + _data(b)

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        gb = g.reshape(-1, wd.shape[1]).sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _make(out, parents, lambda g: vjp(g)[:2])
    return _make(out, parents, vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    xd, gd, bd = _data(x), _data(gamma), _data(beta)
    if gd.shape != (xd.shape[-1],) or bd.shape != (xd.shape[-1],):
        raise ShapeError(
            f"layer_norm affine params must have shape ({xd.shape[-1]},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + bd
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gxhat = g * gd
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), vjp)


def softmax(x, axis=-1):
    xd = _data(x)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


# ---------------------------------------------------------------------------
# convolutions

def _conv_geometry(h, w, k, stride, dilation, padding):
    span = dilation * (k - 1)
    if padding == "same":
        p = span // 2
        pads = (p, p, p, p)
    elif padding == "valid":
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp = h + pads[0] + pads[1]
    wp = w + pads[2] + pads[3]
    ho = (hp - span - 1) // stride + 1
    wo = (wp - span - 1) // stride + 1
    return pads, ho, wo


def conv2d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """2-D cross-correlation on BHWC input with a k x k x Cin x Cout kernel."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be BHWC, got ndim {xd.ndim}")
    if wd.ndim != 4 or wd.shape[0] != wd.shape[1]:
        raise ShapeError(f"conv2d kernel must be k x k x Cin x Cout, got {wd.shape}")
    k = wd.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if xd.shape[3] != wd.shape[2]:
        raise ShapeError(
            f"input channels {xd.shape[3]} != kernel Cin {wd.shape[2]}")
    bsz, h, wdt, cin = xd.shape
    cout = wd.shape[3]
    if b is not None and _data(b).shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},)")

    pads, ho, wo = _conv_geometry(h, wdt, k, stride, dilation, padding)
    xp = np.pad(xd, ((0, 0), (pads[0], pads[1]), (pads[2], pads[3]), (0, 0)))

    patches = np.empty((bsz, ho, wo, k, k, cin), dtype=xd.dtype)
    for ki in range(k):
        for kj in range(k):
            y0, x0 = ki * dilation, kj * dilation
            patches[:, :, :, ki, kj, :] = \
                xp[:, y0:y0 + (ho - 1) * stride + 1:stride,
                   x0:x0 + (wo - 1) * stride + 1:stride, :]
    p2 = patches.reshape(bsz, ho, wo, k * k * cin)
    out = p2 @ wd.reshape(k * k * cin, cout)
    if b is not None:
        out = out + _data(b)

    def vjp(g):
        gw = np.einsum("bhwp,bhwo->po", p2, g).reshape(wd.shape)
        gp = (g @ wd.reshape(-1, cout).T).reshape(bsz, ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                y0, x0 = ki * dilation, kj * dilation
                gxp[:, y0:y0 + (ho - 1) * stride + 1:stride,
                    x0:x0 + (wo - 1) * stride + 1:stride, :] += gp[:, :, :, ki, kj, :]
        gx = gxp[:, pads[0]:pads[0] + h, pads[2]:pads[2] + wdt, :]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def deformable_conv2d(x, w, b, offsets, dilation=1):
    """Convolution whose taps sample at learned continuous offsets.

    Each kernel tap samples the zero-padded input at
    (base position + dilated tap offset + learned offset) via bilinear
    interpolation; coordinates are clamped to the padded image bounds so
    zero offsets reproduce conv2d(..., padding="same") exactly.

    offsets: B x H x W x (2*k*k), ordered (dy, dx) per tap, row-major taps.
    """
    xd, wd, od = _data(x), _data(w), _data(offsets)
    k = wd.shape[0]
    if xd.ndim != 4:
        raise ShapeError(f"deformable_conv2d input must be BHWC, got ndim {xd.ndim}")
    if xd.shape[3] != wd.shape[2]:
        raise ShapeError(
            f"input channels {xd.shape[3]} != kernel Cin {wd.shape[2]}")
    if od.shape != (xd.shape[0], xd.shape[1], xd.shape[2], 2 * k * k):
        raise ShapeError(
            f"offset field must be B x H x W x {2 * k * k}, got {od.shape}")
    bsz, h, wdt, cin = xd.shape
    cout = wd.shape[3]

    p = dilation * (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    hp, wp = h + 2 * p, wdt + 2 * p

    offs = od.reshape(bsz, h, wdt, k, k, 2)
    ys = np.arange(h, dtype=xd.dtype)[None, :, None, None, None]
    xs = np.arange(wdt, dtype=xd.dtype)[None, None, :, None, None]
    tap_y = (dilation * np.arange(k, dtype=xd.dtype))[None, None, None, :, None]
    tap_x = (dilation * np.arange(k, dtype=xd.dtype))[None, None, None, None, :]
    py_raw = ys + tap_y + offs[..., 0]
    px_raw = xs + tap_x + offs[..., 1]
    py = np.clip(py_raw, 0.0, hp - 1.0)
    px = np.clip(px_raw, 0.0, wp - 1.0)

    y0 = np.clip(np.floor(py).astype(np.int64), 0, hp - 2)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, wp - 2)
    wy = py - y0
    wx = px - x0
    bi = np.arange(bsz)[:, None, None, None, None]

    c00 = xp[bi, y0, x0]
    c01 = xp[bi, y0, x0 + 1]
    c10 = xp[bi, y0 + 1, x0]
    c11 = xp[bi, y0 + 1, x0 + 1]
    wy_ = wy[..., None]
    wx_ = wx[..., None]
    samples = ((1 - wy_) * (1 - wx_) * c00 + (1 - wy_) * wx_ * c01
               + wy_ * (1 - wx_) * c10 + wy_ * wx_ * c11)

    out = np.einsum("bhwklc,klco->bhwo", samples, wd) + _data(b)

    def vjp(g):
        gs = np.einsum("bhwo,klco->bhwklc", g, wd)
        gw = np.einsum("bhwklc,bhwo->klco", samples, g)
        gb = g.sum(axis=(0, 1, 2))

        gxp = np.zeros_like(xp)
        np.add.at(gxp, (bi, y0, x0), gs * (1 - wy_) * (1 - wx_))
        np.add.at(gxp, (bi, y0, x0 + 1), gs * (1 - wy_) * wx_)
        np.add.at(gxp, (bi, y0 + 1, x0), gs * wy_ * (1 - wx_))
        np.add.at(gxp, (bi, y0 + 1, x0 + 1), gs * wy_ * wx_)
        gx = gxp[:, p:p + h, p:p + wdt, :]

        dvdy = (1 - wx_) * (c10 - c00) + wx_ * (c11 - c01)
        dvdx = (1 - wy_) * (c01 - c00) + wy_ * (c11 - c10)
        my = ((py_raw > 0) & (py_raw < hp - 1)).astype(xd.dtype)
        mx = ((px_raw > 0) & (px_raw < wp - 1)).astype(xd.dtype)
        gpy = (gs * dvdy).sum(axis=-1) * my
        gpx = (gs * dvdx).sum(axis=-1) * mx
        goff = np.stack([gpy, gpx], axis=-1).reshape(od.shape)
        return (gx, gw, gb, goff)

    return _make(out, (x, w, b, offsets), vjp)


# ---------------------------------------------------------------------------
# gradient oracle

def finite_difference_grad(f, x, h=1e-4):
    """Central-difference gradient of a scalar-valued array function.

    f maps an ndarray to a float; x should be float64 for usable accuracy.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

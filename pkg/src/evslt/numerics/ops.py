"""Differentiable primitives.

Each op computes its forward value with numpy and hands a backward closure to
``record``. The closure receives the upstream gradient and returns one
gradient per input (``None`` for inputs that need none).
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evslt.errors import AllPadded, DegenerateBatch, ShapeMismatch
from evslt.numerics.tensor import Tensor, as_tensor, record

ZOH_SERIES_THRESHOLD = 1e-4


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return record("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return record("silu", ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return record("relu", np.where(mask, ad, 0).astype(ad.dtype), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), floored at the smallest positive normal so it never hits 0."""
    ad = a.data
    out = np.maximum(np.logaddexp(0, ad), np.finfo(ad.dtype).tiny).astype(ad.dtype)
    return record("softplus", out, (a,), lambda g: (g * _sigmoid(ad),))


def zoh_phi(a: Tensor) -> Tensor:
    """(e^u - 1) / u elementwise, with its removable singularity at u = 0.

    Below ``ZOH_SERIES_THRESHOLD`` the truncated series 1 + u/2 + u^2/6 is used.
    """
    u = a.data
    small = np.abs(u) < ZOH_SERIES_THRESHOLD
    safe = np.where(small, 1.0, u)
    direct = np.expm1(safe) / safe
    out = np.where(small, 1.0 + u / 2.0 + u * u / 6.0, direct).astype(u.dtype)

    def back(g):
        d_direct = (np.exp(safe) - direct) / safe
        d_series = 0.5 + u / 3.0 + u * u / 8.0
        return (g * np.where(small, d_series, d_direct),)

    return record("zoh_phi", out, (a,), back)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(sum(a, axes, keepdims), 1.0 / n)


def max_pool_time(a: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling along axis 1 of a (B, T, C) tensor.

    Trailing steps that do not fill a window are dropped. Ties route the
    gradient to the first maximal position.
    """
    x = a.data
    b, t, c = x.shape
    tp = t // factor
    win = x[:, : tp * factor].reshape(b, tp, factor, c)
    idx = np.argmax(win, axis=2)[:, :, None, :]
    out = np.take_along_axis(win, idx, axis=2)[:, :, 0, :]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[:, :, None, :], axis=2)
        gx = np.zeros_like(x)
        gx[:, : tp * factor] = gw.reshape(b, tp * factor, c)
        return (gx,)

    return record("max_pool", out, (a,), back)


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    return record("flip", np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        gx = np.zeros(shape, dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return record("index", np.asarray(a.data[idx]).copy(), (a,), back)


def split(a: Tensor, sizes, axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    axis = axis % a.ndim
    bounds = np.cumsum([0, *sizes])
    if bounds[-1] != a.shape[axis]:
        raise ShapeMismatch(f"split sizes {sizes} do not cover {a.shape[axis]}")
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(int(lo), int(hi))
        sl = tuple(sl)

        def back(g, sl=sl):
            gx = np.zeros(a.shape, a.dtype)
            gx[sl] = g
            return (gx,)

        outs.append(record("split", a.data[sl].copy(), (a,), back))
    return outs


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0, *sizes])

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", ad @ bd, (a, b), back)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    xd, wd = x.data, w.data
    n, c, h, wdt = xd.shape
    o, c2, kh, kw = wd.shape
    if c != c2:
        raise ShapeMismatch(f"conv2d channels {c} vs weight {c2}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = wd.reshape(o, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return gx, gw

    return record("conv2d", np.ascontiguousarray(out), (x, w), back)


def conv1d_time(x: Tensor, w: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Dense 1-D convolution along axis 1 of (B, T, Cin) with (K, Cin, Cout) weights."""
    xd, wd = x.data, w.data
    k = wd.shape[0]
    xp = np.pad(xd, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = xp.shape[1] - k + 1
    out = builtins.sum(xp[:, i : i + t_out] @ wd[i] for i in range(k))

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for i in range(k):
            gxp[:, i : i + t_out] += g @ wd[i].T
            gw[i] = xp[:, i : i + t_out].reshape(-1, xp.shape[-1]).T @ g2
        return gxp[:, pad_left : pad_left + xd.shape[1]], gw

    return record("conv1d", out, (x, w), back)


def depthwise_conv1d_time(x: Tensor, w: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Per-channel 1-D convolution along axis 1 of (B, T, C) with (K, C) weights."""
    xd, wd = x.data, w.data
    k = wd.shape[0]
    xp = np.pad(xd, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = xp.shape[1] - k + 1
    out = builtins.sum(xp[:, i : i + t_out] * wd[i] for i in range(k))

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(k):
            gxp[:, i : i + t_out] += g * wd[i]
            gw[i] = (xp[:, i : i + t_out] * g).sum(axis=(0, 1))
        return gxp[:, pad_left : pad_left + xd.shape[1]], gw

    return record("dwconv1d", out, (x, w), back)


# --------------------------------------------------------------------- norms


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    wd = weight.data
    n = xd.shape[-1]

    def back(g):
        gxhat = g * wd
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, wd.shape), _unbroadcast(g, bias.shape)

    return record("layer_norm", xhat * wd + bias.data, (x, weight, bias), back)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    wd = weight.data
    n = xd.shape[-1]

    def back(g):
        gxhat = g * wd
        gx = inv * (gxhat - xhat * (gxhat * xhat).sum(-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, wd.shape)

    return record("rms_norm", xhat * wd, (x, weight), back)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, *, axis: int = 1, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except ``axis``.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    xd = x.data
    axis = axis % xd.ndim
    red = tuple(i for i in range(xd.ndim) if i != axis)
    bshape = [1] * xd.ndim
    bshape[axis] = xd.shape[axis]
    wd = weight.data.reshape(bshape)
    bd = bias.data.reshape(bshape)
    n = xd.size // xd.shape[axis]

    if training:
        if n < 2:
            raise DegenerateBatch("batch norm in train mode needs at least 2 values per channel")
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / (n - 1))

        def back(g):
            gxhat = g * wd
            gx = inv / n * (n * gxhat - gxhat.sum(red, keepdims=True)
                            - xhat * (gxhat * xhat).sum(red, keepdims=True))
            return gx, (g * xhat).sum(red), g.sum(red)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv

        def back(g):
            return g * wd * inv, (g * xhat).sum(red), g.sum(red)

    out = (xhat * wd + bd).astype(xd.dtype)
    return record("batch_norm", out, (x, weight, bias), back)


# ------------------------------------------------------------ softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", out, (x,),
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))
    out = xd - lse
    return record("log_softmax", out, (x,),
                  lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    Softmax and log are fused with log-sum-exp stabilization.
    """
    z = logits.data
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise AllPadded("every target position is padding")
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(picked * mask).sum() / count, dtype=z.dtype)

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask[..., None] * (g / count)),)

    return record("cross_entropy", loss, (logits,), back)


# -------------------------------------------------------------- state space


def scan(a_bar: Tensor, b_bar: Tensor, x: Tensor, c: Tensor, d_skip: Tensor,
         return_states: bool = False):
    """Linear recurrence h_t = a_t * h_{t-1} + b_t * x_t, y_t = <c_t, h_t> + d * x_t.

    Shapes: a_bar, b_bar (B, T, D, S); x (B, T, D); c (B, T, S); d_skip (D,).
    The loop runs over T only; batch, channel and state axes are vectorized.
    """
    A, Bb, xd, cd, dd = a_bar.data, b_bar.data, x.data, c.data, d_skip.data
    bsz, t_len, d, s = A.shape
    H = np.empty_like(A)
    h = np.zeros((bsz, d, s), dtype=A.dtype)
    u = Bb * xd[..., None]
    for t in range(t_len):
        h = A[:, t] * h + u[:, t]
        H[:, t] = h
    y = np.einsum("btds,bts->btd", H, cd) + xd * dd

    def back(g):
        DH = np.empty_like(H)
        carry = np.zeros((bsz, d, s), dtype=A.dtype)
        for t in range(t_len - 1, -1, -1):
            carry = carry + g[:, t, :, None] * cd[:, t, None, :]
            DH[:, t] = carry
            carry = carry * A[:, t]
        h_prev = np.zeros_like(H)
        h_prev[:, 1:] = H[:, :-1]
        ga = DH * h_prev
        gb = DH * xd[..., None]
        gx = (DH * Bb).sum(-1) + g * dd
        gc = np.einsum("btd,btds->bts", g, H)
        gd = (g * xd).sum(axis=(0, 1))
        return ga, gb, gx, gc, gd

    out = record("scan", y, (a_bar, b_bar, x, c, d_skip), back)
    if return_states:
        return out, H
    return out

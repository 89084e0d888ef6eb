"""Differentiable numeric primitives.

Spatial operations work on channels-last arrays.  A single image is
``(H, W, C)``; a batch is ``(N, H, W, C)``.  Single images are promoted to a
batch of one internally and demoted again on the way out.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .tensor import Function, Tensor, as_tensor, unbroadcast

Axis = Union[None, int, Tuple[int, ...]]


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = unbroadcast(grad / self.b, self.a.shape) if self.needs_grad[0] else None
        gb = (
            unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
            if self.needs_grad[1]
            else None
        )
        return ga, gb


class Power(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1),)


def _same_dtype(a, b):
    """Keep python scalars from promoting float32 arrays."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def add(a, b) -> Tensor:
    return Add.apply(*_same_dtype(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_same_dtype(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_same_dtype(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_same_dtype(a, b))


def power(x, exponent: float) -> Tensor:
    return Power.apply(x, exponent=exponent)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        # keep the range open so downstream logs and thresholds stay defined
        lo = np.finfo(x.dtype).tiny
        hi = np.nextafter(np.asarray(1.0, dtype=x.dtype), np.asarray(0.0, dtype=x.dtype))
        return np.clip(out, lo, hi)

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


class Sine(Function):
    def forward(self, x, a, w):
        self.x, self.a, self.w = x, a, w
        wx = w * x
        self.sin, self.cos = np.sin(wx), np.cos(wx)
        return a * self.sin

    def backward(self, grad):
        gx = ga = gw = None
        if self.needs_grad[0]:
            gx = unbroadcast(grad * self.a * self.w * self.cos, self.x.shape)
        if self.needs_grad[1]:
            ga = unbroadcast(grad * self.sin, self.a.shape)
        if self.needs_grad[2]:
            gw = unbroadcast(grad * self.a * self.x * self.cos, self.w.shape)
        return gx, ga, gw


def elementwise_sine(x, a, w) -> Tensor:
    """``a * sin(w * x)``; ``a`` and ``w`` broadcast against ``x``."""
    x = as_tensor(x)
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=x.dtype))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=x.dtype))
    return Sine.apply(x, a, w)


# ----------------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes if axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, index):
        self.shape, self.dtype, self.index = x.shape, x.dtype, index
        return x[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Sum(Function):
    def forward(self, x, axis, keepdims):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes) if axes else None)


def getitem(x, index) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def sum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = gb = None
        if self.needs_grad[0]:
            if b.ndim == 1:
                ga = np.multiply.outer(grad, b)
            else:
                ga = grad @ np.swapaxes(b, -1, -2) if a.ndim > 1 else grad @ b.T
            ga = unbroadcast(ga, a.shape)
        if self.needs_grad[1]:
            if a.ndim == 1:
                gb = np.multiply.outer(a, grad)
            elif b.ndim == 1:
                gb = (np.swapaxes(a, -1, -2) @ grad[..., None])[..., 0]
            else:
                gb = np.swapaxes(a, -1, -2) @ grad
            gb = unbroadcast(gb, b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    return MatMul.apply(*_same_dtype(a, b))


# ----------------------------------------------------------------------------
# normalisation, softmax and losses
# ----------------------------------------------------------------------------


def _stable_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        self.out = _stable_softmax(x, axis)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.soft = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.soft * grad.sum(axis=self.axis, keepdims=True),)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


class MaskedSoftmax(Function):
    """Softmax restricted to entries where ``mask`` is 1.

    ``weights = mask * e / sum(mask * e)``.  The mask is differentiable so a
    straight-through saliency map can receive gradient through it.
    """

    def forward(self, x, mask, axis):
        self.axis = axis
        self.mask_shape = mask.shape
        active = np.broadcast_to(mask > 0.5, x.shape)
        if not active.any(axis=axis).all():
            raise ValueError("masked softmax: a row has no active entry")
        peak = np.where(active, x, -np.inf).max(axis=axis, keepdims=True)
        self.e = np.exp(np.minimum(x - peak, 60.0))
        me = mask * self.e
        self.total = me.sum(axis=axis, keepdims=True)
        self.out = me / self.total
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        gx = self.out * (grad - inner)
        gm = None
        if self.needs_grad[1]:
            gm = unbroadcast(self.e / self.total * (grad - inner), self.mask_shape)
        return gx, gm


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    return MaskedSoftmax.apply(*_same_dtype(x, mask), axis=axis)


def cross_entropy(logits, label) -> Tensor:
    """``-log softmax(logits)[label]``, averaged over a batch.

    ``logits`` is ``(K,)`` with an int label, or ``(N, K)`` with ``N`` labels.
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range for {num_classes} classes: {labels.tolist()}")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -logp[int(labels[0])]
    picked = logp[np.arange(len(labels)), labels]
    return -mean(picked)


class LayerNorm(Function):
    def forward(self, x, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat

    def backward(self, grad):
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=-1, keepdims=True)
        return (self.inv * (grad - g_mean - self.xhat * gx_mean),)


def layer_normalize(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalisation over the last axis."""
    return LayerNorm.apply(x, eps=eps)


class InstanceNorm(Function):
    def forward(self, x, eps):
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = x.var(axis=(1, 2), keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat

    def backward(self, grad):
        g_mean = grad.mean(axis=(1, 2), keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=(1, 2), keepdims=True)
        return (self.inv * (grad - g_mean - self.xhat * gx_mean),)


def instance_normalize(x, eps: float = 1e-5) -> Tensor:
    """Per-image, per-channel normalisation over spatial positions."""
    x, single = _batched(x)
    return _unbatched(InstanceNorm.apply(x, eps=eps), single)


class StraightThrough(Function):
    """Forward emits a fixed array, backward is the identity on ``x``."""

    def forward(self, x, value):
        return np.asarray(value, dtype=x.dtype)

    def backward(self, grad):
        return (grad,)


def straight_through(x, value: np.ndarray) -> Tensor:
    return StraightThrough.apply(x, value=value)


# ----------------------------------------------------------------------------
# spatial operations
# ----------------------------------------------------------------------------


def _batched(x) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


def _unbatched(x: Tensor, single: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if single else x


def _window(x: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return x[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]


def _conv_geometry(h, w, kh, kw, stride, padding, op):
    if stride < 1 or padding < 0:
        raise ValueError(f"{op}: stride must be positive and padding non-negative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ValueError(f"{op}: kernel height {kh} exceeds padded height {hp}")
    if kw > wp:
        raise ValueError(f"{op}: kernel width {kw} exceeds padded width {wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


class Conv2d(Function):
    def forward(self, x, w, b, stride, padding):
        n, h, wd, c = x.shape
        kh, kw, cin, cout = w.shape
        if c != cin:
            raise ValueError(f"conv2d: channel axis mismatch, input has {c}, weight expects {cin}")
        if b.shape != (cout,):
            raise ValueError(f"conv2d: bias axis mismatch, expected ({cout},) got {b.shape}")
        ho, wo = _conv_geometry(h, wd, kh, kw, stride, padding, "conv2d")
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
        out = np.empty((n, ho, wo, cout), dtype=np.result_type(x, w))
        out[...] = b
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, ho, wo, stride) @ w[i, j]
        self.xp, self.w, self.stride, self.padding = xp, w, stride, padding
        self.in_shape = x.shape
        return out

    def backward(self, grad):
        xp, w, s, p = self.xp, self.w, self.stride, self.padding
        kh, kw, cin, cout = w.shape
        n, ho, wo, _ = grad.shape
        g2 = grad.reshape(-1, cout)
        gx = gw = gb = None
        if self.needs_grad[0]:
            h, wd = self.in_shape[1:3]
            if s == 1 and p <= min(kh, kw) - 1:
                # full correlation of the output gradient with the flipped kernel
                gp = np.pad(grad, ((0, 0), (kh - 1 - p,) * 2, (kw - 1 - p,) * 2, (0, 0)))
                gx = np.zeros(self.in_shape, dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx += gp[:, i : i + h, j : j + wd, :] @ w[kh - 1 - i, kw - 1 - j].T
            else:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        _window(gxp, i, j, ho, wo, s)[...] += grad @ w[i, j].T
                gx = gxp[:, p : p + h, p : p + wd, :]
        if self.needs_grad[1]:
            gw = np.empty_like(w)
            for i in range(kh):
                for j in range(kw):
                    patch = np.ascontiguousarray(_window(xp, i, j, ho, wo, s)).reshape(-1, cin)
                    gw[i, j] = patch.T @ g2
        if self.needs_grad[2]:
            gb = g2.sum(axis=0)
        return gx, gw, gb


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, weight layout ``(kh, kw, C_in, C_out)``."""
    x, single = _batched(x)
    return _unbatched(Conv2d.apply(x, weight, bias, stride=stride, padding=padding), single)


class DeformSampleConv(Function):
    """Convolution whose kernel taps sample the input at learned offsets.

    ``offsets`` has ``2 * kh * kw`` channels ordered ``(dy, dx)`` per tap in
    row-major tap order.  Samples are bilinear; positions outside the input
    read zeros, which is the same as sampling a zero-padded input.
    """

    def forward(self, x, offsets, w, b, stride, padding):
        n, h, wd, c = x.shape
        kh, kw, cin, cout = w.shape
        if c != cin:
            raise ValueError(
                f"deformable_conv2d: channel axis mismatch, input has {c}, weight expects {cin}"
            )
        ho, wo = _conv_geometry(h, wd, kh, kw, stride, padding, "deformable_conv2d")
        taps = kh * kw
        if offsets.shape != (n, ho, wo, 2 * taps):
            raise ValueError(
                f"deformable_conv2d: offsets must be {(n, ho, wo, 2 * taps)}, got {offsets.shape}"
            )
        off = offsets.reshape(n, ho, wo, taps, 2)
        ti, tj = np.divmod(np.arange(taps), kw)
        base_y = (np.arange(ho) * stride - padding)[:, None] + ti[None, :]
        base_x = (np.arange(wo) * stride - padding)[:, None] + tj[None, :]
        py = base_y[None, :, None, :] + off[..., 0]
        px = base_x[None, None, :, :] + off[..., 1]
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly, lx = py - y0, px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        nidx = np.arange(n)[:, None, None, None] * (h * wd)
        zero_row = n * h * wd

        def flat(yy, xx):
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < wd)
            return np.where(ok, nidx + yy * wd + xx, zero_row).reshape(-1)

        idx = [flat(y0, x0), flat(y0, x0 + 1), flat(y0 + 1, x0), flat(y0 + 1, x0 + 1)]
        wts = [(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx]
        xf = np.concatenate([x.reshape(-1, c), np.zeros((1, c), dtype=x.dtype)])
        vals = [xf[k] for k in idx]
        m = n * ho * wo * taps
        sampled = np.zeros((m, c), dtype=np.result_type(x, w))
        for v, wt in zip(vals, wts):
            sampled += wt.reshape(-1, 1) * v
        out = sampled.reshape(n * ho * wo, taps * c) @ w.reshape(taps * c, cout) + b

        self.shapes = (x.shape, w.shape, offsets.shape, (n, ho, wo))
        self.idx, self.wts, self.vals = idx, wts, vals
        self.ly, self.lx = ly, lx
        self.sampled, self.w = sampled, w
        return out.reshape(n, ho, wo, cout)

    def backward(self, grad):
        x_shape, w_shape, off_shape, (n, ho, wo) = self.shapes
        kh, kw, c, cout = w_shape
        taps = kh * kw
        g2 = grad.reshape(-1, cout)
        gx = goff = gw = gb = None
        if self.needs_grad[2]:
            gw = (self.sampled.reshape(-1, taps * c).T @ g2).reshape(w_shape)
        if self.needs_grad[3]:
            gb = g2.sum(axis=0)
        if not (self.needs_grad[0] or self.needs_grad[1]):
            return gx, goff, gw, gb
        gs = (g2 @ self.w.reshape(taps * c, cout).T).reshape(-1, c)
        m = gs.shape[0]
        if self.needs_grad[0]:
            rows = np.tile(np.arange(m), 4)
            cols = np.concatenate(self.idx)
            data = np.concatenate([wt.reshape(-1) for wt in self.wts])
            size = int(np.prod(x_shape[:3])) + 1
            scatter = sp.csr_matrix((data, (rows, cols)), shape=(m, size))
            gx = np.asarray(scatter.T @ gs)[:-1].reshape(x_shape)
        if self.needs_grad[1]:
            v00, v01, v10, v11 = self.vals
            ly = self.ly.reshape(-1, 1)
            lx = self.lx.reshape(-1, 1)
            dy = (v10 - v00) * (1 - lx) + (v11 - v01) * lx
            dx = (v01 - v00) * (1 - ly) + (v11 - v10) * ly
            goff = np.stack([(gs * dy).sum(axis=1), (gs * dx).sum(axis=1)], axis=-1)
            goff = goff.reshape(off_shape)
        return gx, goff, gw, gb


def deformable_conv2d(
    x,
    weight,
    bias,
    offset_weight,
    offset_bias,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Deformable convolution with an offset predictor sharing its geometry.

    The offset predictor is a plain convolution with the same kernel, stride
    and padding, emitting ``2 * kh * kw`` offset channels per output cell.
    """
    x, single = _batched(x)
    offsets = conv2d(x, offset_weight, offset_bias, stride=stride, padding=padding)
    out = DeformSampleConv.apply(x, offsets, weight, bias, stride=stride, padding=padding)
    return _unbatched(out, single)


class MaxPool2d(Function):
    def forward(self, x, kernel, stride):
        n, h, w, c = x.shape
        ho, wo = _conv_geometry(h, w, kernel, kernel, stride, 0, "max_pool2d")
        windows = np.stack(
            [_window(x, i, j, ho, wo, stride) for i in range(kernel) for j in range(kernel)],
            axis=-1,
        )
        # argmax returns the first maximum, i.e. row-major first within a window
        self.arg = windows.argmax(axis=-1)
        self.kernel, self.stride, self.in_shape = kernel, stride, x.shape
        return np.take_along_axis(windows, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s = self.kernel, self.stride
        n, ho, wo, c = grad.shape
        gx = np.zeros(self.in_shape, dtype=grad.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            _window(gx, i, j, ho, wo, s)[...] += grad * (self.arg == t)
        return (gx,)


def max_pool2d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    x, single = _batched(x)
    return _unbatched(MaxPool2d.apply(x, kernel=kernel, stride=stride), single)


def patch_average_pool(x, k: int) -> Tensor:
    """Mean over non-overlapping ``k x k`` patches: ``(H, W, C) -> (H/k, W/k, C)``."""
    x, single = _batched(x)
    n, h, w, c = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"patch_average_pool: extents {h}x{w} not divisible by k={k}")
    tiles = reshape(x, (n, h // k, k, w // k, k, c))
    return _unbatched(mean(tiles, axis=(2, 4)), single)


def global_average_pool(x) -> Tensor:
    """Per-channel mean over all positions.

    ``(H, W, C) -> (C,)``, ``(N, H, W, C) -> (N, C)``, ``(L, C) -> (C,)``.
    """
    x = as_tensor(x)
    if x.ndim == 4:
        return mean(x, axis=(1, 2))
    return mean(x, axis=tuple(range(x.ndim - 1)))

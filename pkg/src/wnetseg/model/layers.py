"""Layers with hand-written backward passes.

Activations are NHWC arrays.  Each layer owns a set of named parameters and
implements ``forward(params, x, ctx) -> (y, cache)`` and
``backward(params, dy, cache, grads) -> dx``, where ``grads`` is a dict that
receives the parameter gradients under the same names.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Context:
    """Per-pass settings: training mode, dropout stream and batch-norm state."""

    training: bool = False
    rng: np.random.Generator | None = None
    state: dict = field(default_factory=dict)


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name = ""

    def init(self, rng, dtype) -> dict:
        return {}

    def init_state(self, dtype) -> dict:
        return {}

    def param_names(self) -> list[str]:
        return []

    def forward(self, params, x, ctx):
        raise NotImplementedError

    def backward(self, params, dy, cache, grads):
        raise NotImplementedError


def channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last (channel) one, through BLAS."""
    rows = x.reshape(-1, x.shape[-1])
    return np.ones(rows.shape[0], dtype=x.dtype) @ rows


def channel_affine(x: np.ndarray, scale=None, shift=None) -> np.ndarray:
    """``x * scale + shift`` with per-channel vectors.

    Broadcasting over a short trailing axis is slow in numpy, so the vectors
    are tiled across a whole image row instead.
    """
    w, c = x.shape[-2], x.shape[-1]
    rows = x.reshape(-1, w * c)
    out = rows * np.tile(scale, w) if scale is not None else rows.copy()
    if shift is not None:
        out += np.tile(shift, w)
    return out.reshape(x.shape)


class _PaddedGrid:
    """Zero-padded NHWC batch flattened to ``(rows + tail, C)``.

    With a one-pixel border, tap ``(ky, kx)`` of a 3x3 stencil anchored at
    flat row ``q`` reads row ``q + ky*(W+2) + kx``, so every tap is a
    contiguous slice and a convolution becomes nine shifted matmuls.  Outputs
    for pixel ``(n, y, x)`` live at row ``n*(H+2)*(W+2) + y*(W+2) + x``; the
    zero tail keeps the last taps in bounds.
    """

    def __init__(self, shape):
        self.n, self.h, self.w, self.c = shape
        self.pitch = self.w + 2
        self.rows = self.n * (self.h + 2) * self.pitch
        self.tail = 2 * self.pitch + 2
        self.shifts = [ky * self.pitch + kx for ky in range(3) for kx in range(3)]

    def pad(self, x):
        flat = np.zeros((self.rows + self.tail, x.shape[-1]), dtype=x.dtype)
        grid = flat[: self.rows].reshape(self.n, self.h + 2, self.pitch, x.shape[-1])
        grid[:, 1:-1, 1:-1] = x
        return flat

    def unpad(self, flat):
        grid = flat[: self.rows].reshape(self.n, self.h + 2, self.pitch, -1)
        return np.ascontiguousarray(grid[:, 1:-1, 1:-1])

    def anchored(self, y):
        """Place an NHWC array at its anchor rows, zeros elsewhere."""
        full = np.zeros((self.n, self.h + 2, self.pitch, y.shape[-1]), dtype=y.dtype)
        full[:, : self.h, : self.w] = y
        return full.reshape(self.rows, -1)

    def gather(self, out):
        grid = out.reshape(self.n, self.h + 2, self.pitch, -1)
        return np.ascontiguousarray(grid[:, : self.h, : self.w])

    def taps(self, flat, k):
        s = self.shifts[k]
        return flat[s : s + self.rows]

    def line_view(self, arr):
        """``(rows, C)`` array seen as one line of ``pitch*C`` values per padded image row."""
        return arr.reshape(-1, self.pitch * arr.shape[-1])


class Conv3x3(Layer):
    """Dense 3x3 convolution, stride 1, zero 'same' padding."""

    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def param_names(self):
        return [f"{self.name}.w", f"{self.name}.b"]

    def init(self, rng, dtype):
        return {
            f"{self.name}.w": _uniform(rng, (3, 3, self.cin, self.cout), 9 * self.cin, dtype),
            f"{self.name}.b": np.zeros(self.cout, dtype=dtype),
        }

    def forward(self, params, x, ctx):
        grid = _PaddedGrid(x.shape)
        flat = grid.pad(x)
        taps = params[f"{self.name}.w"].reshape(9, self.cin, self.cout)
        out = grid.taps(flat, 0) @ taps[0]
        for k in range(1, 9):
            out += grid.taps(flat, k) @ taps[k]
        y = channel_affine(grid.gather(out), None, params[f"{self.name}.b"])
        return y, (grid, flat)

    def backward(self, params, dy, cache, grads):
        grid, flat = cache
        taps = params[f"{self.name}.w"].reshape(9, self.cin, self.cout)
        d = grid.anchored(dy)
        dw = np.empty_like(taps)
        dflat = np.zeros_like(flat)
        for k, s in enumerate(grid.shifts):
            dw[k] = grid.taps(flat, k).T @ d
            dflat[s : s + grid.rows] += d @ taps[k].T
        grads[f"{self.name}.w"] = dw.reshape(3, 3, self.cin, self.cout)
        grads[f"{self.name}.b"] = channel_sum(dy)
        return grid.unpad(dflat)


class Depthwise3x3(Layer):
    """Per-channel 3x3 spatial filter without bias."""

    def __init__(self, name, channels):
        self.name, self.channels = name, channels

    def param_names(self):
        return [f"{self.name}.w"]

    def init(self, rng, dtype):
        return {f"{self.name}.w": _uniform(rng, (3, 3, self.channels), 9, dtype)}

    def forward(self, params, x, ctx):
        grid = _PaddedGrid(x.shape)
        flat = grid.pad(x)
        taps = params[f"{self.name}.w"].reshape(9, self.channels)
        out = np.zeros((grid.rows, self.channels), dtype=x.dtype)
        lines = grid.line_view(out)
        for k in range(9):
            lines += grid.line_view(grid.taps(flat, k)) * np.tile(taps[k], grid.pitch)
        return grid.gather(out), (grid, flat)

    def backward(self, params, dy, cache, grads):
        grid, flat = cache
        taps = params[f"{self.name}.w"].reshape(9, self.channels)
        d = grid.anchored(dy)
        dlines = grid.line_view(d)
        dw = np.empty_like(taps)
        dflat = np.zeros_like(flat)
        for k, s in enumerate(grid.shifts):
            dw[k] = channel_sum(grid.taps(flat, k) * d)
            target = grid.line_view(dflat[s : s + grid.rows])
            target += dlines * np.tile(taps[k], grid.pitch)
        grads[f"{self.name}.w"] = dw.reshape(3, 3, self.channels)
        return grid.unpad(dflat)


class Pointwise(Layer):
    """1x1 convolution (per-pixel affine map across channels)."""

    def __init__(self, name, cin, cout, zero_init=False):
        self.name, self.cin, self.cout, self.zero_init = name, cin, cout, zero_init

    def param_names(self):
        return [f"{self.name}.w", f"{self.name}.b"]

    def init(self, rng, dtype):
        if self.zero_init:
            w = np.zeros((self.cin, self.cout), dtype=dtype)
        else:
            w = _uniform(rng, (self.cin, self.cout), self.cin, dtype)
        return {f"{self.name}.w": w, f"{self.name}.b": np.zeros(self.cout, dtype=dtype)}

    def forward(self, params, x, ctx):
        y = channel_affine(x @ params[f"{self.name}.w"], None, params[f"{self.name}.b"])
        return y, x

    def backward(self, params, dy, cache, grads):
        x = cache
        x2 = x.reshape(-1, self.cin)
        d2 = dy.reshape(-1, self.cout)
        grads[f"{self.name}.w"] = x2.T @ d2
        grads[f"{self.name}.b"] = channel_sum(dy)
        return dy @ params[f"{self.name}.w"].T


class SeparableConv3x3(Layer):
    """Depthwise 3x3 filter followed by a pointwise projection."""

    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout
        self.depthwise = Depthwise3x3(f"{name}.dw", cin)
        self.pointwise = Pointwise(f"{name}.pw", cin, cout)

    def param_names(self):
        return self.depthwise.param_names() + self.pointwise.param_names()

    def init(self, rng, dtype):
        return {**self.depthwise.init(rng, dtype), **self.pointwise.init(rng, dtype)}

    def forward(self, params, x, ctx):
        h, c1 = self.depthwise.forward(params, x, ctx)
        y, c2 = self.pointwise.forward(params, h, ctx)
        return y, (c1, c2)

    def backward(self, params, dy, cache, grads):
        c1, c2 = cache
        dh = self.pointwise.backward(params, dy, c2, grads)
        return self.depthwise.backward(params, dh, c1, grads)


class ReLU(Layer):
    def forward(self, params, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, dy, cache, grads):
        return dy * cache


class BatchNorm(Layer):
    """Per-channel normalization.

    Training passes normalize with batch statistics over (N, H, W) and update
    the running averages with momentum 0.9; inference uses the running
    averages.  A training batch with a single value per channel falls back to
    the running averages.
    """

    eps = 1e-5
    momentum = 0.9

    def __init__(self, name, channels):
        self.name, self.channels = name, channels

    def param_names(self):
        return [f"{self.name}.gamma", f"{self.name}.beta"]

    def init(self, rng, dtype):
        return {
            f"{self.name}.gamma": np.ones(self.channels, dtype=dtype),
            f"{self.name}.beta": np.zeros(self.channels, dtype=dtype),
        }

    def init_state(self, dtype):
        return {
            f"{self.name}.running_mean": np.zeros(self.channels, dtype=dtype),
            f"{self.name}.running_var": np.ones(self.channels, dtype=dtype),
        }

    def forward(self, params, x, ctx):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        m = x.size // self.channels
        rm_key, rv_key = f"{self.name}.running_mean", f"{self.name}.running_var"
        if ctx.training and m > 1:
            mean = channel_sum(x) / m
            xc = channel_affine(x, None, -mean)
            var = channel_sum(xc * xc) / m
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = channel_affine(xc, inv, None)
            st = ctx.state
            st[rm_key] = (self.momentum * st[rm_key] + (1 - self.momentum) * mean).astype(x.dtype)
            st[rv_key] = (self.momentum * st[rv_key] + (1 - self.momentum) * var).astype(x.dtype)
            return channel_affine(xhat, gamma, beta), ("batch", xhat, inv)
        inv = (1.0 / np.sqrt(ctx.state[rv_key] + self.eps)).astype(x.dtype)
        xhat = channel_affine(x, inv, -ctx.state[rm_key] * inv)
        return channel_affine(xhat, gamma, beta), ("running", xhat, inv)

    def backward(self, params, dy, cache, grads):
        mode, xhat, inv = cache
        gamma = params[f"{self.name}.gamma"]
        grads[f"{self.name}.gamma"] = channel_sum(dy * xhat)
        grads[f"{self.name}.beta"] = channel_sum(dy)
        if mode == "running":
            return channel_affine(dy, gamma * inv, None)
        m = dy.size // self.channels
        dxhat = channel_affine(dy, gamma, None)
        s1 = channel_sum(dxhat)
        s2 = channel_sum(dxhat * xhat)
        # inv/m * (m*dxhat - s1 - xhat*s2)
        t = channel_affine(xhat, -s2 * inv / m, -s1 * inv / m)
        return channel_affine(dxhat, inv, None) + t


class Dropout(Layer):
    """Inverted dropout: surviving activations are scaled by 1/(1-p) in training."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, params, x, ctx):
        if not ctx.training or self.p == 0.0:
            return x, None
        if ctx.rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        keep = ctx.rng.random(x.shape, dtype=np.float32) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * mask, mask

    def backward(self, params, dy, cache, grads):
        return dy if cache is None else dy * cache


class MaxPool2(Layer):
    """2x2 max pooling; ties go to the first window element in row-major order."""

    def forward(self, params, x, ctx):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, params, dy, cache, grads):
        idx, shape = cache
        n, h, w, c = shape
        dwin = np.zeros(dy.shape + (4,), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return dwin.reshape(shape)


class UpConv2(Layer):
    """Transposed 2x2 convolution with stride 2 (doubles height and width)."""

    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def param_names(self):
        return [f"{self.name}.w", f"{self.name}.b"]

    def init(self, rng, dtype):
        return {
            f"{self.name}.w": _uniform(rng, (self.cin, 2, 2, self.cout), self.cin, dtype),
            f"{self.name}.b": np.zeros(self.cout, dtype=dtype),
        }

    def forward(self, params, x, ctx):
        n, h, w, _ = x.shape
        wmat = params[f"{self.name}.w"].reshape(self.cin, 4 * self.cout)
        y = (x.reshape(-1, self.cin) @ wmat).reshape(n, h, w, 2, 2, self.cout)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, self.cout)
        return y + params[f"{self.name}.b"], x

    def backward(self, params, dy, cache, grads):
        x = cache
        n, h, w, _ = x.shape
        d = dy.reshape(n, h, 2, w, 2, self.cout).transpose(0, 1, 3, 2, 4, 5)
        d = d.reshape(n * h * w, 4 * self.cout)
        x2 = x.reshape(-1, self.cin)
        wmat = params[f"{self.name}.w"].reshape(self.cin, 4 * self.cout)
        grads[f"{self.name}.w"] = (x2.T @ d).reshape(self.cin, 2, 2, self.cout)
        grads[f"{self.name}.b"] = dy.sum(axis=(0, 1, 2))
        return (d @ wmat.T).reshape(x.shape)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def param_names(self):
        return [n for layer in self.layers for n in layer.param_names()]

    def init(self, rng, dtype):
        out = {}
        for layer in self.layers:
            out.update(layer.init(rng, dtype))
        return out

    def init_state(self, dtype):
        out = {}
        for layer in self.layers:
            out.update(layer.init_state(dtype))
        return out

    def forward(self, params, x, ctx):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(params, x, ctx)
            caches.append(c)
        return x, caches

    def backward(self, params, dy, cache, grads):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(params, dy, c, grads)
        return dy

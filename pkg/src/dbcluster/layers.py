"""Dense tensor layers with forward/backward passes, SGD, and a gradient checker.

All activations are (batch, channel, height, width) arrays. Convolutions use
stride 1; pooling is 2x2 with stride 2 and records argmax switches so the
mirrored unpooling layer can place values back.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError


def im2col(x, kh, kw, stride=1, pad=0):
    n, c, h, w = x.shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError(
            f"kernel {kh}x{kw} with pad {pad} does not fit input {h}x{w}")
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    col = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * out_h
        for xx in range(kw):
            x_max = xx + stride * out_w
            col[:, :, y, xx, :, :] = img[:, :, y:y_max:stride, xx:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)


def col2im(col, x_shape, kh, kw, stride=1, pad=0):
    n, c, h, w = x_shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    col = col.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for y in range(kh):
        y_max = y + stride * out_h
        for xx in range(kw):
            x_max = xx + stride * out_w
            img[:, :, y:y_max:stride, xx:x_max:stride] += col[:, :, y, xx, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


class Layer:
    """Base class: parameters/gradients are dicts of ndarrays."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self

    def check_finite(self, out):
        if not np.all(np.isfinite(out)):
            raise TrainingError(f"{type(self).__name__} produced non-finite values")
        return out


class Conv2D(Layer):
    """Stride-1 cross-correlation. Weights are (out_c, in_c, kh, kw)."""

    def __init__(self, in_channels, out_channels, ksize, pad=0, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.pad = pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * ksize * ksize
        std = np.sqrt(2.0 / fan_in)
        self.params["weight"] = rng.normal(0.0, std, size=(
            out_channels, in_channels, ksize, ksize)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x, mode="train"):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"conv expects {self.in_channels} channels, got {x.shape[1]}")
        w, b = self.params["weight"], self.params["bias"]
        n, _, h, ww = x.shape
        out_h = h + 2 * self.pad - self.ksize + 1
        out_w = ww + 2 * self.pad - self.ksize + 1
        col = im2col(x, self.ksize, self.ksize, 1, self.pad)
        out = col @ w.reshape(self.out_channels, -1).T + b
        out = out.reshape(n, out_h, out_w, self.out_channels).transpose(0, 3, 1, 2)
        self.cache = (x.shape, col)
        return self.check_finite(out)

    def backward(self, dout):
        x_shape, col = self.cache
        w = self.params["weight"]
        n, _, out_h, out_w = dout.shape
        dout2 = dout.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, -1)
        self.grads["weight"] = (dout2.T @ col).reshape(w.shape)
        self.grads["bias"] = dout2.sum(axis=0)
        dcol = dout2 @ w.reshape(self.out_channels, -1)
        return col2im(dcol, x_shape, self.ksize, self.ksize, 1, self.pad)


class Deconv2D(Layer):
    """Transposed stride-1 convolution; exact shape mirror of Conv2D.

    Weights are (out_c, in_c, kh, kw) where in_c is this layer's input
    channel count.
    """

    def __init__(self, in_channels, out_channels, ksize, pad=0, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.pad = pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * ksize * ksize
        std = np.sqrt(2.0 / fan_in)
        self.params["weight"] = rng.normal(0.0, std, size=(
            out_channels, in_channels, ksize, ksize)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def _wmat(self):
        # (in_c, out_c*kh*kw), matching the im2col layout of the output
        return self.params["weight"].transpose(1, 0, 2, 3).reshape(
            self.in_channels, -1)

    def forward(self, x, mode="train"):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"deconv expects {self.in_channels} channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        out_h = h + self.ksize - 1 - 2 * self.pad
        out_w = w + self.ksize - 1 - 2 * self.pad
        x2 = x.transpose(0, 2, 3, 1).reshape(n * h * w, self.in_channels)
        cols = x2 @ self._wmat()
        out_shape = (n, self.out_channels, out_h, out_w)
        out = col2im(cols, out_shape, self.ksize, self.ksize, 1, self.pad)
        out += self.params["bias"][None, :, None, None]
        self.cache = (x.shape, x2)
        return self.check_finite(out)

    def backward(self, dout):
        x_shape, x2 = self.cache
        n, _, h, w = x_shape
        col = im2col(dout, self.ksize, self.ksize, 1, self.pad)
        dw2 = x2.T @ col  # (in_c, out_c*kh*kw)
        self.grads["weight"] = dw2.reshape(
            self.in_channels, self.out_channels, self.ksize, self.ksize
        ).transpose(1, 0, 2, 3)
        self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        dx2 = col @ self._wmat().T
        return dx2.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Records flat input indices as switches."""

    def forward(self, x, mode="train"):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"pooling needs even spatial size, got {h}x{w}")
        oh, ow = h // 2, w // 2
        windows = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, oh, ow, 4)
        am = windows.argmax(axis=-1)  # ties -> lowest index
        out = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]
        # flat index of the selected maximum in the input tensor
        ni, ci, oi, oj = np.ogrid[:n, :c, :oh, :ow]
        rows = 2 * oi + am // 2
        cols = 2 * oj + am % 2
        switches = ((ni * c + ci) * h + rows) * w + cols
        self.cache = (x.shape, switches)
        return out

    @property
    def switches(self):
        return self.cache[1]

    @property
    def input_shape(self):
        return self.cache[0]

    def backward(self, dout):
        x_shape, switches = self.cache
        dx = np.zeros(np.prod(x_shape), dtype=dout.dtype)
        dx[switches.ravel()] = dout.ravel()
        return dx.reshape(x_shape)


class Unpool2x2(Layer):
    """Places each value at the switch position recorded by the paired pool."""

    def forward(self, x, switches=None, input_shape=None, mode="train"):
        if switches is None or input_shape is None:
            raise ConfigurationError("unpooling requires switches from its paired pool")
        if switches.shape != x.shape:
            raise ConfigurationError(
                f"switch shape {switches.shape} does not match input {x.shape}")
        out = np.zeros(np.prod(input_shape), dtype=x.dtype)
        out[switches.ravel()] = x.ravel()
        self.cache = (x.shape, switches)
        return out.reshape(input_shape)

    def backward(self, dout):
        x_shape, switches = self.cache
        return dout.ravel()[switches.ravel()].reshape(x_shape)


class ReLU(Layer):
    def forward(self, x, mode="train"):
        mask = x > 0
        self.cache = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, dout):
        return np.where(self.cache, dout, dout.dtype.type(0))


class BatchNorm(Layer):
    """Per-channel batch normalization over (batch, height, width)."""

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, mode="train"):
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"batch norm expects {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if mode == "train":
            if x.shape[0] < 2:
                raise ConfigurationError("batch norm in train mode needs batch size >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * ivar[None, :, None, None]
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(
                self.running_var.dtype)
        else:
            ivar = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * ivar[None, :, None, None]
        self.cache = (mode, xhat, ivar)
        return self.check_finite(gamma * xhat + beta)

    def backward(self, dout):
        mode, xhat, ivar = self.cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        if mode != "train":
            # frozen statistics: plain per-channel affine
            return dxhat * ivar[None, :, None, None]
        n, _, h, w = dout.shape
        m = n * h * w
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)
        return dx * ivar[None, :, None, None]


def sgd_step(param, grad, velocity, lr, momentum):
    """v <- momentum*v - lr*g; p <- p + v. Updates in place, returns (p, v)."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ConfigurationError("momentum must be in [0, 1)")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient in sgd_step")
    velocity *= momentum
    velocity -= lr * grad
    param += velocity
    return param, velocity


class SgdMomentum:
    """Momentum SGD over a stable, ordered list of parameter arrays."""

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocities = {}

    def step(self, named_params, named_grads):
        for name, p in named_params:
            g = dict(named_grads)[name]
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocities[name] = v
            sgd_step(p, g.astype(p.dtype, copy=False), v, self.lr, self.momentum)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict = field(default_factory=dict)


def relative_error(a, b, denom_floor=1e-12):
    denom = max(abs(a), abs(b), denom_floor)
    return abs(a - b) / denom


def grad_check(loss_fn, grad_fn, groups, step=1e-3, denom_floor=1e-8):
    """Compare analytic gradients with central finite differences.

    loss_fn() evaluates the scalar loss from the current contents of the
    arrays in `groups`; grad_fn() returns {name: analytic gradient}. Arrays
    should be float64 for meaningful tolerances. O(#params) loss calls.
    """
    analytic = grad_fn()
    report = GradCheckReport(0.0)
    for name, arr in groups.items():
        ana = np.asarray(analytic[name])
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            worst = max(worst, relative_error(float(ana.reshape(-1)[i]), num,
                                              denom_floor))
        report.per_group[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report

"""
Small reverse-mode neural network kernel on numpy.
- Layers: Conv2d, TransposedConv2d, Linear, LayerNorm, Gelu, Concat, Reshape, Crop, Sequential
- Every layer returns (output, cache) from forward() and consumes the cache in backward()
- Parameter gradients accumulate into Parameter.grad until zero_grad()
- Adam optimizer with AdamW (decoupled weight decay) and plain Adam flavors

Tensors are NCHW for images and (N, features) for vectors, float32 unless cast with astype().
"""

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scripts.errors import MissingCacheError, ShapeMismatchError

GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self):
        return int(self.value.size)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def layer_norm(x, gain, bias, eps=LN_EPS):
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + eps) + bias


class Layer:
    """Base class: parameters live in an ordered name -> Parameter table."""

    def __init__(self):
        self.params = OrderedDict()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]

    def _cache_or_raise(self, cache):
        if cache is None:
            raise MissingCacheError(f"{type(self).__name__}.backward called without a forward cache")
        return cache

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return clone

    def copy(self):
        return copy.deepcopy(self)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def _check_channels(layer, x, channels):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(f"{type(layer).__name__} expects (N, {channels}, H, W), got {x.shape}")


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = Parameter(_he(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.params["bias"] = Parameter(np.zeros(out_channels, dtype=np.float32))

    def output_size(self, size):
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x):
        _check_channels(self, x, self.in_channels)
        k, s, p = self.kernel, self.stride, self.padding
        if k > min(x.shape[2], x.shape[3]) + 2 * p:
            raise ShapeMismatchError(f"kernel {k} larger than padded input {x.shape[2:]}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.einsum("nchwij,ocij->nohw", windows, self.params["weight"].value, optimize=True)
        out = out + self.params["bias"].value[None, :, None, None]
        return out, (x.shape, xp.shape, windows)

    def backward(self, cache, dout):
        x_shape, xp_shape, windows = self._cache_or_raise(cache)
        k, s, p = self.kernel, self.stride, self.padding
        w = self.params["weight"]
        w.grad += np.einsum("nohw,nchwij->ocij", dout, windows, optimize=True)
        self.params["bias"].grad += dout.sum(axis=(0, 2, 3))
        dwin = np.einsum("nohw,ocij->nchwij", dout, w.value, optimize=True)
        ho, wo = dout.shape[2], dout.shape[3]
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dwin[..., i, j]
        return dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]


def conv2d_direct(x, weight, bias, stride=1, padding=0):
    """Nested-loop reference convolution."""
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[b, :, r * stride : r * stride + k, q * stride : q * stride + k]
                    out[b, oc, r, q] = np.sum(patch * weight[oc]) + bias[oc]
    return out


class TransposedConv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, output_padding=0, rng=None):
        super().__init__()
        if output_padding >= stride and output_padding > 0:
            raise ValueError("output_padding must be smaller than stride")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.output_padding = kernel, stride, padding, output_padding
        fan_in = in_channels * kernel * kernel // max(stride * stride, 1)
        self.params["weight"] = Parameter(_he(rng, (in_channels, out_channels, kernel, kernel), max(fan_in, 1)))
        self.params["bias"] = Parameter(np.zeros(out_channels, dtype=np.float32))

    def output_size(self, size):
        return (size - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding

    def forward(self, x):
        _check_channels(self, x, self.in_channels)
        k, s, p = self.kernel, self.stride, self.padding
        n, _, h, w = x.shape
        full_h = (h - 1) * s + k + self.output_padding
        full_w = (w - 1) * s + k + self.output_padding
        contrib = np.einsum("nchw,coij->nohwij", x, self.params["weight"].value, optimize=True)
        full = np.zeros((n, self.out_channels, full_h, full_w), dtype=contrib.dtype)
        for i in range(k):
            for j in range(k):
                full[:, :, i : i + s * h : s, j : j + s * w : s] += contrib[..., i, j]
        ho, wo = self.output_size(h), self.output_size(w)
        out = full[:, :, p : p + ho, p : p + wo] + self.params["bias"].value[None, :, None, None]
        return out, (x, full.shape)

    def backward(self, cache, dout):
        x, full_shape = self._cache_or_raise(cache)
        k, s, p = self.kernel, self.stride, self.padding
        h, w = x.shape[2], x.shape[3]
        dfull = np.zeros(full_shape, dtype=dout.dtype)
        dfull[:, :, p : p + dout.shape[2], p : p + dout.shape[3]] = dout
        windows = sliding_window_view(dfull, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :w]
        weight = self.params["weight"]
        weight.grad += np.einsum("nchw,nohwij->coij", x, windows, optimize=True)
        self.params["bias"].grad += dout.sum(axis=(0, 2, 3))
        return np.einsum("nohwij,coij->nchw", windows, weight.value, optimize=True)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = Parameter(_he(rng, (out_features, in_features), in_features))
        self.params["bias"] = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(f"Linear expects (N, {self.in_features}), got {x.shape}")
        return x @ self.params["weight"].value.T + self.params["bias"].value, x

    def backward(self, cache, dout):
        x = self._cache_or_raise(cache)
        weight = self.params["weight"]
        weight.grad += dout.T @ x
        self.params["bias"].grad += dout.sum(axis=0)
        return dout @ weight.value


class LayerNorm(Layer):
    """Normalizes over every non-batch axis with an elementwise affine."""

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
        self.params["gain"] = Parameter(np.ones(self.shape, dtype=np.float32))
        self.params["bias"] = Parameter(np.zeros(self.shape, dtype=np.float32))

    def forward(self, x):
        if x.shape[1:] != self.shape:
            raise ShapeMismatchError(f"LayerNorm over {self.shape}, got {x.shape}")
        axes = tuple(range(1, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + LN_EPS)
        xhat = (x - mean) * inv_std
        out = self.params["gain"].value * xhat + self.params["bias"].value
        return out, (xhat, inv_std)

    def backward(self, cache, dout):
        xhat, inv_std = self._cache_or_raise(cache)
        axes = tuple(range(1, dout.ndim))
        m = xhat[0].size
        self.params["gain"].grad += (dout * xhat).sum(axis=0)
        self.params["bias"].grad += dout.sum(axis=0)
        dxhat = dout * self.params["gain"].value
        return (
            inv_std
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        )


class Gelu(Layer):
    def forward(self, x):
        return gelu(x), x

    def backward(self, cache, dout):
        x = self._cache_or_raise(cache)
        inner = GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


class Concat(Layer):
    """Concatenates a list of inputs along `axis`; backward returns the list of input gradients."""

    def __init__(self, axis=1):
        super().__init__()
        self.axis = axis

    def forward(self, xs):
        sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis), sizes

    def backward(self, cache, dout):
        sizes = self._cache_or_raise(cache)
        return np.split(dout, np.cumsum(sizes)[:-1], axis=self.axis)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, dout):
        return dout.reshape(self._cache_or_raise(cache))


class Crop(Layer):
    """Keeps the top-left (height, width) window of an NCHW tensor."""

    def __init__(self, height, width):
        super().__init__()
        self.height, self.width = height, width

    def forward(self, x):
        if x.shape[2] < self.height or x.shape[3] < self.width:
            raise ShapeMismatchError(f"cannot crop {x.shape} to {self.height}x{self.width}")
        return x[:, :, : self.height, : self.width], x.shape

    def backward(self, cache, dout):
        shape = self._cache_or_raise(cache)
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[:, :, : self.height, : self.width] = dout
        return dx


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, cache, dout):
        caches = self._cache_or_raise(cache)
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(c, dout)
        return dout

    def named_parameters(self, prefix=""):
        for idx, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{idx}.")


def gradient_check(layer, x, rng, h=1e-3, n_coords=6):
    """Max norm-relative error between analytic and central-difference gradients (float64)."""
    layer = layer.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    out, cache = layer.forward(x)
    weights = rng.standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(cache, weights)

    def objective():
        return float(np.sum(layer(x) * weights))

    def check(array, analytic):
        flat = array.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        numeric = np.empty(len(coords))
        for slot, c in enumerate(coords):
            saved = flat[c]
            flat[c] = saved + h
            plus = objective()
            flat[c] = saved - h
            minus = objective()
            flat[c] = saved
            numeric[slot] = (plus - minus) / (2 * h)
        picked = analytic.reshape(-1)[coords]
        scale = max(np.linalg.norm(picked) + np.linalg.norm(numeric), 1e-12)
        return float(np.linalg.norm(picked - numeric) / scale)

    errors = [check(x, dx)]
    for _, p in layer.named_parameters():
        errors.append(check(p.value, p.grad.copy()))
    return max(errors)


class Adam:
    """Adam / AdamW with bias correction; moments kept in float32."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, flavor="adamw"):
        if flavor not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer flavor {flavor!r}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.flavor = flavor
        self.step_count = 0
        self.m = [np.zeros(p.value.shape, dtype=np.float32) for p in self.params]
        self.v = [np.zeros(p.value.shape, dtype=np.float32) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float32)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.flavor == "adamw" and self.weight_decay:
                p.value -= (self.lr * self.weight_decay * p.value).astype(p.value.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0

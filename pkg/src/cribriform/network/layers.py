"""NHWC layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during a training-mode
forward call. Parameters live in ``params``, their gradients in ``grads``
(same keys), and non-trainable state such as running statistics in
``buffers``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingCache(RuntimeError):
    pass


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise MissingCache(f"{self.kind}: backward called without a training forward pass")
        cache, self._cache = self._cache, None
        return cache

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def spec(self) -> dict:
        return {"kind": self.kind}

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    """``k x k`` convolution, weight layout ``(k, k, c_in, c_out)``.

    ``padding="same"`` (odd k, stride 1) or ``"valid"``.
    """

    kind = "Conv2D"

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: str = "same",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if padding == "same" and (kernel % 2 == 0 or stride != 1):
            raise ValueError("same padding needs an odd kernel and stride 1")
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        rng = rng or np.random.default_rng(0)
        k2 = kernel * kernel
        self.params["weight"] = glorot_uniform(rng, (kernel, kernel, c_in, c_out), k2 * c_in, k2 * c_out, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def _pad(self, x):
        if self.padding != "same" or self.kernel == 1:
            return x
        p = self.kernel // 2
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"Conv2D expects {self.c_in} channels, got {c}")
        k, s = self.kernel, self.stride
        weight = self.params["weight"].reshape(k * k * c, self.c_out)
        if k == 1 and s == 1:
            cols = x.reshape(-1, c)
            ho, wo = h, w
        elif k == s:
            ho, wo = h // s, w // s
            cols = (x[:, : ho * s, : wo * s]
                    .reshape(n, ho, s, wo, s, c)
                    .transpose(0, 1, 3, 2, 4, 5)
                    .reshape(-1, k * k * c))
        else:
            xp = self._pad(x)
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
            ho, wo = win.shape[1], win.shape[2]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * c)
        y = cols @ weight + self.params["bias"]
        if train:
            self._cache = (cols, x.shape, ho, wo)
        return y.reshape(n, ho, wo, self.c_out)

    def backward(self, dy):
        cols, xshape, ho, wo = self._take_cache()
        n, h, w, c = xshape
        k, s = self.kernel, self.stride
        dflat = dy.reshape(-1, self.c_out)
        self.grads["weight"] = (cols.T @ dflat).reshape(self.params["weight"].shape)
        self.grads["bias"] = np.ones(dflat.shape[0], dtype=dflat.dtype) @ dflat
        if self.padding == "same" and k > 1:
            dcols = None
        else:
            dcols = dflat @ self.params["weight"].reshape(k * k * c, self.c_out).T
        if k == 1 and s == 1:
            return dcols.reshape(xshape)
        if k == s:
            dx = np.zeros(xshape, dtype=dy.dtype)
            dx[:, : ho * s, : wo * s] = (dcols.reshape(n, ho, wo, s, s, c)
                                         .transpose(0, 1, 3, 2, 4, 5)
                                         .reshape(n, ho * s, wo * s, c))
            return dx
        if self.padding == "same":
            # stride-1 same conv: dx is a same conv of dy with the flipped, transposed kernel
            p = k // 2
            dyp = np.pad(dy, ((0, 0), (p, p), (p, p), (0, 0)))
            win = sliding_window_view(dyp, (k, k), axis=(1, 2))
            wflip = self.params["weight"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * self.c_out, c)
            return (win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * self.c_out) @ wflip).reshape(xshape)
        dcols = dcols.reshape(n, ho, wo, k, k, c)
        pad = k // 2 if self.padding == "same" else 0
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j]
        return dxp[:, pad : pad + h, pad : pad + w] if pad else dxp


def _channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last; a matrix-vector product beats ``sum`` for few channels."""
    flat = x.reshape(-1, x.shape[-1])
    return np.ones(flat.shape[0], dtype=x.dtype) @ flat


class BatchNorm(Layer):
    """Per-channel batch normalisation; running stats follow ``m * run + (1 - m) * batch``."""

    kind = "BatchNorm"

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.99, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.update_running = True

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * (inv * gamma) + beta
        count = x.shape[0] * x.shape[1] * x.shape[2]
        mean = _channel_sum(x) / count
        centred = x - mean
        var = _channel_sum(centred * centred) / count
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centred * inv
        if self.update_running:
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        self._cache = (xhat, inv)
        self.last_batch_stats = (mean, var)
        return xhat * gamma + beta

    def backward(self, dy):
        xhat, inv = self._take_cache()
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dy_xhat = _channel_sum(dy * xhat)
        dy_sum = _channel_sum(dy)
        self.grads["gamma"] = dy_xhat
        self.grads["beta"] = dy_sum
        gamma = self.params["gamma"]
        # dxhat = dy * gamma; its channel sums follow from the two above
        return (gamma * inv) * (dy - (dy_sum + xhat * dy_xhat) / m)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        if train:
            self._cache = x > 0
        return y

    def backward(self, dy):
        return dy * self._take_cache()


class SEBlock(Layer):
    """Squeeze-and-excitation: channel-wise rescaling by a learned sigmoid gate."""

    kind = "SEBlock"

    def __init__(self, channels: int, reduction: int = 16, rng=None, dtype=np.float32):
        super().__init__()
        if channels < reduction or channels % reduction:
            raise ValueError(f"SE block: {channels} channels not divisible by reduction {reduction}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.channels, self.reduction = channels, reduction
        self.params["w1"] = glorot_uniform(rng, (channels, hidden), channels, hidden, dtype)
        self.params["b1"] = np.zeros(hidden, dtype=dtype)
        self.params["w2"] = glorot_uniform(rng, (hidden, channels), hidden, channels, dtype)
        self.params["b2"] = np.zeros(channels, dtype=dtype)
        # test hook: replace the gate with ones
        self.identity_gate = False

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "reduction": self.reduction}

    def squeeze(self, x):
        return x.mean(axis=(1, 2))

    def forward(self, x, train=False):
        s = self.squeeze(x)
        z1 = s @ self.params["w1"] + self.params["b1"]
        a1 = np.maximum(z1, 0)
        z2 = a1 @ self.params["w2"] + self.params["b2"]
        gate = 1.0 / (1.0 + np.exp(-z2))
        if self.identity_gate:
            gate = np.ones_like(gate)
        if train:
            self._cache = (x, s, z1, a1, gate)
        return x * gate[:, None, None, :]

    def backward(self, dy):
        x, s, z1, a1, gate = self._take_cache()
        dgate = (dy * x).sum(axis=(1, 2))
        if self.identity_gate:
            dgate = np.zeros_like(dgate)
        dz2 = dgate * gate * (1 - gate)
        self.grads["w2"] = a1.T @ dz2
        self.grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ self.params["w2"].T
        dz1 = da1 * (z1 > 0)
        self.grads["w1"] = s.T @ dz1
        self.grads["b1"] = dz1.sum(axis=0)
        ds = dz1 @ self.params["w1"].T
        hw = x.shape[1] * x.shape[2]
        return dy * gate[:, None, None, :] + (ds / hw)[:, None, None, :]


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        if train:
            self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = layers

    def children(self):
        return self.layers

    def spec(self):
        return {"kind": self.kind, "layers": [[n, l.spec()] for n, l in self.layers]}

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Residual(Layer):
    """``main(x) + skip(x)``; ``skip=None`` is the identity shortcut."""

    kind = "Residual"

    def __init__(self, main: Layer, skip: Layer | None = None):
        super().__init__()
        self.main, self.skip = main, skip

    def children(self):
        out = [("main", self.main)]
        if self.skip is not None:
            out.append(("skip", self.skip))
        return out

    def spec(self):
        return {"kind": self.kind, "main": self.main.spec(),
                "skip": None if self.skip is None else self.skip.spec()}

    def forward(self, x, train=False):
        shortcut = x if self.skip is None else self.skip.forward(x, train)
        return self.main.forward(x, train) + shortcut

    def backward(self, dy):
        dx = self.main.backward(dy)
        return dx + (dy if self.skip is None else self.skip.backward(dy))

"""Small numpy neural-network toolkit with hand-written backward passes.

Image-like tensors are ``(N, C, H, W)``; vectors are ``(N, features)``.  A
network is described declaratively by a :class:`NetworkSpec` (a list of
:class:`LayerSpec`) and instantiated with :func:`build_network`, which returns
a :class:`Network` holding parameters, gradients and forward caches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimensionError, UsageError

BN_EPS = 1e-3
BN_MOMENTUM = 0.99
ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")
# cap on im2col buffer size per chunk, in float64 elements (~64 MB)
_IM2COL_BUDGET = 8_000_000


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def conv2d(out_channels: int, kernel=(3, 3)) -> LayerSpec:
    return LayerSpec("conv2d", {"out_channels": int(out_channels), "kernel": tuple(kernel)})


def maxpool2d(window) -> LayerSpec:
    return LayerSpec("maxpool2d", {"window": tuple(window)})


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", {"units": int(units)})


def activation(name: str) -> LayerSpec:
    return LayerSpec("activation", {"name": name})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the per-sample input shape (``(C, H, W)`` or ``(F,)``)."""

    input_shape: tuple
    layers: tuple

    def shapes(self) -> list[tuple]:
        """Per-sample shape after every layer; raises :class:`DimensionError` if inconsistent."""
        shape = tuple(int(s) for s in self.input_shape)
        if not shape or any(s < 1 for s in shape):
            raise DimensionError(f"invalid input shape {self.input_shape}")
        out = []
        for i, spec in enumerate(self.layers):
            shape = _output_shape(spec, shape, i)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple:
        shapes = self.shapes()
        return shapes[-1] if shapes else tuple(self.input_shape)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(l) for l in d["layers"]))


def _output_shape(spec: LayerSpec, shape: tuple, index: int) -> tuple:
    where = f"layer {index} ({spec.kind})"
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise DimensionError(f"{where} needs (C, H, W) input, got {shape}")
        kh, kw = spec.params["kernel"]
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"{where}: same padding needs odd kernel sizes, got {(kh, kw)}")
        return (spec.params["out_channels"], shape[1], shape[2])
    if spec.kind == "maxpool2d":
        if len(shape) != 3:
            raise DimensionError(f"{where} needs (C, H, W) input, got {shape}")
        ph, pw = spec.params["window"]
        if shape[1] < ph or shape[2] < pw:
            raise DimensionError(f"{where}: window {(ph, pw)} larger than input {shape[1:]}")
        return (shape[0], shape[1] // ph, shape[2] // pw)
    if spec.kind == "batchnorm":
        if len(shape) not in (1, 3):
            raise DimensionError(f"{where} needs (F,) or (C, H, W) input, got {shape}")
        return shape
    if spec.kind == "dense":
        if len(shape) != 1:
            raise DimensionError(f"{where} needs a flat input, got {shape}; add a flatten layer")
        return (spec.params["units"],)
    if spec.kind == "activation":
        if spec.params["name"] not in ACTIVATIONS:
            raise DimensionError(f"{where}: unknown activation {spec.params['name']!r}")
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise DimensionError(f"{where}: unknown layer kind {spec.kind!r}")


def build_audio_cnn(variant: str = "mfcc") -> NetworkSpec:
    """Convolutional front end of the audio branch.

    ``mfcc``: 1x20x161 input, three 3x3 convolutions (48, 96, 192 channels)
    each followed by max pooling (2,2), (3,3), (3,3); flattens to 1536.
    ``mel``: 1x96x161 input, four 3x3 convolutions (48, 96, 192, 192), the
    first three pooled by (4,2), (4,3), (3,3); flattens to 3072.  Batch norm
    precedes every activation and the last convolution is linear.
    """
    if variant == "mfcc":
        plan = [(48, (2, 2)), (96, (3, 3)), (192, (3, 3))]
        input_shape = (1, 20, 161)
    elif variant == "mel":
        plan = [(48, (4, 2)), (96, (4, 3)), (192, (3, 3)), (192, None)]
        input_shape = (1, 96, 161)
    else:
        raise ValueError(f"unknown audio CNN variant {variant!r}")
    layers = []
    for i, (channels, pool) in enumerate(plan):
        last = i == len(plan) - 1
        layers += [conv2d(channels), batchnorm(), activation("linear" if last else "relu")]
        if pool is not None:
            layers.append(maxpool2d(pool))
    layers.append(flatten())
    return NetworkSpec(input_shape, tuple(layers))


def build_sub_dnn(input_dim: int, shared_dim: int, hidden: int = 1024) -> NetworkSpec:
    """Three dense layers: ``hidden`` sigmoid, ``hidden`` sigmoid, ``shared_dim`` linear."""
    if input_dim < 1 or shared_dim < 1:
        raise DimensionError("input and shared dimensions must be positive")
    layers = (
        dense(hidden), activation("sigmoid"),
        dense(hidden), activation("sigmoid"),
        dense(shared_dim), activation("linear"),
    )
    return NetworkSpec((int(input_dim),), layers)


def build_mve_branch(input_dim: int, widths=(512, 256, 128)) -> NetworkSpec:
    """Margin-embedding branch: batch norm, dense and tanh for each width."""
    layers = []
    for w in widths:
        layers += [batchnorm(), dense(w), activation("tanh")]
    return NetworkSpec((int(input_dim),), tuple(layers))


# ---------------------------------------------------------------- layers


class Layer:
    """Base layer.  ``params`` and ``grads`` share keys."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self.cache is None:
            raise UsageError(f"{type(self).__name__}.backward() called without a training forward pass")
        cache, self.cache = self.cache, None
        return cache


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Layer):
    """Stride-1 convolution with same (zero) padding; weight is ``(J, K, h, l)``.

    im2col + matmul in channel-major layout, processed in batch chunks to
    bound memory.  Setting ``need_input_grad = False`` (first layer of a
    network) skips the col2im step in :meth:`backward`.
    """

    def __init__(self, in_channels, out_channels, kernel, rng):
        super().__init__()
        kh, kw = kernel
        self.kernel = (kh, kw)
        self.need_input_grad = True
        self.params["weight"] = _glorot(
            rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, out_channels * kh * kw
        )
        self.params["bias"] = np.zeros(out_channels)

    def _cols(self, xc):
        """``(K * kh * kw, n * H * W)`` patch matrix from channel-major ``xc`` of shape (K, n, H, W)."""
        kh, kw = self.kernel
        k, n, height, width = xc.shape
        xp = np.pad(xc, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        cols = np.empty((k, kh, kw, n, height, width))
        for a in range(kh):
            for c in range(kw):
                cols[:, a, c] = xp[:, :, a:a + height, c:c + width]
        return cols.reshape(k * kh * kw, -1)

    def _chunks(self, x):
        n = x.shape[0]
        per_sample = int(np.prod(x.shape[1:])) * self.kernel[0] * self.kernel[1]
        step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
        return [slice(i, min(i + step, n)) for i in range(0, n, step)]

    def forward(self, x, train):
        w, b = self.params["weight"], self.params["bias"]
        j = w.shape[0]
        wmat = w.reshape(j, -1)
        n, _, height, width = x.shape
        xc = x.transpose(1, 0, 2, 3)
        out = np.empty((n, j, height, width))
        for sl in self._chunks(x):
            res = wmat @ self._cols(xc[:, sl])
            res += b[:, None]
            out[sl] = res.reshape(j, sl.stop - sl.start, height, width).transpose(1, 0, 2, 3)
        if train:
            self.cache = x
        return out

    def backward(self, grad):
        x = self._take_cache()
        w = self.params["weight"]
        j, k, kh, kw = w.shape
        wmat = w.reshape(j, -1)
        n, _, height, width = x.shape
        xc = x.transpose(1, 0, 2, 3)
        gc = grad.transpose(1, 0, 2, 3)
        dw = np.zeros_like(wmat)
        dxp = np.zeros((k, n, height + kh - 1, width + kw - 1)) if self.need_input_grad else None
        for sl in self._chunks(x):
            m = sl.stop - sl.start
            g2 = np.ascontiguousarray(gc[:, sl]).reshape(j, -1)
            dw += g2 @ self._cols(xc[:, sl]).T
            if dxp is not None:
                dcols = (wmat.T @ g2).reshape(k, kh, kw, m, height, width)
                for a in range(kh):
                    for c in range(kw):
                        dxp[:, sl, a:a + height, c:c + width] += dcols[:, a, c]
        self.grads["weight"] = dw.reshape(w.shape)
        self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        if dxp is None:
            return None
        return dxp[:, :, kh // 2:kh // 2 + height, kw // 2:kw // 2 + width].transpose(1, 0, 2, 3).copy()


@numba.njit(cache=True)
def _pool_forward(x, ph, pw):
    n, c, height, width = x.shape
    ho, wo = height // ph, width // pw
    out = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int32)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, b, i * ph, j * pw]
                    arg = 0
                    for u in range(ph):
                        for v in range(pw):
                            val = x[a, b, i * ph + u, j * pw + v]
                            if val > best:
                                best = val
                                arg = u * pw + v
                    out[a, b, i, j] = best
                    idx[a, b, i, j] = arg
    return out, idx


@numba.njit(cache=True)
def _pool_backward(grad, idx, height, width, ph, pw):
    n, c, ho, wo = grad.shape
    dx = np.zeros((n, c, height, width))
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = idx[a, b, i, j]
                    dx[a, b, i * ph + k // pw, j * pw + k % pw] += grad[a, b, i, j]
    return dx


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    The gradient of each window goes to its first maximal element only.
    """

    def __init__(self, window):
        super().__init__()
        self.window = tuple(window)

    def forward(self, x, train):
        ph, pw = self.window
        out, idx = _pool_forward(np.ascontiguousarray(x), ph, pw)
        if train:
            self.cache = (x.shape, idx)
        return out

    def backward(self, grad):
        shape, idx = self._take_cache()
        ph, pw = self.window
        return _pool_backward(np.ascontiguousarray(grad), idx, shape[2], shape[3], ph, pw)


class BatchNorm(Layer):
    """Batch normalisation over the batch (and spatial axes for 4-D input)."""

    def __init__(self, features, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(features)
        self.params["beta"] = np.zeros(features)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    @staticmethod
    def _flat(x):
        # (N, C, L) view; L = 1 for vectors
        return x.reshape(x.shape[0], x.shape[1], -1)

    def forward(self, x, train):
        gamma, beta = self.params["gamma"], self.params["beta"]
        xr = self._flat(x)
        if train:
            m = xr.shape[0] * xr.shape[2]
            mean = xr.sum(axis=2).sum(axis=0) / m
            xc = xr - mean[None, :, None]
            var = np.einsum("ncl,ncl->c", xc, xc) / m
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            xc = xr - self.running_mean[None, :, None]
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xc *= inv_std[None, :, None]
        if train:
            self.cache = (xc, inv_std)
        out = xc * gamma[None, :, None]
        out += beta[None, :, None]
        return out.reshape(x.shape)

    def backward(self, grad):
        xn, inv_std = self._take_cache()
        gr = self._flat(grad)
        m = gr.shape[0] * gr.shape[2]
        gamma = self.params["gamma"]
        sum_g = gr.sum(axis=2).sum(axis=0)
        sum_gx = np.einsum("ncl,ncl->c", gr, xn)
        self.grads["gamma"] = sum_gx
        self.grads["beta"] = sum_g
        scale = (gamma * inv_std)[None, :, None]
        dx = gr - (sum_g / m)[None, :, None]
        dx -= xn * (sum_gx / m)[None, :, None]
        dx *= scale
        return dx.reshape(grad.shape)


class Dense(Layer):
    """Affine layer ``x @ W + b`` with ``W`` of shape ``(in, out)``."""

    def __init__(self, in_features, units, rng):
        super().__init__()
        self.params["weight"] = _glorot(rng, (in_features, units), in_features, units)
        self.params["bias"] = np.zeros(units)

    def forward(self, x, train):
        if train:
            self.cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["weight"] = x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


class Activation(Layer):
    def __init__(self, name):
        super().__init__()
        self.name = name

    def forward(self, x, train):
        if self.name == "relu":
            y = np.maximum(x, 0.0)
        elif self.name == "sigmoid":
            y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        elif self.name == "tanh":
            y = np.tanh(x)
        else:
            y = x
        if train:
            self.cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._take_cache()
        if self.name == "relu":
            return grad * (x > 0)
        if self.name == "sigmoid":
            return grad * y * (1.0 - y)
        if self.name == "tanh":
            return grad * (1.0 - y * y)
        return grad


class Flatten(Layer):
    def forward(self, x, train):
        if train:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


# ---------------------------------------------------------------- network


class Network:
    """Instantiated :class:`NetworkSpec`: parameters, running statistics and caches."""

    def __init__(self, spec: NetworkSpec, seed=0):
        self.spec = spec
        shapes = spec.shapes()
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        shape = tuple(spec.input_shape)
        for lspec, out_shape in zip(spec.layers, shapes):
            self.layers.append(_make_layer(lspec, shape, rng))
            shape = out_shape
        if self.layers and isinstance(self.layers[0], Conv2d):
            self.layers[0].need_input_grad = False
        self._trained_forward = False

    def forward(self, x, mode: str = "infer") -> np.ndarray:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        expected = tuple(self.spec.input_shape)
        if x.shape[1:] != expected:
            raise DimensionError(f"network expects per-sample shape {expected}, got {x.shape[1:]}")
        train = mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train)
        self._trained_forward = train
        return x

    def backward(self, grad) -> np.ndarray | None:
        """Back-propagate ``grad`` (d objective / d output), filling every layer's ``grads``.

        Returns the gradient with respect to the input, or ``None`` when the
        first layer is a convolution (its input gradient is never needed).
        """
        if not self._trained_forward:
            raise UsageError("backward() needs a preceding forward(..., mode='train')")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._trained_forward = False
        return grad

    def parameters(self):
        """``(name, array)`` pairs in a fixed order; arrays are the live parameters."""
        out = []
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                out.append((f"{i}.{key}", layer.params[key]))
        return out

    def gradients(self):
        out = []
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                out.append((f"{i}.{key}", layer.grads.get(key)))
        return out

    def buffers(self):
        """Non-trainable state (batch-norm running statistics)."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                out.append((f"{i}.running_mean", layer.running_mean))
                out.append((f"{i}.running_var", layer.running_var))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters() + self.buffers()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                name = f"{i}.{key}"
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != layer.params[key].shape:
                    raise DimensionError(f"parameter {name}: shape {arr.shape} != {layer.params[key].shape}")
                layer.params[key] = arr.copy()
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.asarray(state[f"{i}.running_mean"], dtype=np.float64).copy()
                layer.running_var = np.asarray(state[f"{i}.running_var"], dtype=np.float64).copy()


def _make_layer(spec: LayerSpec, in_shape: tuple, rng) -> Layer:
    if spec.kind == "conv2d":
        return Conv2d(in_shape[0], spec.params["out_channels"], spec.params["kernel"], rng)
    if spec.kind == "maxpool2d":
        return MaxPool2d(spec.params["window"])
    if spec.kind == "batchnorm":
        return BatchNorm(in_shape[0])
    if spec.kind == "dense":
        return Dense(in_shape[0], spec.params["units"], rng)
    if spec.kind == "activation":
        return Activation(spec.params["name"])
    if spec.kind == "flatten":
        return Flatten()
    raise DimensionError(f"unknown layer kind {spec.kind!r}")


def build_network(spec: NetworkSpec, seed=0) -> Network:
    return Network(spec, seed)

"""Small numpy neural-network substrate: layers, backprop, RMSprop, checkpoints.

Tensors are plain numpy arrays. Image-like inputs use NHWC layout, which is
also the layout of gridworld observations, so no transposes are needed.

A ``Network`` keeps all of its parameters in one flat vector; each layer sees
reshaped views into it. Optimizers and checkpoints work on the flat vector.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Layer specs or tensor shapes do not fit together."""


class UsageError(RuntimeError):
    """An API was called out of order."""


class DivergenceError(FloatingPointError):
    """A non-finite value showed up in gradients or losses."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def param_shapes(self, in_shape):
        return []

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, in_shape, rng, dtype):
        return []

    def forward(self, params, x):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, params, cache, gy):
        """Return ``(gx, [grad per param])``."""
        raise NotImplementedError

    def macs(self, in_shape):
        """Multiply-adds per sample (one per weight use)."""
        return 0

    def spec(self) -> dict:
        return {"kind": self.kind}


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def param_shapes(self, in_shape):
        return [(self.in_dim, self.out_dim), (self.out_dim,)]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ConfigurationError(f"dense expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def init_params(self, in_shape, rng, dtype):
        return [
            _fan_in_uniform(rng, (self.in_dim, self.out_dim), self.in_dim, dtype),
            _fan_in_uniform(rng, (self.out_dim,), self.in_dim, dtype),
        ]

    def forward(self, params, x):
        w, b = params
        return x @ w + b, x

    def backward(self, params, cache, gy):
        w, _ = params
        x = cache
        return gy @ w.T, [x.T @ gy, gy.sum(axis=0)]

    def macs(self, in_shape):
        return self.in_dim * self.out_dim

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Conv2d(Layer):
    """2-D convolution over NHWC input; weights stored as (C, kh, kw, F)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, filters: int, kernel: int, stride: int = 1, padding: int = 0):
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)

    def _fan_in(self):
        return self.in_channels * self.kernel * self.kernel

    def param_shapes(self, in_shape):
        return [(self.in_channels, self.kernel, self.kernel, self.filters), (self.filters,)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ConfigurationError(
                f"conv2d expects (H, W, {self.in_channels}), got {tuple(in_shape)}"
            )
        h, w, _ = in_shape
        ho = (h - self.kernel + 2 * self.padding) // self.stride + 1
        wo = (w - self.kernel + 2 * self.padding) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"conv2d output would be empty for input {tuple(in_shape)}")
        return (ho, wo, self.filters)

    def init_params(self, in_shape, rng, dtype):
        fan_in = self._fan_in()
        return [
            _fan_in_uniform(rng, self.param_shapes(in_shape)[0], fan_in, dtype),
            _fan_in_uniform(rng, (self.filters,), fan_in, dtype),
        ]

    def forward(self, params, x):
        w, b = params
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        n, hp, wp, c = x.shape
        ho = (hp - k) // s + 1
        wo = (wp - k) // s + 1
        # (N, Ho, Wo, C, kh, kw)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        cols = win.reshape(n * ho * wo, c * k * k)
        y = cols @ w.reshape(c * k * k, self.filters) + b
        return y.reshape(n, ho, wo, self.filters), (cols, x.shape)

    def backward(self, params, cache, gy):
        w, _ = params
        cols, xshape = cache
        k, s, p = self.kernel, self.stride, self.padding
        n, hp, wp, c = xshape
        _, ho, wo, f = gy.shape
        g2 = gy.reshape(-1, f)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w.reshape(-1, f).T).reshape(n, ho, wo, c, k, k)
        gx = np.zeros(xshape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[..., i, j]
        if p:
            gx = gx[:, p:-p, p:-p, :]
        return gx, [gw, gb]

    def macs(self, in_shape):
        ho, wo, _ = self.out_shape(in_shape)
        return ho * wo * self._fan_in() * self.filters

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, gy):
        return gy * cache, []


class Tanh(Layer):
    kind = "tanh"

    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, gy):
        return gy * (1.0 - cache * cache), []


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride = kernel, floor mode).

    Ties route the gradient to the first element of the window.
    """

    kind = "maxpool2d"

    def __init__(self, kernel: int = 2):
        self.kernel = int(kernel)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"maxpool2d expects (H, W, C), got {tuple(in_shape)}")
        h, w, c = in_shape
        ho, wo = h // self.kernel, w // self.kernel
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"maxpool2d output would be empty for input {tuple(in_shape)}")
        return (ho, wo, c)

    def forward(self, params, x):
        k = self.kernel
        n, h, w, c = x.shape
        ho, wo = h // k, w // k
        xw = x[:, : ho * k, : wo * k].reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4)
        xw = xw.reshape(n, ho, wo, c, k * k)
        idx = xw.argmax(axis=-1)
        y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, params, cache, gy):
        idx, xshape = cache
        k = self.kernel
        n, h, w, c = xshape
        ho, wo = h // k, w // k
        gw = np.zeros((n, ho, wo, c, k * k), dtype=gy.dtype)
        np.put_along_axis(gw, idx[..., None], gy[..., None], axis=-1)
        gw = gw.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * k, wo * k, c)
        gx = np.zeros(xshape, dtype=gy.dtype)
        gx[:, : ho * k, : wo * k] = gw
        return gx, []

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel}


class LayerNorm(Layer):
    """Normalizes the last axis; learnable gain (init 1) and bias (init 0)."""

    kind = "layernorm"

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = int(dim)
        self.eps = float(eps)

    def param_shapes(self, in_shape):
        return [(self.dim,), (self.dim,)]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.dim,):
            raise ConfigurationError(f"layernorm expects ({self.dim},), got {tuple(in_shape)}")
        return in_shape

    def init_params(self, in_shape, rng, dtype):
        return [np.ones(self.dim, dtype=dtype), np.zeros(self.dim, dtype=dtype)]

    def forward(self, params, x):
        g, b = params
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * g + b, (xhat, inv)

    def backward(self, params, cache, gy):
        g, _ = params
        xhat, inv = cache
        gxhat = gy * g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, [(gy * xhat).sum(axis=0), gy.sum(axis=0)]

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, gy):
        return gy.reshape(cache), []


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2d, ReLU, Tanh, MaxPool2d, LayerNorm, Flatten)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    try:
        return LAYER_KINDS[kind](**spec)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {kind}: {exc}") from None


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """A sequential stack of layers with a flat parameter vector.

    ``forward`` records the activations that ``backward`` consumes; use
    ``predict`` for inference that leaves no trace on the object.
    """

    def __init__(self, layers: Sequence[Layer | dict], input_shape, seed: int = 0, dtype=np.float32,
                 init_gain: float = 1.0):
        self.init_gain = float(init_gain)  # scales the fan-in bound of dense/conv weights
        self.layers = [l if isinstance(l, Layer) else layer_from_spec(l) for l in layers]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        self.shapes = shapes
        self.output_shape = shapes[-1]

        self._slices = []
        offset = 0
        for layer, in_shape in zip(self.layers, shapes[:-1]):
            layer_slices = []
            for shp in layer.param_shapes(in_shape):
                size = int(np.prod(shp))
                layer_slices.append((offset, offset + size, shp))
                offset += size
            self._slices.append(layer_slices)
        self.num_params = offset
        self.flat = np.zeros(offset, dtype=self.dtype)
        self.grad = np.zeros(offset, dtype=self.dtype)
        self._param_views = self._views(self.flat)
        self._grad_views = self._views(self.grad)
        self._tape = None
        self.reset_parameters(self.seed)

    def _views(self, vec):
        return [[vec[a:b].reshape(shp) for a, b, shp in ls] for ls in self._slices]

    @property
    def params(self):
        return self._param_views

    def reset_parameters(self, seed: int | None = None):
        if seed is not None:
            self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        views = self.params
        for layer, in_shape, pv in zip(self.layers, self.shapes[:-1], views):
            for dst, val in zip(pv, layer.init_params(in_shape, rng, self.dtype)):
                dst[...] = val
                if self.init_gain != 1.0 and layer.kind in ("dense", "conv2d"):
                    dst *= self.dtype.type(self.init_gain)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        return x.astype(self.dtype, copy=False)

    def predict(self, x):
        x = self._check_input(x)
        for layer, pv in zip(self.layers, self.params):
            x, _ = layer.forward(pv, x)
        return x

    __call__ = predict

    def forward(self, x):
        x = self._check_input(x)
        caches = []
        for layer, pv in zip(self.layers, self.params):
            x, cache = layer.forward(pv, x)
            caches.append(cache)
        self._tape = caches
        return x

    def backward(self, gy, accumulate: bool = False):
        """Backpropagate ``gy`` (d loss / d output); returns d loss / d input.

        Parameter gradients land in ``self.grad`` (flat, same layout as
        ``self.flat``) and are overwritten unless ``accumulate`` is set.
        """
        if self._tape is None:
            raise UsageError("backward called before forward")
        if not accumulate:
            self.grad[...] = 0
        gviews = self._grad_views
        g = np.asarray(gy, dtype=self.dtype)
        for layer, pv, gv, cache in zip(
            reversed(self.layers), reversed(self.params), reversed(gviews), reversed(self._tape)
        ):
            g, pgrads = layer.backward(pv, cache, g)
            for dst, val in zip(gv, pgrads):
                dst += val
        self._tape = None
        return g

    def freeze(self):
        """Make the parameter vector read-only (in-place updates raise)."""
        self.flat.setflags(write=False)
        self._param_views = self._views(self.flat)

    @property
    def frozen(self) -> bool:
        return not self.flat.flags.writeable

    def macs(self) -> int:
        return int(sum(l.macs(s) for l, s in zip(self.layers, self.shapes[:-1])))

    def specs(self) -> list[dict]:
        return [l.spec() for l in self.layers]

    def digest(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()

    def copy_from(self, other: "Network"):
        if other.specs() != self.specs() or other.input_shape != self.input_shape:
            raise ConfigurationError("architecture mismatch")
        self.flat[...] = other.flat

    def clone(self) -> "Network":
        net = Network(self.specs(), self.input_shape, self.seed, self.dtype, self.init_gain)
        net.flat[...] = self.flat
        return net

    def manifest(self) -> dict:
        return {
            "layers": self.specs(),
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "init_gain": self.init_gain,
            "param_count": self.num_params,
        }


def sequential(specs: Sequence[dict], input_shape, seed=0, dtype=np.float32) -> Network:
    return Network(specs, input_shape, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(logits, targets):
    """Mean cross-entropy against integer targets; returns ``(loss, dlogits)``."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    return float(loss), g / n


def mse(pred, target):
    """Mean over the batch of ``0.5 * ||pred - target||^2``; returns ``(loss, dpred)``."""
    diff = pred - target
    n = pred.shape[0]
    return float(0.5 * (diff * diff).sum() / n), diff / n


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def clip_grad_norm(grad, max_norm):
    """Scale ``grad`` in place so its global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(np.dot(grad.astype(np.float64), grad.astype(np.float64))))
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite gradient norm ({norm})")
    if max_norm is not None and norm > max_norm:
        grad *= grad.dtype.type(max_norm / norm)
    return norm


@dataclass
class RMSprop:
    """RMSprop with eps outside the square root, after global-norm clipping."""

    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 0.01
    max_grad_norm: float | None = 0.5
    square_avg: np.ndarray | None = field(default=None, repr=False)

    def step(self, params, grads):
        """Update ``params`` in place from ``grads``.

        Both are flat arrays, or equal-length lists of flat arrays; clipping
        uses the global norm over all of them.
        """
        if isinstance(params, np.ndarray):
            params, grads = [params], [grads]
        if any(not np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError("NaN or inf in gradients")
        grads = np.concatenate([g.reshape(-1) for g in grads])
        norm = clip_grad_norm(grads, self.max_grad_norm)
        if self.square_avg is None:
            self.square_avg = np.zeros_like(grads)
        v = self.square_avg
        v *= self.alpha
        v += (1.0 - self.alpha) * grads * grads
        update = self.lr * grads / (np.sqrt(v) + self.eps)
        off = 0
        for p in params:
            p -= update[off : off + p.size].reshape(p.shape)
            off += p.size
        return norm

    def state_dict(self) -> dict:
        return {"lr": self.lr, "alpha": self.alpha, "eps": self.eps, "max_grad_norm": self.max_grad_norm}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RE3CKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, networks: dict[str, Network], state: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write networks (and optional extra arrays / JSON state) to ``path``.

    Layout: magic, u32 little-endian manifest length, UTF-8 JSON manifest,
    then every array as little-endian float32 in manifest order.
    """
    arrays = arrays or {}
    manifest: dict[str, Any] = {
        "format_version": CHECKPOINT_VERSION,
        "endianness": "little",
        "dtype": "float32",
        "networks": {name: net.manifest() for name, net in networks.items()},
        "arrays": {name: int(np.asarray(a).size) for name, a in arrays.items()},
        "state": state or {},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in sorted(networks):
            fh.write(networks[name].flat.astype("<f4").tobytes())
        for name in sorted(arrays):
            fh.write(np.asarray(arrays[name]).astype("<f4").tobytes())


@dataclass
class Checkpoint:
    manifest: dict
    networks: dict[str, Network]
    arrays: dict[str, np.ndarray]

    @property
    def state(self) -> dict:
        return self.manifest["state"]


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = json.loads(data[off : off + hlen].decode())
    off += hlen
    if manifest.get("format_version") != CHECKPOINT_VERSION or manifest.get("endianness") != "little":
        raise ConfigurationError(f"{path}: unsupported checkpoint format")
    nets = {}
    for name in sorted(manifest["networks"]):
        m = manifest["networks"][name]
        net = Network(m["layers"], m["input_shape"], seed=m["seed"], dtype=dtype,
                      init_gain=m.get("init_gain", 1.0))
        if net.num_params != m["param_count"]:
            raise ConfigurationError(f"{path}: parameter count mismatch for {name}")
        n = net.num_params
        net.flat[...] = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        nets[name] = net
    arrays = {}
    for name in sorted(manifest["arrays"]):
        n = manifest["arrays"][name]
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
        off += 4 * n
    if off != len(data):
        raise ConfigurationError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(manifest, nets, arrays)

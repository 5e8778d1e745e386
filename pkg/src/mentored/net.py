"""Sequential networks with cached activations and hand-derived backprop.

Layers are built against a known input shape so every parameter is
materialised up front. ``Network.forward`` keeps each layer's output in
``cache`` (index ``i`` holds the output of layer ``i``), which is what the
probes read. ``Network.backward`` accepts gradients injected at any number of
layer outputs and returns gradients for the trainable parameters.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    ArchMismatch,
    ConfigError,
    CorruptCheckpoint,
    LabelOutOfRange,
    ManifestMismatch,
    NonFiniteActivation,
    NonPositiveTemperature,
    ShapeMismatch,
    StaleCache,
)

MAGIC = b"MNTE0001"
DEFAULT_INIT_STD = 0.01


# ---------------------------------------------------------------- functional


def softmax_t(logits, temperature: float = 1.0):
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_t_backward(probs, grad_probs, temperature: float = 1.0):
    """Vector-Jacobian product of ``softmax_t`` at the logits."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner) / temperature


def cross_entropy(probs, labels, temperature: float = 1.0):
    """Mean negative log-likelihood and its gradient at the logits.

    The gradient is the fused softmax/cross-entropy form
    ``(probs - onehot) / (batch * temperature)``.
    """
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], np.finfo(probs.dtype).tiny)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n * temperature
    return loss, grad


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    weight_name: str | None = None  # parameter subject to l1/l2

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False
        self.in_shape: tuple = ()
        self.out_shape: tuple = ()

    def build(self, in_shape, rng, dtype):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape
        return self.out_shape

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy, need_dx=True):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"
    weight_name = "W"

    def __init__(self, units, init_mean=0.0, init_std=DEFAULT_INIT_STD):
        super().__init__()
        self.units = int(units)
        self.init_mean = float(init_mean)
        self.init_std = float(init_std)

    def build(self, in_shape, rng, dtype):
        self.in_shape = tuple(in_shape)
        fan_in = math.prod(self.in_shape)
        self.params["W"] = T.gaussian_fill((fan_in, self.units), self.init_mean, self.init_std, rng, dtype)
        self.params["b"] = np.zeros(self.units, dtype=dtype)
        self.out_shape = (self.units,)
        return self.out_shape

    def forward(self, x, train, rng):
        self._x = x.reshape(len(x), -1)
        return self._x @ self.params["W"] + self.params["b"]

    def backward(self, dy, need_dx=True):
        self.grads["W"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        if not need_dx:
            return None
        return (dy @ self.params["W"].T).reshape((len(dy),) + self.in_shape)

    def spec(self):
        return {"kind": self.kind, "units": self.units, "init_mean": self.init_mean, "init_std": self.init_std}


class Conv(Layer):
    kind = "conv"
    weight_name = "W"

    def __init__(self, filters, kh=5, kw=5, stride=1, pad=0, init_mean=0.0, init_std=DEFAULT_INIT_STD):
        super().__init__()
        self.filters, self.kh, self.kw = int(filters), int(kh), int(kw)
        self.stride, self.pad = int(stride), int(pad)
        self.init_mean = float(init_mean)
        self.init_std = float(init_std)

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"conv layer needs a C×H×W input, got {in_shape}")
        c, h, w = in_shape
        self.in_shape = tuple(in_shape)
        ho = T.conv_output_size(h, self.kh, self.stride, self.pad)
        wo = T.conv_output_size(w, self.kw, self.stride, self.pad)
        shape = (self.filters, c, self.kh, self.kw)
        self.params["W"] = T.gaussian_fill(shape, self.init_mean, self.init_std, rng, dtype)
        self.params["b"] = np.zeros(self.filters, dtype=dtype)
        self.out_shape = (self.filters, ho, wo)
        return self.out_shape

    def forward(self, x, train, rng):
        self._x = x
        y = T.conv2d(x, self.params["W"], self.stride, self.pad)
        return y + self.params["b"][None, :, None, None]

    def backward(self, dy, need_dx=True):
        dx, dw = T.conv2d_grads(self._x, self.params["W"], dy, self.stride, self.pad)
        self.grads["W"] = dw
        self.grads["b"] = dy.sum(axis=(0, 2, 3))
        return dx

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kh": self.kh, "kw": self.kw,
                "stride": self.stride, "pad": self.pad, "init_mean": self.init_mean, "init_std": self.init_std}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy, need_dx=True):
        return dy * self._mask


class MaxPool(Layer):
    """2×2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool"

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"maxpool needs a C×H×W input, got {in_shape}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeMismatch(f"maxpool input too small: {in_shape}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (c, h // 2, w // 2)
        return self.out_shape

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, 4)
        self._arg = blocks.argmax(axis=-1)  # first index wins on ties
        self._xshape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, need_dx=True):
        n, c, h, w = self._xshape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, self._arg[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        dx = np.zeros(self._xshape, dtype=dy.dtype)
        dx[:, :, :2 * ho, :2 * wo] = blocks
        return dx


class Dropout(Layer):
    """Inverted dropout: scaled by 1/(1-rate) in training, identity in eval."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * self._mask

    def backward(self, dy, need_dx=True):
        return dy if self._mask is None else dy * self._mask

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class BatchNorm(Layer):
    """Per-feature (dense) or per-channel (conv) batch normalisation with scale and shift."""

    kind = "batchnorm"

    def __init__(self, eps=1e-5, momentum=0.9):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"batchnorm eps must be > 0, got {eps}")
        self.eps = float(eps)
        self.momentum = float(momentum)

    def build(self, in_shape, rng, dtype):
        self.in_shape = self.out_shape = tuple(in_shape)
        c = in_shape[0]
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)
        return self.out_shape

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train, rng):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= m
            rm += (1 - m) * mean
            rv *= m
            rv += (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        self._train = train
        self._inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        self._xhat = (x - self._bcast(mean, x)) * self._bcast(self._inv_std, x)
        return self._bcast(self.params["gamma"], self._xhat) * self._xhat + self._bcast(self.params["beta"], self._xhat)

    def backward(self, dy, need_dx=True):
        axes = self._axes(dy)
        xhat = self._xhat
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.params["gamma"], dy)
        inv = self._bcast(self._inv_std, dy)
        if not self._train:
            return dxhat * inv
        m = dy.size // dy.shape[1]
        s1 = self._bcast(dxhat.sum(axis=axes), dy)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), dy)
        return inv * (m * dxhat - s1 - xhat * s2) / m

    def spec(self):
        return {"kind": self.kind, "eps": self.eps, "momentum": self.momentum}


class SoftmaxT(Layer):
    kind = "softmax"

    def __init__(self, temperature=1.0):
        super().__init__()
        if temperature <= 0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
        self.temperature = float(temperature)

    def forward(self, x, train, rng):
        self._p = softmax_t(x, self.temperature)
        return self._p

    def backward(self, dy, need_dx=True):
        return softmax_t_backward(self._p, dy, self.temperature)

    def spec(self):
        return {"kind": self.kind, "temperature": self.temperature}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv, ReLU, MaxPool, Dropout, BatchNorm, SoftmaxT)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    try:
        return LAYER_KINDS[kind](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for {kind} layer: {exc}") from None


# ---------------------------------------------------------------- network


class Network:
    def __init__(self, layers, input_shape, rng=None, dtype=T.F32):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.frozen = False
        self.cache: list[np.ndarray] = []
        self._trainable_cache = False
        rng = rng if rng is not None else T.make_rng(0)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        self.output_shape = shape

    @classmethod
    def from_specs(cls, specs, input_shape, rng=None, dtype=T.F32):
        return cls([layer_from_spec(s) for s in specs], input_shape, rng, dtype)

    def __len__(self):
        return len(self.layers)

    @property
    def depth(self):
        return len(self.layers)

    def specs(self):
        return [layer.spec() for layer in self.layers]

    # registry -------------------------------------------------------------

    def state(self):
        """Every stored array (parameters then buffers, per layer) in declaration order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out.append((f"{i}.{name}", arr))
            for name, arr in layer.buffers.items():
                out.append((f"{i}.{name}", arr))
        return out

    def trainable(self):
        """(layer index, name, array) for parameters that training may change."""
        if self.frozen:
            return []
        return [(i, name, arr) for i, layer in enumerate(self.layers) if not layer.frozen
                for name, arr in layer.params.items()]

    def snapshot(self):
        return [arr.copy() for _, arr in self.state()]

    def restore(self, snap):
        for (_, arr), saved in zip(self.state(), snap, strict=True):
            arr[...] = saved

    def freeze(self):
        self.frozen = True
        return self

    def astype(self, dtype):
        net = Network.from_specs(self.specs(), self.input_shape, dtype=dtype)
        for (_, dst), (_, src) in zip(net.state(), self.state()):
            dst[...] = src
        for a, b in zip(net.layers, self.layers):
            a.frozen = b.frozen
        net.frozen = self.frozen
        return net

    # passes ----------------------------------------------------------------

    def forward(self, x, mode="train", rng=None, check=True):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = x.astype(self.dtype, copy=False)
        train = mode == "train" and not self.frozen
        self.cache = []
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train and not layer.frozen, rng)
            if check and not np.isfinite(x).all():
                self._trainable_cache = False
                raise NonFiniteActivation(f"non-finite activation at layer {i} ({layer.kind})")
            self.cache.append(x)
        self._trainable_cache = train
        return x

    def backward(self, injections: dict[int, np.ndarray]):
        """Backpropagate gradients injected at layer outputs.

        Returns gradients aligned with ``trainable()``. A frozen network
        returns an empty list.
        """
        if self.frozen:
            return []
        if not self._trainable_cache:
            raise StaleCache("backward needs a preceding train-mode forward")
        if not injections:
            return [np.zeros_like(arr) for _, _, arr in self.trainable()]
        injections = {(i if i >= 0 else len(self.layers) + i): g for i, g in injections.items()}
        for layer in self.layers:
            layer.grads = {}
        lowest = min((i for i, layer in enumerate(self.layers) if layer.params and not layer.frozen),
                     default=len(self.layers))
        g = None
        for i in range(max(injections), lowest - 1, -1):
            if i in injections:
                inj = injections[i]
                if inj.shape != self.cache[i].shape:
                    raise ShapeMismatch(f"gradient for layer {i} has shape {inj.shape}, expected {self.cache[i].shape}")
                g = inj if g is None else g + inj
            if g is None:
                continue
            g = self.layers[i].backward(g, need_dx=i > lowest)
        return [self.layers[i].grads.get(name, np.zeros_like(arr)) for i, name, arr in self.trainable()]


# ---------------------------------------------------------------- penalties


def reg_penalty(net: Network, l1: float, l2: float):
    """l1/l2 penalty over weight matrices and filters (not biases or batch-norm scale/shift).

    Returns the scalar penalty and gradients aligned with ``net.trainable()``.
    """
    penalty = 0.0
    grads = []
    for i, name, arr in net.trainable():
        if name != net.layers[i].weight_name:
            grads.append(None)
            continue
        penalty += l1 * float(np.abs(arr).sum(dtype=np.float64)) + l2 * float((arr.astype(np.float64) ** 2).sum())
        g = np.zeros_like(arr)
        if l1:
            g += arr.dtype.type(l1) * np.sign(arr)
        if l2:
            g += arr.dtype.type(2 * l2) * arr
        grads.append(g)
    return penalty, grads


# ---------------------------------------------------------------- checkpoints


def _manifest(net: Network, meta: dict | None) -> dict:
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in net.state()]
    return {
        "format": "mentored-checkpoint",
        "version": 1,
        "dtype": "f32",
        "input_shape": list(net.input_shape),
        "layers": net.specs(),
        "frozen_layers": [i for i, layer in enumerate(net.layers) if layer.frozen],
        "params": entries,
        "value_count": sum(math.prod(e["shape"]) for e in entries),
        "meta": meta or {},
    }


def checkpoint_bytes(net: Network, meta: dict | None = None) -> bytes:
    manifest = json.dumps(_manifest(net, meta), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in net.state())
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + blob


def save(net: Network, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net, meta))
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic)")
    (size,) = struct.unpack("<I", raw[8:12])
    if 12 + size > len(raw):
        raise CorruptCheckpoint(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[12:12 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({exc})") from None
    return manifest, raw[12 + size:]


def load(path) -> Network:
    manifest, blob = read_manifest(path)
    try:
        count = int(manifest["value_count"])
        specs, input_shape = manifest["layers"], manifest["input_shape"]
        entries = manifest["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: incomplete manifest ({exc})") from None
    if len(blob) != 4 * count:
        raise CorruptCheckpoint(f"{path}: blob holds {len(blob)} bytes, manifest promises {4 * count}")
    if count != sum(math.prod(e["shape"]) for e in entries):
        raise ManifestMismatch(f"{path}: parameter table disagrees with value count")
    try:
        net = Network.from_specs(specs, input_shape)
    except (ShapeMismatch, ConfigError) as exc:
        raise ManifestMismatch(f"{path}: layer table cannot be rebuilt ({exc})") from None
    state = net.state()
    if [(n, list(a.shape)) for n, a in state] != [(e["name"], list(e["shape"])) for e in entries]:
        raise ManifestMismatch(f"{path}: layer table does not match the stored parameters")
    values = np.frombuffer(blob, dtype="<f4")
    offset = 0
    for _, arr in state:
        arr[...] = values[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    for i in manifest.get("frozen_layers", []):
        net.layers[i].frozen = True
    return net


# ---------------------------------------------------------------- architectures


def _mlp(hidden, classes, dropout, init_std, batchnorm=True):
    specs = []
    for units in hidden:
        specs.append({"kind": "dense", "units": units, "init_std": init_std})
        if batchnorm:
            specs.append({"kind": "batchnorm"})
        specs.append({"kind": "relu"})
        if dropout:
            specs.append({"kind": "dropout", "rate": dropout})
    specs += [{"kind": "dense", "units": classes, "init_std": init_std}, {"kind": "softmax"}]
    return specs


def _convnet(convs, hidden, classes, dropout, init_std, batchnorm=True):
    specs = []
    for filters in convs:
        specs.append({"kind": "conv", "filters": filters, "kh": 5, "kw": 5, "init_std": init_std})
        if batchnorm:
            specs.append({"kind": "batchnorm"})
        specs += [{"kind": "relu"}, {"kind": "maxpool"}]
    return specs + _mlp(hidden, classes, dropout, init_std, batchnorm)


ARCHITECTURES = {
    "mlp-mentor": lambda c, d, s, bn: _mlp([512, 512], c, d, s, bn),
    "mlp-mentee": lambda c, d, s, bn: _mlp([128], c, d, s, bn),
    "conv-mentor": lambda c, d, s, bn: _convnet([20, 50], [500], c, d, s, bn),
    "conv-mentee": lambda c, d, s, bn: _convnet([8], [64], c, d, s, bn),
}


def arch_specs(arch, classes=10, dropout=0.5, init_std=DEFAULT_INIT_STD, batchnorm=True):
    """Resolve a named architecture or pass through an explicit layer list."""
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise ArchMismatch(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        return ARCHITECTURES[arch](classes, dropout, init_std, batchnorm)
    if isinstance(arch, list) and all(isinstance(s, dict) for s in arch):
        return [dict(s) for s in arch]
    raise ConfigError("architecture must be a name or a list of layer objects")


def build(arch, input_shape, rng, classes=10, dropout=0.5, init_std=DEFAULT_INIT_STD, batchnorm=True,
          dtype=T.F32) -> Network:
    return Network.from_specs(arch_specs(arch, classes, dropout, init_std, batchnorm), input_shape, rng, dtype)

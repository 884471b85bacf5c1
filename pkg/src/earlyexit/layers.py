"""Layers with paired forward/backward passes, parameters and the softmax head.

A layer is described by a small frozen dataclass (``Conv``, ``Dense``,
``ReLU``, ``MaxPool``, ``Flatten``). The description knows its output shape,
parameter shapes and multiply-accumulate count for a given input shape, and
runs forward/backward against a ``ParameterStore`` under a layer name such as
``"trunk.0"`` (parameters then live at ``"trunk.0.weight"`` / ``"trunk.0.bias"``).

Shapes passed to ``out_shape``/``param_shapes``/``macs`` exclude the batch
dimension.
"""

from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import DimensionError, StateError, ValidationError
from .tensor import conv2d, conv2d_backward, conv_output_size, maxpool2d, maxpool2d_backward

PROB_FLOOR = 1e-12


class ParameterStore:
    """Named parameter tensors with gradient buffers of identical shape.

    Iteration follows insertion order, which is the network's declaration
    order, so serialization and optimizer state line up across runs.
    """

    def __init__(self):
        self._values = {}
        self._grads = {}

    def add(self, name, value):
        if name in self._values:
            raise ValidationError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        old = self._values[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise DimensionError(f"parameter {name!r}: shape {value.shape} does not match {old.shape}")
        self._values[name] = value.copy()

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name):
        return self._grads[name]

    def accumulate(self, name, g):
        self._grads[name] += g

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0)

    @property
    def dtype(self):
        return next(iter(self._values.values())).dtype if self._values else np.dtype(np.float32)

    def num_elements(self):
        return sum(v.size for v in self._values.values())

    def copy(self):
        new = ParameterStore()
        for k, v in self._values.items():
            new.add(k, v)
        return new

    def astype(self, dtype):
        new = ParameterStore()
        for k, v in self._values.items():
            new.add(k, v.astype(dtype))
        return new

    def __repr__(self):
        return f"ParameterStore({len(self)} tensors, {self.num_elements()} values)"


class ActivationCache(dict):
    """Per-layer values saved by a training-mode forward pass, keyed by layer name."""

    def need(self, name):
        try:
            return self[name]
        except KeyError:
            raise StateError(f"layer {name!r}: backward called without a cached training-mode forward") from None


def _check_positive(kind, **values):
    for k, v in values.items():
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ValidationError(f"{kind}: {k} must be a positive integer, got {v!r}")


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    kind = "conv"

    def __post_init__(self):
        _check_positive("conv", channels=self.channels, kernel=self.kernel, stride=self.stride)
        if not isinstance(self.padding, (int, np.integer)) or self.padding < 0:
            raise ValidationError(f"conv: padding must be a non-negative integer, got {self.padding!r}")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"conv expects a (C, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        if self.kernel > h + 2 * self.padding or self.kernel > w + 2 * self.padding:
            raise DimensionError(f"conv kernel {self.kernel} larger than padded input {h}x{w} (padding {self.padding})")
        return (
            self.channels,
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def param_shapes(self, in_shape):
        return {"weight": (self.channels, in_shape[0], self.kernel, self.kernel), "bias": (self.channels,)}

    def fan_in(self, in_shape):
        return in_shape[0] * self.kernel * self.kernel

    def macs(self, in_shape):
        c, h, w = self.out_shape(in_shape)
        return c * h * w * in_shape[0] * self.kernel * self.kernel

    def forward(self, params, name, x, cache=None):
        w, b = params[name + ".weight"], params[name + ".bias"]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"layer {name} (conv): input shape {x.shape} incompatible with kernel {w.shape}")
        if cache is not None:
            cache[name] = x
        return conv2d(x, w, b, self.stride, self.padding)

    def backward(self, params, name, cache, grad_out, input_grad=True):
        x = cache.need(name)
        dx, dw, db = conv2d_backward(
            x, params[name + ".weight"], grad_out, self.stride, self.padding, input_grad
        )
        params.accumulate(name + ".weight", dw)
        params.accumulate(name + ".bias", db)
        return dx


@dataclass(frozen=True)
class Dense:
    features: int

    kind = "dense"

    def __post_init__(self):
        _check_positive("dense", features=self.features)

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionError(f"dense expects a flat (features,) input, got {tuple(in_shape)}; add a flatten layer")
        return (self.features,)

    def param_shapes(self, in_shape):
        return {"weight": (in_shape[0], self.features), "bias": (self.features,)}

    def fan_in(self, in_shape):
        return in_shape[0]

    def macs(self, in_shape):
        return in_shape[0] * self.features

    def forward(self, params, name, x, cache=None):
        w, b = params[name + ".weight"], params[name + ".bias"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {name} (dense): input shape {x.shape} incompatible with weight {w.shape}")
        if cache is not None:
            cache[name] = x
        return x @ w + b

    def backward(self, params, name, cache, grad_out, input_grad=True):
        x = cache.need(name)
        w = params[name + ".weight"]
        params.accumulate(name + ".weight", x.T @ grad_out)
        params.accumulate(name + ".bias", grad_out.sum(axis=0))
        return grad_out @ w.T


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape):
        return {}

    def macs(self, in_shape):
        return 0

    def forward(self, params, name, x, cache=None):
        if cache is not None:
            cache[name] = x > 0
        return np.maximum(x, 0)

    def backward(self, params, name, cache, grad_out, input_grad=True):
        return grad_out * cache.need(name)


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int | None = None

    kind = "maxpool"

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.window)
        _check_positive("maxpool", window=self.window, stride=self.stride)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool expects a (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise DimensionError(f"maxpool window {self.window} exceeds spatial extent {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def param_shapes(self, in_shape):
        return {}

    def macs(self, in_shape):
        return 0

    def forward(self, params, name, x, cache=None):
        if x.ndim != 4:
            raise DimensionError(f"layer {name} (maxpool): expected 4-D input, got shape {x.shape}")
        out, idx = maxpool2d(x, self.window, self.stride, return_index=cache is not None)
        if cache is not None:
            cache[name] = (idx, x.shape)
        return out

    def backward(self, params, name, cache, grad_out, input_grad=True):
        idx, shape = cache.need(name)
        return maxpool2d_backward(grad_out, idx, shape, self.window, self.stride)


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (prod(in_shape),)

    def param_shapes(self, in_shape):
        return {}

    def macs(self, in_shape):
        return 0

    def forward(self, params, name, x, cache=None):
        if cache is not None:
            cache[name] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, params, name, cache, grad_out, input_grad=True):
        return grad_out.reshape(cache.need(name))


LAYER_KINDS = {cls.kind: cls for cls in (Conv, Dense, ReLU, MaxPool, Flatten)}


def layer_forward(spec, params, name, x, cache=None):
    """Run one layer. Passing an ``ActivationCache`` selects training mode."""
    return spec.forward(params, name, x, cache)


def layer_backward(spec, params, name, cache, grad_out, input_grad=True):
    """Backward through one layer; parameter gradients are added to ``params``.

    ``input_grad=False`` lets a layer skip its input gradient (it may return None).
    """
    if cache is None:
        raise StateError(f"layer {name!r}: no activation cache (forward ran in inference mode)")
    return spec.backward(params, name, cache, grad_out, input_grad)


def init_layer_params(params, spec, name, in_shape, rng, dtype=np.float32):
    shapes = spec.param_shapes(in_shape)
    if not shapes:
        return
    params.add(name + ".weight", fan_in_uniform(rng, shapes["weight"], spec.fan_in(in_shape), dtype))
    params.add(name + ".bias", np.zeros(shapes["bias"], dtype=dtype))


def softmax(z):
    """Row-wise softmax via max subtraction, evaluated in float64."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def check_one_hot(y):
    y = np.asarray(y)
    ok = np.all((y == 0) | (y == 1), axis=1) & (y.sum(axis=1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValidationError(f"label row {bad} is not one-hot: {y[bad]}")


def cross_entropy(y_hat, y):
    """Class-count-normalized cross entropy: mean over rows of ``-log(p_true) / C``.

    Returns ``(loss, grad)`` where ``grad`` is the gradient w.r.t. the logits
    that produced ``y_hat`` through softmax, ``(y_hat - y) / (C * N)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DimensionError(f"cross_entropy: prediction shape {y_hat.shape} != label shape {y.shape}")
    check_one_hot(y)
    n, c = y.shape
    p = np.clip(y_hat, PROB_FLOOR, 1.0)
    loss = -np.sum(y * np.log(p)) / (c * n)
    return float(loss), (y_hat - y) / (c * n)

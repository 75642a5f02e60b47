"""Small numpy neural-network engine with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` values (float32 by default). Every layer
keeps the activations it needs from its last forward call, so a backward
call must follow the forward it belongs to. A stack works in whatever float
dtype its parameters have, which lets gradient checks run in float64.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


# --------------------------------------------------------------------------
# layers


def _colsum(g: np.ndarray) -> np.ndarray:
    # BLAS reduction; much faster than ndarray.sum(axis=0) for tall inputs
    return np.ones(g.shape[0], dtype=g.dtype) @ g


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[np.ndarray] = []
        self._cache = None

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        """Return ``(input_grad, param_grads)`` for the last forward call."""
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"expects input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def init_params(self, rng, dtype=DTYPE):
        s = math.sqrt(6.0 / (self.in_features + self.out_features))
        w = rng.uniform(-s, s, size=(self.out_features, self.in_features))
        self.params = [w.astype(dtype), np.zeros(self.out_features, dtype=dtype)]

    def forward(self, x):
        w, b = self.params
        self._cache = x
        return x @ w.T + b

    def backward(self, grad_out, need_input_grad=True):
        w, _ = self.params
        x = self._cache
        dw = grad_out.T @ x
        db = _colsum(grad_out)
        dx = grad_out @ w if need_input_grad else None
        return dx, [dw, db]

    def config(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d(Layer):
    """2-D convolution over channels-last ``(N, H, W, C)`` input via im2col; no padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(f"expects input (H, W, {self.in_channels}), got {in_shape}")
        h, w, _ = in_shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ShapeError(f"kernel {k} larger than input {h}x{w}")
        return ((h - k) // s + 1, (w - k) // s + 1, self.out_channels)

    def init_params(self, rng, dtype=DTYPE):
        k = self.kernel
        fan_in = self.in_channels * k * k
        fan_out = self.out_channels * k * k
        s = math.sqrt(6.0 / (fan_in + fan_out))
        # rows of the weight matrix follow the im2col column order (kh, kw, C)
        w = rng.uniform(-s, s, size=(k, k, self.in_channels, self.out_channels))
        self.params = [w.astype(dtype), np.zeros(self.out_channels, dtype=dtype)]

    def forward(self, x):
        w, b = self.params
        k, s = self.kernel, self.stride
        n = x.shape[0]
        # (N, OH, OW, C, k, k) -> (N, OH, OW, k, k, C)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        oh, ow = win.shape[1], win.shape[2]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, -1)
        out = cols @ w.reshape(-1, self.out_channels)
        out += b
        self._cache = (x.shape, cols, oh, ow)
        return out.reshape(n, oh, ow, self.out_channels)

    def backward(self, grad_out, need_input_grad=True):
        w, _ = self.params
        x_shape, cols, oh, ow = self._cache
        n = x_shape[0]
        k, s = self.kernel, self.stride
        g = grad_out.reshape(n * oh * ow, self.out_channels)
        dw = (cols.T @ g).reshape(w.shape)
        db = _colsum(g)
        if not need_input_grad:
            return None, [dw, db]
        dcols = (g @ w.reshape(-1, self.out_channels).T).reshape(n, oh, ow, k, k, self.in_channels)
        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        return dx, [dw, db]

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad_out, need_input_grad=True):
        return grad_out * self._cache, []


class MaxPool2d(Layer):
    """Non-overlapping max pooling on ``(N, H, W, C)``.

    The gradient of each window goes to its first maximal entry in row-major
    window order.
    """

    kind = "maxpool2d"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects (H, W, C), got {in_shape}")
        h, w, c = in_shape
        p = self.size
        if h % p or w % p:
            raise ShapeError(f"spatial size {h}x{w} not divisible by pool {p}")
        return (h // p, w // p, c)

    def forward(self, x):
        p = self.size
        taps = [x[:, i::p, j::p, :] for i in range(p) for j in range(p)]
        out = taps[0]
        for t in taps[1:]:
            out = np.maximum(out, t)
        self._cache = (x.shape, taps, out)
        return out

    def backward(self, grad_out, need_input_grad=True):
        shape, taps, out = self._cache
        p = self.size
        dx = np.zeros(shape, dtype=grad_out.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for n, t in enumerate(taps):
            hit = (t == out) & ~taken
            taken |= hit
            i, j = divmod(n, p)
            dx[:, i::p, j::p, :] = grad_out * hit
        return dx, []

    def config(self):
        return {"kind": self.kind, "size": self.size}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, need_input_grad=True):
        return grad_out.reshape(self._cache), []


class Softmax(Layer):
    """Terminal softmax producing class probabilities.

    When it ends a stack, the loss is computed from its input logits, so the
    gradient leaving this layer is the usual ``p - onehot`` term.
    """

    kind = "softmax"

    def forward(self, x):
        self._cache = x
        return softmax(x)

    def backward(self, grad_out, need_input_grad=True):
        p = softmax(self._cache)
        dot = (grad_out * p).sum(axis=1, keepdims=True)
        return p * (grad_out - dot), []


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, Flatten, Softmax)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "dense":
        return Dense(cfg["in"], cfg["out"])
    return LAYER_KINDS[kind](**cfg)


# --------------------------------------------------------------------------
# model spec and stacks


@dataclass
class ModelSpec:
    """Declarative model description: per-sample input shape plus layer configs."""

    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [dict(l) for l in self.layers]

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": self.layers}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), d["layers"])

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the final output shape."""
        shapes = [self.input_shape]
        for i, cfg in enumerate(self.layers):
            layer = layer_from_config(cfg)
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as e:
                prev = self.layers[i - 1]["kind"] if i else "input"
                raise ShapeError(
                    f"layer {i - 1} ({prev}) -> layer {i} ({cfg['kind']}): {e}") from None
        return shapes

    def slice(self, start: int, stop: int | None = None) -> "ModelSpec":
        shapes = self.shapes()
        return ModelSpec(shapes[start], self.layers[start:stop])


@dataclass
class LayerStack:
    layers: list
    input_shape: tuple
    rng_seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)

    def __len__(self):
        return len(self.layers)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def dtype(self):
        ps = self.params
        return ps[0].dtype if ps else DTYPE

    def spec(self) -> ModelSpec:
        return ModelSpec(self.input_shape, [l.config() for l in self.layers])

    def output_shape(self) -> tuple:
        return self.spec().shapes()[-1]

    def copy(self) -> "LayerStack":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "LayerStack":
        out = self.copy()
        for layer in out.layers:
            layer.params = [p.astype(dtype) for p in layer.params]
        return out

    def split(self, k: int) -> tuple["LayerStack", "LayerStack"]:
        """Cut into layers ``[0, k)`` and ``[k, end)``; parameters are shared, not copied."""
        if not 0 < k < len(self.layers):
            raise ValueError(f"split index {k} out of range (0, {len(self.layers)})")
        mid = self.spec().shapes()[k]
        return (LayerStack(self.layers[:k], self.input_shape, self.rng_seed),
                LayerStack(self.layers[k:], mid, self.rng_seed))

    def __add__(self, other: "LayerStack") -> "LayerStack":
        return concat(self, other)


@dataclass
class GradientBundle:
    param_grads: list
    input_grad: np.ndarray | None = None


def init_stack(spec: ModelSpec, seed: int, dtype=DTYPE) -> LayerStack:
    """Build a stack from ``spec`` with Glorot-uniform weights and zero biases."""
    spec.shapes()
    rng = np.random.default_rng(seed)
    layers = [layer_from_config(cfg) for cfg in spec.layers]
    for layer in layers:
        if hasattr(layer, "init_params"):
            layer.init_params(rng, dtype)
    return LayerStack(layers, spec.input_shape, seed)


def concat(first: LayerStack, second: LayerStack) -> LayerStack:
    out_shape = first.spec().shapes()[-1]
    if out_shape != second.input_shape:
        raise ShapeError(f"cannot join stacks: {out_shape} -> {second.input_shape}")
    return LayerStack(first.layers + second.layers, first.input_shape, first.rng_seed)


def _check_input(stack: LayerStack, x: np.ndarray):
    if x.ndim < 1 or tuple(x.shape[1:]) != stack.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match (B,)+{stack.input_shape}")


def forward(stack: LayerStack, x: np.ndarray) -> np.ndarray:
    _check_input(stack, x)
    x = np.asarray(x, dtype=stack.dtype)
    for layer in stack.layers:
        x = layer.forward(x)
    return x


def backward(stack: LayerStack, grad_out: np.ndarray, need_input_grad: bool = True) -> GradientBundle:
    """Backpropagate ``grad_out`` through the activations kept by the last forward."""
    grads = []
    g = grad_out
    n = len(stack.layers)
    for i in range(n - 1, -1, -1):
        g, pg = stack.layers[i].backward(g, need_input_grad or i > 0)
        grads.append(pg)
    grads.reverse()
    return GradientBundle([p for pg in grads for p in pg], g)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(y, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (batch,):
        raise LabelError(f"expected {batch} labels, got shape {y.shape}")
    if batch and (y.min() < 0 or y.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    y = _check_labels(y, n, c)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, y]))
    grad = e / s
    grad[rows, y] -= 1
    grad /= n
    return loss, grad


def head_loss(stack_or_layers, scores: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Loss at the end of a stack and the gradient to feed into ``backward``.

    With a terminal softmax layer the loss is taken from the logits it saw and
    the returned gradient skips past the softmax (it is the gradient w.r.t.
    the softmax input); ``backward`` must then start below that layer.
    """
    layers = stack_or_layers.layers if isinstance(stack_or_layers, LayerStack) else stack_or_layers
    if layers and isinstance(layers[-1], Softmax):
        return cross_entropy(layers[-1]._cache, y)
    return cross_entropy(scores, y)


def backward_from_loss(stack: LayerStack, dlogits: np.ndarray, need_input_grad: bool = True) -> GradientBundle:
    """Backward pass given the gradient w.r.t. the logits (see ``head_loss``)."""
    if stack.layers and isinstance(stack.layers[-1], Softmax):
        if len(stack.layers) == 1:
            return GradientBundle([], dlogits)
        body = LayerStack(stack.layers[:-1], stack.input_shape, stack.rng_seed)
        return backward(body, dlogits, need_input_grad)
    return backward(stack, dlogits, need_input_grad)


def loss_and_backward(stack: LayerStack, x: np.ndarray, y, need_input_grad: bool = True):
    """Mean cross-entropy over the batch plus parameter and input gradients."""
    scores = forward(stack, x)
    loss, dlogits = head_loss(stack, scores, y)
    return loss, backward_from_loss(stack, dlogits, need_input_grad)


def sgd_step(stack: LayerStack, grads: GradientBundle, lr: float) -> LayerStack:
    params = stack.params
    if len(params) != len(grads.param_grads):
        raise ValueError(f"gradient bundle has {len(grads.param_grads)} entries, stack has {len(params)} params")
    for p, g in zip(params, grads.param_grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    lr = p.dtype.type(lr) if params else lr
    for p, g in zip(params, grads.param_grads):
        p -= lr * g
    return stack


def predict(stack: LayerStack, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per row; ``np.argmax`` resolves ties to the lowest index."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    out = [np.argmax(forward(stack, x[i:i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.int64)


def accuracy(stack: LayerStack, x: np.ndarray, y) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.mean(predict(stack, x) == np.asarray(y)))


def params_equal(a: LayerStack, b: LayerStack) -> bool:
    pa, pb = a.params, b.params
    return len(pa) == len(pb) and all(
        x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes() for x, y in zip(pa, pb))


def spec_json(spec: ModelSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)

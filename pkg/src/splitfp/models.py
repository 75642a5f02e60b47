"""Model specs used by the experiments."""
from __future__ import annotations

from .engine import ModelSpec


def mnist_net(conv1: int = 8, conv2: int = 16, hidden: int = 64, classes: int = 10) -> ModelSpec:
    """Small MnistNet-style CNN: two conv blocks, two dense layers, softmax.

    Layer indices: 0 conv, 1 relu, 2 pool, 3 conv, 4 relu, 5 pool, 6 flatten,
    7 dense, 8 relu, 9 dense, 10 softmax. Splitting at 8 gives the client the
    first eight layers; splitting at 10 leaves only the softmax on the server.
    """
    return ModelSpec((28, 28, 1), [
        {"kind": "conv2d", "in_channels": 1, "out_channels": conv1, "kernel": 5, "stride": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "size": 2},
        {"kind": "conv2d", "in_channels": conv1, "out_channels": conv2, "kernel": 5, "stride": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "in": 4 * 4 * conv2, "out": hidden},
        {"kind": "relu"},
        {"kind": "dense", "in": hidden, "out": classes},
        {"kind": "softmax"},
    ])


def mlp(dim: int, hidden=(32,), classes: int = 10, softmax: bool = True) -> ModelSpec:
    """Dense/ReLU stack over ``(dim,)`` inputs."""
    layers, prev = [], dim
    for h in hidden:
        layers += [{"kind": "dense", "in": prev, "out": h}, {"kind": "relu"}]
        prev = h
    layers.append({"kind": "dense", "in": prev, "out": classes})
    if softmax:
        layers.append({"kind": "softmax"})
    return ModelSpec((dim,), layers)


MODELS = {"mnist_net": mnist_net, "mlp": mlp}


def build(name: str, **kwargs) -> ModelSpec:
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    return MODELS[name](**kwargs)

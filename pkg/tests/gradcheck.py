"""Finite-difference oracle. Uses only forward passes and its own loss."""
import numpy as np
from scipy.special import logsumexp

from splitfp import engine


def ce_loss(stack, x, y):
    """Mean cross-entropy from scratch; drops a terminal softmax to get logits."""
    layers = stack.layers
    if layers and isinstance(layers[-1], engine.Softmax):
        stack = engine.LayerStack(layers[:-1], stack.input_shape)
    z = engine.forward(stack, x).astype(np.float64)
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def numeric_grad(f, arr, h=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (edited in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)

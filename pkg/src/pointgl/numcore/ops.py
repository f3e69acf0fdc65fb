"""Differentiable whole-tensor operations on ``Variable``.

Each op computes its forward value with numpy and closes over whatever it
needs for the backward rule. Broadcasting is limited to what the network
uses: a trailing-axis vector added to or multiplied with a matrix.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, Variable, as_array


class ShapeError(ValueError):
    pass


def _lift(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(as_array(x))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return Variable(av @ bv, (a, b), back)


def add(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Variable(a.value + b.value, (a, b), back)


def sub(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Variable(a.value - b.value, (a, b), back)


def mul(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Variable(av * bv, (a, b), back)


def sum_all(x) -> Variable:
    x = _lift(x)
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(x.value.dtype),)

    return Variable(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), back)


def reshape(x: Variable, shape) -> Variable:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return Variable(x.value.reshape(shape), (x,), back)


def linear(x: Variable, weight: Variable, bias: Variable | None = None) -> Variable:
    """``x @ weight + bias`` for 2-D ``x`` (rows are points)."""
    if x.value.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    xv, wv = x.value, weight.value
    out = xv @ wv
    if bias is not None:
        out += bias.value

    def back(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Variable(out, parents, back)


def relu(x) -> Variable:
    x = _lift(x)
    out = np.maximum(x.value, 0)

    def back(g):
        return (g * (out > 0),)

    return Variable(out, (x,), back)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Variable:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _lift(x)
    if not train or p == 0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.value.dtype) / x.value.dtype.type(1 - p)

    def back(g):
        return (g * keep,)

    return Variable(x.value * keep, (x,), back)


def scatter_rows(n_rows: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` (R x D) into an ``n_rows x D`` array at row ``idx`` (R,)."""
    d = values.shape[-1]
    flat = (np.asarray(idx, dtype=np.int64).reshape(-1, 1) * d + np.arange(d)).reshape(-1)
    out = np.bincount(flat, weights=values.reshape(-1), minlength=n_rows * d)
    return out.reshape(n_rows, d).astype(values.dtype)


def gather_rows(x: Variable, idx: np.ndarray) -> Variable:
    """Row gather ``x[idx]`` for 2-D ``x``; ``idx`` may have any shape."""
    idx = np.asarray(idx)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    d = x.shape[1]
    flat = idx.reshape(-1)

    def back(g):
        return (scatter_rows(n, flat, g.reshape(-1, d)),)

    return Variable(x.value[idx], (x,), back)


def group_max(x: Variable, groups: int) -> Variable:
    """Max over equal-size contiguous row groups: (G*M, D) -> (G, D)."""
    v = x.value
    if v.shape[0] % groups:
        raise ShapeError(f"group_max: {v.shape[0]} rows do not split into {groups} groups")
    m = v.shape[0] // groups
    v3 = v.reshape(groups, m, -1)
    arg = v3.argmax(axis=1)
    out = np.take_along_axis(v3, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(v3)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx.reshape(v.shape),)

    return Variable(out, (x,), back)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. ``logits``."""
    z = as_array(logits)
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"logits must be N x C, got {z.shape}")
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(z.dtype)


def cross_entropy(logits: Variable, labels) -> Variable:
    loss, grad = softmax_cross_entropy(logits.value, labels)

    def back(g):
        return (grad * g,)

    return Variable(np.asarray(loss, dtype=logits.value.dtype), (logits,), back)

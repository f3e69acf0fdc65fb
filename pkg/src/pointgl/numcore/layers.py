"""Batch normalization over point rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Variable, default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class EmptyBatchError(ValueError):
    pass


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``gamma``/``beta`` are learnable; the running statistics are buffers
    updated in train mode as ``running = (1 - momentum) * running + momentum * batch``.
    The running variance uses the unbiased batch variance.
    """

    gamma: Variable
    beta: Variable
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = field(default="train")

    @classmethod
    def create(cls, channels: int, name: str = "bn", **kw) -> "BatchNormState":
        dt = default_dtype()
        return cls(
            gamma=Variable.param(np.ones(channels, dt), name=f"{name}.gamma"),
            beta=Variable.param(np.zeros(channels, dt), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dt),
            running_var=np.ones(channels, dt),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Variable, state: BatchNormState, train: bool | None = None) -> Variable:
    """Normalize each column of an N x D input.

    Train mode uses batch statistics and updates the running ones; eval mode
    reads only the running statistics.
    """
    if train is None:
        train = state.mode == "train"
    xv = x.value
    n = xv.shape[0]
    if n == 0:
        raise EmptyBatchError("batchnorm on an empty batch")
    gamma, beta = state.gamma, state.beta
    dt = xv.dtype.type
    if not train:
        inv = dt(1) / np.sqrt(state.running_var.astype(xv.dtype) + dt(state.eps))
        scale = gamma.value * inv
        shift = beta.value - state.running_mean.astype(xv.dtype) * scale
        xhat = (xv - state.running_mean.astype(xv.dtype)) * inv

        def back_eval(g):
            return g * scale, (g * xhat).sum(axis=0), g.sum(axis=0)

        return Variable(xv * scale + shift, (x, gamma, beta), back_eval)

    mean = xv.mean(axis=0)
    centered = xv - mean
    var = (centered * centered).mean(axis=0)
    inv = dt(1) / np.sqrt(var + dt(state.eps))
    xhat = centered * inv
    out = xhat * gamma.value + beta.value

    m = state.momentum
    unbiased = var * (n / (n - 1)) if n > 1 else var
    state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
    state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

    def back(g):
        gg = g * gamma.value
        dx = inv * (gg - gg.mean(axis=0) - xhat * (gg * xhat).mean(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Variable(out, (x, gamma, beta), back)

import time
from contextlib import contextmanager

import numpy as np

from pointgl.model import ModelConfig, StageSpec, forward
from pointgl.numcore import cross_entropy, numerical_grad, relative_error


def tiny_config(n_classes=3, variant="pointgl"):
    """Two stages of widths 8 and 16 with K=4, sized for 64-point clouds."""
    stages = [StageSpec(3, 8, 32, 4), StageSpec(8, 16, 16, 4)]
    return ModelConfig(stages, n_classes, variant, head_widths=[16, 8])


def model_gradcheck(config, weights, coords, labels, groupings, step=1e-5, train=True):
    """Worst relative error over every parameter, analytic vs central differences.

    Dropout draws from a freshly seeded generator on every evaluation so the
    mask is the same for all perturbed forwards.
    """

    def loss():
        out = forward(coords, config, weights, train=train, rng=np.random.default_rng(0),
                      groupings=groupings)
        return cross_entropy(out.logits, labels)

    weights.zero_grad()
    loss().backward()
    worst = {}
    for name, p in weights.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        numeric = numerical_grad(lambda: float(loss().value), p.value, step)
        worst[name] = relative_error(analytic, numeric)
    return worst


ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion.

    The body fills the yielded dict with measured values for the report line.
    """
    details: dict = {}
    t0 = time.perf_counter()

    def emit(status):
        shown = "  ".join(f"{k}={v}" for k, v in details.items())
        line = f"[{status}] {number}. {title} ({time.perf_counter() - t0:.1f}s) {shown}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)

    try:
        yield details
    except BaseException:
        emit("FAIL")
        raise
    emit("PASS")

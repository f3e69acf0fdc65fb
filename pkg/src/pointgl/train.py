"""Optimizers, learning-rate schedules and the classification train/eval loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data.synthetic import Dataset
from .model import PointGL, build_groupings
from .numcore import Variable, cross_entropy

log = logging.getLogger(__name__)

# names matching these never receive weight decay
NO_DECAY = (".bn", ".lgp.")


@dataclass
class OptimSpec:
    kind: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class ScheduleSpec:
    kind: str = "cosine"
    min_lr: float = 1e-4
    warmup_epochs: int = 0
    step_size: int = 40
    gamma: float = 0.5

    def lr_at(self, epoch: int, total: int, base_lr: float) -> float:
        if self.kind == "cosine":
            return cosine_lr(epoch, total, base_lr, self.min_lr, self.warmup_epochs)
        if self.kind == "step":
            return step_lr(epoch, base_lr, self.step_size, self.gamma)
        if self.kind == "constant":
            return base_lr
        raise ValueError(f"unknown schedule {self.kind!r}")


def cosine_lr(epoch: int, total: int, base_lr: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    """Linear ramp from ``min_lr`` to ``base_lr`` over ``warmup`` epochs, then cosine decay to ``min_lr`` at ``total``."""
    if epoch > total:
        raise ValueError(f"epoch {epoch} beyond schedule length {total}")
    if epoch < warmup:
        return min_lr + (base_lr - min_lr) * epoch / warmup
    span = total - warmup
    t = 1.0 if span <= 0 else (epoch - warmup) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * t))


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (epoch // step_size)


def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray], state: list[np.ndarray | None],
                      spec: OptimSpec, lr: float | None = None, decay: list[bool] | None = None) -> None:
    """In place: ``v = momentum*v + g + wd*p``; ``p -= lr*v``."""
    lr = spec.lr if lr is None else lr
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        d = g
        if spec.weight_decay and (decay is None or decay[i]):
            d = g + spec.weight_decay * p
        if state[i] is None:
            state[i] = np.array(d, dtype=p.dtype)
        else:
            state[i] *= p.dtype.type(spec.momentum)
            state[i] += d
        p -= p.dtype.type(lr) * state[i]


def adamw_step(params, grads, state, spec: OptimSpec, step: int, lr: float | None = None,
               decay: list[bool] | None = None) -> None:
    """In place AdamW with decoupled weight decay; ``state[i]`` is an (m, v) pair."""
    lr = spec.lr if lr is None else lr
    b1, b2 = spec.betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        if state[i] is None:
            state[i] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        if spec.weight_decay and (decay is None or decay[i]):
            p -= p.dtype.type(lr * spec.weight_decay) * p
        p -= (p.dtype.type(lr) * mhat / (np.sqrt(vhat) + spec.eps)).astype(p.dtype)


class Optimizer:
    """Applies an ``OptimSpec`` to a named parameter set."""

    def __init__(self, params: dict[str, Variable], spec: OptimSpec):
        self.names = list(params)
        self.vars = [params[k] for k in self.names]
        self.spec = spec
        self.decay = [not any(tag in k for tag in NO_DECAY) for k in self.names]
        self.state: list = [None] * len(self.vars)
        self.steps = 0

    def step(self, lr: float | None = None) -> None:
        self.steps += 1
        values = [v.value for v in self.vars]
        grads = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in self.vars]
        if self.spec.kind == "sgd_momentum":
            sgd_momentum_step(values, grads, self.state, self.spec, lr, self.decay)
        else:
            adamw_step(values, grads, self.state, self.spec, self.steps, lr, self.decay)

    def zero_grad(self) -> None:
        for v in self.vars:
            v.zero_grad()


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    overall_accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray

    def __iter__(self):
        return iter((self.overall_accuracy, self.mean_class_accuracy, self.confusion))


def accuracy_metrics(y_true, y_pred, n_classes: int | None = None) -> EvalResult:
    """OA, mean per-class recall over classes present in ``y_true``, confusion matrix."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    support = cm.sum(axis=1)
    present = support > 0
    recall = np.diag(cm)[present] / support[present]
    return EvalResult(float(np.trace(cm) / cm.sum()), float(recall.mean()), cm)


def ensure_groupings(model: PointGL, ds: Dataset) -> list:
    if ds.groupings is None:
        ds.groupings = build_groupings(ds.coords, model.config)
    return ds.groupings


def evaluate(model: PointGL, ds: Dataset, batch_size: int = 32) -> EvalResult:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    model.weights.set_mode(False)
    preds = model.predict(ds.coords, ensure_groupings(model, ds), batch_size)
    return accuracy_metrics(ds.labels, preds, ds.n_classes)


# --- training -----------------------------------------------------------------


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    first_batch_loss: float | None = None
    best_epoch: int | None = None
    best_oa: float = -1.0
    best_state: dict | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "test_oa", "test_macc"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]),
                            repr(r["test_oa"]), repr(r["test_macc"])])

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]


def fit(model: PointGL, train: Dataset, test: Dataset | None, optim: OptimSpec, schedule: ScheduleSpec,
        epochs: int = 30, batch_size: int = 16, seed: int = 0,
        checkpoint: str | Path | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> History:
    """Mini-batch training with per-epoch test evaluation; the best-OA weights are kept.

    A trailing batch of one sample is dropped because batch norm needs two rows.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for batch norm statistics")
    rng = np.random.default_rng(seed)
    opt = Optimizer(model.parameters(), optim)
    ensure_groupings(model, train)
    if test is not None:
        ensure_groupings(model, test)
    hist = History()
    n = len(train)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = schedule.lr_at(epoch, epochs, optim.lr)
        model.weights.set_mode(True)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            batch = train.subset(idx)
            out = model(batch.coords, train=True, rng=rng, groupings=batch.groupings)
            loss = cross_entropy(out.logits, batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.value))
            if hist.first_batch_loss is None:
                hist.first_batch_loss = losses[0]
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
               "test_oa": float("nan"), "test_macc": float("nan")}
        if test is not None:
            res = evaluate(model, test)
            row["test_oa"], row["test_macc"] = res.overall_accuracy, res.mean_class_accuracy
            if res.overall_accuracy > hist.best_oa:
                hist.best_oa = res.overall_accuracy
                hist.best_epoch = epoch + 1
                hist.best_state = {k: v.copy() for k, v in model.weights.state_dict().items()}
                if checkpoint is not None:
                    model.save(checkpoint)
        row["seconds"] = time.perf_counter() - t0
        hist.rows.append(row)
        log.info("epoch %d lr %.5f loss %.4f test OA %.4f mAcc %.4f (%.1fs)", row["epoch"], lr,
                 row["train_loss"], row["test_oa"], row["test_macc"], row["seconds"])
        if on_epoch is not None:
            on_epoch(row)
    return hist

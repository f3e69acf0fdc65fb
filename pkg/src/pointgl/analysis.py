"""Analytical parameter/MAC counts and measured throughput.

Headline FLOPs follow the convention of counting one multiply-accumulate as
one FLOP, and only fully connected layers contribute to it. Batch norm,
ReLU, residual adds, edge construction, pooling and distance evaluations
are tallied separately as auxiliary element operations.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import normalize_unit_sphere
from .model import ModelConfig, PointGL, build_groupings
from .numcore import default_dtype


@dataclass
class CostEntry:
    name: str
    params: int = 0
    macs: int = 0
    aux_ops: int = 0
    lgp_params: int = 0


@dataclass
class CostReport:
    per_stage: list[CostEntry]
    head: CostEntry
    n_points: int | None = None
    order: str = "pre"
    variant: str = ""

    @property
    def backbone_params(self) -> int:
        return sum(s.params for s in self.per_stage)

    @property
    def lgp_params(self) -> int:
        return sum(s.lgp_params for s in self.per_stage)

    @property
    def total_params(self) -> int:
        return self.backbone_params + self.head.params

    @property
    def total_macs(self) -> int:
        return sum(s.macs for s in self.per_stage) + self.head.macs

    @property
    def total_aux_ops(self) -> int:
        return sum(s.aux_ops for s in self.per_stage) + self.head.aux_ops

    def rows(self) -> list[CostEntry]:
        total = CostEntry("total", self.total_params, self.total_macs, self.total_aux_ops, self.lgp_params)
        backbone = CostEntry("backbone", self.backbone_params, sum(s.macs for s in self.per_stage),
                             sum(s.aux_ops for s in self.per_stage), self.lgp_params)
        return [*self.per_stage, backbone, self.head, total]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "params", "macs", "aux_ops"])
        for r in self.rows():
            w.writerow([r.name, r.params, r.macs, r.aux_ops])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "order": self.order,
            "n_points": self.n_points,
            "stages": [asdict(s) for s in self.per_stage],
            "head": asdict(self.head),
            "backbone_params": self.backbone_params,
            "lgp_params": self.lgp_params,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_aux_ops": self.total_aux_ops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary(self) -> str:
        lines = [f"{self.variant} ({self.order}-kNN, {self.n_points} points)"]
        for r in self.rows():
            lines.append(f"  {r.name:<9} params {r.params:>10,d}  macs {r.macs:>14,d}  aux {r.aux_ops:>12,d}")
        lines.append(f"  #Params {self.total_params / 1e6:.2f}M   FLOPs {self.total_macs / 1e9:.2f}G")
        return "\n".join(lines)


def _fc_params(d_in, d_out):
    return d_in * d_out + d_out


def _stage_params(st, scalar_affine):
    p = _fc_params(st.d_in, st.d_out) + 2 * st.d_out
    for _ in range(st.n_blocks):
        p += _fc_params(st.d_out, st.hidden) + 2 * st.hidden
        p += _fc_params(st.hidden, st.d_out) + 2 * st.d_out
    lgp = 2 if scalar_affine else 2 * st.d_out
    return p + lgp, lgp


def embed_macs_per_point(st) -> int:
    return st.d_in * st.d_out + st.n_blocks * 2 * st.d_out * st.hidden


def _embed_aux_per_point(st) -> int:
    # BN + ReLU after the transition, then per block BN+ReLU, BN, add, ReLU
    return 2 * st.d_out + st.n_blocks * (2 * st.hidden + 3 * st.d_out)


def count_params(config: ModelConfig) -> CostReport:
    """Learnable scalars: FC weights and biases, BN gamma/beta, LGP alpha/beta."""
    return count_macs(config, None)


def count_macs(config: ModelConfig, n_points: int | None = 1024, order: str | None = None) -> CostReport:
    """Per-stage parameter and MAC counts for one cloud of ``n_points``.

    ``order="pre"`` embeds each of the N_{s-1} stage inputs once;
    ``order="pos"`` embeds every grouped neighbour, N_s * K rows per stage.
    With ``n_points=None`` only parameters are filled in.
    """
    order = order or config.embed_order
    if order not in ("pre", "pos"):
        raise ValueError(f"order must be 'pre' or 'pos', got {order!r}")
    if n_points is not None and n_points < config.stages[0].n_samples:
        raise ValueError(f"{n_points} points is fewer than stage 1 samples ({config.stages[0].n_samples})")
    stages = []
    n_prev = n_points
    for i, st in enumerate(config.stages, start=1):
        params, lgp = _stage_params(st, config.scalar_affine)
        entry = CostEntry(f"stage{i}", params, lgp_params=lgp)
        if n_points is not None:
            m, k, d = st.n_samples, st.k_neighbors, st.d_out
            rows = n_prev if order == "pre" else m * k
            entry.macs = rows * embed_macs_per_point(st)
            fps = n_prev * m
            knn = m * n_prev
            edges = 2 * m * k * d  # affine edge + max compare per element
            entry.aux_ops = rows * _embed_aux_per_point(st) + fps + knn + edges
            n_prev = m
        stages.append(entry)
    head = CostEntry("head")
    d = config.out_width
    for w in config.head_widths:
        head.params += _fc_params(d, w) + 2 * w
        head.macs += d * w
        head.aux_ops += 3 * w  # BN, ReLU, dropout
        d = w
    head.params += _fc_params(d, config.n_classes)
    head.macs += d * config.n_classes
    if n_points is None:
        head.macs = head.aux_ops = 0
    else:
        last = config.stages[-1]
        head.aux_ops += last.n_samples * last.d_out  # global max
    return CostReport(stages, head, n_points, order, config.variant)


# --- throughput ---------------------------------------------------------------


@dataclass
class BenchResult:
    variant: str
    batch_size: int
    n_points: int
    samples_per_second: float
    min_sps: float
    max_sps: float
    iqr_sps: float
    rep_seconds: list[float] = field(default_factory=list)
    threads: int | None = None
    precision: str = ""
    machine: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _thread_count() -> int | None:
    try:
        from threadpoolctl import threadpool_info

        counts = [i.get("num_threads") for i in threadpool_info() if i.get("num_threads")]
        return max(counts) if counts else None
    except Exception:  # pragma: no cover
        return None


def bench_throughput(model: PointGL, batch_size: int = 16, n_points: int = 1024, warmup: int = 1,
                     reps: int = 5, seed: int = 0, include_grouping: bool = True) -> BenchResult:
    """Inference samples/second: median over ``reps`` timed batches after ``warmup``.

    Grouping (FPS + kNN) is part of the timed work unless ``include_grouping``
    is false, in which case it is computed once up front.
    """
    if reps < 3:
        raise ValueError(f"need at least 3 timed repetitions, got {reps}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    clouds = np.stack([normalize_unit_sphere(rng.normal(size=(n_points, 3))).coords
                       for _ in range(batch_size)]).astype(default_dtype())
    fixed = None if include_grouping else build_groupings(clouds, model.config)
    model.weights.set_mode(False)
    for _ in range(warmup):
        model(clouds, groupings=fixed)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model(clouds, groupings=fixed)
        times.append(time.perf_counter() - t0)
    sps = sorted(batch_size / t for t in times)
    q = statistics.quantiles(sps, n=4) if len(sps) >= 2 else [sps[0]] * 3
    return BenchResult(
        variant=model.config.variant,
        batch_size=batch_size,
        n_points=n_points,
        samples_per_second=statistics.median(sps),
        min_sps=sps[0],
        max_sps=sps[-1],
        iqr_sps=q[2] - q[0],
        rep_seconds=times,
        threads=_thread_count(),
        precision=np.dtype(default_dtype()).name,
        machine=f"{platform.machine()} {platform.processor() or ''} cpus={os.cpu_count()}".strip(),
    )

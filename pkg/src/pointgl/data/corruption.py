"""Seven corruption kinds at five severities, and the mCE metric.

Magnitudes per severity are this package's own schedule (see ``SCHEDULE``);
severity 0 is accepted and leaves the cloud unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..geometry import DegenerateCloudError, PointCloud, knn

KINDS = ("scale", "jitter", "drop_global", "drop_local", "add_global", "add_local", "rotate")
SEVERITIES = (1, 2, 3, 4, 5)
MIN_POINTS = 512
LOCAL_CLUSTERS = 8
ADD_LOCAL_SIGMA = 0.05

# magnitude parameter as a function of severity
SCHEDULE = {
    "scale": lambda s: 1 + 0.1 * s,          # factors drawn from [1/m, m]
    "jitter": lambda s: 0.01 * s,            # Gaussian sigma
    "drop_global": lambda s: 0.15 * s,       # fraction removed
    "drop_local": lambda s: 0.15 * s,
    "add_global": lambda s: 0.15 * s,        # fraction appended
    "add_local": lambda s: 0.15 * s,
    "rotate": lambda s: math.pi / 12 * s,    # max angle
}


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 1
    seed: int = 0
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {', '.join(KINDS)}")
        if not 0 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def level(self) -> float:
        if self.magnitude is not None:
            return self.magnitude
        return SCHEDULE[self.kind](int(self.severity))


def _split(total: int, parts: int, rng) -> np.ndarray:
    if total == 0:
        return np.zeros(parts, dtype=int)
    return rng.multinomial(total, np.full(parts, 1.0 / parts))


def _unit_ball(rng, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.random((n, 1)) ** (1 / 3)


def corrupt(cloud, spec: CorruptionSpec, min_points: int = MIN_POINTS, pad: bool = False) -> np.ndarray:
    """Corrupted copy of ``cloud`` coordinates.

    Drops that leave fewer than ``min_points`` raise ``DegenerateCloudError``
    unless ``pad`` is set, in which case survivors are resampled with
    replacement back up to ``min_points``.
    """
    pts = np.asarray(cloud.coords if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind), int(spec.severity)])
    n = len(pts)
    lvl = spec.level
    kind = spec.kind
    if kind == "scale":
        out = pts * rng.uniform(1 / lvl, lvl, size=3)
    elif kind == "jitter":
        out = pts + rng.normal(scale=lvl, size=pts.shape) if lvl > 0 else pts.copy()
    elif kind == "rotate":
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-lvl, lvl)
        out = pts @ Rotation.from_rotvec(axis * angle).as_matrix().T
    elif kind == "drop_global":
        n_drop = int(math.floor(n * lvl))
        keep = np.sort(rng.permutation(n)[: n - n_drop])
        out = pts[keep]
    elif kind == "drop_local":
        n_drop = int(math.floor(n * lvl))
        alive = np.arange(n)
        for size in _split(n_drop, LOCAL_CLUSTERS, rng):
            if size == 0:
                continue
            center = pts[alive[rng.integers(len(alive))]]
            gone = knn(center[None], pts[alive], int(size))[0]
            alive = np.delete(alive, gone)
        out = pts[alive]
    elif kind == "add_global":
        out = np.concatenate([pts, _unit_ball(rng, int(math.floor(n * lvl)))])
    else:  # add_local
        extra = []
        for size in _split(int(math.floor(n * lvl)), LOCAL_CLUSTERS, rng):
            center = pts[rng.integers(n)]
            extra.append(center + rng.normal(scale=ADD_LOCAL_SIGMA, size=(size, 3)))
        out = np.concatenate([pts, *extra])
    if len(out) < min_points:
        if not pad:
            raise DegenerateCloudError(
                f"{kind} severity {spec.severity} leaves {len(out)} points (< {min_points})")
        out = np.concatenate([out, out[rng.integers(len(out), size=min_points - len(out))]])
    return out


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two clouds."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


def mce(model_err: Mapping[str, list] | np.ndarray, baseline_err: Mapping[str, list] | np.ndarray):
    """Corruption errors normalised by a baseline, and their mean.

    ``CE_c = sum_sev err[c, sev] / sum_sev baseline[c, sev]``; mCE averages
    CE over corruption kinds. Inputs are kind -> per-severity errors, or
    arrays of shape (kinds, severities) in ``KINDS`` order.
    """
    if isinstance(model_err, Mapping) != isinstance(baseline_err, Mapping):
        raise TypeError("model and baseline errors must both be mappings or both arrays")
    if isinstance(model_err, Mapping):
        if set(model_err) != set(baseline_err):
            raise ValueError(f"corruption kinds differ: {sorted(model_err)} vs {sorted(baseline_err)}")
        kinds = [k for k in KINDS if k in model_err] + sorted(set(model_err) - set(KINDS))
        m = [np.asarray(model_err[k], dtype=np.float64) for k in kinds]
        b = [np.asarray(baseline_err[k], dtype=np.float64) for k in kinds]
    else:
        m_arr = np.asarray(model_err, dtype=np.float64)
        b_arr = np.asarray(baseline_err, dtype=np.float64)
        if m_arr.shape != b_arr.shape:
            raise ValueError(f"error tables differ in shape: {m_arr.shape} vs {b_arr.shape}")
        kinds = list(KINDS[: len(m_arr)]) if len(m_arr) <= len(KINDS) else [str(i) for i in range(len(m_arr))]
        m, b = list(m_arr), list(b_arr)
    ce = {}
    for k, mk, bk in zip(kinds, m, b):
        if mk.shape != bk.shape:
            raise ValueError(f"{k}: {mk.shape} model errors vs {bk.shape} baseline errors")
        denom = bk.sum()
        if not denom > 0:
            raise ZeroDivisionError(f"{k}: baseline error is zero")
        ce[k] = float(mk.sum() / denom)
    return ce, float(np.mean(list(ce.values())))

"""Labelled toy shapes: uniform surface samples of simple solids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import normalize_unit_sphere

FAMILIES = ("sphere", "cube", "cylinder", "torus")

CYLINDER_RADIUS = 0.5
CYLINDER_HALF_HEIGHT = 1.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35


@dataclass
class SyntheticSpec:
    classes: list[str] = field(default_factory=lambda: list(FAMILIES))
    points_per_cloud: int = 1024
    noise_sigma: float = 0.01
    n_train: int = 400
    n_test: int = 100
    seed: int = 0


@dataclass
class Dataset:
    coords: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    groupings: list | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        g = None
        if self.groupings is not None:
            g = [(s[idx], n[idx]) for s, n in self.groupings]
        return Dataset(self.coords[idx], self.labels[idx], self.class_names, g)


def _sphere(rng, n):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    p = np.empty((n, 3))
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        p[sel, a] = sign[sel]
        p[sel, others[0]] = uv[sel, 0]
        p[sel, others[1]] = uv[sel, 1]
    return p


def _cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    side = 2 * np.pi * r * 2 * h
    caps = 2 * np.pi * r * r
    on_side = rng.random(n) < side / (side + caps)
    theta = rng.uniform(0, 2 * np.pi, n)
    # caps: radius ~ sqrt(U) for uniform area
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h, h, n), np.where(rng.random(n) < 0.5, h, -h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n):
    big, small = TORUS_MAJOR, TORUS_MINOR
    out = []
    have = 0
    while have < n:
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
        v = v[keep]
        u = rng.uniform(0, 2 * np.pi, v.size)
        ring = big + small * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1))
        have += v.size
    return np.concatenate(out)[:n]


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def sample_surface(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the surface of a canonical solid centred at the origin.

    Every family is point-symmetric, so half the points are drawn and the
    other half are their mirror images. The distribution stays uniform and
    the centroid is exactly zero for even ``n``.
    """
    try:
        sampler = _SAMPLERS[family]
    except KeyError:
        raise ValueError(f"unknown shape family {family!r}; choose from {', '.join(FAMILIES)}") from None
    half = sampler(rng, (n + 1) // 2)
    return np.concatenate([half, -half])[:n]


def random_pose(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rot = Rotation.random(random_state=rng).as_matrix()
    return points @ rot.T + rng.uniform(-1, 1, size=3)


def make_cloud(family: str, n: int, rng: np.random.Generator, noise_sigma: float = 0.0,
               pose: bool = True) -> np.ndarray:
    p = sample_surface(family, n, rng)
    if pose:
        p = random_pose(p, rng)
    if noise_sigma > 0:
        p = p + rng.normal(scale=noise_sigma, size=p.shape)
    return normalize_unit_sphere(p).coords


def generate_dataset(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and test sets with round-robin labels and per-cloud derived seeds."""
    if spec.points_per_cloud < 512:
        raise ValueError(f"points_per_cloud must be >= 512, got {spec.points_per_cloud}")
    for c in spec.classes:
        if c not in _SAMPLERS:
            raise ValueError(f"unknown shape family {c!r}; choose from {', '.join(FAMILIES)}")
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_train + spec.n_test)
    splits = []
    offset = 0
    for count in (spec.n_train, spec.n_test):
        labels = np.arange(count) % len(spec.classes)
        coords = np.empty((count, spec.points_per_cloud, 3), dtype=np.float32)
        for i in range(count):
            rng = np.random.default_rng(seeds[offset + i])
            coords[i] = make_cloud(spec.classes[labels[i]], spec.points_per_cloud, rng, spec.noise_sigma)
        splits.append(Dataset(coords, labels.astype(np.int64), list(spec.classes)))
        offset += count
    return splits[0], splits[1]

"""PointGL network: per-stage point embedding followed by local graph pooling.

Each stage embeds every input point once with a residual MLP, samples
centers with FPS, groups K neighbours per center and pools them with
:func:`pointgl.lgp.graph_pool`. The Pos-kNN variant instead embeds the
gathered neighbour sets, which repeats each point's embedding about
``N_s * K / N_{s-1}`` times.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .lgp import graph_pool, pool_gathered, vote_count
from .numcore import (
    BatchNormState,
    ShapeError,
    Variable,
    batchnorm,
    default_dtype,
    dropout,
    gather_rows,
    group_max,
    linear,
    relu,
    reshape,
)


@dataclass
class StageSpec:
    d_in: int
    d_out: int
    n_samples: int
    k_neighbors: int = 24
    n_blocks: int = 1
    bottleneck: int | None = None

    @property
    def hidden(self) -> int:
        return self.bottleneck or self.d_out


@dataclass
class ModelConfig:
    stages: list[StageSpec]
    n_classes: int
    variant: str = "pointgl"
    head_widths: list[int] = field(default_factory=lambda: [512, 256])
    dropout: float = 0.5
    scalar_affine: bool = False
    seed_rule: str = "lexicographic"

    @property
    def embed_order(self) -> str:
        return "pos" if self.variant == "pos_knn" else "pre"

    @property
    def out_width(self) -> int:
        return self.stages[-1].d_out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = [StageSpec(**s) for s in d["stages"]]
        return cls(**d)


POINTGL_WIDTHS = (128, 256, 512, 1024)
ELITE_WIDTHS = (64, 128, 256, 256)
ELITE_BOTTLENECKS = (16, 32, 64, 64)
DEFAULT_SAMPLES = (512, 256, 128, 64)


def _stages(widths, bottlenecks=None, samples=DEFAULT_SAMPLES, k=24, n_blocks=1, d_in=3):
    stages = []
    for i, (w, m) in enumerate(zip(widths, samples)):
        b = bottlenecks[i] if bottlenecks else None
        stages.append(StageSpec(d_in, w, m, k, n_blocks, b))
        d_in = w
    return stages


def pointgl_config(n_classes: int = 15, n_blocks: int = 1, k: int = 24, **kw) -> ModelConfig:
    return ModelConfig(_stages(POINTGL_WIDTHS, k=k, n_blocks=n_blocks), n_classes, "pointgl", **kw)


def elite_config(n_classes: int = 15, n_blocks: int = 1, k: int = 24, **kw) -> ModelConfig:
    return ModelConfig(_stages(ELITE_WIDTHS, ELITE_BOTTLENECKS, k=k, n_blocks=n_blocks),
                       n_classes, "elite", **kw)


def pos_knn_config(n_classes: int = 15, n_blocks: int = 1, k: int = 24, **kw) -> ModelConfig:
    return ModelConfig(_stages(POINTGL_WIDTHS, k=k, n_blocks=n_blocks), n_classes, "pos_knn", **kw)


def make_config(variant: str, n_classes: int = 15, **kw) -> ModelConfig:
    try:
        factory = {"pointgl": pointgl_config, "elite": elite_config, "pos_knn": pos_knn_config}[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r} (expected pointgl, elite or pos_knn)") from None
    return factory(n_classes, **kw)


# --- weights ------------------------------------------------------------------


@dataclass
class Weights:
    params: dict[str, Variable]
    bn: dict[str, BatchNormState]

    def n_learnable(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def set_mode(self, train: bool) -> None:
        for s in self.bn.values():
            s.mode = "train" if train else "eval"

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.value for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {v.shape}")
            v.value = np.array(state[k], dtype=v.value.dtype)
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=s.running_mean.dtype)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=s.running_var.dtype)


def _fc(params, name, d_in, d_out, rng, dtype):
    bound = 1.0 / np.sqrt(d_in)
    params[f"{name}.weight"] = Variable.param(
        rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), name=f"{name}.weight")
    params[f"{name}.bias"] = Variable.param(
        rng.uniform(-bound, bound, size=d_out).astype(dtype), name=f"{name}.bias")


def _bn(params, bns, name, width):
    s = BatchNormState.create(width, name=name)
    bns[name] = s
    params[f"{name}.gamma"] = s.gamma
    params[f"{name}.beta"] = s.beta


def init_weights(config: ModelConfig, rng: np.random.Generator | int = 0) -> Weights:
    """FC weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); BN and LGP at identity."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dtype = default_dtype()
    params: dict[str, Variable] = {}
    bns: dict[str, BatchNormState] = {}
    for i, st in enumerate(config.stages, start=1):
        p = f"stage{i}"
        _fc(params, f"{p}.embed.fc", st.d_in, st.d_out, rng, dtype)
        _bn(params, bns, f"{p}.embed.bn", st.d_out)
        for b in range(st.n_blocks):
            q = f"{p}.block{b}"
            _fc(params, f"{q}.fc1", st.d_out, st.hidden, rng, dtype)
            _bn(params, bns, f"{q}.bn1", st.hidden)
            _fc(params, f"{q}.fc2", st.hidden, st.d_out, rng, dtype)
            _bn(params, bns, f"{q}.bn2", st.d_out)
        width = 1 if config.scalar_affine else st.d_out
        params[f"{p}.lgp.alpha"] = Variable.param(np.ones(width, dtype), name=f"{p}.lgp.alpha")
        params[f"{p}.lgp.beta"] = Variable.param(np.zeros(width, dtype), name=f"{p}.lgp.beta")
    d = config.out_width
    for j, w in enumerate(config.head_widths):
        _fc(params, f"head.fc{j}", d, w, rng, dtype)
        _bn(params, bns, f"head.bn{j}", w)
        d = w
    _fc(params, "head.out", d, config.n_classes, rng, dtype)
    return Weights(params, bns)


# --- forward ------------------------------------------------------------------


def embed_points(feats: Variable, stage: StageSpec, weights: Weights, prefix: str,
                 train: bool = False) -> Variable:
    """Pointwise residual MLP: transition FC+BN+ReLU, then residual blocks."""
    if feats.shape[-1] != stage.d_in:
        raise ShapeError(f"{prefix}: features have width {feats.shape[-1]}, stage expects {stage.d_in}")
    P, B = weights.params, weights.bn
    x = relu(batchnorm(linear(feats, P[f"{prefix}.embed.fc.weight"], P[f"{prefix}.embed.fc.bias"]),
                       B[f"{prefix}.embed.bn"], train))
    for b in range(stage.n_blocks):
        q = f"{prefix}.block{b}"
        h = relu(batchnorm(linear(x, P[f"{q}.fc1.weight"], P[f"{q}.fc1.bias"]), B[f"{q}.bn1"], train))
        h = batchnorm(linear(h, P[f"{q}.fc2.weight"], P[f"{q}.fc2.bias"]), B[f"{q}.bn2"], train)
        x = relu(x + h)
    return x


def build_groupings(coords: np.ndarray, config: ModelConfig, method: str = "brute"):
    """Per-stage (sample_idx, neighbor_idx) for a batch of clouds (B, N, 3).

    Indices are local to each cloud's stage input. Returned as a list of
    ``(B, M)`` and ``(B, M, K)`` arrays, one pair per stage.
    """
    coords = np.asarray(coords)
    if coords.ndim == 2:
        coords = coords[None]
    n = coords.shape[1]
    for i, st in enumerate(config.stages, start=1):
        if n < st.n_samples or n < st.k_neighbors:
            raise ValueError(
                f"stage {i} needs at least {max(st.n_samples, st.k_neighbors)} input points, got {n}")
        n = st.n_samples
    out = [([], []) for _ in config.stages]
    for c in coords:
        cur = c
        for i, st in enumerate(config.stages):
            g = geometry.group(cur, st.n_samples, st.k_neighbors, config.seed_rule, method)
            out[i][0].append(g.sample_idx)
            out[i][1].append(g.neighbor_idx)
            cur = cur[g.sample_idx]
    return [(np.stack(s), np.stack(nb)) for s, nb in out]


@dataclass
class ForwardResult:
    logits: Variable
    stage_outputs: list[np.ndarray]
    stage_coords: list[np.ndarray]
    votes: np.ndarray | None = None


def _self_slot(sample_idx: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    # the center's own row inside its neighbour list; slot 0 (distance zero) otherwise
    hit = neighbor_idx == sample_idx[..., None]
    return np.where(hit.any(axis=-1), hit.argmax(axis=-1), 0)


def forward(coords, config: ModelConfig, weights: Weights, train: bool = False,
            rng: np.random.Generator | None = None, groupings=None,
            return_votes: bool = False) -> ForwardResult:
    """Run the network on a cloud (N, 3) or a batch of clouds (B, N, 3)."""
    if isinstance(coords, geometry.PointCloud):
        coords = coords.coords
    coords = np.asarray(coords, dtype=default_dtype())
    if coords.ndim == 2:
        coords = coords[None]
    bsz, n, _ = coords.shape
    if groupings is None:
        groupings = build_groupings(coords, config)
    pos = config.embed_order == "pos"
    feats = Variable(coords.reshape(bsz * n, 3))
    cur_coords = coords
    stage_outputs, stage_coords = [], []
    votes = None
    n_prev = n
    for i, (st, (sidx, nidx)) in enumerate(zip(config.stages, groupings), start=1):
        prefix = f"stage{i}"
        m, k = st.n_samples, st.k_neighbors
        if sidx.shape != (bsz, m) or nidx.shape != (bsz, m, k):
            raise ShapeError(f"stage {i}: grouping shapes {sidx.shape}, {nidx.shape} do not fit config")
        offset = (np.arange(bsz) * n_prev)[:, None]
        centers = (sidx + offset).reshape(-1)
        nbrs = (nidx + offset[..., None]).reshape(bsz * m, k)
        alpha = weights.params[f"{prefix}.lgp.alpha"]
        beta = weights.params[f"{prefix}.lgp.beta"]
        record: dict = {}
        if pos:
            grouped = reshape(gather_rows(feats, nbrs), (bsz * m * k, st.d_in))
            emb = reshape(embed_points(grouped, st, weights, prefix, train), (bsz * m, k, st.d_out))
            slot = _self_slot(sidx, nidx).reshape(-1)
            center = gather_rows(reshape(emb, (bsz * m * k, st.d_out)), np.arange(bsz * m) * k + slot)
            pooled = pool_gathered(center, emb, alpha, beta, record)
        else:
            emb = embed_points(feats, st, weights, prefix, train)
            pooled = graph_pool(emb, centers, nbrs, alpha, beta, record)
        if return_votes and i == 1:
            arg = record["argmax"].reshape(bsz, m, st.d_out)
            votes = np.stack([vote_count(arg[b], nidx[b], n_prev) for b in range(bsz)])
        cur_coords = np.take_along_axis(cur_coords, sidx[..., None], axis=1)
        stage_outputs.append(pooled.value.reshape(bsz, m, st.d_out))
        stage_coords.append(cur_coords)
        feats = pooled
        n_prev = m

    x = group_max(feats, bsz)
    P = weights.params
    for j in range(len(config.head_widths)):
        x = linear(x, P[f"head.fc{j}.weight"], P[f"head.fc{j}.bias"])
        x = relu(batchnorm(x, weights.bn[f"head.bn{j}"], train))
        x = dropout(x, config.dropout, train, rng)
    logits = linear(x, P["head.out.weight"], P["head.out.bias"])
    return ForwardResult(logits, stage_outputs, stage_coords, votes)


def forward_pos_knn(coords, config: ModelConfig, weights: Weights, **kw) -> ForwardResult:
    """Forward with embedding applied after grouping, whatever the config's variant."""
    if config.embed_order != "pos":
        config = ModelConfig(**{**config.__dict__, "variant": "pos_knn"})
    return forward(coords, config, weights, **kw)


class PointGL:
    """Config plus weights, callable on a batch of clouds."""

    def __init__(self, config: ModelConfig, weights: Weights | None = None, seed: int = 0):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, seed)

    def __call__(self, coords, train: bool = False, **kw) -> ForwardResult:
        return forward(coords, self.config, self.weights, train=train, **kw)

    def parameters(self) -> dict[str, Variable]:
        return self.weights.params

    def predict(self, coords, groupings=None, batch_size: int = 16) -> np.ndarray:
        coords = np.asarray(coords)
        preds = []
        for s in range(0, coords.shape[0], batch_size):
            g = None if groupings is None else [(a[s:s + batch_size], b[s:s + batch_size])
                                                for a, b in groupings]
            out = self(coords[s:s + batch_size], train=False, groupings=g)
            preds.append(out.logits.value.argmax(axis=1))
        return np.concatenate(preds)

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, self.weights.state_dict())
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "PointGL":
        path = Path(path)
        config = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
        model = cls(config)
        model.weights.load_state_dict(load_checkpoint(path))
        return model


# --- checkpoint ---------------------------------------------------------------

MAGIC = b"PGL1"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors as little-endian f32 behind a ``PGL1`` header.

    Layout: magic, u16 version, u32 entry count, then per entry u32 name
    length, UTF-8 name, u32 rank, rank x u32 dims, f32 payload.
    """
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PGL1 checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return out


def stage_output_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    return [(st.n_samples, st.d_out) for st in config.stages]


def count_registered(weights: Weights, exclude: Sequence[str] = ()) -> int:
    return sum(v.size for k, v in weights.params.items() if not any(e in k for e in exclude))

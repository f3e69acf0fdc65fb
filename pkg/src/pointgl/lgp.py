"""Local graph pooling.

Every sampled point is the hub of a star graph over its K neighbours. The
edge feature is a channel-wise affine of the feature difference,
``alpha * (v_neighbor - v_center) + beta``, and the group output is the
channel-wise max over edges. Ties in the max go to the smallest neighbour
slot, and gradients are routed to that slot only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ContractError, ShapeError, Variable, default_dtype

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args or not callable(args[0]) else args[0]


@dataclass
class LgpParams:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, width: int, scalar: bool = False, dtype=None) -> "LgpParams":
        dtype = dtype or default_dtype()
        n = 1 if scalar else width
        return cls(np.ones(n, dtype), np.zeros(n, dtype))

    @property
    def n_params(self) -> int:
        return self.alpha.size + self.beta.size


@dataclass
class LgpOutput:
    pooled: np.ndarray
    argmax_idx: np.ndarray
    diff_at_argmax: np.ndarray | None = None


def _check_width(width: int, params) -> None:
    for name, p in (("alpha", params.alpha), ("beta", params.beta)):
        if np.size(p) not in (1, width):
            raise ShapeError(f"{name} has {np.size(p)} channels, features have {width}")


def edge_features(center: np.ndarray, neighbors: np.ndarray, params: LgpParams) -> np.ndarray:
    """(M, D) centers and (M, K, D) neighbours -> (M, K, D) edges."""
    if neighbors.ndim != 3 or center.shape != (neighbors.shape[0], neighbors.shape[2]):
        raise ShapeError(f"centers {center.shape} do not match neighbours {neighbors.shape}")
    _check_width(center.shape[1], params)
    return params.alpha * (neighbors - center[:, None, :]) + params.beta


def _first_argmax_slot(edges: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    # argmax over the strided slot axis is slow; max then a boolean argmax is
    # faster and still returns the first (smallest) slot attaining the max
    return (edges == pooled[:, None, :]).argmax(axis=1)


def lgp_forward(center: np.ndarray, neighbors: np.ndarray, params: LgpParams) -> LgpOutput:
    """Channel-wise max over the K edge features of each group."""
    if neighbors.ndim != 3 or neighbors.shape[1] == 0:
        raise ValueError("local graph pooling needs K >= 1 neighbours")
    edges = edge_features(center, neighbors, params)
    pooled = edges.max(axis=1)
    arg = _first_argmax_slot(edges, pooled)
    sel = np.take_along_axis(neighbors, arg[:, None, :], axis=1)[:, 0, :]
    return LgpOutput(pooled, arg, sel - center)


def lgp_backward(upstream: np.ndarray, saved: LgpOutput, params: LgpParams, k: int | None = None):
    """Gradients for (center, neighbors, alpha, beta) given d loss / d pooled.

    ``neighbors`` gradient is dense (M, K, D) with a single nonzero slot per
    channel; ``k`` defaults to one past the largest recorded slot.
    """
    if saved is None or saved.diff_at_argmax is None:
        raise ContractError("lgp_backward needs the argmax and differences saved by lgp_forward")
    m, d = upstream.shape
    if k is None:
        k = int(saved.argmax_idx.max()) + 1
    routed = upstream * params.alpha
    d_neighbors = np.zeros((m, k, d), dtype=upstream.dtype)
    np.put_along_axis(d_neighbors, saved.argmax_idx[:, None, :], routed[:, None, :], axis=1)
    d_center = -routed
    d_alpha = (upstream * saved.diff_at_argmax).sum(axis=0)
    d_beta = upstream.sum(axis=0)
    if np.size(params.alpha) == 1:
        d_alpha = np.atleast_1d(d_alpha.sum())
    if np.size(params.beta) == 1:
        d_beta = np.atleast_1d(d_beta.sum())
    return d_center, d_neighbors, d_alpha, d_beta


def vote_count(argmax_idx: np.ndarray, neighbor_idx: np.ndarray, n: int) -> np.ndarray:
    """Number of (group, channel) maxima each support point wins."""
    winners = np.take_along_axis(neighbor_idx, argmax_idx, axis=1)
    return np.bincount(winners.reshape(-1), minlength=n)


# --- fused pre-kNN kernel -----------------------------------------------------


@njit(cache=True)
def _pool_rows_kernel(v, center_idx, neighbor_idx, alpha, beta, pooled, arg, winners, diff):
    # same float ops, in the same order, as edge_features(); strict '>' keeps
    # the first slot on ties
    m, k = neighbor_idx.shape
    d = v.shape[1]
    for j in range(m):
        c = center_idx[j]
        n0 = neighbor_idx[j, 0]
        for ch in range(d):
            pooled[j, ch] = alpha[ch] * (v[n0, ch] - v[c, ch]) + beta[ch]
            arg[j, ch] = 0
        for slot in range(1, k):
            n = neighbor_idx[j, slot]
            for ch in range(d):
                e = alpha[ch] * (v[n, ch] - v[c, ch]) + beta[ch]
                if e > pooled[j, ch]:
                    pooled[j, ch] = e
                    arg[j, ch] = slot
        for ch in range(d):
            w = neighbor_idx[j, arg[j, ch]]
            winners[j, ch] = w
            diff[j, ch] = v[w, ch] - v[c, ch]


@njit(cache=True)
def _scatter_kernel(out, center_idx, winners, routed):
    m, d = routed.shape
    for j in range(m):
        c = center_idx[j]
        for ch in range(d):
            out[winners[j, ch], ch] += routed[j, ch]
            out[c, ch] -= routed[j, ch]


def scatter_pool_grad(n_rows: int, center_idx: np.ndarray, winners: np.ndarray,
                      routed: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Row gradient of pooling: ``+routed`` at each winner, ``-routed`` at its center."""
    m, d = routed.shape
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        out = np.zeros((n_rows, d), routed.dtype)
        _scatter_kernel(out, np.ascontiguousarray(center_idx, dtype=np.int64),
                        np.ascontiguousarray(winners), np.ascontiguousarray(routed))
        return out
    flat = np.concatenate([(winners * d + np.arange(d)).reshape(-1),
                           (center_idx[:, None] * d + np.arange(d)).reshape(-1)])
    vals = np.concatenate([routed.reshape(-1), -routed.reshape(-1)])
    return np.bincount(flat, weights=vals, minlength=n_rows * d).reshape(n_rows, d).astype(routed.dtype)


def _pool_rows_numpy(v, center_idx, neighbor_idx, alpha, beta):
    center = v[center_idx]
    edges = v[neighbor_idx]
    edges -= center[:, None, :]
    edges *= alpha
    edges += beta
    pooled = edges.max(axis=1)
    arg = _first_argmax_slot(edges, pooled)
    del edges
    winners = np.take_along_axis(neighbor_idx, arg, axis=1)
    return pooled, arg, winners, v[winners, np.arange(v.shape[1])] - center


def pool_rows(v: np.ndarray, center_idx: np.ndarray, neighbor_idx: np.ndarray,
              alpha: np.ndarray, beta: np.ndarray, use_numba: bool | None = None):
    """Pooled values, argmax slots, winning rows and winning differences, all (M, D).

    Equivalent to ``lgp_forward(v[center_idx], v[neighbor_idx], ...)`` without
    building the (M, K, D) neighbour tensor when numba is available.
    """
    d = v.shape[1]
    alpha = np.broadcast_to(np.asarray(alpha, v.dtype), (d,))
    beta = np.broadcast_to(np.asarray(beta, v.dtype), (d,))
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if not use_numba:
        return _pool_rows_numpy(v, center_idx, neighbor_idx, alpha, beta)
    m = neighbor_idx.shape[0]
    pooled = np.empty((m, d), v.dtype)
    arg = np.empty((m, d), np.int64)
    winners = np.empty((m, d), np.int64)
    diff = np.empty((m, d), v.dtype)
    _pool_rows_kernel(np.ascontiguousarray(v), np.ascontiguousarray(center_idx, dtype=np.int64),
                      np.ascontiguousarray(neighbor_idx, dtype=np.int64),
                      np.ascontiguousarray(alpha), np.ascontiguousarray(beta),
                      pooled, arg, winners, diff)
    return pooled, arg, winners, diff


# --- tape ops -----------------------------------------------------------------


def graph_pool(v: Variable, center_idx: np.ndarray, neighbor_idx: np.ndarray,
               alpha: Variable, beta: Variable, record: dict | None = None) -> Variable:
    """Pre-kNN pooling straight from embedded rows.

    ``v`` holds every support row (R, D); ``center_idx`` (M,) and
    ``neighbor_idx`` (M, K) index into it. The backward pass scatters into
    ``v`` without materialising a dense (M, K, D) gradient. When ``record``
    is given, the argmax slots are stored under ``"argmax"``.
    """
    vv = v.value
    r, d = vv.shape
    if neighbor_idx.ndim != 2 or neighbor_idx.shape[1] == 0:
        raise ValueError("local graph pooling needs K >= 1 neighbours")
    params = LgpParams(alpha.value, beta.value)
    _check_width(d, params)
    pooled, arg, winner_rows, diff = pool_rows(vv, center_idx, neighbor_idx, params.alpha, params.beta)
    if record is not None:
        record["argmax"] = arg

    def back(g):
        routed = g * params.alpha
        gv = scatter_pool_grad(r, center_idx, winner_rows, routed) if v.requires_grad else None
        ga = (g * diff).sum(axis=0)
        gb = g.sum(axis=0)
        if alpha.size == 1:
            ga = np.atleast_1d(ga.sum())
        if beta.size == 1:
            gb = np.atleast_1d(gb.sum())
        return gv, ga.astype(alpha.value.dtype), gb.astype(beta.value.dtype)

    return Variable(pooled, (v, alpha, beta), back)


def pool_gathered(center: Variable, neighbors: Variable, alpha: Variable, beta: Variable,
                  record: dict | None = None) -> Variable:
    """Pooling over an explicit (M, K, D) neighbour tensor (the Pos-kNN path)."""
    params = LgpParams(alpha.value, beta.value)
    out = lgp_forward(center.value, neighbors.value, params)
    k = neighbors.shape[1]
    if record is not None:
        record["argmax"] = out.argmax_idx

    def back(g):
        dc, dn, da, db = lgp_backward(g, out, params, k=k)
        return dc, dn, da.astype(alpha.value.dtype), db.astype(beta.value.dtype)

    return Variable(out.pooled, (center, neighbors, alpha, beta), back)

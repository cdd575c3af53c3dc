"""Codebooks, vector-quantized encodings and lookup-table construction.

Layout conventions used throughout the package:

* A weight matrix ``W`` is ``M x D`` (output rows by input channels). Its
  length-``v`` vectors are ``W[m, d'*v:(d'+1)*v]``; ``d'`` is the channel slice.
* Activation codebooks come one per channel slice (``D/v`` of them).
* A weight group is ``G`` consecutive vectors along ``M`` inside one channel
  slice, so every group pairs with exactly one activation codebook. Groups are
  numbered slice-major: ``g = d' * groups_per_slice + m // G``. When ``G`` does
  not divide ``M`` the last group of each slice is short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .packing import pack_indices, packed_nbytes

SCHEME_KINDS = ("weight_vq", "activation_vq", "coquant", "scalar_w4a8", "fp16")


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class SchemeConfig:
    kind: str
    G: int = 512
    v: int = 2
    c_w: int = 16
    c_a: int = 64
    table_bits: int = 8

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        for name in ("G", "v", "c_w", "c_a"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not _is_pow2(self.c_w) or not _is_pow2(self.c_a):
            raise ValueError("c_w and c_a must be powers of two")
        if self.table_bits not in (8, 4):
            raise ValueError("table_bits must be 8 or 4")

    @property
    def uses_weight_vq(self) -> bool:
        return self.kind in ("weight_vq", "coquant")

    @property
    def uses_activation_vq(self) -> bool:
        return self.kind in ("activation_vq", "coquant")

    @property
    def index_bits(self) -> int:
        """Stored width of one weight index (log2(c_w) rounded up to a packable width)."""
        bits = max(1, math.ceil(math.log2(self.c_w)))
        for width in (1, 2, 4, 8):
            if bits <= width:
                return width
        raise ValueError("c_w > 256 is not packable")

    def validate_shape(self, M: int, D: int) -> None:
        if M < 1 or D < 1:
            raise ValueError(f"layer shape must be positive, got {M}x{D}")
        if D % self.v:
            raise ValueError(f"v={self.v} does not divide D={D}")
        if self.uses_weight_vq and (M * (D // self.v)) % self.G:
            raise ValueError(f"G={self.G} does not divide M*D/v={M * D // self.v}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "G": self.G, "v": self.v, "c_w": self.c_w,
                "c_a": self.c_a, "table_bits": self.table_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        return cls(**{k: d[k] for k in ("kind", "G", "v", "c_w", "c_a", "table_bits") if k in d})


# G=512, v=2, c_w=16, c_a=64 with INT8 tables (the deployed Qwen-3 scheme).
QWEN_SCHEME = SchemeConfig("coquant", G=512, v=2, c_w=16, c_a=64, table_bits=8)


@dataclass
class Codebook:
    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError(f"centroids must be a non-empty c x v matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite value in centroids")
        self.centroids = c

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def vector_len(self) -> int:
        return self.centroids.shape[1]


# --------------------------------------------------------------------------
# k-means

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list = field(default_factory=list)
    iterations: int = 0


def _sq_sum(diff_of) -> np.ndarray:
    """Sum of squared coordinate differences, accumulated in coordinate order."""
    out = None
    for diff in diff_of:
        out = diff * diff if out is None else out + diff * diff
    return out


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return _sq_sum(x[:, None, d] - c[None, :, d] for d in range(x.shape[-1]))


def _unique_rows(x: np.ndarray) -> np.ndarray:
    """Distinct rows in first-seen order (-0.0 and 0.0 count as equal)."""
    norm = np.ascontiguousarray(x + x.dtype.type(0))
    keys = norm.view(np.dtype((np.void, norm.dtype.itemsize * norm.shape[1]))).ravel()
    _, first = np.unique(keys, return_index=True)
    return x[np.sort(first)]


def _pp_draws(rng: np.random.Generator, n: int, c: int) -> tuple:
    """The random draws of one k-means++ seeding, in the order they are consumed."""
    return int(rng.integers(n)), rng.random(c - 1)


def _plusplus_batch(x: np.ndarray, first: np.ndarray, us: np.ndarray) -> np.ndarray:
    """k-means++ on ``(B, n, v)`` with pre-drawn first index and uniforms per group."""
    B, n, _ = x.shape
    c = us.shape[1] + 1
    rows = np.arange(B)
    centers = [x[rows, first]]
    v = x.shape[2]
    closest = _sq_sum(x[:, :, d] - centers[0][:, None, d] for d in range(v))
    for k in range(1, c):
        cum = np.cumsum(closest, axis=1)
        total = cum[:, -1]
        if np.any(total <= 0):
            raise ValueError("fewer distinct vectors than centroids")
        # first index whose running mass exceeds u * total (points with zero mass are never picked)
        pick = np.minimum((cum <= (us[:, k - 1] * total)[:, None]).sum(axis=1), n - 1)
        chosen = x[rows, pick]
        centers.append(chosen)
        closest = np.minimum(closest, _sq_sum(x[:, :, d] - chosen[:, None, d] for d in range(v)))
    return np.stack(centers, axis=1).astype(np.float64)


def kmeans_plusplus_init(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding. Requires at least ``c`` distinct rows in ``x``."""
    x = np.asarray(x, dtype=np.float64)
    first, us = _pp_draws(rng, x.shape[0], c)
    return _plusplus_batch(x[None], np.array([first]), us[None])[0]


def _lloyd_batch(x: np.ndarray, init: np.ndarray, max_iters: int) -> list:
    """Lloyd on ``B`` independent problems of equal size; each stops on its own."""
    x = np.asarray(x, dtype=np.float64)
    B, n, v = x.shape
    centers = np.array(init, dtype=np.float64, copy=True)
    k = centers.shape[1]
    labels = np.full((B, n), -1, dtype=np.int64)
    history = [[] for _ in range(B)]
    iters = np.zeros(B, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for it in range(1, max_iters + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        xa = x[act]
        ca = centers[act]
        d2 = _sq_sum(xa[:, :, None, d] - ca[:, None, :, d] for d in range(v))
        new = d2.argmin(axis=2)
        cost = np.take_along_axis(d2, new[:, :, None], axis=2)[:, :, 0]
        totals = cost.sum(axis=1)
        iters[act] = it
        same = np.all(new == labels[act], axis=1)
        for j, b in enumerate(act):
            history[b].append(float(totals[j]))
        done[act[same]] = True
        upd = ~same
        if not upd.any():
            break
        act, xa, new, cost = act[upd], xa[upd], new[upd], cost[upd]
        labels[act] = new
        flat = (np.arange(act.size)[:, None] * k + new).ravel()
        counts = np.bincount(flat, minlength=act.size * k).reshape(act.size, k)
        sums = np.stack([np.bincount(flat, weights=xa[:, :, d].ravel(), minlength=act.size * k)
                         for d in range(v)], axis=1).reshape(act.size, k, v)
        cen = centers[act]
        nonempty = counts > 0
        cen[nonempty] = sums[nonempty] / counts[nonempty][:, None]
        for j, i in zip(*np.nonzero(~nonempty)):
            far = int(cost[j].argmax())
            cen[j, i] = xa[j, far]
            cost[j, far] = 0.0
        centers[act] = cen
    out = []
    for b in range(B):
        final = _sq_dists(x[b], centers[b]).argmin(axis=1)
        out.append(KMeansResult(centers[b], final, history[b], int(iters[b])))
    return out


def lloyd(x: np.ndarray, init: np.ndarray, max_iters: int = 100) -> KMeansResult:
    """Plain Lloyd iterations under the squared-Euclidean objective.

    Empty clusters are re-seeded from the point farthest from its centroid.
    ``objective_history[t]`` is the objective after the t-th assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    return _lloyd_batch(x[None], np.asarray(init, dtype=np.float64)[None], max_iters)[0]


def _check_vectors(x: np.ndarray, c: int) -> None:
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("no vectors")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in input vectors")
    if c < 1:
        raise ValueError("c must be >= 1")


def _exact_codebook(x32: np.ndarray, uniq: np.ndarray, c: int) -> KMeansResult:
    # every distinct vector becomes a centroid, bit-exact; pad by cycling
    reps = np.concatenate([uniq, uniq[np.arange(c - uniq.shape[0]) % uniq.shape[0]]])
    return KMeansResult(reps.astype(np.float64), _sq_dists(x32, reps).argmin(axis=1), [0.0], 0)


def kmeans(vectors, c: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    return kmeans_many([vectors], c, [seed], max_iters)[0]


def kmeans_many(problems, c: int, seeds, max_iters: int = 100) -> list:
    """Independent k-means runs; equal-sized problems are iterated together.

    Result ``i`` is identical to running problem ``i`` on its own with ``seeds[i]``.
    """
    results = [None] * len(problems)
    pending = {}
    for i, (vec, seed) in enumerate(zip(problems, seeds)):
        x = np.asarray(vec)
        _check_vectors(x, c)
        x32 = x.astype(np.float32)
        uniq = _unique_rows(x32)
        if uniq.shape[0] <= c:
            results[i] = _exact_codebook(x32, uniq, c)
            continue
        first, us = _pp_draws(np.random.default_rng(seed), x32.shape[0], c)
        pending.setdefault(x32.shape, []).append((i, x32, first, us))
    for items in pending.values():
        xs = np.stack([it[1] for it in items]).astype(np.float64)
        init = _plusplus_batch(xs, np.array([it[2] for it in items]), np.stack([it[3] for it in items]))
        for (i, *_), res in zip(items, _lloyd_batch(xs, init, max_iters)):
            results[i] = res
    return results


def train_codebook(vectors, c: int, max_iters: int = 100, seed: int = 0) -> Codebook:
    return Codebook(kmeans(vectors, c, max_iters=max_iters, seed=seed).centroids.astype(np.float32))


# --------------------------------------------------------------------------
# nearest-centroid search (Chebyshev metric, ties to the smallest index)

def chebyshev_distances(vecs: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.abs(vecs[:, None, :] - centroids[None, :, :]).max(axis=2)


def nearest_centroids(vecs, centroids) -> np.ndarray:
    vecs = np.asarray(vecs, dtype=np.float32)
    centroids = np.asarray(centroids, dtype=np.float32)
    if vecs.ndim != 2 or vecs.shape[1] != centroids.shape[1]:
        raise ValueError(f"vector length {vecs.shape[-1]} does not match codebook vector_len {centroids.shape[1]}")
    return chebyshev_distances(vecs, centroids).argmin(axis=1)


def nearest_centroid(vec, codebook: Codebook) -> int:
    vec = np.asarray(vec, dtype=np.float32).ravel()
    if vec.shape[0] != codebook.vector_len:
        raise ValueError(f"vector length {vec.shape[0]} does not match codebook vector_len {codebook.vector_len}")
    return int(nearest_centroids(vec[None, :], codebook.centroids)[0])


# --------------------------------------------------------------------------
# weight quantization

@dataclass(frozen=True)
class GroupLayout:
    M: int
    D: int
    v: int
    G: int

    @property
    def n_slices(self) -> int:
        return self.D // self.v

    @property
    def groups_per_slice(self) -> int:
        return -(-self.M // self.G)

    @property
    def num_groups(self) -> int:
        return self.groups_per_slice * self.n_slices

    def slice_of(self, g: int) -> int:
        return g // self.groups_per_slice

    def rows_of(self, g: int) -> range:
        k = g % self.groups_per_slice
        return range(k * self.G, min((k + 1) * self.G, self.M))

    def group_ids(self) -> np.ndarray:
        """``(M, D/v)`` array of the group each weight vector belongs to."""
        m = np.arange(self.M)[:, None]
        s = np.arange(self.n_slices)[None, :]
        return s * self.groups_per_slice + m // self.G


@dataclass
class WeightIndexTable:
    indices: np.ndarray  # (M, D/v) ints
    c_w: int
    group_size: int
    bit_width: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("indices must be M x D/v")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.c_w):
            raise ValueError("weight index out of range for c_w")

    @property
    def shape(self) -> tuple:
        return self.indices.shape

    def packed(self) -> bytes:
        return pack_indices(self.indices.ravel(), self.bit_width)

    @property
    def nbytes(self) -> int:
        return packed_nbytes(self.indices.size, self.bit_width)


def weight_vectors(W: np.ndarray, v: int) -> np.ndarray:
    """View ``W`` as ``(M, D/v, v)``."""
    M, D = W.shape
    return W.reshape(M, D // v, v)


def quantize_weights(W, cfg: SchemeConfig, seed: int = 0, max_iters: int = 100):
    """Per-group k-means weight codebooks plus the Chebyshev-assigned index table."""
    if not cfg.uses_weight_vq:
        raise ValueError(f"scheme {cfg.kind} does not quantize weights")
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ValueError("W must be a matrix")
    M, D = W.shape
    cfg.validate_shape(M, D)
    layout = GroupLayout(M, D, cfg.v, cfg.G)
    vecs = weight_vectors(W, cfg.v)
    indices = np.zeros((M, layout.n_slices), dtype=np.int64)
    groups = []
    for g in range(layout.num_groups):
        rows = layout.rows_of(g)
        groups.append(vecs[rows.start:rows.stop, layout.slice_of(g), :])
    fits = kmeans_many(groups, cfg.c_w, [seed + g for g in range(layout.num_groups)], max_iters)
    codebooks = []
    for g, (group, fit) in enumerate(zip(groups, fits)):
        cb = Codebook(fit.centroids.astype(np.float32))
        rows = layout.rows_of(g)
        indices[rows.start:rows.stop, layout.slice_of(g)] = nearest_centroids(group, cb.centroids)
        codebooks.append(cb)
    return codebooks, WeightIndexTable(indices, cfg.c_w, cfg.G, cfg.index_bits)


def reconstruct_weights(weight_codebooks: Sequence[Codebook], table: WeightIndexTable, v: int) -> np.ndarray:
    M, S = table.shape
    layout = GroupLayout(M, S * v, v, table.group_size)
    if len(weight_codebooks) != layout.num_groups:
        raise ValueError("weight codebook count does not match the group layout")
    cents = np.stack([cb.centroids for cb in weight_codebooks])  # (groups, c_w, v)
    out = cents[layout.group_ids(), table.indices]  # (M, S, v)
    return out.reshape(M, S * v)


# --------------------------------------------------------------------------
# lookup tables

def _dot_last(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """fp32 dot product over the last axis, summed in ascending element order."""
    acc = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        acc = acc + a[..., k] * b[..., k]
    return acc


@dataclass
class Lut1D:
    """``(M, D/v, c_a)`` tables: weight vector (m, d') against every centroid of slice d'."""

    entries: np.ndarray
    scale: float | None = None
    zero_point: float | None = None
    table_bits: int = 8

    @property
    def quantized(self) -> bool:
        return self.entries.dtype == np.uint8

    @property
    def deployed_nbytes(self) -> int:
        return self.entries.size * self.table_bits // 8

    def dequantized(self) -> np.ndarray:
        if not self.quantized:
            return self.entries
        return dequantize_table(self.entries, self.scale, self.zero_point)

    def to_int8(self) -> "Lut1D":
        q, s, z = quantize_table_int8(self.entries)
        return Lut1D(q, s, z, self.table_bits)


@dataclass
class Lut2D:
    """``(num_groups, c_a, c_w)`` tables: every activation centroid against every weight centroid."""

    entries: np.ndarray
    scale: float | None = None
    zero_point: float | None = None
    table_bits: int = 8

    @property
    def num_groups(self) -> int:
        return self.entries.shape[0]

    @property
    def quantized(self) -> bool:
        return self.entries.dtype == np.uint8

    @property
    def deployed_nbytes(self) -> int:
        return self.entries.size * self.table_bits // 8

    def dequantized(self) -> np.ndarray:
        if not self.quantized:
            return self.entries
        return dequantize_table(self.entries, self.scale, self.zero_point)

    def to_int8(self) -> "Lut2D":
        q, s, z = quantize_table_int8(self.entries)
        return Lut2D(q, s, z, self.table_bits)


def build_lut1d(W, act_codebooks: Sequence[Codebook]) -> Lut1D:
    W = np.asarray(W, dtype=np.float32)
    M, D = W.shape
    if not act_codebooks:
        raise ValueError("no activation codebooks")
    v = act_codebooks[0].vector_len
    if D % v or len(act_codebooks) != D // v:
        raise ValueError(f"need D/v={D // v if D % v == 0 else '?'} codebooks of length {v}, got {len(act_codebooks)}")
    if any(cb.vector_len != v for cb in act_codebooks) or len({cb.size for cb in act_codebooks}) != 1:
        raise ValueError("activation codebooks must share vector_len and size")
    cents = np.stack([cb.centroids for cb in act_codebooks])  # (S, c_a, v)
    wv = weight_vectors(W, v)  # (M, S, v)
    return Lut1D(_dot_last(wv[:, :, None, :], cents[None, :, :, :]).astype(np.float32))


def build_lut2d(weight_codebooks: Sequence[Codebook], act_codebooks: Sequence[Codebook], layout: GroupLayout) -> Lut2D:
    if len(act_codebooks) != layout.n_slices or len(weight_codebooks) != layout.num_groups:
        raise ValueError(
            "group/slice misalignment: expected "
            f"{layout.num_groups} weight codebooks over {layout.n_slices} slices, got "
            f"{len(weight_codebooks)} and {len(act_codebooks)}"
        )
    if any(cb.vector_len != layout.v for cb in list(weight_codebooks) + list(act_codebooks)):
        raise ValueError("group/slice misalignment: codebook vector_len differs from v")
    acts = np.stack([act_codebooks[layout.slice_of(g)].centroids for g in range(layout.num_groups)])
    wts = np.stack([cb.centroids for cb in weight_codebooks])
    # (groups, c_a, 1, v) . (groups, 1, c_w, v)
    return Lut2D(_dot_last(acts[:, :, None, :], wts[:, None, :, :]).astype(np.float32))


def quantize_table_int8(T):
    """Per-tensor affine quantization to uint8: ``q = clamp(round(T/s + z), 0, 255)``."""
    T = np.asarray(T)
    if T.size == 0:
        raise ValueError("empty table")
    if not np.all(np.isfinite(T)):
        raise ValueError("non-finite value in table")
    t = T.astype(np.float64)
    lo, hi = float(t.min()), float(t.max())
    s = (hi - lo) / 255.0 if hi > lo else 1.0
    z = -lo / s
    q = np.clip(np.rint(t / s + z), 0, 255).astype(np.uint8)
    return q, s, z


def dequantize_table(q, s: float, z: float) -> np.ndarray:
    return (s * (np.asarray(q, dtype=np.float64) - z)).astype(np.float32)

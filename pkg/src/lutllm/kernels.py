"""Matrix-multiplication paths: dense oracle, weight-VQ, activation-VQ and co-quantized 2D lookups.

All paths compute ``Y = X @ W.T`` for ``X`` of shape ``(L, D)`` and a layer
of shape ``(M, D)``. Table paths accumulate uint8 entries in int32 and
dequantize once per output element as ``s * (acc - n*z)``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .vq import (
    Codebook,
    GroupLayout,
    Lut1D,
    Lut2D,
    SchemeConfig,
    WeightIndexTable,
    build_lut1d,
    build_lut2d,
    nearest_centroids,
    quantize_weights,
    reconstruct_weights,
    kmeans_many,
)

MAX_INT32_TERMS = 2 ** 23


def kernel_threads() -> int:
    try:
        return max(1, int(os.environ.get("LUTLLM_THREADS", "1")))
    except ValueError:
        return 1


def _row_parallel(fn, X: np.ndarray) -> np.ndarray:
    # rows are independent, so chunking cannot change any result
    threads = min(kernel_threads(), X.shape[0])
    if threads <= 1:
        return fn(X)
    chunks = np.array_split(np.arange(X.shape[0]), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda rows: fn(X[rows]), chunks))
    return np.concatenate(parts, axis=0)


def _as_2d(X, D: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != D:
        raise ValueError(f"expected activations of shape (L, {D}), got {X.shape}")
    return X


def dense_matmul(X, W, block: int = 1) -> np.ndarray:
    """fp32 ``X @ W.T`` with a fixed reduction order.

    The reduction runs over ``d`` in ascending order. With ``block > 1`` each
    run of ``block`` consecutive products is summed first (ascending), and the
    block sums are then accumulated in ascending order; ``block=v`` matches the
    order in which table paths add pre-computed length-v dot products.
    """
    X = np.asarray(X, dtype=np.float32)
    W = np.asarray(W, dtype=np.float32)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"shape mismatch: X {X.shape} vs W {W.shape}")
    L, D = X.shape
    M = W.shape[0]
    if D % block:
        raise ValueError(f"block={block} does not divide D={D}")
    Y = np.zeros((L, M), dtype=np.float32)
    for d0 in range(0, D, block):
        part = X[:, d0, None] * W[None, :, d0]
        for d in range(d0 + 1, d0 + block):
            part = part + X[:, d, None] * W[None, :, d]
        Y = Y + part
    return Y


def dequantize_acc(acc, n: int, s: float, z: float) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return (s * (np.asarray(acc, dtype=np.float64) - n * z)).astype(np.float32)


@dataclass
class QuantizedLinear:
    scheme: SchemeConfig
    shape: tuple
    weight_indices: WeightIndexTable | None = None
    weight_codebooks: list = field(default_factory=list)
    act_codebooks: list = field(default_factory=list)
    lut1d: Lut1D | None = None
    lut2d: Lut2D | None = None
    dense: np.ndarray | None = None  # fp16 pass-through

    def __post_init__(self):
        M, D = self.shape
        kind = self.scheme.kind
        self.scheme.validate_shape(M, D)
        need = {
            "weight_vq": ("weight_indices", "weight_codebooks"),
            "activation_vq": ("act_codebooks", "lut1d"),
            "coquant": ("weight_indices", "weight_codebooks", "act_codebooks", "lut2d"),
            "fp16": ("dense",),
            "scalar_w4a8": (),
        }[kind]
        present = {
            "weight_indices": self.weight_indices is not None,
            "weight_codebooks": bool(self.weight_codebooks),
            "act_codebooks": bool(self.act_codebooks),
            "lut1d": self.lut1d is not None,
            "lut2d": self.lut2d is not None,
            "dense": self.dense is not None,
        }
        for name, has in present.items():
            if has != (name in need):
                state = "missing" if not has else "unexpected"
                raise ValueError(f"{state} field {name!r} for scheme {kind}")
        if kind == "scalar_w4a8":
            raise ValueError("scalar_w4a8 is modeled analytically only and has no kernel")
        v = self.scheme.v
        if self.weight_indices is not None:
            layout = self.layout
            if self.weight_indices.shape != (M, D // v):
                raise ValueError("weight index table shape does not match layer")
            if len(self.weight_codebooks) != layout.num_groups:
                raise ValueError("weight codebook count does not match the group layout")
            if any(cb.size != self.scheme.c_w for cb in self.weight_codebooks):
                raise ValueError("weight codebook size differs from c_w")
        if self.act_codebooks:
            if len(self.act_codebooks) != D // v:
                raise ValueError("need one activation codebook per channel slice")
            if any(cb.size != self.scheme.c_a or cb.vector_len != v for cb in self.act_codebooks):
                raise ValueError("activation codebook shape differs from (c_a, v)")
        if self.lut1d is not None and self.lut1d.entries.shape != (M, D // v, self.scheme.c_a):
            raise ValueError("1D table shape mismatch")
        if self.lut2d is not None and self.lut2d.entries.shape != (self.layout.num_groups, self.scheme.c_a, self.scheme.c_w):
            raise ValueError("2D table shape mismatch")

    @property
    def layout(self) -> GroupLayout:
        M, D = self.shape
        return GroupLayout(M, D, self.scheme.v, self.scheme.G)

    @property
    def n_terms(self) -> int:
        return self.shape[1] // self.scheme.v

    def act_centroids(self) -> np.ndarray:
        return np.stack([cb.centroids for cb in self.act_codebooks])

    def size_breakdown(self) -> dict:
        """Deployed bytes: fp32 codebooks, packed indices, tables (at table_bits)."""
        cb = 4 * sum(c.centroids.size for c in self.weight_codebooks + self.act_codebooks)
        idx = self.weight_indices.nbytes if self.weight_indices is not None else 0
        tables = 0
        if self.lut1d is not None:
            tables = self.lut1d.deployed_nbytes
        if self.lut2d is not None:
            tables = self.lut2d.deployed_nbytes
        dense = self.dense.nbytes if self.dense is not None else 0
        return {"codebooks": cb, "indices": idx, "tables": tables, "dense": dense,
                "total": cb + idx + tables + dense}


def reconstruct(q: QuantizedLinear) -> np.ndarray:
    if q.weight_indices is None or not q.weight_codebooks:
        raise ValueError("reconstruct needs weight codebooks and indices")
    return reconstruct_weights(q.weight_codebooks, q.weight_indices, q.scheme.v)


def activation_indices(X, act_codebooks: Sequence[Codebook]) -> np.ndarray:
    """``(L, D/v)`` nearest-centroid index of every activation vector."""
    v = act_codebooks[0].vector_len
    S = len(act_codebooks)
    X = _as_2d(X, v * S).astype(np.float32).reshape(-1, S, v)
    cents = np.stack([cb.centroids for cb in act_codebooks]).astype(np.float32)  # (S, c, v)
    out = np.empty(X.shape[:2], dtype=np.int64)
    step = max(1, (1 << 22) // max(1, S * cents.shape[1] * v))
    for r in range(0, X.shape[0], step):
        dist = np.abs(X[r:r + step, :, None, :] - cents[None]).max(axis=3)
        out[r:r + step] = dist.argmin(axis=2)
    return out


def snap(X, act_codebooks: Sequence[Codebook]) -> np.ndarray:
    """Replace every activation vector by its nearest centroid."""
    idx = activation_indices(X, act_codebooks)
    cents = np.stack([cb.centroids for cb in act_codebooks])
    return cents[np.arange(len(act_codebooks))[None, :], idx].reshape(idx.shape[0], -1)


def _check_kind(q: QuantizedLinear, kind: str) -> None:
    if q.scheme.kind != kind:
        raise ValueError(f"scheme mismatch: kernel expects {kind}, layer is {q.scheme.kind}")


def matmul_weight_vq(X, q: QuantizedLinear, block: int = 1) -> np.ndarray:
    _check_kind(q, "weight_vq")
    return dense_matmul(_as_2d(X, q.shape[1]), reconstruct(q), block=block)


def _accumulate(gathered: np.ndarray) -> np.ndarray:
    # gathered: (L, M, n) table entries in slice order
    if gathered.dtype == np.uint8:
        if gathered.shape[2] > MAX_INT32_TERMS:
            raise OverflowError("too many terms for an int32 accumulator")
        return gathered.sum(axis=2, dtype=np.int32)
    acc = np.zeros(gathered.shape[:2], dtype=np.float32)
    for s in range(gathered.shape[2]):
        acc = acc + gathered[:, :, s]
    return acc


def activation_vq_accumulators(X, q: QuantizedLinear) -> np.ndarray:
    _check_kind(q, "activation_vq")
    M, D = q.shape
    X = _as_2d(X, D)
    entries = q.lut1d.entries  # (M, S, c_a)
    S = entries.shape[1]

    def run(rows):
        idx = activation_indices(rows, q.act_codebooks)  # (L, S)
        g = entries[np.arange(M)[None, :, None], np.arange(S)[None, None, :], idx[:, None, :]]
        return _accumulate(g)

    return _row_parallel(run, X)


def matmul_activation_vq(X, q: QuantizedLinear) -> np.ndarray:
    acc = activation_vq_accumulators(X, q)
    if q.lut1d.quantized:
        return dequantize_acc(acc, q.n_terms, q.lut1d.scale, q.lut1d.zero_point)
    return acc


def coquant_accumulators(X, q: QuantizedLinear) -> np.ndarray:
    """Per-output accumulators before dequantization (int32 for uint8 tables)."""
    _check_kind(q, "coquant")
    M, D = q.shape
    X = _as_2d(X, D)
    entries = q.lut2d.entries  # (groups, c_a, c_w)
    groups = q.layout.group_ids()  # (M, S)
    widx = q.weight_indices.indices  # (M, S)

    def run(rows):
        aidx = activation_indices(rows, q.act_codebooks)  # (L, S)
        # row extraction by activation index, then per-output selection by weight index
        g = entries[groups[None, :, :], aidx[:, None, :], widx[None, :, :]]
        return _accumulate(g)

    return _row_parallel(run, X)


def matmul_coquant(X, q: QuantizedLinear) -> np.ndarray:
    acc = coquant_accumulators(X, q)
    if q.lut2d.quantized:
        return dequantize_acc(acc, q.n_terms, q.lut2d.scale, q.lut2d.zero_point)
    return acc


def matmul(X, q: QuantizedLinear, block: int = 1) -> np.ndarray:
    kind = q.scheme.kind
    if kind == "coquant":
        return matmul_coquant(X, q)
    if kind == "activation_vq":
        return matmul_activation_vq(X, q)
    if kind == "weight_vq":
        return matmul_weight_vq(X, q, block=block)
    if kind == "fp16":
        return dense_matmul(X, q.dense.astype(np.float32), block=block)
    raise ValueError(f"no kernel for scheme {kind}")


def train_act_codebooks(samples, scheme: SchemeConfig, seed: int = 0, max_iters: int = 100) -> list:
    """One codebook per channel slice; slice ``s`` is trained with ``seed + s``."""
    samples = np.asarray(samples, dtype=np.float32)
    v = scheme.v
    n = samples.shape[1] // v
    fits = kmeans_many([samples[:, s * v:(s + 1) * v] for s in range(n)], scheme.c_a,
                       [seed + s for s in range(n)], max_iters)
    return [Codebook(f.centroids.astype(np.float32)) for f in fits]


def quantize_linear(W, scheme: SchemeConfig, act_samples=None, seed: int = 0,
                    int8_tables: bool = True, max_iters: int = 100) -> QuantizedLinear:
    """Offline stage: codebooks, indices and (optionally INT8) lookup tables for one layer."""
    W = np.asarray(W, dtype=np.float32)
    M, D = W.shape
    scheme.validate_shape(M, D)
    kind = scheme.kind
    if kind == "fp16":
        return QuantizedLinear(scheme, (M, D), dense=W.astype(np.float16))
    kw = {}
    if scheme.uses_weight_vq:
        cbs, table = quantize_weights(W, scheme, seed=seed, max_iters=max_iters)
        kw.update(weight_codebooks=cbs, weight_indices=table)
    if scheme.uses_activation_vq:
        if act_samples is None:
            raise ValueError("activation samples are required to train activation codebooks")
        acts = train_act_codebooks(act_samples, scheme, seed=seed, max_iters=max_iters)
        kw["act_codebooks"] = acts
        if kind == "activation_vq":
            lut = build_lut1d(W, acts)
            kw["lut1d"] = lut.to_int8() if int8_tables else lut
        else:
            lut = build_lut2d(kw["weight_codebooks"], acts, GroupLayout(M, D, scheme.v, scheme.G))
            kw["lut2d"] = lut.to_int8() if int8_tables else lut
    return QuantizedLinear(scheme, (M, D), **kw)

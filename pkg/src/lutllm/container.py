"""The ``LUTLLM01`` artifact container.

Layout: 8 magic bytes, a little-endian u64 manifest length, the UTF-8 JSON
manifest, then tensor payloads. Every manifest tensor entry records name,
dtype, shape, byte offset (relative to the payload start) and size, plus
``scale``/``zero_point`` for INT8 tables. Packed index tensors carry dtype
``"packed"`` and their ``bit_width``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .kernels import QuantizedLinear
from .model import LayerWeights, TransformerWeights
from .packing import pack_indices, packed_nbytes, unpack_indices
from .perf import ModelConfig
from .vq import Codebook, Lut1D, Lut2D, SchemeConfig, WeightIndexTable

MAGIC = b"LUTLLM01"
FORMAT_VERSION = 1
LINEAR_PARTS = ("weight", "dense", "weight_codebooks", "weight_indices", "act_codebooks", "lut1d", "lut2d")
_DTYPES = {"float32": "<f4", "float16": "<f2", "uint8": "u1", "int64": "<i8"}


class ContainerError(ValueError):
    pass


class Tensor:
    """One payload: a numpy array, or packed indices when ``bit_width`` is set."""

    def __init__(self, array, bit_width: int | None = None, scale=None, zero_point=None):
        self.array = np.asarray(array)
        self.bit_width = bit_width
        self.scale = scale
        self.zero_point = zero_point

    def encode(self) -> tuple:
        if self.bit_width is not None:
            return "packed", pack_indices(self.array.ravel(), self.bit_width)
        name = str(self.array.dtype)
        if name not in _DTYPES:
            raise ContainerError(f"unsupported tensor dtype {name}")
        return name, np.ascontiguousarray(self.array, dtype=_DTYPES[name]).tobytes()


def write_container(path, tensors: dict, meta: dict) -> int:
    """Write ``tensors`` (name -> :class:`Tensor` or array) and ``meta``; returns bytes written."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t if isinstance(t, Tensor) else Tensor(t)
        dtype, raw = t.encode()
        entry = {"name": name, "dtype": dtype, "shape": list(t.array.shape), "offset": offset, "nbytes": len(raw)}
        if t.bit_width is not None:
            entry["bit_width"] = t.bit_width
        if t.scale is not None:
            entry["scale"] = float(t.scale)
            entry["zero_point"] = float(t.zero_point)
        entries.append(entry)
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": FORMAT_VERSION, **meta, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)
    return len(MAGIC) + 8 + len(manifest) + offset


def read_container(path) -> tuple:
    """Return ``(manifest, tensors)`` where tensors maps name -> :class:`Tensor`."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError("not a LUTLLM01 container (bad magic)")
    if len(data) < 16:
        raise ContainerError("truncated container header")
    (mlen,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt manifest: {e}") from None
    base = 16 + mlen
    tensors = {}
    for e in manifest.get("tensors", []):
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"truncated payload for {e['name']}")
        shape = tuple(e["shape"])
        if e["dtype"] == "packed":
            count = int(np.prod(shape, dtype=np.int64))
            if e["nbytes"] != packed_nbytes(count, e["bit_width"]):
                raise ContainerError(f"packed size mismatch for {e['name']}")
            arr = unpack_indices(raw, e["bit_width"], count).reshape(shape)
            tensors[e["name"]] = Tensor(arr, e["bit_width"])
        else:
            if e["dtype"] not in _DTYPES:
                raise ContainerError(f"unsupported tensor dtype {e['dtype']}")
            arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(shape).astype(e["dtype"])
            tensors[e["name"]] = Tensor(arr, None, e.get("scale"), e.get("zero_point"))
    return manifest, tensors


# --------------------------------------------------------------------------
# linear layers

def linear_tensors(prefix: str, lin) -> dict:
    """Payload tensors of one dense matrix or :class:`QuantizedLinear`."""
    if not isinstance(lin, QuantizedLinear):
        return {f"{prefix}.weight": Tensor(np.asarray(lin, dtype=np.float32))}
    out = {}
    if lin.dense is not None:
        out[f"{prefix}.dense"] = Tensor(lin.dense)
    if lin.weight_codebooks:
        out[f"{prefix}.weight_codebooks"] = Tensor(np.stack([c.centroids for c in lin.weight_codebooks]))
        out[f"{prefix}.weight_indices"] = Tensor(lin.weight_indices.indices, lin.weight_indices.bit_width)
    if lin.act_codebooks:
        out[f"{prefix}.act_codebooks"] = Tensor(lin.act_centroids())
    for key, lut in (("lut1d", lin.lut1d), ("lut2d", lin.lut2d)):
        if lut is not None:
            out[f"{prefix}.{key}"] = Tensor(lut.entries, None, lut.scale, lut.zero_point)
    return out


def linear_from_tensors(prefix: str, scheme: SchemeConfig | None, shape, tensors: dict):
    if f"{prefix}.weight" in tensors:
        return tensors[f"{prefix}.weight"].array.astype(np.float32)
    if scheme is None:
        raise ContainerError(f"{prefix}: quantized payload without a scheme")
    M, D = shape
    kw = {}
    if f"{prefix}.dense" in tensors:
        kw["dense"] = tensors[f"{prefix}.dense"].array
    if f"{prefix}.weight_codebooks" in tensors:
        kw["weight_codebooks"] = [Codebook(c) for c in tensors[f"{prefix}.weight_codebooks"].array]
        idx = tensors[f"{prefix}.weight_indices"]
        kw["weight_indices"] = WeightIndexTable(idx.array, scheme.c_w, scheme.G, idx.bit_width)
    if f"{prefix}.act_codebooks" in tensors:
        kw["act_codebooks"] = [Codebook(c) for c in tensors[f"{prefix}.act_codebooks"].array]
    for key, cls in (("lut1d", Lut1D), ("lut2d", Lut2D)):
        t = tensors.get(f"{prefix}.{key}")
        if t is not None:
            kw[key] = cls(t.array, t.scale, t.zero_point, scheme.table_bits)
    try:
        return QuantizedLinear(scheme, (M, D), **kw)
    except ValueError as e:
        raise ContainerError(f"artifact/scheme mismatch in {prefix}: {e}") from None


def save_linears(path, linears: dict, scheme: SchemeConfig | None = None) -> int:
    """Bare layers (name -> dense matrix or QuantizedLinear), as consumed and produced by ``quantize``."""
    tensors, shapes = {}, {}
    for name, lin in linears.items():
        tensors.update(linear_tensors(name, lin))
        shapes[name] = list(lin.shape)
    meta = {"kind": "linears", "scheme": scheme.to_dict() if scheme else None, "linears": shapes}
    return write_container(path, tensors, meta)


def load_linears(path) -> tuple:
    """Return ``(linears, scheme, extra_tensors)``."""
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "linears":
        raise ContainerError(f"expected a linears container, found {manifest.get('kind')!r}")
    scheme = SchemeConfig.from_dict(manifest["scheme"]) if manifest.get("scheme") else None
    lins = {name: linear_from_tensors(name, scheme, shape, tensors) for name, shape in manifest["linears"].items()}
    used = {f"{n}.{part}" for n in lins for part in LINEAR_PARTS}
    return lins, scheme, {k: t.array for k, t in tensors.items() if k not in used}


# --------------------------------------------------------------------------
# whole models

def save_model(path, model: TransformerWeights) -> int:
    cfg = model.config
    tensors = {"embed": Tensor(model.embed), "head": Tensor(model.head), "final_norm": Tensor(model.final_norm)}
    for i, layer in enumerate(model.layers):
        tensors[f"l{i}.attn_norm"] = Tensor(layer.attn_norm)
        tensors[f"l{i}.ffn_norm"] = Tensor(layer.ffn_norm)
        for name, lin in layer.linears.items():
            tensors.update(linear_tensors(f"l{i}.{name}", lin))
    meta = {"kind": "model", "model": cfg.to_dict(), "dense_block": model.dense_block,
            "scheme": model.scheme.to_dict() if model.scheme else None}
    return write_container(path, tensors, meta)


def load_model(path) -> TransformerWeights:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "model":
        raise ContainerError(f"expected a model container, found {manifest.get('kind')!r}")
    cfg = ModelConfig.from_dict(manifest["model"])
    scheme = SchemeConfig.from_dict(manifest["scheme"]) if manifest.get("scheme") else None
    layers = []
    for i in range(cfg.depth):
        lins = {name: linear_from_tensors(f"l{i}.{name}", scheme, (M, D), tensors)
                for name, M, D in cfg.projections}
        layers.append(LayerWeights(lins, tensors[f"l{i}.attn_norm"].array, tensors[f"l{i}.ffn_norm"].array))
    return TransformerWeights(cfg, tensors["embed"].array, layers, tensors["final_norm"].array,
                              tensors["head"].array, manifest.get("dense_block", 1), scheme)


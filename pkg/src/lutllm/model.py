"""Desk-scale GQA transformer whose linear layers run through the LUT kernels.

Attention, softmax, norms, embeddings and the output head always stay fp32;
only the seven projections of each block are swappable between a dense fp32
matrix and a :class:`~lutllm.kernels.QuantizedLinear`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import QuantizedLinear, dense_matmul, matmul, quantize_linear
from .perf import ModelConfig
from .vq import SchemeConfig

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2", "w3")
ROPE_BASE = 10000.0
NORM_EPS = 1e-6

DESK_MODEL = ModelConfig(hidden=256, heads=8, kv_group=4, head_dim=32, ffn=512, depth=4, vocab=512)
DESK_SCHEME = SchemeConfig("coquant", G=64, v=2, c_w=8, c_a=16)


@dataclass
class LayerWeights:
    linears: dict  # name -> np.ndarray (out, in) fp32 or QuantizedLinear
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class TransformerWeights:
    config: ModelConfig
    embed: np.ndarray  # (vocab, hidden)
    layers: list
    final_norm: np.ndarray
    head: np.ndarray  # (vocab, hidden)
    dense_block: int = 1  # reduction blocking of the dense linear path
    scheme: SchemeConfig | None = None

    def __post_init__(self):
        cfg = self.config
        if self.embed.shape != (cfg.vocab, cfg.hidden) or self.head.shape != (cfg.vocab, cfg.hidden):
            raise ValueError("embedding/head shape does not match the model config")
        if len(self.layers) != cfg.depth:
            raise ValueError(f"expected {cfg.depth} layers, got {len(self.layers)}")
        want = {n: (M, D) for n, M, D in cfg.projections}
        for i, layer in enumerate(self.layers):
            for name, (M, D) in want.items():
                lin = layer.linears.get(name)
                if lin is None:
                    raise ValueError(f"layer {i} is missing {name}")
                shape = tuple(lin.shape)
                if shape != (M, D):
                    raise ValueError(f"layer {i} {name}: shape {shape}, expected {(M, D)}")

    @property
    def quantized(self) -> bool:
        return any(isinstance(lin, QuantizedLinear) for layer in self.layers for lin in layer.linears.values())


class KvCache:
    """Append-only per-layer K/V store of shape ``(capacity, kv_heads * head_dim)``."""

    def __init__(self, config: ModelConfig, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.k = [np.zeros((capacity, config.kv_dim), dtype=np.float32) for _ in range(config.depth)]
        self.v = [np.zeros((capacity, config.kv_dim), dtype=np.float32) for _ in range(config.depth)]
        self.lengths = [0] * config.depth

    @property
    def length(self) -> int:
        return self.lengths[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        n = self.lengths[layer]
        if n + len(k) > self.capacity:
            raise ValueError(f"KV cache capacity exceeded: {n + len(k)} > {self.capacity}")
        self.k[layer][n:n + len(k)] = k
        self.v[layer][n:n + len(v)] = v
        self.lengths[layer] = n + len(k)
        return self.k[layer][:n + len(k)], self.v[layer][:n + len(v)]


# --------------------------------------------------------------------------
# fp32 building blocks

def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    x = x.astype(np.float32)
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(NORM_EPS)) * gain).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (np.float32(1) + np.exp(-x))).astype(np.float32)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(np.float32)


def rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate-half rotary embedding on ``(L, heads, head_dim)`` at the given positions."""
    d = x.shape[-1]
    inv = ROPE_BASE ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(np.concatenate([ang, ang], axis=-1)).astype(np.float32)[:, None, :]
    sin = np.sin(np.concatenate([ang, ang], axis=-1)).astype(np.float32)[:, None, :]
    half = d // 2
    rot = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return (x * cos + rot * sin).astype(np.float32)


def attention_forward(Q: np.ndarray, K: np.ndarray, V: np.ndarray, stage: str = "prefill") -> np.ndarray:
    """GQA attention. ``Q``: (L, h, d); ``K``/``V``: (kv_len, h/g, d). Returns (L, h, d).

    Query ``i`` sits at position ``kv_len - L + i`` and sees keys up to it.
    """
    if stage not in ("prefill", "decode"):
        raise ValueError(f"unknown stage {stage!r}")
    if Q.ndim != 3 or K.ndim != 3 or K.shape != V.shape or Q.shape[2] != K.shape[2]:
        raise ValueError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    L, h, d = Q.shape
    kv_len, kvh, _ = K.shape
    if h % kvh or L > kv_len:
        raise ValueError(f"shape mismatch: {h} query heads over {kvh} kv heads, L={L}, kv_len={kv_len}")
    g = h // kvh
    Kx = np.repeat(K, g, axis=1)  # query head i reads kv head i // g
    Vx = np.repeat(V, g, axis=1)
    scores = np.einsum("lhd,khd->hlk", Q, Kx).astype(np.float32) / np.float32(np.sqrt(d))
    if L > 1:
        q_pos = np.arange(kv_len - L, kv_len)[:, None]
        mask = np.arange(kv_len)[None, :] > q_pos
        scores = np.where(mask[None], np.float32(-np.inf), scores)
    probs = softmax(scores)
    return np.einsum("hlk,khd->lhd", probs, Vx).astype(np.float32)


def apply_linear(X: np.ndarray, lin, block: int = 1) -> np.ndarray:
    if isinstance(lin, QuantizedLinear):
        return matmul(X, lin, block=block)
    return dense_matmul(X, lin, block=block)


def ffn_forward(O: np.ndarray, layer: LayerWeights, block: int = 1, capture: dict | None = None,
                prefix: str = "") -> np.ndarray:
    lin = layer.linears
    if capture is not None:
        capture.setdefault(f"{prefix}w1", []).append(O)
    a = apply_linear(O, lin["w1"], block)
    b = apply_linear(O, lin["w2"], block)
    hidden = (silu(a) * b).astype(np.float32)
    if capture is not None:
        capture.setdefault(f"{prefix}w3", []).append(hidden)
    return apply_linear(hidden, lin["w3"], block)


# --------------------------------------------------------------------------
# forward pass

def forward(model: TransformerWeights, tokens, cache: KvCache, capture: dict | None = None,
            layer_outputs: list | None = None) -> np.ndarray:
    """Process ``tokens`` after the cached prefix; returns fp32 logits ``(L, vocab)``.

    ``capture`` collects the input of every linear layer, keyed ``l{i}.{name}``;
    ``layer_outputs`` receives the residual stream after each block.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id out of vocabulary range")
    L = len(tokens)
    start = cache.length
    positions = np.arange(start, start + L)
    stage = "prefill" if start == 0 else "decode"
    x = model.embed[tokens].astype(np.float32)
    h, kvh, d = cfg.heads, cfg.kv_heads, cfg.head_dim
    blk = model.dense_block
    for i, layer in enumerate(model.layers):
        pre = f"l{i}."
        lin = layer.linears
        hn = rms_norm(x, layer.attn_norm)
        if capture is not None:
            capture.setdefault(f"{pre}wq", []).append(hn)
        q = apply_linear(hn, lin["wq"], blk).reshape(L, h, d)
        k = apply_linear(hn, lin["wk"], blk).reshape(L, kvh, d)
        v = apply_linear(hn, lin["wv"], blk).reshape(L, kvh, d)
        q = rope(q, positions)
        k = rope(k, positions)
        K, V = cache.append(i, k.reshape(L, -1), v.reshape(L, -1))
        att = attention_forward(q, K.reshape(-1, kvh, d), V.reshape(-1, kvh, d), stage).reshape(L, h * d)
        if capture is not None:
            capture.setdefault(f"{pre}wo", []).append(att)
        x = (x + apply_linear(att, lin["wo"], blk)).astype(np.float32)
        hn = rms_norm(x, layer.ffn_norm)
        x = (x + ffn_forward(hn, layer, blk, capture, pre)).astype(np.float32)
        if layer_outputs is not None:
            layer_outputs.append(x.copy())
    x = rms_norm(x, model.final_norm)
    return (x @ model.head.T).astype(np.float32)


def generate(model: TransformerWeights, prompt_tokens, max_new: int, greedy: bool = True,
             capacity: int | None = None, return_logits: bool = False):
    """Prefill once, then decode ``max_new`` tokens greedily."""
    if not greedy:
        raise ValueError("only greedy decoding is supported")
    prompt = [int(t) for t in prompt_tokens]
    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    need = len(prompt) + max(max_new - 1, 0)
    capacity = need if capacity is None else capacity
    if len(prompt) > capacity or need > capacity:
        raise ValueError(f"KV cache capacity exceeded: need {need}, capacity {capacity}")
    out, logits = [], []
    if max_new == 0:
        return (out, logits) if return_logits else out
    cache = KvCache(model.config, capacity)
    step = forward(model, prompt, cache)[-1]
    for t in range(max_new):
        logits.append(step)
        tok = int(np.argmax(step))
        out.append(tok)
        if t + 1 < max_new:
            step = forward(model, [tok], cache)[-1]
    return (out, logits) if return_logits else out


def prefill_logits(model: TransformerWeights, tokens, capture=None, layer_outputs=None) -> np.ndarray:
    return forward(model, tokens, KvCache(model.config, len(tokens)), capture, layer_outputs)


# --------------------------------------------------------------------------
# construction and quantization

def _palette_matrix(rng, M: int, D: int, scale: float, scheme: SchemeConfig) -> np.ndarray:
    """Random matrix whose every weight group holds at most ``c_w`` distinct vectors."""
    v, G = scheme.v, scheme.G
    W = np.empty((M, D // v, v), dtype=np.float32)
    for s in range(D // v):
        for r0 in range(0, M, G):
            rows = min(G, M - r0)
            pal = rng.normal(0.0, scale, size=(scheme.c_w, v)).astype(np.float32)
            W[r0:r0 + rows, s] = pal[rng.integers(0, scheme.c_w, size=rows)]
    return W.reshape(M, D)


def init_dense_model(config: ModelConfig = DESK_MODEL, seed: int = 0, weight_std: float = 0.02,
                     palette: SchemeConfig | None = None, dense_block: int = 1) -> TransformerWeights:
    """Seeded random dense model; with ``palette`` every weight group is exactly representable."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(config.depth):
        lins = {}
        for name, M, D in config.projections:
            if palette is not None:
                lins[name] = _palette_matrix(rng, M, D, weight_std, palette)
            else:
                lins[name] = rng.normal(0.0, weight_std, size=(M, D)).astype(np.float32)
        layers.append(LayerWeights(lins, np.ones(config.hidden, np.float32), np.ones(config.hidden, np.float32)))
    embed = rng.normal(0.0, 1.0, size=(config.vocab, config.hidden)).astype(np.float32)
    head = rng.normal(0.0, 1.0 / np.sqrt(config.hidden), size=(config.vocab, config.hidden)).astype(np.float32)
    return TransformerWeights(config, embed, layers, np.ones(config.hidden, np.float32), head, dense_block)


def calibrate(model: TransformerWeights, tokens, decode_steps: int = 0) -> dict:
    """Inputs seen by every linear layer of ``model`` on a prefill of ``tokens``.

    With ``decode_steps`` the capture continues through that many greedy decode
    steps, so the samples cover exactly what a later ``generate`` call feeds in.
    """
    capture = {}
    cache = KvCache(model.config, len(tokens) + decode_steps)
    step = forward(model, tokens, cache, capture)[-1]
    for _ in range(decode_steps):
        step = forward(model, [int(np.argmax(step))], cache, capture)[-1]
    return {k: np.concatenate(v) for k, v in capture.items()}


_SHARED_INPUT = {"wk": "wq", "wv": "wq", "w2": "w1"}


def quantize_model(model: TransformerWeights, scheme: SchemeConfig, calib_tokens=None, seed: int = 0,
                   int8_tables: bool = True, max_iters: int = 100,
                   activations: dict | None = None) -> TransformerWeights:
    """Replace every dense projection of ``model`` by a :class:`QuantizedLinear`.

    Activation codebooks are trained on ``activations`` (as returned by
    :func:`calibrate`) when given, otherwise on a prefill of ``calib_tokens``.
    """
    if model.quantized:
        raise ValueError("model is already quantized")
    acts = activations
    if scheme.uses_activation_vq and acts is None:
        if calib_tokens is None:
            raise ValueError("activation codebooks need calibration tokens")
        acts = calibrate(model, calib_tokens)
    layers = []
    for i, layer in enumerate(model.layers):
        lins = {}
        for j, name in enumerate(LINEAR_NAMES):
            samples = None
            if scheme.uses_activation_vq:
                samples = acts[f"l{i}.{_SHARED_INPUT.get(name, name)}"]
            lins[name] = quantize_linear(layer.linears[name], scheme, samples, seed=seed + 1000 * (7 * i + j),
                                         int8_tables=int8_tables, max_iters=max_iters)
        layers.append(LayerWeights(lins, layer.attn_norm, layer.ffn_norm))
    return TransformerWeights(model.config, model.embed, layers, model.final_norm, model.head,
                              model.dense_block, scheme)


# --------------------------------------------------------------------------
# comparison

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def compare_paths(model_dense: TransformerWeights, model_quant: TransformerWeights, inputs) -> dict:
    """Layerwise and logit differences of two models on one prefill of ``inputs``."""
    if model_dense.config != model_quant.config:
        raise ValueError("config mismatch between compared models")
    outs_d, outs_q = [], []
    ld = prefill_logits(model_dense, inputs, layer_outputs=outs_d)
    lq = prefill_logits(model_quant, inputs, layer_outputs=outs_q)
    return {
        "max_abs_logit_error": float(np.max(np.abs(ld - lq))),
        "logit_cosine": _cosine(ld, lq),
        "layer_cosine": [_cosine(a, b) for a, b in zip(outs_d, outs_q)],
        "layer_max_abs_error": [float(np.max(np.abs(a - b))) for a, b in zip(outs_d, outs_q)],
        "argmax_agreement": float(np.mean(np.argmax(ld, -1) == np.argmax(lq, -1))),
    }


def teacher_forced_agreement(model_a: TransformerWeights, model_b: TransformerWeights, prompt, steps: int) -> float:
    """Fraction of ``steps`` decode positions where both models pick the same argmax.

    The continuation is the greedy output of ``model_a``; both models score the
    same token sequence so one early disagreement does not cascade.
    """
    prompt = list(prompt)
    cont = generate(model_a, prompt, steps)
    seq = prompt + cont[:-1] if steps else prompt
    la = prefill_logits(model_a, seq)[len(prompt) - 1:]
    lb = prefill_logits(model_b, seq)[len(prompt) - 1:]
    return float(np.mean(np.argmax(la, -1) == np.argmax(lb, -1)))

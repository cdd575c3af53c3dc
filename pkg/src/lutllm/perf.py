"""Analytic latency and roofline model for vector-quantized transformer inference.

Cycle counts are kept as real numbers through the algebra; ``log`` is log2.
Symbols follow the usual hardware-budget naming:

    N_p, b_p   on-chip memory ports and bits per access
    N_c        compute units, Op_fp32 / Op_int8 MACs per cycle per unit
    C          off-chip bandwidth in bytes per cycle
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Iterable

from .vq import SchemeConfig

NONLINEAR_OPS_PER_ELEMENT = 5.0


@dataclass(frozen=True)
class HardwareProfile:
    n_ports: float
    bits_per_port: float
    compute_units: float
    op_fp32: float
    op_int8: float
    bandwidth_bytes_per_cycle: float
    freq_mhz: float
    # separate channel group carrying activations, KV prefetch and KV write-out
    kv_bandwidth_bytes_per_cycle: float | None = None
    nonlinear_ops_per_element: float = NONLINEAR_OPS_PER_ELEMENT
    name: str = "custom"

    def __post_init__(self):
        for f in ("n_ports", "bits_per_port", "compute_units", "op_fp32", "op_int8",
                  "bandwidth_bytes_per_cycle", "freq_mhz"):
            if not getattr(self, f) > 0:
                raise ValueError(f"hardware profile field {f} must be strictly positive")

    @property
    def C(self) -> float:
        return self.bandwidth_bytes_per_cycle

    @property
    def port_bits(self) -> float:
        return self.n_ports * self.bits_per_port

    @property
    def fp32_macs(self) -> float:
        return self.compute_units * self.op_fp32

    @property
    def kv_bandwidth(self) -> float:
        return self.kv_bandwidth_bytes_per_cycle or self.bandwidth_bytes_per_cycle

    @property
    def hz(self) -> float:
        return self.freq_mhz * 1e6

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        keys = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - keys - {"topology", "comment", "peak_bandwidth_gbs"}
        if unknown:
            raise ValueError(f"unknown hardware profile keys: {sorted(unknown)}")
        missing = {"n_ports", "bits_per_port", "compute_units", "op_fp32", "op_int8",
                   "bandwidth_bytes_per_cycle", "freq_mhz"} - set(d)
        if missing:
            raise ValueError(f"hardware profile missing keys: {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in keys})

    @classmethod
    def load(cls, path) -> "HardwareProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def load_bundled_profile(name: str = "v80") -> dict:
    text = resources.files("lutllm.profiles").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def v80_profile() -> HardwareProfile:
    return HardwareProfile.from_dict(load_bundled_profile("v80"))


# Symbols of the worked linear-layer example: 16 ports x 32 bits, 256 units, Op=1, C=64.
PAPER_EXAMPLE_HW = HardwareProfile(n_ports=16, bits_per_port=32, compute_units=256, op_fp32=1,
                                   op_int8=1, bandwidth_bytes_per_cycle=64, freq_mhz=227,
                                   name="paper-example")


@dataclass(frozen=True)
class LayerShape:
    M: int
    D: int
    L: int = 1

    def __post_init__(self):
        if self.M < 0 or self.D < 0 or self.L < 0:
            raise ValueError("layer shape entries must be non-negative")

    @property
    def macs(self) -> float:
        return float(self.M) * self.D * self.L


PAPER_EXAMPLE_SHAPE = LayerShape(M=512, D=32, L=1)
PAPER_EXAMPLE_SCHEME = SchemeConfig("coquant", G=256, v=2, c_w=16, c_a=64, table_bits=8)


@dataclass
class LatencyEstimate:
    t_mem: float
    t_lat: float
    chosen_S: int | None = None
    terms: dict = field(default_factory=dict)
    bytes_loaded: float = 0.0

    @property
    def overall(self) -> float:
        return max(self.t_mem, self.t_lat)

    @property
    def cycles(self) -> int:
        return math.ceil(self.overall - 1e-9)


def _log2(x: float) -> float:
    return math.log2(x)


def _check(scheme: SchemeConfig, kind: str) -> None:
    if scheme.kind != kind:
        raise ValueError(f"invalid scheme {scheme.kind!r}, expected {kind!r}")


def _search_cycles(c_a: int, L: int) -> float:
    return 0.0 if L == 0 else _log2(c_a) + L - 1


def _divisors(n: int) -> list:
    return [s for s in range(1, n + 1) if n % s == 0]


def weight_vq_latency(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile) -> LatencyEstimate:
    _check(scheme, "weight_vq")
    M, D, L = shape.M, shape.D, shape.L
    G, v, c_w = scheme.G, scheme.v, scheme.c_w
    MD = float(M) * D
    codebook_bytes = 4 * MD * c_w / (G * v)
    index_bytes = MD * _log2(c_w) / (8 * v)
    t_mem = (codebook_bytes + index_bytes) / hw.C
    expand = MD * (_log2(c_w) / v + 32 / (G * v)) / hw.port_bits
    mac = MD * L / min(hw.fp32_macs, hw.port_bits / 32)
    return LatencyEstimate(t_mem, expand + mac, None,
                           {"load_codebooks": codebook_bytes / hw.C, "load_indices": index_bytes / hw.C,
                            "expand": expand, "mac": mac},
                           codebook_bytes + index_bytes)


def _table_search(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile, t_tl) -> tuple:
    """Minimize (D/S) * max(search, T_tl(S)) over S dividing D/v."""
    D, L = shape.D, shape.L
    search = _search_cycles(scheme.c_a, L)
    best = (math.inf, None, None)
    for S in _divisors(max(D // scheme.v, 1)):
        tl = t_tl(S)
        if tl is None:
            continue
        total = D / S * max(search, tl[0] + tl[1])
        if total < best[0]:
            best = (total, S, tl)
    if best[1] is None:
        raise ValueError("no feasible parallel-search width S (compute units exhausted by centroid search)")
    return best[0], best[1], search, best[2]


def _accumulate_rate(S: int, M: int, scheme: SchemeConfig, hw: HardwareProfile):
    units = hw.compute_units - S * scheme.c_a * scheme.v / hw.op_fp32
    if units <= 0:
        return None
    return min(S * M, units * hw.op_int8, hw.port_bits / scheme.table_bits)


def activation_vq_latency(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile) -> LatencyEstimate:
    _check(scheme, "activation_vq")
    M, D, L = shape.M, shape.D, shape.L
    v, c_a = scheme.v, scheme.c_a
    MD = float(M) * D
    table_bytes = MD * c_a / v * scheme.table_bits / 8
    codebook_bytes = 4 * D * c_a / v
    t_mem = (table_bytes + codebook_bytes) / hw.C
    if M == 0 or D == 0:
        return LatencyEstimate(t_mem, 0.0, 1, {}, table_bytes + codebook_bytes)

    def t_tl(S):
        rate = _accumulate_rate(S, M, scheme, hw)
        if rate is None:
            return None
        lookup = S * M * L / min(S * M, hw.port_bits / scheme.table_bits)
        return lookup, S * M * L / rate

    t_lat, S, search, (lookup, acc) = _table_search(shape, scheme, hw, t_tl)
    steps = D / S
    return LatencyEstimate(t_mem, t_lat, S,
                           {"load_tables": table_bytes / hw.C, "load_codebooks": codebook_bytes / hw.C,
                            "search": steps * search, "lookup": steps * lookup, "accumulate": steps * acc,
                            "steps": steps},
                           table_bytes + codebook_bytes)


def coquant_latency(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile) -> LatencyEstimate:
    _check(scheme, "coquant")
    M, D, L = shape.M, shape.D, shape.L
    G, v, c_w, c_a = scheme.G, scheme.v, scheme.c_w, scheme.c_a
    MD = float(M) * D
    table_bytes = MD * c_a * c_w / (G * v) * scheme.table_bits / 8
    index_bytes = MD * _log2(c_w) / (8 * v)
    codebook_bytes = 4 * D * c_a / v
    total_bytes = table_bytes + index_bytes + codebook_bytes
    t_mem = total_bytes / hw.C
    if M == 0 or D == 0:
        return LatencyEstimate(t_mem, 0.0, 1, {}, total_bytes)

    t_lat, S, search, (lookup, acc) = _table_search(
        shape, scheme, hw, lambda S: coquant_step_cycles(shape, scheme, hw, S))
    steps = D / S
    return LatencyEstimate(t_mem, t_lat, S,
                           {"load_tables": table_bytes / hw.C, "load_indices": index_bytes / hw.C,
                            "load_codebooks": codebook_bytes / hw.C, "search": steps * search,
                            "lookup": steps * lookup, "accumulate": steps * acc, "steps": steps},
                           total_bytes)


def coquant_step_cycles(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile, S: int):
    """(row-extraction, accumulation) cycles of one S-wide step, or None if S is infeasible."""
    M, L, G = shape.M, shape.L, scheme.G
    rate = _accumulate_rate(S, M, scheme, hw)
    if rate is None:
        return None
    rows = S * M * L / G
    lookup = rows / min(S * M / G, hw.port_bits / scheme.table_bits)
    return lookup, S * M * L / rate


def scalar_baseline_latency(shape: LayerShape, precision: str, hw: HardwareProfile) -> LatencyEstimate:
    M, D, L = shape.M, shape.D, shape.L
    MD = float(M) * D
    if precision == "fp16":
        nbytes = 2 * MD
        mac = MD * L / min(hw.fp32_macs, hw.port_bits / 16)
        return LatencyEstimate(nbytes / hw.C, mac, None, {"load_weights": nbytes / hw.C, "mac": mac}, nbytes)
    if precision == "w4a8":
        nbytes = MD / 2
        # one fp32 multiply-add per weight element, competing for the same units
        dequant = MD / hw.fp32_macs
        mac = MD * L / min(hw.compute_units * hw.op_int8, hw.port_bits / 8)
        return LatencyEstimate(nbytes / hw.C, dequant + mac, None,
                               {"load_weights": nbytes / hw.C, "dequant": dequant, "mac": mac}, nbytes)
    raise ValueError(f"unknown precision {precision!r}")


def layer_latency(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile) -> LatencyEstimate:
    if scheme.kind == "weight_vq":
        return weight_vq_latency(shape, scheme, hw)
    if scheme.kind == "activation_vq":
        return activation_vq_latency(shape, scheme, hw)
    if scheme.kind == "coquant":
        return coquant_latency(shape, scheme, hw)
    if scheme.kind == "fp16":
        return scalar_baseline_latency(shape, "fp16", hw)
    if scheme.kind == "scalar_w4a8":
        return scalar_baseline_latency(shape, "w4a8", hw)
    raise ValueError(f"invalid scheme {scheme.kind!r}")


def bpcsu_chain_length(M: int, G: int, c_w: int, c_a: int, C_bits_per_cycle: float) -> int:
    """Longest power-of-two dPE chain whose search latency hides under table loading.

    Condition per candidate ``l``::

        (8*c_a*c_w*M/G + log(c_w)*M) / C  >=  32*c_a/C + l + log(c_a/l)

    Returns 1 when no candidate satisfies it.
    """
    load = (8 * c_a * c_w * M / G + _log2(c_w) * M) / C_bits_per_cycle
    best = 1
    l = 1
    while l <= c_a:
        if load >= 32 * c_a / C_bits_per_cycle + l + _log2(c_a / l):
            best = l
        l *= 2
    return best


def chain_condition_holds(M, G, c_w, c_a, C_bits_per_cycle, l) -> bool:
    load = (8 * c_a * c_w * M / G + _log2(c_w) * M) / C_bits_per_cycle
    return load >= 32 * c_a / C_bits_per_cycle + l + _log2(c_a / l)


# --------------------------------------------------------------------------
# whole-model extension

@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    heads: int
    kv_group: int  # query heads sharing one K/V head
    head_dim: int
    ffn: int
    depth: int
    vocab: int = 0
    kv_bytes: int = 2
    attention: bool = True
    linear_override: tuple = ()  # ((name, M, D), ...) replaces the projection list

    def __post_init__(self):
        if self.attention:
            if self.heads % self.kv_group:
                raise ValueError("heads must be divisible by the GQA group size")
            if self.head_dim * self.heads != self.hidden:
                raise ValueError("head_dim must equal hidden/heads")

    @property
    def kv_heads(self) -> int:
        return self.heads // self.kv_group

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def projections(self) -> list:
        """(name, M, D) per linear layer of one block; weights are out x in."""
        if self.linear_override:
            return [tuple(p) for p in self.linear_override]
        D, F = self.hidden, self.ffn
        qd = self.heads * self.head_dim
        return [("wq", qd, D), ("wk", self.kv_dim, D), ("wv", self.kv_dim, D), ("wo", D, qd),
                ("w1", F, D), ("w2", F, D), ("w3", D, F)]

    @classmethod
    def single_linear(cls, M: int, D: int) -> "ModelConfig":
        return cls(hidden=D, heads=1, kv_group=1, head_dim=D, ffn=0, depth=1, attention=False,
                   linear_override=(("linear", M, D),))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "linear_override" in d:
            d["linear_override"] = tuple(tuple(x) for x in d["linear_override"])
        keys = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in keys})

    def to_dict(self) -> dict:
        return asdict(self)


PRE_ATTENTION = ("wq", "wk", "wv")

# Qwen-3-1.7B dimensions (lm head excluded)
QWEN3_1_7B = ModelConfig(hidden=2048, heads=16, kv_group=2, head_dim=128, ffn=6144, depth=28, vocab=151936)


@dataclass
class BlockCost:
    linear: float
    attention: float
    nonlinear: float
    kv_stall: float
    linear_bytes: float
    kv_bytes: float
    linear_macs: float
    attention_macs: float
    nonlinear_ops: float
    prefetch_window: float = 0.0

    @property
    def cycles(self) -> float:
        return self.linear + self.attention + self.nonlinear + self.kv_stall

    @property
    def ops(self) -> float:
        return 2 * (self.linear_macs + self.attention_macs) + self.nonlinear_ops

    @property
    def bytes(self) -> float:
        return self.linear_bytes + self.kv_bytes


def attention_macs(model: ModelConfig, L: int, kv_len: int) -> float:
    # Q K^T and P V, each L x d x kv_len per query head
    return 2.0 * model.heads * L * kv_len * model.head_dim if model.attention else 0.0


def nonlinear_elements(model: ModelConfig, L: int, kv_len: int) -> float:
    if not model.attention:
        return 0.0
    softmax = model.heads * L * kv_len
    rope = L * (model.heads + model.kv_heads) * model.head_dim
    norms = 2 * L * model.hidden
    swiglu = L * model.ffn
    return float(softmax + rope + norms + swiglu)


def block_cost(model: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile, L: int, kv_len: int,
               kv_prefetch: int = 0) -> BlockCost:
    """One transformer block processing ``L`` new tokens against ``kv_len`` keys.

    ``kv_prefetch`` tokens of cached K/V are read from off-chip starting with the
    first projection; attention needs them only after the Q/K/V projections, so
    only the part of the read that outlasts those stalls the block.
    """
    linear = 0.0
    lbytes = 0.0
    window = 0.0
    for name, M, D in model.projections:
        est = layer_latency(LayerShape(M, D, L), scheme, hw)
        linear += est.overall
        lbytes += est.bytes_loaded
        if name in PRE_ATTENTION:
            window += est.overall
    attn = attention_macs(model, L, kv_len) / hw.fp32_macs
    nl_ops = nonlinear_elements(model, L, kv_len) * hw.nonlinear_ops_per_element
    kv_read = 2.0 * kv_prefetch * model.kv_dim * model.kv_bytes if model.attention else 0.0
    kv_write = 2.0 * L * model.kv_dim * model.kv_bytes if model.attention else 0.0
    stall = max(0.0, kv_read / hw.kv_bandwidth - window)
    lmacs = sum(float(M) * D * L for _, M, D in model.projections)
    return BlockCost(linear, attn, nl_ops / hw.fp32_macs, stall, lbytes, kv_read + kv_write,
                     lmacs, attention_macs(model, L, kv_len), nl_ops, window)


@dataclass
class TransformerLatency:
    prefill_cycles: float
    decode_cycles: float
    prompt_len: int
    gen_len: int
    freq_mhz: float
    prefill_ops: float = 0.0
    prefill_bytes: float = 0.0
    decode_ops: float = 0.0
    decode_bytes: float = 0.0
    decode_linear_bytes: float = 0.0

    @property
    def end2end_cycles(self) -> float:
        return self.prefill_cycles + self.decode_cycles

    def cycles(self, stage: str) -> float:
        return {"prefill": self.prefill_cycles, "decode": self.decode_cycles,
                "end2end": self.end2end_cycles}[stage]

    def tokens(self, stage: str) -> int:
        return {"prefill": self.prompt_len, "decode": self.gen_len,
                "end2end": self.prompt_len + self.gen_len}[stage]

    def tokens_per_s(self, stage: str) -> float:
        cyc = self.cycles(stage)
        return self.tokens(stage) * self.freq_mhz * 1e6 / cyc if cyc > 0 else 0.0


def transformer_latency(model: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile,
                        prompt_len: int, gen_len: int = 0) -> TransformerLatency:
    """Prefill over the prompt, then ``gen_len`` single-token decode steps with a growing KV cache."""
    pre = block_cost(model, scheme, hw, prompt_len, prompt_len) if prompt_len > 0 else None
    out = TransformerLatency(0.0, 0.0, prompt_len, gen_len, hw.freq_mhz)
    if pre is not None:
        out.prefill_cycles = model.depth * pre.cycles
        out.prefill_ops = model.depth * pre.ops
        out.prefill_bytes = model.depth * pre.bytes
    for t in range(gen_len):
        past = prompt_len + t
        step = block_cost(model, scheme, hw, 1, past + 1, kv_prefetch=past)
        out.decode_cycles += model.depth * step.cycles
        out.decode_ops += model.depth * step.ops
        out.decode_bytes += model.depth * step.bytes
        out.decode_linear_bytes += model.depth * step.linear_bytes
    return out


# --------------------------------------------------------------------------
# roofline

def compute_roof(model: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile) -> float:
    """Asymptotic linear-layer throughput (ops/s) of the scheme's datapath as L grows."""
    big = 1 << 20
    macs = 0.0
    cycles = 0.0
    for _, M, D in model.projections:
        est = layer_latency(LayerShape(M, D, big), scheme, hw)
        macs += float(M) * D * big
        cycles += est.t_lat
    return 2 * macs / cycles * hw.hz


def bandwidth_roof(hw: HardwareProfile) -> float:
    return hw.C * hw.hz


def roof(intensity: float, compute: float, bandwidth: float) -> float:
    if math.isinf(intensity):
        return compute
    return min(compute, intensity * bandwidth)


@dataclass
class RooflinePoint:
    seq_len: int
    scheme: str
    stage: str
    cycles: float
    tokens_per_s: float
    intensity: float
    attained_ops_per_s: float
    roof_ops_per_s: float


def scheme_label(scheme: SchemeConfig) -> str:
    return scheme.kind


def roofline_points(model: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile,
                    seq_lens: Iterable[int], stage: str = "prefill", linear_only: bool = False) -> list:
    """Operational intensity and throughput per sequence length.

    ``prefill`` points process ``seq_len`` prompt tokens; ``decode`` points are one
    decode step attending over ``seq_len`` cached tokens.
    """
    if stage not in ("prefill", "decode"):
        raise ValueError("stage must be prefill or decode")
    croof = compute_roof(model, scheme, hw)
    broof = bandwidth_roof(hw)
    pts = []
    for n in seq_lens:
        if stage == "prefill":
            cost = block_cost(model, scheme, hw, n, n)
            tokens = n
        else:
            cost = block_cost(model, scheme, hw, 1, n + 1, kv_prefetch=n)
            tokens = 1
        if linear_only:
            ops, nbytes, cycles = 2 * cost.linear_macs, cost.linear_bytes, cost.linear
        else:
            ops, nbytes, cycles = cost.ops, cost.bytes, cost.cycles
        ops *= model.depth
        nbytes *= model.depth
        cycles *= model.depth
        intensity = ops / nbytes if nbytes else math.inf
        secs = cycles / hw.hz
        pts.append(RooflinePoint(n, scheme_label(scheme), stage, cycles,
                                 tokens / secs if secs else 0.0, intensity,
                                 ops / secs if secs else 0.0, roof(intensity, croof, broof)))
    return pts


def peak_speedup(model: ModelConfig, scheme: SchemeConfig, baseline: SchemeConfig,
                 hw: HardwareProfile, seq_lens: Iterable[int], stage: str = "prefill") -> tuple:
    """Largest pointwise throughput ratio scheme/baseline over ``seq_lens``; returns (ratio, seq_len)."""
    seq_lens = list(seq_lens)
    a = roofline_points(model, scheme, hw, seq_lens, stage)
    b = roofline_points(model, baseline, hw, seq_lens, stage)
    ratios = [(pa.attained_ops_per_s / pb.attained_ops_per_s, pa.seq_len) for pa, pb in zip(a, b)]
    return max(ratios)


def crossing_point(model: ModelConfig, scheme: SchemeConfig, baseline: SchemeConfig,
                   hw: HardwareProfile, seq_lens: Iterable[int], stage: str = "prefill"):
    """First sequence length at which ``scheme`` out-runs ``baseline``, or None."""
    seq_lens = list(seq_lens)
    a = roofline_points(model, scheme, hw, seq_lens, stage)
    b = roofline_points(model, baseline, hw, seq_lens, stage)
    for pa, pb in zip(a, b):
        if pa.attained_ops_per_s > pb.attained_ops_per_s:
            return pa.seq_len
    return None


CSV_COLUMNS = ["seq_len", "scheme", "stage", "cycles", "tokens_per_s", "intensity"]


def points_to_csv(points: Iterable[RooflinePoint], extra: bool = True) -> str:
    buf = io.StringIO()
    cols = CSV_COLUMNS + (["attained_ops_per_s", "roof_ops_per_s"] if extra else [])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for p in points:
        w.writerow([getattr(p, c) if not isinstance(getattr(p, c), float) else f"{getattr(p, c):.6g}"
                    for c in cols])
    return buf.getvalue()


def scheme_for(kind: str, base: SchemeConfig | None = None) -> SchemeConfig:
    base = base or SchemeConfig("coquant")
    return replace(base, kind=kind)

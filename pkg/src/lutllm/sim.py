"""Cycle-approximate event simulation of the LUT-based linear engine and its schedules.

Every modeled unit is a resource with a single occupancy pointer; events are
placed greedily in program order (start = max(dependencies, resource free)),
so events on one resource never overlap and every start time is monotone in
the durations that precede it. Fractional analytic quantities are turned into
integer cycles by ceiling the running sum, so a stream of events totals
exactly ``ceil(sum)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

from .perf import (
    PRE_ATTENTION,
    HardwareProfile,
    LayerShape,
    ModelConfig,
    attention_macs,
    bpcsu_chain_length,
    coquant_latency,
    coquant_step_cycles,
)
from .vq import SchemeConfig


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def ceil_split(total: float, n: int) -> list:
    """Integer durations of ``n`` equal shares of ``total`` cycles, summing to ceil(total)."""
    return ceil_stream([total / n] * n) if n else []


def ceil_stream(parts) -> list:
    out = []
    acc = 0.0
    prev = 0
    for p in parts:
        acc += p
        cur = math.ceil(acc - 1e-9)
        out.append(max(cur - prev, 0))
        prev = max(cur, prev)
    return out


@dataclass(frozen=True)
class BpcsuConfig:
    chain_len: int
    c_a: int

    def __post_init__(self):
        if not (_is_pow2(self.chain_len) and _is_pow2(self.c_a)) or self.chain_len > self.c_a:
            raise ValueError(f"invalid BPCSU config l={self.chain_len}, c_a={self.c_a}")

    @property
    def num_chains(self) -> int:
        return self.c_a // self.chain_len

    @property
    def reduction_depth(self) -> int:
        return self.num_chains.bit_length() - 1


def simulate_bpcsu(cfg: BpcsuConfig, num_vectors: int) -> int:
    """Cycles for ``num_vectors`` inputs through ``c_a/l`` chains of ``l`` dPEs plus the reduction tree."""
    if num_vectors < 1:
        raise ValueError("num_vectors must be >= 1")
    return cfg.chain_len + cfg.reduction_depth + num_vectors - 1


@dataclass(frozen=True)
class EngineTopology:
    """LUT engine topology. ``None`` fields are derived per layer from the analytic model."""

    num_bpcsu: int | None = None
    chain_len: int | None = None
    max_chunks: int = 16
    on_chip_bits: int = 1 << 29
    double_buffer: int = 2

    @classmethod
    def from_dict(cls, d: dict | None) -> "EngineTopology":
        d = dict(d or {})
        keys = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in keys and v is not None})

    def resolve(self, shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile) -> "EngineTopology":
        S = self.num_bpcsu
        if S is None:
            S = coquant_latency(shape, scheme, hw).chosen_S
        if (shape.D // scheme.v) % S:
            raise ValueError(f"topology/scheme mismatch: {S} BPCSUs do not divide D/v={shape.D // scheme.v}")
        l = self.chain_len
        if l is None:
            l = bpcsu_chain_length(shape.M, scheme.G, scheme.c_w, scheme.c_a, 8 * hw.C / S)
        BpcsuConfig(l, scheme.c_a)
        return replace(self, num_bpcsu=S, chain_len=l)


@dataclass
class Event:
    resource: str
    op: str
    start: int
    end: int

    def to_dict(self) -> dict:
        return {"resource": self.resource, "op": self.op, "start": self.start, "end": self.end}


@dataclass
class SimTrace:
    events: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    peak_buffer_bits: int = 0
    linear_available_bits: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def total_cycles(self) -> int:
        if "total" in self.totals:
            return self.totals["total"]
        return max((e.end for e in self.events), default=0)

    def resource_busy(self, resource: str) -> int:
        return sum(e.end - e.start for e in self.events if e.resource == resource)

    def count(self, op_prefix: str) -> int:
        return sum(1 for e in self.events if e.op.startswith(op_prefix))

    def check_exclusive(self) -> None:
        by_res = {}
        for e in self.events:
            if e.end < e.start:
                raise AssertionError(f"event ends before it starts: {e}")
            by_res.setdefault(e.resource, []).append(e)
        for res, evs in by_res.items():
            evs.sort(key=lambda e: (e.start, e.end))
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise AssertionError(f"overlap on {res}: {a} / {b}")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)

    def summary(self) -> dict:
        return {"total_cycles": self.total_cycles, **{k: v for k, v in self.totals.items() if k != "total"},
                "peak_buffer_bits": self.peak_buffer_bits,
                "linear_available_bits": self.linear_available_bits, **self.stats}


class Timeline:
    def __init__(self, record: bool = True):
        self.free = {}
        self.events = []
        self.record = record

    def place(self, resource: str, op: str, earliest: int, duration: int) -> Event:
        start = max(earliest, self.free.get(resource, 0))
        ev = Event(resource, op, start, start + duration)
        self.free[resource] = ev.end
        if self.record:
            self.events.append(ev)
        return ev


# --------------------------------------------------------------------------
# one LUT linear layer

@dataclass
class LinearSchedule:
    """Relative schedule of one linear layer on the engine (time 0 = engine start)."""

    events: list
    compute_end: int
    drain: tuple  # (start, end) of output drain
    table_bytes: float
    buffer_bits: int
    hbm_cycles: int
    hbm_end: int = 0


def _chunk_sizes(n_steps: int, max_chunks: int) -> list:
    k = max(1, min(n_steps, max_chunks))
    base, extra = divmod(n_steps, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _linear_schedule(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile,
                     topo: EngineTopology, mode: str, name: str) -> LinearSchedule:
    if scheme.kind != "coquant":
        raise ValueError(f"the simulator models the co-quantized engine, got scheme {scheme.kind}")
    scheme.validate_shape(shape.M, shape.D)
    topo = topo.resolve(shape, scheme, hw)
    M, D, L = shape.M, shape.D, shape.L
    S, v, c_a = topo.num_bpcsu, scheme.v, scheme.c_a
    est = coquant_latency(shape, scheme, hw)
    cb_bytes = est.terms.get("load_codebooks", 0.0) * hw.C
    table_bytes = est.bytes_loaded - cb_bytes
    n_steps = D // S
    sizes = _chunk_sizes(n_steps, topo.max_chunks)
    stream = []
    for k in sizes:
        stream += [cb_bytes * k / n_steps / hw.C, table_bytes * k / n_steps / hw.C]
    loads = ceil_stream(stream)
    tl = Timeline()
    pre = f"{name}." if name else ""
    load_events = []
    # codebooks have their own small buffer and are fetched one chunk ahead, so a chunk's
    # search runs under the previous chunk's table load; only table buffers are double-buffered
    cbs = [tl.place("hbm", f"{pre}load_codebooks", 0, loads[0])]
    for i, k in enumerate(sizes):
        earliest = 0
        if i >= topo.double_buffer and L > 0:
            earliest = psum_events[i - topo.double_buffer].end
        if i + 1 < len(sizes):
            cbs.append(tl.place("hbm", f"{pre}load_codebooks", 0, loads[2 * i + 2]))
        cb = cbs[i]
        tb = tl.place("hbm", f"{pre}load_tables", max(cb.end, earliest), loads[2 * i + 1])
        load_events.append((cb, tb))
        if L == 0:
            continue
        if i == 0:
            psum_events = []
            step = coquant_step_cycles(LayerShape(M, D, 1), scheme, hw, S)
            if step is None:
                raise ValueError(f"topology/scheme mismatch: S={S} exhausts compute units")
            per_step_psum = (step[0] + step[1]) * L
            psums = ceil_stream([per_step_psum * kk for kk in sizes])
            rows_per_step = max(1, S * M // scheme.G)
            chain = BpcsuConfig(topo.chain_len, c_a)
            fill = simulate_bpcsu(chain, 1)
            search1 = fill
            interval = max(L, math.ceil(math.log2(c_a)) + L - 1)
            cb_reload = 4.0 * c_a * v * S / hw.C  # fp32 codebooks of one step's slices, reloaded per token
            reloads = ceil_stream([cb_reload] * (L * n_steps)) if mode == "dataflow" else None
            step_psum_1 = ceil_stream([per_step_psum / L] * (L * n_steps)) if mode == "dataflow" else None
        if mode == "dataflow":
            # token-outer iteration: codebook reload and an unpipelined search for every (token, step)
            if i == 0:
                df_prev = 0
                df_idx = 0
            last = None
            for _ in range(k):
                for _t in range(L):
                    rl = tl.place("hbm", f"{pre}codebook_reload", max(df_prev, tb.end), reloads[df_idx])
                    se = tl.place("bpcsu", f"{pre}search", rl.end, search1)
                    last = tl.place("psum", f"{pre}psum", max(se.end, tb.end), step_psum_1[df_idx])
                    df_prev = last.end
                    df_idx += 1
            psum_events.append(last)
        else:
            # each step swaps in new codebooks, so a step's L vectors enter the chain
            # every `interval` cycles; the chain latency beyond that overlaps the next step
            search = tl.place("bpcsu", f"{pre}search", cb.end, k * interval)
            search_done = search.start + (k - 1) * interval + simulate_bpcsu(chain, L)
            # table rows are consumed as they arrive; only the last row's work trails the load
            # and searched vectors are consumed token by token behind the chain
            start = max(search.start + fill, tb.start, tl.free.get("psum", 0))
            row_tail = math.ceil(psums[i] / (k * rows_per_step)) if psums[i] else 0
            vec_tail = math.ceil(psums[i] / (k * L)) if psums[i] else 0
            dur = max(psums[i], tb.end + row_tail - start, search_done + vec_tail - start)
            psum_events.append(tl.place("psum", f"{pre}psum", start, dur))
    hbm_cycles = sum(loads)
    chunk_bits = max(8 * (cb_bytes + table_bytes) * k / n_steps for k in sizes)
    buffer_bits = int(math.ceil(topo.double_buffer * chunk_bits))
    hbm_end = tl.free.get("hbm", 0)
    if L == 0:
        return LinearSchedule(tl.events, hbm_end, (hbm_end, hbm_end), table_bytes + cb_bytes, buffer_bits,
                              hbm_cycles, hbm_end)
    last = psum_events[-1]
    depth = (S - 1).bit_length() + 1
    cascade = tl.place("psum", f"{pre}cascade", last.end, depth)
    # the final step finishes tokens in order, so outputs drain behind it
    drain_start = max(last.start + depth, last.end + depth - L)
    drain = tl.place("dequant", f"{pre}drain", drain_start, max(L, cascade.end - drain_start))
    return LinearSchedule(tl.events, drain.end, (drain.start, drain.end), table_bytes + cb_bytes,
                          buffer_bits, hbm_cycles, hbm_end)


def simulate_lutlinear(shape: LayerShape, scheme: SchemeConfig, hw: HardwareProfile,
                       topology: EngineTopology | None = None, L: int | None = None,
                       mode: str = "hybrid") -> SimTrace:
    if L is not None:
        shape = LayerShape(shape.M, shape.D, L)
    sched = _linear_schedule(shape, scheme, hw, topology or EngineTopology(), mode, "")
    trace = SimTrace(list(sched.events))
    trace.totals = {"total": sched.compute_end, "memory": sched.hbm_cycles}
    trace.peak_buffer_bits = sched.buffer_bits
    trace.stats = {"bytes_loaded": sched.table_bytes}
    return trace


# --------------------------------------------------------------------------
# attention block schedules

SCHEDULE_MODES = ("dataflow", "sequential", "hybrid")


def _attention_cycles(model: ModelConfig, hw: HardwareProfile, L: int, kv_len: int) -> float:
    softmax_rope = model.heads * L * kv_len + L * (model.heads + model.kv_heads) * model.head_dim
    return (attention_macs(model, L, kv_len) + softmax_rope * hw.nonlinear_ops_per_element) / hw.fp32_macs


def _sfu_cycles(model: ModelConfig, hw: HardwareProfile, elements: float) -> float:
    return elements * hw.nonlinear_ops_per_element / hw.fp32_macs


@lru_cache(maxsize=4096)
def _cached_linear(shape, scheme, hw, topo, mode, name):
    return _linear_schedule(shape, scheme, hw, topo, mode, name)


class _BlockRunner:
    """Places the ops of transformer blocks on one shared timeline."""

    def __init__(self, model, scheme, hw, topo, mode, record):
        self.model, self.scheme, self.hw, self.topo, self.mode = model, scheme, hw, topo, mode
        self.tl = Timeline(record)
        self.engine_free = 0
        self.table_bytes = 0.0
        self.peak_linear_buffer = 0
        self.counts = {}

    def linear(self, name: str, M: int, D: int, L: int, earliest: int):
        sched = _cached_linear(LayerShape(M, D, L), self.scheme, self.hw, self.topo, self.mode, name)
        t0 = max(earliest, self.engine_free, self.tl.free.get("hbm", 0))
        if self.tl.record:
            for e in sched.events:
                self.tl.events.append(Event(e.resource, e.op, e.start + t0, e.end + t0))
        self.tl.free["hbm"] = t0 + sched.hbm_end
        self.engine_free = t0 + sched.compute_end
        self.table_bytes += sched.table_bytes
        self.peak_linear_buffer = max(self.peak_linear_buffer, sched.buffer_bits)
        if self.mode == "dataflow":
            n = sum(1 for e in sched.events if e.op.endswith("codebook_reload"))
            self.counts["codebook_reload"] = self.counts.get("codebook_reload", 0) + n
        return t0, t0 + sched.drain[0], t0 + sched.drain[1]

    def sfu(self, op: str, elements: float, earliest: int) -> Event:
        dur = math.ceil(_sfu_cycles(self.model, self.hw, elements) - 1e-9)
        ev = self.tl.place("sfu", op, max(earliest, self.engine_free), dur)
        self.engine_free = ev.end
        return ev

    def attention_block(self, L: int, kv_len: int, kv_prefetch: int, prefix: str,
                        include_ffn: bool = True, stage: str = "") -> int:
        m, hw = self.model, self.hw
        start = self.engine_free
        if not m.attention:
            for name, M, D in m.projections:
                self.linear(f"{prefix}{name}", M, D, L, self.engine_free)
            return self.engine_free
        projs = {n: (M, D) for n, M, D in m.projections}
        if include_ffn:
            self.sfu(f"{prefix}norm", L * m.hidden, start)
        drain_v = None
        first = True
        kv_ready = start
        for name in PRE_ATTENTION:
            t0, d0, d1 = self.linear(f"{prefix}{name}", *projs[name], L, self.engine_free)
            if first and kv_prefetch > 0:
                nbytes = 2.0 * kv_prefetch * m.kv_dim * m.kv_bytes
                kv_ready = self.tl.place("kv", f"{prefix}kv_prefetch", t0,
                                         math.ceil(nbytes / hw.kv_bandwidth - 1e-9)).end
            first = False
            drain_v = (d0, d1)
        pieces = ceil_split(_attention_cycles(m, hw, L, kv_len), m.kv_heads)
        attn_end = drain_v[1]
        for j, dur in enumerate(pieces):
            if self.mode == "sequential":
                ready = drain_v[1]
            else:
                ready = drain_v[0] + math.ceil((drain_v[1] - drain_v[0]) * (j + 1) / m.kv_heads)
            attn_end = self.tl.place("attention", f"{prefix}attention", max(ready, kv_ready), dur).end
        kv_write = 2.0 * L * m.kv_dim * m.kv_bytes
        self.tl.place("kv", f"{prefix}kv_writeout", attn_end, math.ceil(kv_write / hw.kv_bandwidth - 1e-9))
        self.engine_free = max(self.engine_free, attn_end)
        self.linear(f"{prefix}wo", *projs["wo"], L, attn_end)
        if include_ffn:
            self.sfu(f"{prefix}norm", L * m.hidden, self.engine_free)
            self.linear(f"{prefix}w1", *projs["w1"], L, self.engine_free)
            self.linear(f"{prefix}w2", *projs["w2"], L, self.engine_free)
            self.sfu(f"{prefix}swiglu", L * m.ffn, self.engine_free)
            self.linear(f"{prefix}w3", *projs["w3"], L, self.engine_free)
        return self.engine_free


def _attention_buffers(model: ModelConfig, mode: str, L: int, kv_len: int) -> int:
    qd = model.heads * model.head_dim
    q = L * qd * 32
    kv = 2 * kv_len * model.kv_dim * 32
    if mode == "sequential":
        # full score matrix and attention output held between ops
        scores = model.heads * L * kv_len * 32
        out = L * qd * 32
    else:
        scores = model.heads * kv_len * 32
        out = qd * 32
    return q + kv + scores + out


def simulate_layer_schedule(mode: str, block: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile,
                            L: int, kv_len: int, topology: EngineTopology | None = None,
                            kv_prefetch: int = 0) -> SimTrace:
    """Q/K/V projections, attention and the output projection of one block under ``mode``."""
    if mode not in SCHEDULE_MODES:
        raise ValueError(f"unknown schedule mode {mode!r}")
    topo = topology or EngineTopology()
    run = _BlockRunner(block, scheme, hw, topo, mode, record=True)
    end = run.attention_block(L, kv_len, kv_prefetch, "", include_ffn=False)
    trace = SimTrace(run.tl.events)
    trace.totals = {"total": end}
    attn_bits = _attention_buffers(block, mode, L, kv_len)
    trace.peak_buffer_bits = run.peak_linear_buffer + attn_bits
    trace.linear_available_bits = topo.on_chip_bits - attn_bits
    trace.stats = {"codebook_reloads": run.counts.get("codebook_reload", 0),
                   "attention_buffer_bits": attn_bits}
    return trace


def simulate_end_to_end(model: ModelConfig, scheme: SchemeConfig, hw: HardwareProfile,
                        topology: EngineTopology | None = None, prompt_len: int = 1, gen_len: int = 0,
                        record: bool = True, mode: str = "hybrid") -> SimTrace:
    """Prefill then token-by-token decode, every block under the given schedule mode."""
    topo = topology or EngineTopology()
    run = _BlockRunner(model, scheme, hw, topo, mode, record)
    prefill_end = 0
    if prompt_len > 0:
        for layer in range(model.depth):
            run.attention_block(prompt_len, prompt_len, 0, f"prefill.l{layer}.")
        prefill_end = run.engine_free
    table_before = run.table_bytes
    for t in range(gen_len):
        past = prompt_len + t
        for layer in range(model.depth):
            run.attention_block(1, past + 1, past, f"decode{t}.l{layer}.")
    total = run.engine_free
    decode_cycles = total - prefill_end
    trace = SimTrace(run.tl.events)
    trace.totals = {"total": total, "prefill": prefill_end, "decode": decode_cycles}
    decode_bytes = run.table_bytes - table_before
    hz = hw.freq_mhz * 1e6
    trace.stats = {
        "prefill_tokens_per_s": prompt_len * hz / prefill_end if prefill_end else 0.0,
        "decode_tokens_per_s": gen_len * hz / decode_cycles if decode_cycles else 0.0,
        "end2end_tokens_per_s": (prompt_len + gen_len) * hz / total if total else 0.0,
        "decode_table_bytes": decode_bytes,
        "decode_bandwidth_utilization": decode_bytes / (decode_cycles * hw.C) if decode_cycles else 0.0,
    }
    trace.peak_buffer_bits = run.peak_linear_buffer
    return trace

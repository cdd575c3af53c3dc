import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lutllm.kernels import quantize_linear
from lutllm.perf import (
    PAPER_EXAMPLE_HW,
    PAPER_EXAMPLE_SCHEME,
    PAPER_EXAMPLE_SHAPE,
    QWEN3_1_7B,
    HardwareProfile,
    LayerShape,
    ModelConfig,
    activation_vq_latency,
    bpcsu_chain_length,
    chain_condition_holds,
    compute_roof,
    coquant_latency,
    coquant_step_cycles,
    crossing_point,
    layer_latency,
    peak_speedup,
    points_to_csv,
    roof,
    roofline_points,
    scalar_baseline_latency,
    scheme_for,
    transformer_latency,
    v80_profile,
    weight_vq_latency,
)
from lutllm.vq import SchemeConfig

EX = PAPER_EXAMPLE_SHAPE
HW = PAPER_EXAMPLE_HW
WVQ = scheme_for("weight_vq", PAPER_EXAMPLE_SCHEME)
AVQ = scheme_for("activation_vq", PAPER_EXAMPLE_SCHEME)
CQ = PAPER_EXAMPLE_SCHEME
POW2 = [2 ** k for k in range(4, 16)]


# ---------------------------------------------------------------- worked example

def test_weight_vq_worked_example():
    est = weight_vq_latency(EX, WVQ, HW)
    assert est.t_lat == 1090
    assert est.t_mem == 96
    assert est.overall == max(est.t_mem, est.t_lat)


def test_activation_vq_worked_example():
    est = activation_vq_latency(EX, AVQ, HW)
    assert (est.t_mem, est.t_lat, est.overall) == (8256, 512, 8256)


def test_coquant_worked_example():
    est = coquant_latency(EX, CQ, HW)
    assert (est.t_mem, est.t_lat, est.chosen_S) == (640, 288, 1)


def test_wrong_scheme_rejected():
    with pytest.raises(ValueError, match="invalid scheme"):
        coquant_latency(EX, WVQ, HW)
    with pytest.raises(ValueError, match="unknown precision"):
        scalar_baseline_latency(EX, "int3", HW)


# ---------------------------------------------------------------- degenerate cases

def test_weight_vq_zero_tokens_keeps_only_expansion():
    est = weight_vq_latency(replace(EX, L=0), WVQ, HW)
    assert est.terms["mac"] == 0
    assert est.t_lat == est.terms["expand"]


def test_single_centroid_activation_search_term():
    est = activation_vq_latency(LayerShape(512, 32, 5), replace(AVQ, c_a=1), HW)
    steps = est.terms["steps"]
    assert est.terms["search"] == steps * 4
    assert est.terms["lookup"] >= est.terms["search"]


def test_single_centroid_coquant_memory():
    s = replace(CQ, c_w=1, c_a=1)
    M, D, G, v = 512, 32, 256, 2
    assert coquant_latency(EX, s, HW).t_mem == (M * D / (G * v) + 4 * D / v) / HW.C


def test_scalar_baselines():
    fp16 = scalar_baseline_latency(EX, "fp16", HW)
    w4 = scalar_baseline_latency(EX, "w4a8", HW)
    assert fp16.t_mem == 512
    assert w4.t_mem == fp16.t_mem / 4
    zero = scalar_baseline_latency(LayerShape(0, 0, 4), "fp16", HW)
    assert zero.overall == 0


# ---------------------------------------------------------------- properties

shapes = st.builds(lambda m, d, l: LayerShape(64 * m, 16 * d, l), st.integers(1, 16), st.integers(1, 16),
                   st.integers(0, 300))


@settings(max_examples=60, deadline=None)
@given(shapes, st.sampled_from([16, 32, 64]), st.sampled_from([4, 8, 16]))
def test_minimization_beats_every_admissible_S(shape, c_a, c_w):
    s = replace(CQ, c_a=c_a, c_w=c_w, G=64)
    est = coquant_latency(shape, s, HW)
    search = 0 if shape.L == 0 else math.log2(c_a) + shape.L - 1
    for S in range(1, shape.D // s.v + 1):
        if (shape.D // s.v) % S:
            continue
        tl = coquant_step_cycles(shape, s, HW, S)
        if tl is not None:
            assert est.t_lat <= shape.D / S * max(search, sum(tl)) + 1e-9
    assert (shape.D // s.v) % est.chosen_S == 0


@settings(max_examples=60, deadline=None)
@given(shapes, st.sampled_from(["weight_vq", "activation_vq", "coquant", "fp16", "scalar_w4a8"]),
       st.sampled_from(["M", "D", "L"]))
def test_monotone_in_problem_size(shape, kind, dim):
    s = scheme_for(kind, replace(CQ, G=64, c_a=16))
    bigger = replace(shape, **{dim: getattr(shape, dim) * 2})
    a, b = layer_latency(shape, s, HW), layer_latency(bigger, s, HW)
    assert b.overall >= a.overall - 1e-9
    assert a.overall == max(a.t_mem, a.t_lat)


@settings(max_examples=60, deadline=None)
@given(shapes, st.sampled_from(["weight_vq", "activation_vq", "coquant", "fp16", "scalar_w4a8"]),
       st.sampled_from(["bandwidth_bytes_per_cycle", "n_ports", "compute_units"]))
def test_monotone_in_resources(shape, kind, field):
    s = scheme_for(kind, replace(CQ, G=64, c_a=16))
    richer = replace(HW, **{field: getattr(HW, field) * 2})
    assert layer_latency(shape, s, richer).overall <= layer_latency(shape, s, HW).overall + 1e-9


@pytest.mark.parametrize("c_w", [2, 4, 16])
def test_byte_counts_match_artifact_sizes(c_w):
    # Tables and indices match exactly when log2(c_w) is a packable width. The load terms charge one
    # 4-byte word per centroid; the artifact stores v floats per centroid.
    rng = np.random.default_rng(0)
    M, D, v, c_a = 128, 64, 2, 16
    W = rng.normal(size=(M, D)).astype(np.float32)
    acts = rng.normal(size=(256, D)).astype(np.float32)
    for kind in ("weight_vq", "activation_vq", "coquant"):
        s = SchemeConfig(kind, G=32, v=v, c_w=c_w, c_a=c_a)
        q = quantize_linear(W, s, act_samples=acts, max_iters=5)
        sb = q.size_breakdown()
        est = layer_latency(LayerShape(M, D, 1), s, HW)
        bytes_of = {k[5:]: t * HW.C for k, t in est.terms.items() if k.startswith("load_")}
        assert bytes_of.get("tables", 0) == sb["tables"], kind
        assert bytes_of.get("indices", 0) == sb["indices"], kind
        act_cb = 4 * (D // v) * c_a * v if s.uses_activation_vq else 0
        weight_cb = sb["codebooks"] - act_cb
        if kind == "weight_vq":
            assert bytes_of["codebooks"] * v == weight_cb
        else:
            assert bytes_of["codebooks"] * v == act_cb
        assert est.bytes_loaded == sum(bytes_of.values())


# ---------------------------------------------------------------- BPCSU chain length

def test_chain_length_example():
    assert bpcsu_chain_length(2048, 512, 16, 64, 2048) == 16
    assert chain_condition_holds(2048, 512, 16, 64, 2048, 16)
    assert not chain_condition_holds(2048, 512, 16, 64, 2048, 32)


def test_chain_length_infinite_bandwidth():
    assert bpcsu_chain_length(2048, 512, 16, 64, math.inf) == 1


def test_full_chain_boundary():
    # l = c_a is valid only when loading covers 32c_a/C + c_a
    C = 64.0
    load = (8 * 64 * 16 * 4096 / 64 + 4 * 4096) / C
    assert load >= 32 * 64 / C + 64
    assert bpcsu_chain_length(4096, 64, 16, 64, C) == 64


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([256, 512, 1024, 2048, 4096]), st.sampled_from([32, 64, 128, 256, 512]),
       st.sampled_from([2, 4, 8, 16]), st.sampled_from([2, 4, 8, 16, 32, 64, 128]),
       st.floats(64, 65536))
def test_chain_length_property(M, G, c_w, c_a, C):
    l = bpcsu_chain_length(M, G, c_w, c_a, C)
    assert l >= 1 and c_a % l == 0
    if chain_condition_holds(M, G, c_w, c_a, C, 1):
        assert chain_condition_holds(M, G, c_w, c_a, C, l)
    assert 2 * l > c_a or not chain_condition_holds(M, G, c_w, c_a, C, 2 * l)


# ---------------------------------------------------------------- transformer extension

def test_single_linear_model_is_the_layer_op():
    model = ModelConfig.single_linear(512, 32)
    for s in (WVQ, AVQ, CQ):
        t = transformer_latency(model, s, HW, prompt_len=7)
        assert t.prefill_cycles == layer_latency(LayerShape(512, 32, 7), s, HW).overall


def test_no_generation_means_prefill_only():
    t = transformer_latency(QWEN3_1_7B, CQ, v80_profile(), prompt_len=32, gen_len=0)
    assert t.end2end_cycles == t.prefill_cycles and t.decode_cycles == 0
    assert t.tokens_per_s("decode") == 0


def test_decode_grows_with_kv():
    hw = v80_profile()
    short = transformer_latency(QWEN3_1_7B, CQ, hw, prompt_len=16, gen_len=4)
    long = transformer_latency(QWEN3_1_7B, CQ, hw, prompt_len=4096, gen_len=4)
    assert long.decode_cycles > short.decode_cycles


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=256, heads=8, kv_group=3, head_dim=32, ffn=512, depth=1)
    with pytest.raises(ValueError):
        ModelConfig(hidden=256, heads=8, kv_group=4, head_dim=16, ffn=512, depth=1)
    assert ModelConfig.from_dict(QWEN3_1_7B.to_dict()) == QWEN3_1_7B


# ---------------------------------------------------------------- roofline

def test_infinite_intensity_hits_compute_roof():
    assert roof(math.inf, 5.0, 1.0) == 5.0
    assert roof(2.0, 5.0, 1.0) == 2.0


def test_activation_vq_peak_over_fp16():
    hw = v80_profile()
    ratio, at = peak_speedup(QWEN3_1_7B, scheme_for("activation_vq"), scheme_for("fp16"), hw, POW2)
    assert 1.5 <= ratio <= 1.9
    cross = crossing_point(QWEN3_1_7B, scheme_for("activation_vq"), scheme_for("fp16"), hw, POW2)
    assert cross is not None and cross <= at


@pytest.mark.parametrize("factor", [0.85, 1.0, 1.2, 1.4])
def test_peak_ratio_robust_to_port_budget(factor):
    hw = v80_profile()
    hw = replace(hw, n_ports=hw.n_ports * factor)
    ratio, _ = peak_speedup(QWEN3_1_7B, scheme_for("activation_vq"), scheme_for("fp16"), hw, POW2)
    assert 1.5 <= ratio <= 1.9


def test_decode_intensity_lower_by_inflation_factor():
    hw = v80_profile()
    avq = roofline_points(QWEN3_1_7B, scheme_for("activation_vq"), hw, [512], "decode", linear_only=True)[0]
    fp = roofline_points(QWEN3_1_7B, scheme_for("fp16"), hw, [512], "decode", linear_only=True)[0]
    inflation = 64 / (2 * 2)
    assert fp.intensity / avq.intensity == pytest.approx(inflation, rel=0.01)


def test_points_bounded_by_roof_and_csv():
    hw = v80_profile()
    pts = roofline_points(QWEN3_1_7B, CQ, hw, [1, 64, 4096], "prefill", linear_only=True)
    for p in pts:
        assert p.attained_ops_per_s <= p.roof_ops_per_s * (1 + 1e-9)
    text = points_to_csv(pts)
    assert text.splitlines()[0].startswith("seq_len,scheme,stage,cycles,tokens_per_s,intensity")
    assert len(text.splitlines()) == 4
    assert compute_roof(QWEN3_1_7B, CQ, hw) > 0
    with pytest.raises(ValueError):
        roofline_points(QWEN3_1_7B, CQ, hw, [1], "train")


# ---------------------------------------------------------------- profiles

def test_bundled_profile():
    hw = v80_profile()
    assert hw.freq_mhz == 227 and hw.C == 1024
    assert hw.C * hw.hz / 1e9 == pytest.approx(232.4, abs=0.1)


def test_profile_errors(tmp_path):
    good = v80_profile().to_dict()
    with pytest.raises(ValueError, match="missing"):
        HardwareProfile.from_dict({k: v for k, v in good.items() if k != "n_ports"})
    with pytest.raises(ValueError, match="unknown"):
        HardwareProfile.from_dict({**good, "warp_size": 32})
    with pytest.raises(ValueError, match="positive"):
        HardwareProfile.from_dict({**good, "compute_units": 0})
    p = tmp_path / "hw.json"
    p.write_text(json.dumps(good))
    assert HardwareProfile.load(p) == v80_profile()

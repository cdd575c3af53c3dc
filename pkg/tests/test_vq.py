import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lutllm.vq import (
    QWEN_SCHEME,
    Codebook,
    GroupLayout,
    SchemeConfig,
    build_lut1d,
    build_lut2d,
    dequantize_table,
    kmeans,
    kmeans_many,
    kmeans_plusplus_init,
    lloyd,
    nearest_centroid,
    nearest_centroids,
    quantize_table_int8,
    quantize_weights,
    reconstruct_weights,
    train_codebook,
)


# ---------------------------------------------------------------- oracles

def lloyd_oracle(x, init, iters=200):
    """Pure-Python Lloyd with the same empty-cluster rule, used as an independent reference."""
    pts = [tuple(float(a) for a in row) for row in x]
    cents = [list(map(float, c)) for c in init]
    labels = None
    for _ in range(iters):
        cost, new = [], []
        for p in pts:
            d = [sum((pi - ci) ** 2 for pi, ci in zip(p, c)) for c in cents]
            j = min(range(len(d)), key=lambda k: (d[k], k))
            new.append(j)
            cost.append(d[j])
        if new == labels:
            break
        labels = new
        for j in range(len(cents)):
            members = [p for p, lab in zip(pts, labels) if lab == j]
            if members:
                cents[j] = [sum(col) / len(members) for col in zip(*members)]
            else:
                far = max(range(len(pts)), key=lambda i: (cost[i], -i))
                cents[j] = list(pts[far])
                cost[far] = 0.0
    return np.array(cents)


def chebyshev_oracle(vec, cents):
    best, arg = None, None
    for k, c in enumerate(cents):
        d = max(abs(float(a) - float(b)) for a, b in zip(vec, c))
        if best is None or d < best:
            best, arg = d, k
    return arg


# ---------------------------------------------------------------- scheme config

def test_scheme_validation():
    with pytest.raises(ValueError):
        SchemeConfig("bogus")
    with pytest.raises(ValueError):
        SchemeConfig("coquant", c_w=12)
    with pytest.raises(ValueError):
        SchemeConfig("coquant", table_bits=16)
    assert QWEN_SCHEME.index_bits == 4
    assert SchemeConfig("coquant", c_w=8).index_bits == 4  # 3 bits round up to a packable width
    assert SchemeConfig.from_dict(QWEN_SCHEME.to_dict()) == QWEN_SCHEME


def test_shape_validation():
    cfg = SchemeConfig("coquant", G=16, v=2, c_w=4, c_a=8)
    cfg.validate_shape(32, 8)
    with pytest.raises(ValueError):
        cfg.validate_shape(32, 7)


def test_codebook_rejects_non_finite():
    with pytest.raises(ValueError):
        Codebook(np.array([[0.0, np.nan]]))


# ---------------------------------------------------------------- k-means

def test_single_centroid_is_the_mean():
    cb = train_codebook(np.array([[1, 3], [2, 3], [3, 3]], dtype=np.float32), 1)
    assert np.allclose(cb.centroids, [[2, 3]])


def test_c_equal_to_distinct_count_is_exact():
    pts = np.array([[6, 2], [4, 5]], dtype=np.float32)
    cb = train_codebook(pts, 2)
    assert sorted(map(tuple, cb.centroids.tolist())) == [(4.0, 5.0), (6.0, 2.0)]


def test_errors():
    with pytest.raises(ValueError, match="no vectors"):
        train_codebook(np.zeros((0, 2)), 2)
    with pytest.raises(ValueError, match="non-finite value"):
        train_codebook(np.array([[np.inf, 0.0]]), 1)


def test_separated_clusters_match_lloyd_oracle():
    rng = np.random.default_rng(5)
    means = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=np.float64)
    pts = np.concatenate([m + rng.normal(0, 0.3, size=(16, 2)) for m in means]).astype(np.float32)
    res = kmeans(pts, 4, seed=2)
    init = kmeans_plusplus_init(pts.astype(np.float64), 4, np.random.default_rng(2))
    ref = lloyd_oracle(pts, init)
    assert np.allclose(res.centroids, ref, atol=1e-9)
    for m in means:
        assert np.min(np.abs(res.centroids - m).max(axis=1)) < 0.3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3))
def test_lloyd_matches_pure_python(seed, c, v):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, v)).astype(np.float32)
    init = kmeans_plusplus_init(x.astype(np.float64), c, np.random.default_rng(seed))
    res = lloyd(x, init, max_iters=200)
    assert np.allclose(res.centroids, lloyd_oracle(x, init), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_objective_non_increasing(seed, c):
    x = np.random.default_rng(seed).normal(size=(50, 2)).astype(np.float32)
    hist = kmeans(x, c, seed=seed).objective_history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))


def test_empty_cluster_reseeded_from_farthest_point():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0]])
    init = np.array([[0.05, 0.0], [100.0, 100.0]])  # second centroid attracts nothing
    res = lloyd(x, init, max_iters=10)
    assert sorted(res.centroids[:, 0].round(6).tolist()) == [0.05, 5.0]


def test_deterministic_for_fixed_seed():
    x = np.random.default_rng(0).normal(size=(100, 2))
    a, b = kmeans(x, 8, seed=4), kmeans(x, 8, seed=4)
    assert np.array_equal(a.centroids, b.centroids)


def test_batched_runs_equal_individual_runs():
    rng = np.random.default_rng(0)
    probs = [rng.normal(size=(32, 2)) for _ in range(12)] + [rng.normal(size=(7, 2)), np.ones((5, 2))]
    seeds = list(range(100, 100 + len(probs)))
    for p, s, r in zip(probs, seeds, kmeans_many(probs, 4, seeds, 50)):
        solo = kmeans(p, 4, 50, s)
        assert np.array_equal(solo.centroids, r.centroids)
        assert np.array_equal(solo.labels, r.labels)
        assert solo.objective_history == r.objective_history


# ---------------------------------------------------------------- nearest centroid

def test_nearest_centroid_worked_example():
    assert nearest_centroid(np.array([6, 3]), Codebook(np.array([[6, 2], [4, 5]]))) == 0


def test_exact_match_and_tie():
    cb = Codebook(np.array([[0, 0], [1, 0], [5, 5], [-1, 0]], dtype=np.float32))
    assert nearest_centroid(np.array([5, 5]), cb) == 2
    assert nearest_centroid(np.array([0, 0]), cb) == 0
    # (0, 0.5) is at Chebyshev distance 1 from centroids 1 and 3 once centroid 0 is moved away
    cb2 = Codebook(np.array([[9, 9], [1, 0], [5, 5], [-1, 0]], dtype=np.float32))
    assert nearest_centroid(np.array([0, 0.5]), cb2) == 1


def test_length_mismatch():
    with pytest.raises(ValueError):
        nearest_centroid(np.array([1.0, 2.0, 3.0]), Codebook(np.zeros((2, 2))))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (8, 3), elements=st.integers(-4, 4).map(float)),
       hnp.arrays(np.float32, (5, 3), elements=st.integers(-4, 4).map(float)))
def test_nearest_matches_exhaustive_scan(vecs, cents):
    got = nearest_centroids(vecs, cents)
    assert got.tolist() == [chebyshev_oracle(v, cents) for v in vecs]


# ---------------------------------------------------------------- weight quantization

def test_group_layout_numbering():
    lay = GroupLayout(M=8, D=4, v=2, G=4)
    ids = lay.group_ids()
    assert ids.shape == (8, 2)
    assert ids[:, 0].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert ids[:, 1].tolist() == [2, 2, 2, 2, 3, 3, 3, 3]
    assert lay.slice_of(3) == 1 and list(lay.rows_of(3)) == [4, 5, 6, 7]


def test_worked_example_weight_index():
    cb = Codebook(np.array([[2, 3], [5, 1]], dtype=np.float32))
    assert nearest_centroid(np.array([1, 3]), cb) == 0


def test_exact_when_groups_have_few_distinct_vectors():
    rng = np.random.default_rng(0)
    pal = rng.normal(size=(4, 2)).astype(np.float32)
    W = pal[rng.integers(0, 4, size=(32, 4))].reshape(32, 8)
    cfg = SchemeConfig("weight_vq", G=16, v=2, c_w=4)
    cbs, table = quantize_weights(W, cfg)
    assert np.array_equal(reconstruct_weights(cbs, table, 2), W)


def test_reconstruction_error_matches_per_group_oracle():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(32, 8)).astype(np.float32)
    cfg = SchemeConfig("weight_vq", G=16, v=2, c_w=4)
    cbs, table = quantize_weights(W, cfg, seed=7)
    got = float(((reconstruct_weights(cbs, table, 2) - W) ** 2).sum())

    lay = GroupLayout(32, 8, 2, 16)
    vecs = W.reshape(32, 4, 2)
    ref = 0.0
    for g in range(lay.num_groups):
        rows = lay.rows_of(g)
        group = vecs[rows.start:rows.stop, lay.slice_of(g)]
        init = kmeans_plusplus_init(group.astype(np.float64), 4, np.random.default_rng(7 + g))
        cents = lloyd_oracle(group, init).astype(np.float32)
        for vec in group:
            ref += float(((cents[chebyshev_oracle(vec, cents)] - vec) ** 2).sum())
    assert abs(got - ref) <= 1e-6 * max(1.0, ref)


def test_weight_quantization_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_weights(np.zeros((32, 8)), SchemeConfig("activation_vq", G=16, v=2))
    with pytest.raises(ValueError):
        quantize_weights(np.zeros((32, 7)), SchemeConfig("weight_vq", G=16, v=2, c_w=4))


def test_index_table_packing_size():
    W = np.random.default_rng(2).normal(size=(64, 16)).astype(np.float32)
    _, table = quantize_weights(W, SchemeConfig("weight_vq", G=32, v=2, c_w=16))
    assert table.nbytes == len(table.packed()) == 64 * 8 * 4 // 8


# ---------------------------------------------------------------- tables

def test_lut1d_worked_example():
    acts = [Codebook(np.array([[6, 2], [4, 5]], dtype=np.float32))]
    lut = build_lut1d(np.array([[1, 3]], dtype=np.float32), acts)
    assert lut.entries[0, 0].tolist() == [12, 19]


def test_lut1d_zero_row_and_naive_oracle():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 4)).astype(np.float32)
    W[2] = 0
    acts = [Codebook(rng.normal(size=(3, 2)).astype(np.float32)) for _ in range(2)]
    lut = build_lut1d(W, acts)
    assert not lut.entries[2].any()
    for m, s, j in itertools.product(range(4), range(2), range(3)):
        ref = np.float32(W[m, 2 * s] * acts[s].centroids[j, 0]) + np.float32(W[m, 2 * s + 1] * acts[s].centroids[j, 1])
        assert lut.entries[m, s, j] == ref


def test_lut2d_worked_example_and_orthogonal_pair():
    acts = [Codebook(np.array([[6, 2], [1, 0]], dtype=np.float32))]
    wcb = [Codebook(np.array([[2, 3], [0, 1]], dtype=np.float32))]
    lut = build_lut2d(wcb, acts, GroupLayout(M=2, D=2, v=2, G=2))
    assert lut.entries[0, 0, 0] == 18
    assert lut.entries[0, 1, 1] == 0


def test_lut2d_naive_oracle():
    rng = np.random.default_rng(4)
    acts = [Codebook(rng.normal(size=(4, 2)).astype(np.float32))]
    wcb = [Codebook(rng.normal(size=(2, 2)).astype(np.float32))]
    lut = build_lut2d(wcb, acts, GroupLayout(M=2, D=2, v=2, G=2))
    for i, j in itertools.product(range(4), range(2)):
        a, w = acts[0].centroids[i], wcb[0].centroids[j]
        assert lut.entries[0, i, j] == np.float32(a[0] * w[0]) + np.float32(a[1] * w[1])


def test_lut2d_misalignment():
    acts = [Codebook(np.zeros((2, 2), np.float32))]
    with pytest.raises(ValueError, match="group/slice misalignment"):
        build_lut2d([Codebook(np.zeros((2, 2), np.float32))] * 3, acts, GroupLayout(M=4, D=2, v=2, G=2))


@pytest.mark.parametrize("M,D,G", [(64, 32, 16), (128, 64, 64), (2048, 64, 512)])
def test_deployed_table_sizes(M, D, G):
    cfg = SchemeConfig("coquant", G=G, v=2, c_w=16, c_a=64)
    lay = GroupLayout(M, D, cfg.v, G)
    acts = [Codebook(np.zeros((64, 2), np.float32))] * (D // 2)
    wcb = [Codebook(np.zeros((16, 2), np.float32))] * lay.num_groups
    lut2 = build_lut2d(wcb, acts, lay).to_int8()
    assert lut2.deployed_nbytes == M * D * 64 * 16 // (G * 2)
    lut1 = build_lut1d(np.zeros((M, D), np.float32), acts).to_int8()
    assert lut1.deployed_nbytes == M * D * 64 // 2
    assert lut1.deployed_nbytes / (2 * M * D) == 64 / (2 * 2) == 16


# ---------------------------------------------------------------- int8 tables

def test_constant_table():
    q, s, z = quantize_table_int8(np.full((3, 3), 7.0, np.float32))
    assert len(set(q.ravel().tolist())) == 1 and s == 1.0
    assert np.all(dequantize_table(q, s, z) == 7.0)


def test_aligned_range():
    q, s, z = quantize_table_int8(np.array([0.0, 255.0]))
    assert q.tolist() == [0, 255] and s == 1.0 and z == 0.0


def test_symmetric_three_values():
    T = np.array([-1.0, 0.0, 1.0], np.float32)
    q, s, z = quantize_table_int8(T)
    assert np.max(np.abs(s * (q - z) - T)) <= s / 2


def test_non_finite_table_rejected():
    with pytest.raises(ValueError):
        quantize_table_int8(np.array([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e4, 1e4, allow_nan=False, width=32)))
def test_round_trip_within_half_step(T):
    q, s, z = quantize_table_int8(T)
    assert q.dtype == np.uint8
    exact = s * (q.astype(np.float64) - z)
    assert np.max(np.abs(exact - T)) <= s / 2 * (1 + 1e-9)
    # the fp32 output adds at most half an ulp of rounding
    out = dequantize_table(q, s, z)
    ulp = np.spacing(np.maximum(np.abs(T), np.abs(out)).astype(np.float32)).astype(np.float64)
    assert np.all(np.abs(out - T) <= s / 2 * (1 + 1e-9) + ulp / 2)


def test_idempotent_on_quantized_grid():
    T = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    q, s, z = quantize_table_int8(T)
    q2, s2, z2 = quantize_table_int8(dequantize_table(q, s, z))
    assert np.array_equal(q, q2)

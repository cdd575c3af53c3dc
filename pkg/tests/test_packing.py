import numpy as np
import pytest
from hypothesis import given, strategies as st

from lutllm.packing import VALID_WIDTHS, pack_indices, packed_nbytes, unpack_indices


def test_four_bit_layout_is_low_bits_first():
    assert pack_indices([0, 1, 2, 3], 4) == bytes([0x10, 0x32])


def test_empty_stream():
    assert pack_indices([], 2) == b""
    assert unpack_indices(b"", 2, 0).size == 0


@pytest.mark.parametrize("width", VALID_WIDTHS)
def test_single_byte_layouts(width):
    per = 8 // width
    vals = [(i + 1) % (1 << width) for i in range(per)]
    expected = sum(v << (i * width) for i, v in enumerate(vals))
    assert pack_indices(vals, width) == bytes([expected])


def test_thousand_random_four_bit_indices_round_trip():
    idx = np.random.default_rng(0).integers(0, 16, size=1000)
    assert np.array_equal(unpack_indices(pack_indices(idx, 4), 4, 1000), idx)


def test_out_of_range_index_rejected():
    with pytest.raises(ValueError, match="out of range"):
        pack_indices([4], 2)
    with pytest.raises(ValueError, match="out of range"):
        pack_indices([-1], 8)


def test_bad_width_rejected():
    with pytest.raises(ValueError):
        pack_indices([0], 3)


def test_short_buffer_rejected():
    with pytest.raises(ValueError):
        unpack_indices(b"\x00", 4, 3)


@given(st.sampled_from(VALID_WIDTHS), st.data())
def test_round_trip_and_size(width, data):
    vals = data.draw(st.lists(st.integers(0, (1 << width) - 1), max_size=200))
    raw = pack_indices(vals, width)
    assert len(raw) == packed_nbytes(len(vals), width)
    assert unpack_indices(raw, width, len(vals)).tolist() == vals


@given(st.sampled_from(VALID_WIDTHS), st.binary(min_size=1, max_size=64))
def test_unpack_then_pack_is_identity_on_full_bytes(width, raw):
    count = len(raw) * 8 // width
    assert pack_indices(unpack_indices(raw, width, count), width) == raw

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipuemu.funcunits import (GOLDEN, MODE_DIRECT, MODE_HASH, MODE_SIMD, HistogramUnit, hash32, hash32_np,
                              hash_wide)


def ref_hash(v):
    """Straight transcription: two xorshift rounds around a 16-bit fold."""
    m = 0xFFFFFFFF
    for rnd in range(2):
        v = (v ^ (v << 13)) & m
        v = v ^ (v >> 7)
        v = (v ^ (v << 17)) & m
        if rnd == 0:
            v ^= v >> 16
    return v


def test_golden_values():
    for k, v in GOLDEN.items():
        assert hash32(k) == v == ref_hash(k)


@settings(max_examples=500)
@given(st.integers(0, 2**32 - 1))
def test_hash_matches_reference_and_vector_form(v):
    assert hash32(v) == ref_hash(v)
    assert int(hash32_np(np.array([v]))[0]) == hash32(v)


def test_hash_spreads_sequential_inputs_evenly():
    h = hash32_np(np.arange(1 << 16)) & 127
    counts = np.bincount(h.astype(np.int64), minlength=128)
    assert counts.min() == counts.max() == 512


def test_hash_wide_hashes_halves():
    assert hash_wide((5 << 32) | 7) == (hash32(7), hash32(5))


def test_histogram_modes():
    h = HistogramUnit(bucket_count=8)
    h.classify(MODE_DIRECT, [1, 9, 3])
    assert h.acc[1] == 2 and h.acc[3] == 1
    h.reset()
    h.classify(MODE_HASH, [1])
    assert h.acc[hash32(1) & 7] == 1
    h.reset()
    h.classify(MODE_SIMD, [1, 0, 1])
    h.classify(MODE_SIMD, [1, 1, 0])
    assert h.acc[:3] == [2, 1, 1]


def test_histogram_saturates_with_sticky_flag():
    h = HistogramUnit(bucket_count=4, acc_bits=4)
    h.classify(MODE_SIMD, [20])
    assert h.acc[0] == 15 and h.overflow
    h.classify(MODE_SIMD, [0])
    assert h.overflow


def test_window_payload_layout():
    h = HistogramUnit()
    h.set_window(256)
    out = None
    for i in range(256):
        out = h.classify(MODE_SIMD, [1, int(i < 128), 0])
    assert out == bytes([0x31, 0x00, 128, 0])  # 256 -> header bit 0, low byte 0
    assert h.acc[0] == 0 and h.window_fill == 0


def test_window_limit():
    with pytest.raises(ValueError):
        HistogramUnit().set_window(512)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=700),
       st.integers(1, 300))
def test_classify_block_equals_row_by_row(rows, window):
    a, b = HistogramUnit(), HistogramUnit()
    a.set_window(window)
    b.set_window(window)
    slow = [(i, p) for i, r in enumerate(rows) if (p := a.classify(MODE_SIMD, r)) is not None]
    fast = b.classify_block(MODE_SIMD, np.array(rows))
    assert slow == fast
    assert a.acc == b.acc


def test_classify_block_hash_mode():
    vals = np.arange(1000).reshape(-1, 2)
    a, b = HistogramUnit(), HistogramUnit()
    for r in vals.tolist():
        a.classify(MODE_HASH, r)
    b.classify_block(MODE_HASH, vals)
    assert a.acc == b.acc

"""Introspection functional units: hash primitive and histogram unit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

M32 = 0xFFFFFFFF

MODE_HASH, MODE_DIRECT, MODE_SIMD = 0, 1, 2
MAX_WINDOW = 511  # window counts must fit in 9 bits of the emitted payload

# Pinned golden outputs; any reimplementation must reproduce these.
GOLDEN = {0: 0x00000000, 1: 0x650734C2, 0xDEADBEEF: 0x27E8F302, 0xFFFFFFFF: 0x5BFF3000}


def _xorshift(v: int) -> int:
    v ^= (v << 13) & M32
    v ^= v >> 7
    v ^= (v << 17) & M32
    return v


def hash32(value: int) -> int:
    """Stateless 32-bit mixer: xorshift(13, 7, 17), fold the high half down, xorshift again.

    Zero maps to zero (every step is linear over GF(2)).
    """
    v = _xorshift(value & M32)
    v ^= v >> 16
    return _xorshift(v)


def _xorshift_np(v):
    v = v ^ ((v << np.uint32(13)) & np.uint32(M32))
    v = v ^ (v >> np.uint32(7))
    v = v ^ ((v << np.uint32(17)) & np.uint32(M32))
    return v


def hash32_np(values) -> np.ndarray:
    """Vectorized hash32 over an array of 32-bit values."""
    v = np.asarray(values, dtype=np.uint64).astype(np.uint32, copy=True)
    v = _xorshift_np(v)
    v = v ^ (v >> np.uint32(16))
    return _xorshift_np(v)


def hash_wide(value: int) -> tuple:
    """Values wider than 32 bits hash each half independently."""
    return hash32(value & M32), hash32((value >> 32) & M32)


@dataclass
class HistogramUnit:
    bucket_count: int = 128
    acc_bits: int = 18
    lane_count: int = 4
    acc: list = field(default_factory=list)
    overflow: bool = False
    classified: int = 0
    window: int = 0  # auto-emit after this many classify calls; 0 = off
    window_fill: int = 0
    window_lanes: int = 0  # lanes in the last classify, reported in the payload header

    def __post_init__(self):
        if self.bucket_count <= 0 or self.bucket_count & (self.bucket_count - 1):
            raise ValueError("bucket_count must be a power of two")
        if not self.acc:
            self.acc = [0] * self.bucket_count

    @property
    def acc_max(self) -> int:
        return (1 << self.acc_bits) - 1

    def reset(self):
        self.acc = [0] * self.bucket_count
        self.overflow = False
        self.classified = 0
        self.window_fill = 0

    def set_window(self, n: int):
        if not 0 <= n <= MAX_WINDOW:
            raise ValueError(f"window must be in 0..{MAX_WINDOW}")
        self.window = n
        self.window_fill = 0

    def _bump(self, b: int, amount: int):
        v = self.acc[b] + amount
        if v > self.acc_max:
            v = self.acc_max
            self.overflow = True
        self.acc[b] = v

    def classify(self, mode: int, values) -> bytes | None:
        """Classify up to four lane values. Returns a window payload when one closes."""
        values = list(values)
        if not 1 <= len(values) <= self.lane_count:
            raise ValueError("lane count out of range")
        mask = self.bucket_count - 1
        if mode == MODE_HASH:
            for v in values:
                self._bump(hash32(v) & mask, 1)
        elif mode == MODE_DIRECT:
            for v in values:
                self._bump(v & mask, 1)
        elif mode == MODE_SIMD:
            for lane, v in enumerate(values):
                self._bump(lane, v & M32)
        else:
            raise ValueError(f"unknown hist mode {mode}")
        self.classified += len(values)
        self.window_lanes = len(values)
        if self.window:
            self.window_fill += 1
            if self.window_fill >= self.window:
                return self._close_window()
        return None

    def classify_wide(self, mode: int, value: int) -> bytes | None:
        """A 64-bit value counts as two lane values, one per 32-bit half."""
        return self.classify(mode, [value & M32, (value >> 32) & M32])

    def payload(self) -> bytes:
        """Header byte (lane count << 4 | bit 8 of each count) then the low byte of each count."""
        n = self.window_lanes or 1
        counts = self.acc[:n]
        head = (n << 4) | sum(((c >> 8) & 1) << i for i, c in enumerate(counts))
        return bytes([head & 0xFF] + [c & 0xFF for c in counts])

    def _close_window(self) -> bytes:
        out = self.payload()
        self.reset()
        return out

    def classify_block(self, mode: int, values: np.ndarray) -> list:
        """Classify ``values`` (shape n x lanes), one row per call, as ``classify`` would.

        Returns ``[(row_index, payload), ...]`` for each window closing inside the block.
        """
        values = np.asarray(values, dtype=np.uint64)
        n, lanes = values.shape
        if not 1 <= lanes <= self.lane_count:
            raise ValueError("lane count out of range")
        out = []
        start = 0
        while start < n:
            if self.window:
                take = min(n - start, self.window - self.window_fill)
            else:
                take = n - start
            seg = values[start:start + take]
            self._add_segment(mode, seg)
            self.classified += take * lanes
            self.window_lanes = lanes
            start += take
            if self.window:
                self.window_fill += take
                if self.window_fill >= self.window:
                    out.append((start - 1, self._close_window()))
        return out

    def _add_segment(self, mode, seg):
        mask = self.bucket_count - 1
        if mode == MODE_SIMD:
            sums = (seg & np.uint64(M32)).sum(axis=0, dtype=np.uint64)
            for lane, s in enumerate(sums.tolist()):
                self._bump(lane, int(s))
            return
        flat = seg.ravel()
        if mode == MODE_HASH:
            idx = hash32_np(flat & np.uint64(M32)) & np.uint32(mask)
        elif mode == MODE_DIRECT:
            idx = flat & np.uint64(mask)
        else:
            raise ValueError(f"unknown hist mode {mode}")
        counts = np.bincount(idx.astype(np.int64), minlength=self.bucket_count)
        for b in np.nonzero(counts)[0].tolist():
            self._bump(b, int(counts[b]))

"""Behavioral soft-logic blocks clocked alongside an IPU.

A block sees every delivered HIT cycle and talks to the core only through its
eight SLRegs (mapped at 0x5000..0x501C). Blocks never touch IORegs or memory.
"""
from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from types import MappingProxyType

from .errors import BlockFault

M32 = 0xFFFFFFFF
SLREG_COUNT = 8
LINE_BYTES = 64


class SoftLogicBlock:
    """Base class. Subclasses override ``on_cycle`` and optionally the SLReg hooks."""

    name = "base"
    version = "1.0"

    def __init__(self):
        self.slregs = [0] * SLREG_COUNT
        self.view = {}  # last value seen per ioreg; a private copy, never the machine's

    def clock(self, cycle: int, updates) -> None:
        """Called once per delivered HIT cycle with that cycle's (ioreg, value) updates."""
        if not updates:
            return
        fresh = {}
        for r, v in updates:
            fresh[r] = v
        self.view.update(fresh)
        self.on_cycle(cycle, fresh)

    def on_cycle(self, cycle: int, fresh: dict) -> None:
        pass

    def read_slreg(self, i: int) -> int:
        self._check(i)
        return self.slregs[i]

    def write_slreg(self, i: int, v: int) -> None:
        self._check(i)
        self.slregs[i] = v & M32

    def reset(self) -> None:
        self.slregs = [0] * SLREG_COUNT
        self.view = {}

    def _check(self, i):
        if not 0 <= i < SLREG_COUNT:
            raise BlockFault(f"{self.name}: SLReg index {i} out of range")

    def state(self) -> dict:
        return {"name": self.name, "version": self.version, "slregs": list(self.slregs)}


class NullBlock(SoftLogicBlock):
    """Does nothing; handy for isolation tests."""

    name = "null"


# ---------------------------------------------------------------- prefetcher model

@dataclass
class PrefetchCounters:
    demand_accesses: int = 0
    demand_misses: int = 0
    prefetches_issued: int = 0
    useful_prefetches: int = 0

    def as_tuple(self) -> tuple:
        return (self.demand_accesses, self.demand_misses, self.prefetches_issued, self.useful_prefetches)


@dataclass
class PrefetchEmuState:
    """Set-associative L1I plus an entangling table trained on pairs of misses.

    On a miss the line is filled at once (every miss is assumed to hit in L2).
    The table maps a source line to at most ``dests`` destination lines; a miss
    on line B entangles B with the oldest miss still in the history window.
    """

    size_bytes: int = 32 * 1024
    ways: int = 8
    line_bytes: int = LINE_BYTES
    sources: int = 256
    dests: int = 2
    history: int = 4
    cache_enabled: bool = True
    prefetch_enabled: bool = True
    counters: PrefetchCounters = field(default_factory=PrefetchCounters)

    def __post_init__(self):
        n_sets = self.size_bytes // (self.ways * self.line_bytes)
        if n_sets <= 0 or n_sets & (n_sets - 1):
            raise ValueError("cache geometry must give a power-of-two set count")
        if self.line_bytes & (self.line_bytes - 1):
            raise ValueError("line size must be a power of two")
        if self.sources < 1 or self.dests < 1 or self.history < 1:
            raise ValueError("table geometry must be positive")
        self.n_sets = n_sets
        self.line_shift = self.line_bytes.bit_length() - 1
        self.sets = [OrderedDict() for _ in range(n_sets)]  # line -> prefetched flag, LRU first
        self.table = OrderedDict()  # source line -> list of destinations, LRU first
        self.recent = deque(maxlen=self.history)

    def _insert(self, line: int, prefetched: bool):
        s = self.sets[line & (self.n_sets - 1)]
        if len(s) >= self.ways:
            s.popitem(last=False)
        s[line] = prefetched

    def _learn(self, src: int, dst: int):
        dl = self.table.get(src)
        if dl is None:
            if len(self.table) >= self.sources:
                self.table.popitem(last=False)
            self.table[src] = [dst]
            return
        self.table.move_to_end(src)
        if dst in dl:
            return
        if len(dl) >= self.dests:
            dl.pop(0)
        dl.append(dst)

    def observe(self, pc: int) -> bool:
        """One demand fetch. Returns True on a hit."""
        if not self.cache_enabled:
            return True
        c = self.counters
        c.demand_accesses += 1
        line = pc >> self.line_shift
        s = self.sets[line & (self.n_sets - 1)]
        mark = s.get(line)
        if mark is not None:
            s.move_to_end(line)
            if mark:
                c.useful_prefetches += 1
                s[line] = False
            return True
        c.demand_misses += 1
        self._insert(line, False)
        if self.prefetch_enabled:
            dl = self.table.get(line)
            if dl is not None:
                self.table.move_to_end(line)
                for d in dl:
                    ds = self.sets[d & (self.n_sets - 1)]
                    if d not in ds:
                        self._insert(d, True)
                        c.prefetches_issued += 1
            if self.recent and self.recent[0] != line:
                self._learn(self.recent[0], line)
            self.recent.append(line)
        return False


def prefetch_observe(state: PrefetchEmuState, fetch_pc: int) -> PrefetchEmuState:
    state.observe(fetch_pc)
    return state


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def stats_from_counters(accesses: int, misses: int, issued: int, useful: int) -> dict:
    return {
        "coverage": _ratio(useful, useful + misses),
        "accuracy": _ratio(useful, issued),
        "miss_rate": _ratio(misses, accesses),
    }


def prefetch_stats(state: PrefetchEmuState) -> dict:
    return stats_from_counters(*state.counters.as_tuple())


# SLReg layout of the prefetch block
PF_ACCESSES, PF_MISSES, PF_ISSUED, PF_USEFUL, PF_CTRL, PF_MASK, PF_ID, PF_SPARE = range(8)
DELTA_MAX = (1 << 24) - 1
PF_ID_VALUE = 0x50460001  # "PF", version 1


class PrefetchBlock(SoftLogicBlock):
    """Drives a PrefetchEmuState from the fetch-pc / fetch-valid signals.

    SLRegs 0-3 read the counter deltas since the last clear, saturated to 24 bits.
    Writing bit 0 of SLReg 4 clears the deltas. SLReg 5 is the enable mask
    (bit 0 cache model, bit 1 prefetching). SLReg 6 reads a fixed block id.
    """

    name = "prefetch"
    version = "1.0"

    def __init__(self, pc_reg: int = 0, valid_reg: int = 1, **geometry):
        super().__init__()
        self.pc_reg = pc_reg
        self.valid_reg = valid_reg
        self.geometry = dict(geometry)
        self.emu = PrefetchEmuState(**geometry)
        self.base = (0, 0, 0, 0)
        self.slregs[PF_MASK] = int(self.emu.cache_enabled) | int(self.emu.prefetch_enabled) << 1
        self.slregs[PF_ID] = PF_ID_VALUE

    def on_cycle(self, cycle, fresh):
        # fetch-valid is a level; a fetch is any cycle that carries a fetch pc while it is high
        if not self.view.get(self.valid_reg, 0) & 1:
            return
        pc = fresh.get(self.pc_reg)
        if pc is None:
            return
        self.emu.observe(pc)

    def delta(self, i: int) -> int:
        return self.emu.counters.as_tuple()[i] - self.base[i]

    def read_slreg(self, i):
        self._check(i)
        if i < 4:
            return min(self.delta(i), DELTA_MAX)
        return self.slregs[i]

    def write_slreg(self, i, v):
        self._check(i)
        v &= M32
        if i < 4 or i == PF_ID:
            return  # read-only
        if i == PF_CTRL:
            if v & 1:
                self.base = self.emu.counters.as_tuple()
            return
        if i == PF_MASK:
            self.emu.cache_enabled = bool(v & 1)
            self.emu.prefetch_enabled = bool(v & 2)
        self.slregs[i] = v

    def reset(self):
        super().reset()
        self.emu = PrefetchEmuState(**self.geometry)
        self.base = (0, 0, 0, 0)
        self.slregs[PF_MASK] = int(self.emu.cache_enabled) | int(self.emu.prefetch_enabled) << 1
        self.slregs[PF_ID] = PF_ID_VALUE

    def state(self) -> dict:
        out = super().state()
        out["counters"] = self.emu.counters.as_tuple()
        out["stats"] = prefetch_stats(self.emu)
        return out


BLOCKS = MappingProxyType({"null": NullBlock, "prefetch": PrefetchBlock})


def make_block(name: str, **params) -> SoftLogicBlock:
    """Instantiate a registered block by name."""
    try:
        cls = BLOCKS[name]
    except KeyError:
        raise ValueError(f"unknown soft-logic block {name!r}; choose from {', '.join(BLOCKS)}") from None
    return cls(**params)

from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from ipuemu import analytics
from ipuemu.errors import BlockFault
from ipuemu.isa import assemble
from ipuemu.machine import Command, IpuState, Status
from ipuemu.softlogic import (DELTA_MAX, PF_ID_VALUE, NullBlock, PrefetchBlock, PrefetchEmuState, make_block,
                              prefetch_stats, stats_from_counters)
from ipuemu.trace import builtin_abi, synth_trace


class RefPrefetcher:
    """Plain-list model of the cache plus entangling table, written from the
    behavioural description only. Lists are kept most-recent-last."""

    def __init__(self, n_sets=64, ways=8, sources=256, dests=2, history=4, prefetch=True):
        self.n_sets, self.ways = n_sets, ways
        self.sources, self.dests, self.history = sources, dests, history
        self.prefetch = prefetch
        self.sets = [[] for _ in range(n_sets)]  # [line, prefetched]
        self.table = []  # [src, [dsts]]
        self.hist = []
        self.acc = self.miss = self.issued = self.useful = 0

    def _find(self, line):
        for e in self.sets[line % self.n_sets]:
            if e[0] == line:
                return e
        return None

    def _fill(self, line, pf):
        s = self.sets[line % self.n_sets]
        if len(s) == self.ways:
            s.pop(0)
        s.append([line, pf])

    def access(self, pc):
        line = pc // 64
        self.acc += 1
        e = self._find(line)
        if e is not None:
            s = self.sets[line % self.n_sets]
            s.remove(e)
            s.append(e)
            if e[1]:
                self.useful += 1
                e[1] = False
            return
        self.miss += 1
        self._fill(line, False)
        if not self.prefetch:
            return
        for t in self.table:
            if t[0] == line:
                self.table.remove(t)
                self.table.append(t)
                for d in t[1]:
                    if self._find(d) is None:
                        self._fill(d, True)
                        self.issued += 1
                break
        if self.hist and self.hist[0] != line:
            src = self.hist[0]
            for t in self.table:
                if t[0] == src:
                    self.table.remove(t)
                    self.table.append(t)
                    if line not in t[1]:
                        if len(t[1]) == self.dests:
                            t[1].pop(0)
                        t[1].append(line)
                    break
            else:
                if len(self.table) == self.sources:
                    self.table.pop(0)
                self.table.append([src, [line]])
        self.hist.append(line)
        if len(self.hist) > self.history:
            self.hist.pop(0)

    def counters(self):
        return (self.acc, self.miss, self.issued, self.useful)


def pcs_of(scenario, seed, length):
    g = synth_trace(scenario, seed, length)
    pc, valid = g.trace.values[0], g.trace.values[1]
    return [int(p) for p, v in zip(pc, valid) if v & 1]


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("prefetch", [True, False])
def test_emulator_matches_reference(seed, prefetch):
    pcs = pcs_of("pc-entangled-pairs", seed, 20_000)
    emu = PrefetchEmuState(prefetch_enabled=prefetch)
    ref = RefPrefetcher(prefetch=prefetch)
    for pc in pcs:
        emu.observe(pc)
        ref.access(pc)
    assert emu.counters.as_tuple() == ref.counters()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 63).map(lambda k: 0x10000 + (k % 16) * 4096 + (k // 16) * 64), max_size=400))
def test_emulator_matches_reference_on_small_geometry(seq):
    emu = PrefetchEmuState(size_bytes=1024, ways=2, sources=4, dests=2, history=3)
    ref = RefPrefetcher(n_sets=8, ways=2, sources=4, dests=2, history=3)
    for pc in seq:
        emu.observe(pc)
        ref.access(pc)
    assert emu.counters.as_tuple() == ref.counters()


def test_loop_reaches_zero_steady_state_misses():
    emu = PrefetchEmuState()
    pcs = pcs_of("pc-loop", 0, 50_000)
    for pc in pcs[:1000]:
        emu.observe(pc)
    warm = emu.counters.demand_misses
    assert warm <= 4
    for pc in pcs[1000:]:
        emu.observe(pc)
    assert emu.counters.demand_misses == warm


def test_prefetch_never_increases_misses_on_entangled_pairs():
    for seed in range(3):
        pcs = pcs_of("pc-entangled-pairs", seed, 30_000)
        on, off = PrefetchEmuState(), PrefetchEmuState(prefetch_enabled=False)
        for pc in pcs:
            on.observe(pc)
            off.observe(pc)
        assert on.counters.demand_misses < off.counters.demand_misses
        assert on.counters.useful_prefetches > 0 and off.counters.prefetches_issued == 0


def test_cache_disabled_counts_nothing():
    emu = PrefetchEmuState(cache_enabled=False)
    assert emu.observe(0x1234)
    assert emu.counters.as_tuple() == (0, 0, 0, 0)


def test_zero_denominators_give_zero():
    assert stats_from_counters(0, 0, 0, 0) == {"coverage": 0.0, "accuracy": 0.0, "miss_rate": 0.0}
    assert prefetch_stats(PrefetchEmuState()) == stats_from_counters(0, 0, 0, 0)
    s = stats_from_counters(100, 10, 8, 6)
    assert s["coverage"] == pytest.approx(6 / 16) and s["accuracy"] == 0.75 and s["miss_rate"] == 0.1


def test_bad_geometry_rejected():
    with pytest.raises(ValueError):
        PrefetchEmuState(size_bytes=3000)
    with pytest.raises(ValueError):
        make_block("nope")


def test_prefetch_block_slregs():
    b = PrefetchBlock()
    assert b.read_slreg(6) == PF_ID_VALUE and b.read_slreg(5) == 3
    for c, pc in enumerate([0, 64, 0, 4096 * 64]):
        b.clock(c, ((0, pc), (1, 1)))
    b.clock(9, ((0, 128),))  # fetch-valid stays 1 from the view
    assert b.read_slreg(0) == 5 and b.read_slreg(1) == 4
    b.write_slreg(4, 1)
    assert [b.read_slreg(i) for i in range(4)] == [0, 0, 0, 0]
    b.write_slreg(0, 99)  # read-only
    assert b.read_slreg(0) == 0
    b.write_slreg(5, 0)
    b.clock(10, ((0, 1 << 20),))
    assert b.read_slreg(0) == 0
    with pytest.raises(BlockFault):
        b.read_slreg(8)


def test_prefetch_block_saturates_at_24_bits():
    b = PrefetchBlock()
    b.emu.counters.demand_accesses = 1 << 30
    assert b.read_slreg(0) == DELTA_MAX


def test_block_does_not_disturb_programs_that_ignore_it():
    img = analytics.util_program()
    g = synth_trace("gpu-activity-phases", 1, 3000)
    snaps = []
    for block in (None, NullBlock(), PrefetchBlock(pc_reg=0, valid_reg=1)):
        m = IpuState(block=block)
        m.load_image(img)
        m.run_trace(g.trace)
        s = m.snapshot()
        s.pop("block", None)
        snaps.append(s)
    assert snaps[0] == snaps[1] == snaps[2]


def test_block_fault_moves_machine_to_error():
    src = "_main:\n    lui r1, 0x5\n    lw r2, 0(r1)\n    ret\n"
    m = IpuState(block=NullBlock())
    m.load_image(assemble(src))

    def boom(i):
        raise RuntimeError("block died")

    m.block.read_slreg = boom
    rep = m.run_trace(synth_trace("pc-loop", 0, 10).trace)
    assert rep.status == Status.ERROR


def _machine_counters(seed, length, mask):
    m = IpuState(block=PrefetchBlock(), idealized=True)
    m.load_image(analytics.prefetch_program())
    m.block.write_slreg(5, mask)
    m.run_trace(synth_trace("pc-entangled-pairs", seed, length).trace)
    m.host_control(Command.FINALIZE)
    return analytics.prefetch_report(m.packets).counters, m.block.emu.counters.as_tuple()


def test_prefetch_program_reports_block_counters():
    reported, internal = _machine_counters(2, 20_000, 3)
    assert tuple(reported) == internal
    again, _ = _machine_counters(2, 20_000, 3)
    assert again == reported
    off, _ = _machine_counters(2, 20_000, 1)
    assert off[1] >= reported[1] and off[2] == 0

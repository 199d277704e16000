"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also written to the terminal when output is captured.
"""
from __future__ import annotations

import random
import time
from fractions import Fraction

import pytest

from conftest import random_instruction
from ipuemu import analytics, isa
from ipuemu.errors import ImageTooLarge, InvalidTransition
from ipuemu.hostapi import DeviceRegistry, bandwidth_report, ipu_config_image, run_device
from ipuemu.machine import Command, IpuState, Status
from ipuemu.softlogic import PrefetchBlock, PrefetchEmuState
from ipuemu.trace import CycleRecord, Trace, builtin_abi, synth_trace
from test_isa import DATA
from test_softlogic import RefPrefetcher


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f}s)")
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_rate_arithmetic(verdict):
    t0 = time.perf_counter()
    # PICS: one 6-byte sample every 400k cycles at 1 GHz
    g = synth_trace("pics-events", 0, 1_200_000)
    reg = DeviceRegistry()
    d = reg.add(idealized=True)
    ipu_config_image(reg, d, analytics.pics_program())
    _, pk = run_device(reg, d, g.trace, finalize=False)
    pics = bandwidth_report(pk, 1e9, cycles=g.trace.length).aggregate
    # utilization: one 4-byte window record every 256 cycles at 1 GHz
    u = synth_trace("gpu-activity-phases", 0, 256 * 4000)
    d = reg.add()
    ipu_config_image(reg, d, analytics.util_program())
    _, pk = run_device(reg, d, u.trace, finalize=False)
    util = bandwidth_report(pk, 1e9, cycles=u.trace.length).aggregate
    # 108 IPUs, 3 payload bytes per 256 cycles, 1.4 GHz; every IPU really runs
    fleet = DeviceRegistry()
    all_pk = []
    for k in range(108):
        dev = fleet.add()
        ipu_config_image(fleet, dev, analytics.util_program())
        _, pk = run_device(fleet, dev, synth_trace("gpu-activity-phases", k, 256 * 64).trace, finalize=False)
        all_pk += pk
    agg = bandwidth_report(all_pk, 1.4e9, cycles=256 * 64, payload_only=True).aggregate
    ok = (pics == 15_000 and abs(util / 15.6e6 - 1) <= 0.005 and abs(agg / 1.7e9 - 1) <= 0.05)
    verdict(1, ok, f"pics={pics:.0f} B/s util={util:.0f} B/s aggregate={agg:.4g} B/s",
            time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 2

LONG_MAIN = "_main:\n" + "    nop\n" * 200 + "    ret\n"
SHORT = "init:\n    regtimer 50, tick\n_main:\n    ret\ntick:\n    ret\nfinish:\n    li r1, 0x10\n    emit r1, 2\n    ret\n"
FAULTY = "_main:\n    lui r1, 0x40\n    lw r1, 0(r1)\n    ret\n"


def _build(state):
    m = IpuState()
    if state == "UNDEFINED":
        return m
    src = LONG_MAIN if state == "ACTIVE_RUNNING" else FAULTY if state == "ERROR" else SHORT
    m.load_image(isa.assemble(src))
    if state == "PAUSED+triggers":
        m.host_control(Command.CONFIG_START, 7)
        m.host_control(Command.CONFIG_STOP, 9)
    if state in ("ACTIVE_PAUSED", "ACTIVE_RUNNING", "ERROR"):
        m.host_control(Command.RESUME)
    if state in ("ACTIVE_RUNNING", "ERROR"):
        m.deliver_cycle(CycleRecord(0, ((0, 1),)))
    if state == "FINALIZE":
        m.status = Status.FINALIZE
        m._ctx = "finish"
        m.pc = isa.FINISH_BASE
    return m


BUILD_STATES = ("UNDEFINED", "PAUSED", "PAUSED+triggers", "ACTIVE_PAUSED", "ACTIVE_RUNNING", "FINALIZE", "ERROR")
STIMULI = {
    "PAUSE": lambda m: m.host_control(Command.PAUSE),
    "RESUME": lambda m: m.host_control(Command.RESUME),
    "FINALIZE": lambda m: m.host_control(Command.FINALIZE),
    "CONFIG_START": lambda m: m.host_control(Command.CONFIG_START, 7),
    "CONFIG_STOP": lambda m: m.host_control(Command.CONFIG_STOP, 9),
    "LOAD": lambda m: m.load_image(isa.assemble(SHORT)),
    "ARRIVAL": lambda m: m.deliver_cycle(CycleRecord(1, ((0, 1),))),
    "ARRIVAL@TS": lambda m: m.deliver_cycle(CycleRecord(1, ((0, 1),), 7)),
    "ARRIVAL@TE": lambda m: m.deliver_cycle(CycleRecord(1, ((0, 1),), 9)),
    "QUIET": lambda m: m.deliver_cycle(CycleRecord(1, ())),
    "STEP": lambda m: m.step(),
    "TRACE": lambda m: m.run_trace(Trace.from_records(builtin_abi("table1"), [], 500)),
}


class WatchedIpu(IpuState):
    """Records the state each arrival meets, so drops can be attributed.

    The state is read after the cycle has been counted: a timer that expires on
    the arrival's own cycle dispatches its handler first.
    """

    bad_drops = 0
    _met = None

    def _count_cycle(self, c):
        super()._count_cycle(c)
        self._met = self.status

    def _on_record(self, c, upd, addr):
        self._met = None
        before = self.counters["dropped_arrivals"]
        super()._on_record(c, upd, addr)
        if self.counters["dropped_arrivals"] != before and self._met != Status.ACTIVE_RUNNING:
            self.bad_drops += 1


def test_criterion_2_state_machine_closure(verdict):
    t0 = time.perf_counter()
    problems = []
    cells = 0
    for state in BUILD_STATES:
        for name, stim in STIMULI.items():
            m = _build(state)
            pre = m.status
            d0 = m.counters["dropped_arrivals"]
            try:
                stim(m)
            except InvalidTransition:
                if m.status != pre:
                    problems.append(f"{state}/{name}: rejected but state moved")
            cells += 1
            if not isinstance(m.status, Status):
                problems.append(f"{state}/{name}: landed outside the six states")
            if m.counters["dropped_arrivals"] != d0 and pre != Status.ACTIVE_RUNNING:
                problems.append(f"{state}/{name}: drop outside ACTIVE_RUNNING")
    rng = random.Random(2024)
    img = analytics.pics_program(20_000)
    drops = bad_cons = bad_where = 0
    for seed in range(100):
        g = synth_trace("pics-events", seed, 100_000, quiet=rng.uniform(0.5, 0.9))
        m = WatchedIpu(clock_ratio=rng.choice([Fraction(1, 8), Fraction(1, 2), Fraction(3, 4), 1, 2]),
                       sample_every=rng.choice([1, 1, 2, 3]))
        m.load_image(img)
        rep = m.run_trace(g.trace)
        c = rep.counters
        drops += c["dropped_arrivals"]
        bad_cons += c["delivered"] != c["consumed"] + c["dropped_arrivals"]
        bad_where += m.bad_drops
    ok = not problems and bad_cons == 0 and bad_where == 0 and drops > 0
    verdict(2, ok, f"{cells} state x stimulus cells, {len(problems)} problems; 100 traces, {drops} drops, "
                   f"{bad_cons} conservation failures, {bad_where} drops outside ACTIVE_RUNNING",
            time.perf_counter() - t0)
    assert ok, problems


# ---------------------------------------------------------------- 3

def _pics_table(trace, period):
    m = IpuState(idealized=True)
    m.load_image(analytics.pics_program(period))
    m.run_trace(trace)
    m.host_control(Command.FINALIZE)
    return analytics.pics_postprocess(m.packets, period, trace.length)


def test_criterion_3_pics_oracle(verdict):
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(50):
        g = synth_trace("pics-events", seed, 1_000_000)
        if _pics_table(g.trace, analytics.PICS_PERIOD) != analytics.pics_recount(g.trace, analytics.PICS_PERIOD):
            mismatches.append(seed)
    bad_micro = []
    for seed in range(5):
        g = synth_trace("pics-events", 100 + seed, 1_000_000, hot=0.995)
        tot = _pics_table(g.trace, analytics.PICS_PERIOD).pc_totals()
        s = sum(tot.values())
        above = [pc for pc, c in tot.items() if c > 0.99 * s]
        if above != [g.truth["pcs"][0]]:
            bad_micro.append(seed)
    ok = not mismatches and not bad_micro
    verdict(3, ok, f"50 traces x 1e6 cycles, {len(mismatches)} table mismatches; "
                   f"5 dominant-PC traces, {len(bad_micro)} without a single >99% PC",
            time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 4

# the synthetic corpus: default, two-flag and denser event mixes at several IPU clocks;
# the 1/1024 entries run fast enough that nothing is dropped
CORPUS = [
    (0, {}, 1), (1, {}, 1), (2, {}, 1), (3, {"burst2": 0.3}, 1), (4, {"burst2": 0.3}, 1),
    (5, {"quiet": 0.8}, 1), (6, {}, 2), (7, {"quiet": 0.8}, 2), (8, {}, Fraction(1, 64)),
    (9, {"burst2": 0.3}, Fraction(1, 1024)), (10, {}, Fraction(1, 1024)),
]


def test_criterion_4_dual_run_bounds(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    failures = []
    no_drop_runs = 0
    for seed, opts, ratio in CORPUS:
        g = synth_trace("pics-events", seed, 1_000_000, **opts)
        rep = analytics.dual_run(analytics.pics_program(), g.trace, analytics.PICS_PERIOD, clock_ratio=ratio)
        worst = max(worst, rep.dropped_pc_fraction)
        if rep.dropped_pc_fraction >= 1e-3 or not rep.heavy_set_equal:
            failures.append(seed)
        if rep.dropped_arrivals == 0:
            no_drop_runs += 1
            if rep.max_rel_error != 0:
                failures.append(seed)
    ok = not failures and no_drop_runs > 0
    verdict(4, ok, f"{len(CORPUS)} corpus traces, worst dropped-PC fraction {worst:.2e}, "
                   f"{no_drop_runs} drop-free runs with zero error, failures {failures}",
            time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_prefetch_oracle(verdict):
    t0 = time.perf_counter()
    bad = []
    for seed in range(100):
        length = 5_000 + (seed * 7919) % 95_000
        scenario = "pc-loop" if seed % 10 == 0 else "pc-entangled-pairs"
        g = synth_trace(scenario, seed, length)
        on = seed % 4 != 3
        m = IpuState(block=PrefetchBlock(prefetch_enabled=on), idealized=True)
        m.load_image(analytics.prefetch_program())
        m.run_trace(g.trace)
        m.host_control(Command.FINALIZE)
        reported = analytics.prefetch_report(m.packets).counters
        ref = RefPrefetcher(prefetch=on)
        for pc, v in zip(g.trace.values[0].tolist(), g.trace.values[1].tolist()):
            if v & 1:
                ref.access(pc)
        if tuple(reported) != ref.counters():
            bad.append(seed)
    loop_bad = 0
    for seed in range(5):
        pcs = synth_trace("pc-loop", seed, 100_000).trace.values[0].tolist()
        emu = PrefetchEmuState()
        for pc in pcs[:2000]:
            emu.observe(pc)
        warm = emu.counters.demand_misses
        for pc in pcs[2000:]:
            emu.observe(pc)
        loop_bad += emu.counters.demand_misses != warm
    ab_bad = 0
    for seed in range(5):
        g = synth_trace("pc-entangled-pairs", seed, 100_000)
        rates = []
        for pf in (True, False):
            e = PrefetchEmuState(prefetch_enabled=pf)
            for pc in g.trace.values[0].tolist():
                e.observe(pc)
            rates.append(e.counters.demand_misses / e.counters.demand_accesses)
        ab_bad += rates[0] > rates[1]
    ok = not bad and not loop_bad and not ab_bad
    verdict(5, ok, f"100 traces, {len(bad)} counter mismatches; {loop_bad} loops with steady-state misses; "
                   f"{ab_bad} A/B inversions", time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 6 and 9

def test_criterion_6_utilization_exactness(verdict):
    t0 = time.perf_counter()
    bad = []
    for seed in range(2):
        length = 10_000_000 + 77 * seed
        g = synth_trace("gpu-activity-phases", seed, length)
        m = IpuState()
        m.load_image(analytics.util_program())
        rep = m.run_trace(g.trace)
        ws = analytics.util_windows(m.packets)
        exact = [w.counts for w in ws] == [w.counts for w in analytics.util_recount(g.trace)]
        bins = analytics.util_classify(ws).window_bins == g.truth["window_bins"]
        cadence = len(ws) == length // 256
        if not (exact and bins and cadence and rep.counters["dropped_arrivals"] == 0):
            bad.append(seed)
    verdict(6, not bad, f"2 traces x 1e7 cycles, failures {bad}", time.perf_counter() - t0)
    assert not bad


def test_criterion_9_throughput(verdict):
    g = synth_trace("gpu-activity-phases", 9, 4_000_000)
    m = IpuState()
    m.load_image(analytics.util_program())
    t0 = time.perf_counter()
    m.run_trace(g.trace)
    dt = time.perf_counter() - t0
    rate = g.trace.length / dt
    ok = rate >= 1e6 and not m.idealized
    verdict(9, ok, f"faithful util emulation at {rate / 1e6:.2f}M trace cycles/s", dt)
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_isa_roundtrips(verdict):
    t0 = time.perf_counter()
    rng = random.Random(77)
    bad = 0
    for _ in range(100_000):
        ins = random_instruction(rng)
        w = isa.encode(ins)
        if isa.decode(w[0], w[1] if len(w) > 1 else None) != ins:
            bad += 1
    fix = []
    for name in analytics.shipped_programs():
        abi = builtin_abi(name)
        a = isa.assemble(analytics.program_source(name), abi, name=name)
        b = isa.assemble(isa.disassemble(a), abi, name=name)
        c = isa.assemble(isa.disassemble(b), abi, name=name)
        fix.append((a.body, a.finish, a.main) == (b.body, b.finish, b.main) == (c.body, c.finish, c.main))
    frag = isa.assemble((DATA / "psv_fragment.s").read_text(), builtin_abi("pics"), fragment=True)
    f2 = isa.assemble(isa.disassemble(frag), builtin_abi("pics"))
    f3 = isa.assemble(isa.disassemble(f2), builtin_abi("pics"))
    fix.append((frag.body, frag.finish) == (f2.body, f2.finish) == (f3.body, f3.finish))
    ok = bad == 0 and all(fix)
    verdict(7, ok, f"1e5 random instructions, {bad} failures; {sum(fix)}/{len(fix)} program fixpoints",
            time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_capacity_and_layout(verdict):
    t0 = time.perf_counter()
    body = "_main:\n" + "    nop\n" * (isa.FINISH_BASE - 1) + "    ret\n"
    fin = "finish:\n" + "    nop\n" * (isa.FINISH_SLOTS - 1) + "    ret\n"
    accept = isa.assemble(body + fin).n_instructions == 2048
    try:
        isa.assemble(body + fin.replace("finish:\n", "finish:\n    nop\n"))
        reject = False
    except ImageTooLarge:
        reject = True
    layout = []
    for name in analytics.shipped_programs():
        im = {"pics": analytics.pics_program, "util": analytics.util_program,
              "prefetch": analytics.prefetch_program}[name]()
        addrs = [a for a, _ in isa.decode_image(im)]
        m = IpuState()
        m.load_image(im)
        layout.append(addrs[0] == 0 and min(a for a in addrs if a >= isa.FINISH_BASE) == 2032
                      and m.imem[2032] == im.finish[0] and m.imem[0] == im.body[0])
    ok = accept and reject and isa.FINISH_BASE == 2032 and all(layout)
    verdict(8, ok, f"2048 accepted={accept}, 2049 rejected={reject}, layout ok on {sum(layout)}/{len(layout)} "
                   f"shipped images", time.perf_counter() - t0)
    assert ok

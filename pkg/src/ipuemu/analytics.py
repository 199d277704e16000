"""Bundled case studies: PICS, GPU utilization windows, prefetcher statistics, dual runs."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from . import isa
from .errors import MalformedPayload
from .funcunits import hash32
from .machine import Command, IpuState, OutputPacket, Status
from .softlogic import stats_from_counters
from .trace import FLAG_NAMES, FLUSH_BIT, PC_IOREGS, Trace, builtin_abi

PICS_PERIOD = 400_000
PICS_SLOTS = 256
PARTIAL_BIT = 0x8000
UTIL_WINDOW = 256
UTIL_SIGNALS = ("simt", "tc", "mem")


def program_source(name: str) -> str:
    return resources.files("ipuemu").joinpath("programs", f"{name}.s").read_text()


def shipped_programs() -> list:
    return sorted(p.name[:-2] for p in resources.files("ipuemu").joinpath("programs").iterdir()
                  if p.name.endswith(".s"))


def _assemble(name: str, source: str, abi_name: str) -> isa.ProgramImage:
    return isa.assemble(source, builtin_abi(abi_name), name=name, policy="permissive")


# ---------------------------------------------------------------- PICS

def pics_program(period: int = PICS_PERIOD) -> isa.ProgramImage:
    """The bundled PICS binary with the sample period patched in."""
    if not 1 <= period <= isa.M32:
        raise ValueError("period must fit in 32 bits")
    src, n = re.subn(r"regtimer\s+\d+", f"regtimer {period}", program_source("pics"), count=1)
    assert n == 1
    return _assemble("pics", src, "pics")


@dataclass(frozen=True)
class PsvEntry:
    pc: int
    signature: int
    cycles: int


def signature_names(sig: int) -> list:
    return [FLAG_NAMES[b] for b in range(len(FLAG_NAMES)) if sig >> b & 1]


@dataclass
class PicsTable:
    rows: list = field(default_factory=list)  # PsvEntry, sorted by cycles descending
    samples: int = 0
    idle_samples: int = 0

    @classmethod
    def from_counts(cls, counts: dict, samples: int = 0, idle: int = 0) -> "PicsTable":
        rows = [PsvEntry(pc, sig, c) for (pc, sig), c in counts.items() if c > 0 and sig]
        rows.sort(key=lambda e: (-e.cycles, e.pc, e.signature))
        return cls(rows, samples, idle)

    @property
    def total(self) -> int:
        return sum(e.cycles for e in self.rows)

    def as_dict(self) -> dict:
        return {(e.pc, e.signature): e.cycles for e in self.rows}

    def pc_totals(self) -> dict:
        out = {}
        for e in self.rows:
            out[e.pc] = out.get(e.pc, 0) + e.cycles
        return out

    def top(self, n: int = 10) -> list:
        return self.rows[:n]

    def heavy_pcs(self, share: float = 0.01) -> set:
        """PCs carrying more than ``share`` of all attributed cycles."""
        tot = self.total
        return {pc for pc, c in self.pc_totals().items() if tot and c > share * tot}

    def __eq__(self, other):
        return isinstance(other, PicsTable) and self.as_dict() == other.as_dict()

    def csv_rows(self) -> list:
        return [[f"0x{e.pc:x}", "|".join(signature_names(e.signature)) or "-", e.cycles] for e in self.rows]


def decode_pics_payload(data: bytes) -> tuple:
    """6 bytes: pc low 32 bits then a 16-bit signature. Returns (pc, signature, partial)."""
    if len(data) != 6:
        raise MalformedPayload(f"PICS payload must be 6 bytes, got {len(data)}")
    pc = int.from_bytes(data[:4], "little")
    sig = int.from_bytes(data[4:], "little")
    return pc, sig & ~PARTIAL_BIT, bool(sig & PARTIAL_BIT)


def pics_postprocess(packets, period: int = PICS_PERIOD, total_cycles: Optional[int] = None) -> PicsTable:
    """Each regular sample stands for ``period`` cycles; the final partial sample stands
    for whatever is left of ``total_cycles`` (or of its own emit cycle when not given)."""
    counts = {}
    regular = idle = 0
    for p in packets:
        data = p.data if isinstance(p, OutputPacket) else bytes(p)
        pc, sig, partial = decode_pics_payload(data)
        if partial:
            end = total_cycles if total_cycles is not None else getattr(p, "cycle", 0)
            w = max(0, end - regular * period)
        else:
            regular += 1
            w = period
        if not sig:
            idle += 1
            continue
        counts[(pc, sig)] = counts.get((pc, sig), 0) + w
    return PicsTable.from_counts(counts, regular, idle)


def _pics_records(trace: Trace):
    """(cycle, signature, responsible pc) for every eventful record, straight from the columns."""
    flags = np.zeros(len(trace), dtype=np.int64)
    for b in range(len(FLAG_NAMES)):
        col = trace.values.get(b)
        if col is not None:
            flags |= (col.astype(np.int64) & 1) << b
    commit = trace.values[PC_IOREGS["commit"]].astype(np.int64) & isa.M32
    flush = trace.values[PC_IOREGS["flush"]].astype(np.int64) & isa.M32
    pcs = np.where((flags >> FLUSH_BIT) & 1 == 1, flush, commit)
    cyc = trace.cycle_array().astype(np.int64)
    keep = flags != 0
    return cyc[keep], flags[keep], pcs[keep]


def pics_recount(trace: Trace, period: int = PICS_PERIOD) -> PicsTable:
    """Host-side oracle: replay the sampling rule directly from the trace.

    The timer fires at cycles kP-1; a record at that very cycle already belongs
    to the next window. Within a window each PC claims a slot at hash & 255
    (next free slot on collision, in first-seen order); a sample reports the
    slot with the most cycles, lowest slot on ties. Assumes a dense mask.
    """
    cyc, flags, pcs = _pics_records(trace)
    n_windows = trace.length // period
    win = (cyc + 1) // period
    counts = {}
    regular = idle = 0
    for k in range(n_windows + 1):
        sel = win == k
        slots = {}  # pc -> slot
        used = [None] * PICS_SLOTS
        tally = {}  # slot -> [pc, sig, cycles]
        for pc, f in zip(pcs[sel].tolist(), flags[sel].tolist()):
            s = slots.get(pc)
            if s is None:
                s = hash32(pc) & (PICS_SLOTS - 1)
                for _ in range(PICS_SLOTS):
                    if used[s] is None:
                        break
                    s = (s + 1) % PICS_SLOTS
                else:
                    continue  # table full: the cycle is lost
                used[s] = pc
                slots[pc] = s
                tally[s] = [pc, 0, 0]
            t = tally[s]
            t[1] |= f
            t[2] += 1
        best = None
        for s in sorted(tally):
            if best is None or tally[s][2] > best[2]:
                best = tally[s]
        if k < n_windows:
            regular += 1
            w = period
        else:
            w = trace.length - n_windows * period
        if best is None:
            idle += 1
            continue
        if w:
            counts[(best[0], best[1])] = counts.get((best[0], best[1]), 0) + w
    return PicsTable.from_counts(counts, regular, idle)


def pics_truth_table(truth: dict) -> PicsTable:
    """Unsampled per-(pc, signature) event cycles from a synth sidecar."""
    return PicsTable.from_counts({(p, s): c for p, s, c in truth["cycles_by_pc_sig"]})


# ---------------------------------------------------------------- utilization

def util_program() -> isa.ProgramImage:
    return _assemble("util", program_source("util"), "util")


@dataclass(frozen=True)
class UtilWindow:
    index: int
    counts: tuple

    def high(self, threshold: float = 0.25, length: int = UTIL_WINDOW) -> int:
        return sum(1 for c in self.counts if c > threshold * length)


def decode_util_payload(data: bytes) -> tuple:
    """Header byte (lanes << 4 | bit 8 of each count) followed by the low byte of each count."""
    if not data:
        raise MalformedPayload("empty utilization payload")
    lanes = data[0] >> 4
    if lanes < 1 or len(data) != 1 + lanes:
        raise MalformedPayload(f"header says {lanes} lanes but payload has {len(data) - 1} bytes")
    return tuple(data[1 + i] | ((data[0] >> i) & 1) << 8 for i in range(lanes))


def util_windows(packets) -> list:
    return [UtilWindow(i, decode_util_payload(p.data if isinstance(p, OutputPacket) else bytes(p)))
            for i, p in enumerate(packets)]


def util_recount(trace: Trace, window: int = UTIL_WINDOW) -> list:
    """Brute-force per-window counts of x0..x2 over consecutive records."""
    n = (len(trace) // window) * window
    out = []
    cols = [trace.values[r][:n].astype(np.int64) & 1 for r in range(3)]
    sums = [c.reshape(-1, window).sum(axis=1) for c in cols] if n else [np.zeros(0)] * 3
    for i in range(n // window):
        out.append(UtilWindow(i, tuple(int(s[i]) for s in sums)))
    return out


@dataclass
class UtilSummary:
    bins: dict  # number of high signals -> window count
    window_bins: list
    running_average: list  # per position: mean utilization of each signal so far, busiest windows first
    threshold: float
    window: int

    @property
    def n_windows(self) -> int:
        return len(self.window_bins)

    def fractions(self) -> dict:
        n = self.n_windows
        return {k: (v / n if n else 0.0) for k, v in self.bins.items()}


def util_classify(windows, threshold: float = 0.25, window: int = UTIL_WINDOW) -> UtilSummary:
    """Bin windows by how many signals were busy for more than ``threshold`` of the window."""
    windows = list(windows)
    bins = {0: 0, 1: 0, 2: 0, 3: 0}
    per = []
    for w in windows:
        h = w.high(threshold, window)
        bins[h] = bins.get(h, 0) + 1
        per.append(h)
    order = sorted(range(len(windows)), key=lambda i: (-sum(windows[i].counts), i))
    run = []
    acc = [0.0, 0.0, 0.0]
    for k, i in enumerate(order, 1):
        for j, c in enumerate(windows[i].counts[:3]):
            acc[j] += c / window
        run.append(tuple(a / k for a in acc))
    return UtilSummary(bins, per, run, threshold, window)


# ---------------------------------------------------------------- prefetch

def prefetch_program() -> isa.ProgramImage:
    return _assemble("prefetch", program_source("prefetch"), "prefetch")


def decode_prefetch_payload(data: bytes) -> tuple:
    """Four 3-byte little-endian counters: accesses, misses, issued, useful."""
    if len(data) != 12:
        raise MalformedPayload(f"prefetch payload must be 12 bytes, got {len(data)}")
    return tuple(int.from_bytes(data[i:i + 3], "little") for i in range(0, 12, 3))


@dataclass
class PrefetchSummary:
    counters: tuple = (0, 0, 0, 0)
    packets: int = 0
    no_data: bool = True

    @property
    def stats(self) -> dict:
        return stats_from_counters(*self.counters)

    def to_dict(self) -> dict:
        a, m, i, u = self.counters
        return {"demand_accesses": a, "demand_misses": m, "prefetches_issued": i, "useful_prefetches": u,
                "packets": self.packets, "no_data": self.no_data, **self.stats}


def prefetch_report(packets) -> PrefetchSummary:
    tot = [0, 0, 0, 0]
    n = 0
    for p in packets:
        for i, v in enumerate(decode_prefetch_payload(p.data if isinstance(p, OutputPacket) else bytes(p))):
            tot[i] += v
        n += 1
    return PrefetchSummary(tuple(tot), n, n == 0)


def prefetch_ab(a: PrefetchSummary, b: PrefetchSummary) -> dict:
    """Metric deltas, b minus a."""
    sa, sb = a.stats, b.stats
    return {k: sb[k] - sa[k] for k in sa}


# ---------------------------------------------------------------- dual run

@dataclass
class DualRunReport:
    idealized: PicsTable
    faithful: PicsTable
    rel_error: dict  # pc -> |faithful - idealized| / idealized
    dropped_pc_fraction: float
    dropped_arrivals: int
    delivered: int
    heavy_set_equal: bool
    counters: dict

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_error.values(), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        return sum(self.rel_error.values()) / len(self.rel_error) if self.rel_error else 0.0

    def summary(self) -> dict:
        return {"dropped_pc_fraction": self.dropped_pc_fraction, "dropped_arrivals": self.dropped_arrivals,
                "delivered": self.delivered, "mean_rel_error": self.mean_rel_error,
                "max_rel_error": self.max_rel_error, "heavy_set_equal": self.heavy_set_equal}


def _pics_leg(image, trace, idealized: bool, period: int, machine_opts: dict):
    m = IpuState(idealized=idealized, **machine_opts)
    m.load_image(image)
    rep = m.run_trace(trace)
    if m.status != Status.ERROR:
        m.host_control(Command.FINALIZE)
    if m.status == Status.ERROR:
        raise RuntimeError(f"run faulted: {m.fault}")
    return pics_postprocess(m.packets, period, trace.length), rep


def dual_run(image: isa.ProgramImage, trace: Trace, period: int = PICS_PERIOD, **machine_opts) -> DualRunReport:
    """Run the PICS image idealized and faithful, then compare the tables."""
    ideal, _ = _pics_leg(image, trace, True, period, machine_opts)
    faith, rep = _pics_leg(image, trace, False, period, machine_opts)
    ip, fp = ideal.pc_totals(), faith.pc_totals()
    err = {pc: abs(fp.get(pc, 0) - c) / c for pc, c in ip.items()}
    tot = sum(ip.values())
    lost = sum(c for pc, c in ip.items() if pc not in fp)
    return DualRunReport(ideal, faith, err, lost / tot if tot else 0.0,
                         rep.counters["dropped_arrivals"], rep.counters["delivered"],
                         ideal.heavy_pcs() == faith.heavy_pcs(), dict(rep.counters))


# ---------------------------------------------------------------- writers

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
        f.write("\n")

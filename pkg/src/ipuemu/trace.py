"""HIT signal traces: ABI declarations, text/binary trace files, synthetic generators."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import AbiMismatch, MalformedRecord, NonMonotonicCycle, UnknownScenario

MAX_SIGNALS = 32
M64 = (1 << 64) - 1


# ---------------------------------------------------------------- ABI

@dataclass(frozen=True)
class Signal:
    name: str
    width: int
    ioreg: int
    rate: int = 1
    semantics: str = ""

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1 if 0 < self.width <= 64 else M64


@dataclass
class AbiSpec:
    name: str
    signals: list = field(default_factory=list)

    def __post_init__(self):
        self._by_ioreg = {s.ioreg: s for s in self.signals}
        self._by_name = {s.name: s for s in self.signals}

    def has_ioreg(self, idx: int) -> bool:
        return idx in self._by_ioreg

    def signal(self, key) -> Signal:
        """Look up by ioreg index or signal name."""
        return self._by_ioreg[key] if isinstance(key, int) else self._by_name[key]

    def ioreg_of(self, name: str) -> int:
        return self._by_name[name].ioreg

    @property
    def ioregs(self) -> list:
        return sorted(self._by_ioreg)

    @property
    def total_width(self) -> int:
        return sum(s.width for s in self.signals)

    def canonical(self) -> str:
        rows = sorted(f"{s.ioreg}:{s.name}:{s.width}:{s.rate}" for s in self.signals)
        return "\n".join(rows)

    @property
    def hash(self) -> bytes:
        """8-byte digest, independent of declaration order."""
        return hashlib.sha256(self.canonical().encode()).digest()[:8]

    def to_text(self) -> str:
        lines = [f"#abiname {self.name}"]
        for s in self.signals:
            sem = f" {s.semantics}" if s.semantics else ""
            lines.append(f"#abi {s.name} {s.width} x{s.ioreg} {s.rate}{sem}")
        return "\n".join(lines) + "\n"


def _parse_abi_line(line: str, lineno: int) -> Signal:
    parts = line.split(None, 5)
    if len(parts) < 5 or parts[0] != "#abi":
        raise MalformedRecord(f"bad ABI declaration: {line!r}", line=lineno)
    _, name, width, reg, rate = parts[:5]
    try:
        if not reg.startswith("x"):
            raise ValueError
        return Signal(name, int(width), int(reg[1:]), int(rate), parts[5] if len(parts) > 5 else "")
    except ValueError:
        raise MalformedRecord(f"bad ABI declaration: {line!r}", line=lineno) from None


def parse_abi(text: str, name: str = "abi") -> AbiSpec:
    sigs = []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("#abiname"):
            name = line.split(None, 1)[1].strip()
        elif line.startswith("#abi "):
            sigs.append(_parse_abi_line(line, i))
        elif line and not line.startswith(";"):
            raise MalformedRecord(f"unexpected line in ABI file: {line!r}", line=i)
    return AbiSpec(name, sigs)


def load_abi(path) -> AbiSpec:
    """Load an ABI file, or a shipped ABI by bare name (table1, pics, util, prefetch)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and "/" not in str(path):
        return builtin_abi(str(path))
    return parse_abi(p.read_text(), p.stem)


def builtin_abi(name: str) -> AbiSpec:
    text = resources.files("ipuemu").joinpath("abi", f"{name}.abi").read_text()
    return parse_abi(text, name)


@dataclass
class AbiReport:
    findings: list = field(default_factory=list)
    total_width: int = 0
    ioregs: frozenset = frozenset()

    @property
    def ok(self) -> bool:
        return not self.findings


def validate_abi(abi: AbiSpec) -> AbiReport:
    """Uniqueness, width and count checks. Findings are sorted so signal order does not matter."""
    found = set()
    if len(abi.signals) > MAX_SIGNALS:
        found.add(("TooManySignals", f"{len(abi.signals)} signals declared, at most {MAX_SIGNALS}"))
    seen_reg, seen_name = {}, {}
    for s in abi.signals:
        if not 0 <= s.ioreg < 32:
            found.add(("BadIoreg", f"{s.name}: x{s.ioreg} is outside x0..x31"))
        if not 1 <= s.width <= 64:
            found.add(("BadWidth", f"{s.name}: width {s.width} outside 1..64"))
        if s.rate < 1:
            found.add(("BadRate", f"{s.name}: rate {s.rate} must be >= 1"))
        seen_reg.setdefault(s.ioreg, []).append(s.name)
        seen_name.setdefault(s.name, []).append(s.ioreg)
    for reg, names in seen_reg.items():
        if len(names) > 1:
            found.add(("DuplicateIoreg", f"x{reg} bound to {', '.join(sorted(names))}"))
    for nm, regs in seen_name.items():
        if len(regs) > 1:
            found.add(("DuplicateName", f"{nm} declared {len(regs)} times"))
    return AbiReport(sorted(found), abi.total_width, frozenset(s.ioreg for s in abi.signals))


# ---------------------------------------------------------------- records and traces

@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    updates: tuple = ()  # ((ioreg, value), ...)
    addr: Optional[int] = None


def _dtype_for(width: int):
    for bits, dt in ((8, np.uint8), (16, np.uint16), (32, np.uint32)):
        if width <= bits:
            return dt
    return np.uint64


class Trace:
    """Columnar trace. ``cycles is None`` means one record per cycle (dense);
    ``mask is None`` means every declared signal updates in every record."""

    def __init__(self, abi: AbiSpec, cycles=None, values=None, mask=None, addr=None,
                 has_addr=None, length: Optional[int] = None, n: Optional[int] = None):
        self.abi = abi
        self.cycles = None if cycles is None else np.asarray(cycles, dtype=np.uint64)
        self.values = {}
        for s in abi.signals:
            if values is not None and s.ioreg in values:
                self.values[s.ioreg] = np.asarray(values[s.ioreg], dtype=_dtype_for(s.width))
        if n is None:
            if self.cycles is not None:
                n = len(self.cycles)
            elif self.values:
                n = len(next(iter(self.values.values())))
            else:
                n = 0
        self.n = n
        for s in abi.signals:
            if s.ioreg not in self.values:
                self.values[s.ioreg] = np.zeros(n, dtype=_dtype_for(s.width))
        self.mask = None if mask is None else np.asarray(mask, dtype=np.uint32)
        self.addr = None if addr is None else np.asarray(addr, dtype=np.uint64)
        if self.addr is not None and has_addr is None:
            has_addr = np.ones(n, dtype=bool)
        self.has_addr = None if has_addr is None else np.asarray(has_addr, dtype=bool)
        last = (int(self.cycles[-1]) + 1 if n and self.cycles is not None else n)
        self.length = max(last, length or 0)

    # -- helpers
    @property
    def dense(self) -> bool:
        return self.cycles is None

    def cycle_array(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.uint64) if self.cycles is None else self.cycles

    def full_mask(self) -> int:
        return sum(1 << s.ioreg for s in self.abi.signals)

    def mask_array(self) -> np.ndarray:
        if self.mask is None:
            return np.full(self.n, self.full_mask(), dtype=np.uint32)
        return self.mask

    def __len__(self):
        return self.n

    def record(self, i: int) -> CycleRecord:
        cyc = i if self.cycles is None else int(self.cycles[i])
        m = self.full_mask() if self.mask is None else int(self.mask[i])
        ups = tuple((r, int(self.values[r][i])) for r in self.abi.ioregs if m >> r & 1)
        a = None
        if self.addr is not None and self.has_addr[i]:
            a = int(self.addr[i])
        return CycleRecord(cyc, ups, a)

    def __iter__(self) -> Iterator[CycleRecord]:
        for i in range(self.n):
            yield self.record(i)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        if self.abi.hash != other.abi.hash or self.n != other.n or self.length != other.length:
            return False
        if not np.array_equal(self.cycle_array(), other.cycle_array()):
            return False
        if not np.array_equal(self.mask_array(), other.mask_array()):
            return False
        for r in self.abi.ioregs:
            if not np.array_equal(self.values[r], other.values[r]):
                return False
        ha = self.has_addr if self.has_addr is not None else np.zeros(self.n, bool)
        hb = other.has_addr if other.has_addr is not None else np.zeros(other.n, bool)
        if not np.array_equal(ha, hb):
            return False
        if ha.any():
            return bool(np.array_equal(self.addr[ha], other.addr[hb]))
        return True

    @classmethod
    def from_records(cls, abi: AbiSpec, records: Iterable[CycleRecord], length: Optional[int] = None) -> "Trace":
        cycles, masks, addrs, has = [], [], [], []
        cols = {r: [] for r in abi.ioregs}
        prev = -1
        for k, rec in enumerate(records):
            if rec.cycle <= prev:
                raise NonMonotonicCycle(f"cycle {rec.cycle} follows {prev}", offset=k)
            prev = rec.cycle
            m = 0
            vals = {}
            for reg, v in rec.updates:
                if not abi.has_ioreg(reg):
                    raise MalformedRecord(f"x{reg} is not declared in ABI {abi.name!r}", offset=k)
                sig = abi.signal(reg)
                if not 0 <= v <= sig.mask:
                    raise MalformedRecord(f"value 0x{v:x} exceeds {sig.width}-bit x{reg}", offset=k)
                m |= 1 << reg
                vals[reg] = v
            for reg in cols:
                cols[reg].append(vals.get(reg, 0))
            cycles.append(rec.cycle)
            masks.append(m)
            addrs.append(rec.addr or 0)
            has.append(rec.addr is not None)
        values = {r: np.array(v, dtype=_dtype_for(abi.signal(r).width)) for r, v in cols.items()}
        addr = np.array(addrs, dtype=np.uint64) if any(has) else None
        return cls(abi, np.array(cycles, dtype=np.uint64), values, np.array(masks, dtype=np.uint32),
                   addr, np.array(has, dtype=bool) if any(has) else None, length, n=len(cycles))


# ---------------------------------------------------------------- text format (.ipt)

def _abi_header(abi: AbiSpec) -> list:
    return abi.to_text().splitlines()


def write_trace(trace: Trace, path) -> None:
    """Write ``.ipb`` (binary) when the suffix says so, text otherwise."""
    path = Path(path)
    if path.suffix == ".ipb":
        _write_binary(trace, path)
    else:
        _write_text(trace, path)


def _write_text(trace: Trace, path: Path) -> None:
    abi = trace.abi
    regs = abi.ioregs
    cyc = trace.cycle_array().tolist()
    masks = trace.mask_array().tolist()
    cols = {r: trace.values[r].tolist() for r in regs}
    has = trace.has_addr.tolist() if trace.has_addr is not None else None
    addr = trace.addr.tolist() if trace.addr is not None else None
    with open(path, "w") as f:
        for line in _abi_header(abi):
            f.write(line + "\n")
        f.write(f"#length {trace.length}\n")
        for i in range(trace.n):
            m = masks[i]
            ups = ",".join(f"x{r}={cols[r][i]:x}" for r in regs if m >> r & 1)
            a = f"{addr[i]:x}" if has is not None and has[i] else ""
            f.write(f"{cyc[i]};{a};{ups}\n")


def _read_text(path: Path, abi: AbiSpec) -> Trace:
    header = []
    length = None
    recs = []
    with open(path) as f:
        lineno = 0
        for raw in f:
            lineno += 1
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if recs:
                    raise MalformedRecord("header line after records", line=lineno)
                if line.startswith("#length"):
                    try:
                        length = int(line.split()[1])
                    except (IndexError, ValueError):
                        raise MalformedRecord("bad #length line", line=lineno) from None
                else:
                    header.append(line)
                continue
            parts = line.split(";")
            if len(parts) != 3:
                raise MalformedRecord(f"expected 'cycle;addr;updates', got {line!r}", line=lineno)
            try:
                cyc = int(parts[0])
                a = int(parts[1], 16) if parts[1].strip() else None
                ups = []
                for item in filter(None, (p.strip() for p in parts[2].split(","))):
                    reg, val = item.split("=")
                    if not reg.startswith("x"):
                        raise ValueError
                    ups.append((int(reg[1:]), int(val, 16)))
            except ValueError:
                raise MalformedRecord(f"unparseable record {line!r}", line=lineno) from None
            recs.append((lineno, CycleRecord(cyc, tuple(ups), a)))
    file_abi = parse_abi("\n".join(header))
    if file_abi.hash != abi.hash:
        raise AbiMismatch(f"trace ABI {file_abi.hash.hex()} does not match {abi.name!r} ({abi.hash.hex()})")
    try:
        return Trace.from_records(abi, (r for _, r in recs), length)
    except MalformedRecord as e:
        # translate record offsets to file lines
        if e.offset is not None and e.offset < len(recs):
            e.line = recs[e.offset][0]
        raise


# ---------------------------------------------------------------- binary format (.ipb)

_BIN_MAGIC = b"IPTB"
_BIN_HDR = struct.Struct("<4sHH8sQQ")


def _record_dtype(abi: AbiSpec) -> np.dtype:
    fields = [("cycle", "<u8"), ("addr", "<u8"), ("has_addr", "u1"), ("mask", "<u4")]
    for r in abi.ioregs:
        fields.append((f"x{r}", np.dtype(_dtype_for(abi.signal(r).width)).newbyteorder("<")))
    return np.dtype(fields)


def _write_binary(trace: Trace, path: Path) -> None:
    abi = trace.abi
    dt = _record_dtype(abi)
    rec = np.zeros(trace.n, dtype=dt)
    rec["cycle"] = trace.cycle_array()
    if trace.addr is not None:
        rec["addr"] = trace.addr
        rec["has_addr"] = trace.has_addr
    rec["mask"] = trace.mask_array()
    for r in abi.ioregs:
        rec[f"x{r}"] = trace.values[r]
    with open(path, "wb") as f:
        f.write(_BIN_HDR.pack(_BIN_MAGIC, 1, len(abi.signals), abi.hash, trace.n, trace.length))
        f.write(rec.tobytes())


def _read_binary(path: Path, abi: AbiSpec) -> Trace:
    data = path.read_bytes()
    if len(data) < _BIN_HDR.size:
        raise MalformedRecord("truncated binary header", offset=0)
    magic, ver, nsig, h, n, length = _BIN_HDR.unpack_from(data)
    if magic != _BIN_MAGIC or ver != 1:
        raise MalformedRecord("not a binary trace file", offset=0)
    if h != abi.hash or nsig != len(abi.signals):
        raise AbiMismatch(f"trace ABI {h.hex()} does not match {abi.name!r} ({abi.hash.hex()})")
    dt = _record_dtype(abi)
    body = data[_BIN_HDR.size:]
    if len(body) != n * dt.itemsize:
        raise MalformedRecord(f"expected {n} records of {dt.itemsize} bytes, found {len(body)} bytes",
                              offset=_BIN_HDR.size)
    rec = np.frombuffer(body, dtype=dt, count=n)
    cyc = rec["cycle"].astype(np.uint64)
    if n > 1:
        bad = np.nonzero(np.diff(cyc.astype(np.int64)) <= 0)[0]
        if len(bad):
            k = int(bad[0]) + 1
            raise NonMonotonicCycle(f"cycle {int(cyc[k])} follows {int(cyc[k - 1])}",
                                    offset=_BIN_HDR.size + k * dt.itemsize)
    mask = rec["mask"].astype(np.uint32)
    allowed = sum(1 << r for r in abi.ioregs)
    stray = np.nonzero(mask & ~np.uint32(allowed))[0]
    if len(stray):
        k = int(stray[0])
        raise MalformedRecord("record updates an undeclared ioreg", offset=_BIN_HDR.size + k * dt.itemsize)
    values = {r: rec[f"x{r}"].copy() for r in abi.ioregs}
    has = rec["has_addr"].astype(bool)
    addr = rec["addr"].astype(np.uint64) if has.any() else None
    return Trace(abi, cyc, values, mask, addr, has if has.any() else None, length, n=n)


def load_trace(path, abi: AbiSpec) -> Trace:
    """Read a ``.ipt``/``.ipb`` file; iterate the result to get CycleRecords."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix == ".ipb":
        return _read_binary(path, abi)
    return _read_text(path, abi)


# ---------------------------------------------------------------- synthetic traces

SCENARIOS = ("pics-events", "pc-loop", "pc-entangled-pairs", "gpu-activity-phases")

FLAG_NAMES = ("itlb-miss", "icache-miss", "dtlb-miss", "dcache-miss", "l2-miss", "branch-mispredict",
              "sq-full", "rob-empty", "flush", "recycle", "store-drain")
FLUSH_BIT = FLAG_NAMES.index("flush")
PC_IOREGS = {"fetch": 11, "commit": 12, "rob_head": 13, "dispatch": 14, "flush": 15, "next_fetch": 16}


@dataclass
class Synth:
    trace: Trace
    truth: dict

    def write(self, path) -> Path:
        """Write the trace plus its ``.truth.json`` sidecar; returns the sidecar path."""
        path = Path(path)
        write_trace(self.trace, path)
        side = path.with_suffix(path.suffix + ".truth.json")
        side.write_text(json.dumps(self.truth, indent=1, sort_keys=True))
        return side


def synth_trace(scenario: str, seed: int, length: int, **opts) -> Synth:
    """Deterministic synthetic trace for ``scenario`` plus ground truth."""
    gen = {"pics-events": _synth_pics, "pc-loop": _synth_pc_loop,
           "pc-entangled-pairs": _synth_entangled, "gpu-activity-phases": _synth_gpu}.get(scenario)
    if gen is None:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    return gen(np.random.default_rng(seed), int(length), **opts)


def responsible_pc(flags: int, commit_pc: int, flush_pc: int) -> int:
    """Flush events are charged to the flushing instruction, everything else to the committing one."""
    return flush_pc if flags >> FLUSH_BIT & 1 else commit_pc


def _synth_pics(rng, length, n_pcs=48, quiet=0.87, mean_run=6.0, zipf=1.3, hot=None,
                burst2=0.0, abi=None):
    """Stall episodes: runs of consecutive eventful cycles charged to one PC.

    ``hot`` pins a single PC with that share of all eventful cycles (microbenchmark shape).
    ``burst2`` is the probability that an episode carries two event flags at once.
    """
    abi = abi or builtin_abi("pics")
    pcs = np.sort(rng.choice(np.arange(0x100000, 0x800000, 4, dtype=np.int64), n_pcs, replace=False))
    w = 1.0 / np.arange(1, n_pcs + 1) ** zipf
    w = w[rng.permutation(n_pcs)]
    if hot is not None:
        w = np.full(n_pcs, (1.0 - hot) / max(n_pcs - 1, 1))
        w[0] = hot
    w /= w.sum()
    # each PC has a characteristic event set
    single = [1 << b for b in range(len(FLAG_NAMES))]
    combos = [(1 << 2) | (1 << 3), (1 << 3) | (1 << 4), (1 << 0) | (1 << 1)]
    profile = np.array([single[rng.integers(len(single))] if rng.random() > 0.3
                        else combos[rng.integers(len(combos))] for _ in range(n_pcs)], dtype=np.int64)

    cycles, flags, who = [], [], []
    t = int(rng.geometric(1.0 / max(mean_run * quiet / (1 - quiet), 1.0)))
    while t < length:
        run = int(rng.geometric(1.0 / mean_run))
        run = min(run, length - t)
        k = int(rng.choice(n_pcs, p=w))
        f = int(profile[k])
        if burst2 and rng.random() < burst2:
            f |= 1 << int(rng.integers(len(FLAG_NAMES)))
        cycles.append(np.arange(t, t + run, dtype=np.int64))
        flags.append(np.full(run, f, dtype=np.int64))
        who.append(np.full(run, k, dtype=np.int64))
        gap = int(rng.geometric(1.0 / max(mean_run * quiet / (1 - quiet), 1.0)))
        t += run + gap
    if cycles:
        cyc = np.concatenate(cycles)
        fl = np.concatenate(flags)
        k = np.concatenate(who)
    else:
        cyc = fl = k = np.zeros(0, dtype=np.int64)
    n = len(cyc)
    resp = pcs[k]
    noise = lambda: pcs[rng.integers(n_pcs, size=n)] if n else np.zeros(0, np.int64)  # noqa: E731
    is_flush = (fl >> FLUSH_BIT) & 1 == 1
    commit = np.where(is_flush, noise(), resp)
    flush_pc = np.where(is_flush, resp, noise())
    values = {b: ((fl >> b) & 1) for b in range(len(FLAG_NAMES))}
    values[11] = np.asarray(noise(), dtype=np.uint64) | np.uint64(0xFFFF_0000_0000_0000)
    values[12] = commit
    values[13] = noise()
    values[14] = noise()
    values[15] = flush_pc
    values[16] = noise()
    trace = Trace(abi, cyc.astype(np.uint64), values, None, None, None, length, n=n)
    per = {}
    for p, s in zip(resp.tolist(), fl.tolist()):
        per[(p, s)] = per.get((p, s), 0) + 1
    truth = {
        "scenario": "pics-events",
        "length": length,
        "eventful_cycles": n,
        "quiet_fraction": 1.0 - n / length if length else 1.0,
        "pcs": [int(p) for p in pcs],
        "cycles_by_pc_sig": [[p, s, c] for (p, s), c in sorted(per.items())],
    }
    return Synth(trace, truth)


def _synth_pc_loop(rng, length, lines=4, insns_per_line=16, base=0x400000, abi=None):
    """Tight loop over ``lines`` cache lines, one fetch PC per cycle."""
    abi = abi or builtin_abi("prefetch")
    body = lines * insns_per_line
    start = base + 64 * int(rng.integers(0, 1024))
    idx = np.arange(length, dtype=np.int64) % body
    line_of = idx // insns_per_line
    pcs = start + line_of * 64 + (idx % insns_per_line) * (64 // insns_per_line)
    values = {0: pcs.astype(np.uint64), 1: np.ones(length, dtype=np.uint8)}
    trace = Trace(abi, None, values, None, None, None, length, n=length)
    truth = {"scenario": "pc-loop", "length": length, "lines": lines,
             "distinct_lines": int(len(np.unique(pcs >> 6))) if length else 0,
             "max_cold_misses": lines}
    return Synth(trace, truth)


def _synth_entangled(rng, length, n_funcs=96, func_lines=(1, 3), follow=0.9, insns_per_line=4,
                     hot_sets=12, base=0x400000, abi=None):
    """Control flow over small functions that crowd a few cache sets.

    Function f starts at ``base + 4096*f`` plus a line offset below ``hot_sets``,
    so with a 4 KB set stride every function competes for the same handful of
    sets and conflict misses recur. The successor map is one cycle through all
    functions, taken with probability ``follow``; otherwise control jumps at random.
    The footprint stays below 256 lines so a 256-source table can hold every pair.
    """
    abi = abi or builtin_abi("prefetch")
    sizes = rng.integers(func_lines[0], func_lines[1] + 1, size=n_funcs)
    starts = base + 4096 * np.arange(n_funcs, dtype=np.int64) + 64 * rng.integers(0, hot_sets, size=n_funcs)
    order = rng.permutation(n_funcs)
    succ = np.empty(n_funcs, dtype=np.int64)
    succ[order] = np.roll(order, -1)
    step = 64 // insns_per_line
    out = []
    total = 0
    f = int(rng.integers(n_funcs))
    while total < length:
        n = int(sizes[f]) * insns_per_line
        out.append(int(starts[f]) + step * np.arange(n, dtype=np.int64))
        total += n
        f = int(succ[f]) if rng.random() < follow else int(rng.integers(n_funcs))
    pcs = np.concatenate(out)[:length] if out else np.zeros(0, np.int64)
    values = {0: pcs.astype(np.uint64), 1: np.ones(len(pcs), dtype=np.uint8)}
    trace = Trace(abi, None, values, None, None, None, length, n=len(pcs))
    truth = {"scenario": "pc-entangled-pairs", "length": length,
             "designed_pairs": sorted([int(starts[i]) >> 6, int(starts[succ[i]]) >> 6] for i in range(n_funcs)),
             "footprint_lines": int(sizes.sum()), "footprint_bytes": int(sizes.sum()) * 64}
    return Synth(trace, truth)


def _synth_gpu(rng, length, window=256, exclusive=True, phase_windows=(4, 40), hi_p=0.85, lo_p=0.03,
               abi=None):
    """Three activity bits in phases. With ``exclusive`` one signal is busy per phase."""
    abi = abi or builtin_abi("util")
    sig = np.zeros((3, length), dtype=np.uint8)
    t = 0
    phases = []
    while t < length:
        span = int(rng.integers(phase_windows[0], phase_windows[1] + 1)) * window
        span = min(span, length - t)
        if exclusive:
            busy = {int(rng.integers(3))}
        else:
            busy = {k for k in range(3) if rng.random() < 0.5}
        for k in range(3):
            p = hi_p if k in busy else lo_p
            sig[k, t:t + span] = rng.random(span) < p
        phases.append([t, span, sorted(busy)])
        t += span
    values = {k: sig[k] for k in range(3)}
    trace = Trace(abi, None, values, None, None, None, length, n=length)
    nw = length // window
    counts = sig[:, :nw * window].reshape(3, nw, window).sum(axis=2).T if nw else np.zeros((0, 3), int)
    highs = (counts > window // 4).sum(axis=1)
    truth = {"scenario": "gpu-activity-phases", "length": length, "window": window,
             "window_counts": counts.astype(int).tolist(),
             "window_bins": highs.astype(int).tolist(), "phases": phases}
    return Synth(trace, truth)

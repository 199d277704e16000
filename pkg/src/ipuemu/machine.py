"""Cycle-level IPU engine.

Time is counted in HIT cycles. Routines (``_main``, timer handlers) execute
functionally when they are dispatched; their instruction costs then keep the
machine ACTIVE-RUNNING for ``cost * clock_ratio`` HIT cycles, and arrivals in
that window are dropped. ``step`` is the one-instruction reference
interpreter; ``run_trace`` normally runs compiled basic blocks that are
checked against it in the tests.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from . import isa
from ._compile import compile_block
from .errors import (BlockFault, IllegalInstruction, IllegalLoopBody, ImageTooLarge, InvalidTransition,
                     MachineFault, MemFault, PolicyRejected, RoutineTimeout, WriteToImem)
from .funcunits import M32, MODE_SIMD, HistogramUnit, hash32

M64 = (1 << 64) - 1

# data memory map
SCRATCH_SIZE = 0x8000
SLREG_BASE = 0x5000
SLREG_COUNT = 8
HIST_CTRL = 0x5020  # write 1: reset accumulators
HIST_WINDOW = 0x5024  # auto-emit window in hist calls, 0 = off
HIST_STATUS = 0x5028  # bit 0: sticky overflow
HIST_COUNT = 0x502C  # classified lane values since reset
HIST_ACC = 0x5040  # accumulator i at HIST_ACC + 4*i (read-only)
IMEM_ALIAS = 0x10000
FIFO_BASE = 0x80000000


class Status(enum.IntEnum):
    UNDEFINED = 0
    PAUSED = 1
    ACTIVE_PAUSED = 2
    ACTIVE_RUNNING = 3
    FINALIZE = 4
    ERROR = 5


ACTIVE = (Status.ACTIVE_PAUSED, Status.ACTIVE_RUNNING)


class Command(enum.Enum):
    PAUSE = "PAUSE"
    RESUME = "RESUME"
    FINALIZE = "FINALIZE"
    CONFIG_START = "CONFIG_START"
    CONFIG_STOP = "CONFIG_STOP"


@dataclass
class CostModel:
    """IPU cycles per instruction class."""

    alu: int = 1
    branch: int = 1
    jump: int = 1
    hash: int = 1
    load: int = 2
    store: int = 2
    hist: int = 1
    emit: int = 1
    regtimer: int = 1
    ret: int = 1
    loopn: int = 1
    dispatch: int = 1  # latch + jump to the routine entry

    def of(self, ins: isa.Instruction) -> int:
        return getattr(self, ins.kind)


@dataclass
class OutputPacket:
    cycle: int
    data: bytes
    ipu_id: int = 0
    header_len: int = 0

    @property
    def length(self) -> int:
        return len(self.data)

    @property
    def payload(self) -> bytes:
        return self.data[self.header_len:]


@dataclass
class StepResult:
    cycles: int
    status: Status
    fault: Optional[dict] = None
    outputs: list = field(default_factory=list)


@dataclass
class Timer:
    period: int = 0
    handler: int = 0
    count: int = 0  # delivered active cycles counted toward the next expiry
    last: int = -1  # last cycle already considered for counting
    pending: bool = False
    overruns: int = 0
    fired: int = 0

    @property
    def armed(self) -> bool:
        return self.period > 0


@dataclass
class LoopState:
    remaining: int  # iterations still to run
    body_pc: int
    body: isa.Instruction
    start: object  # dispatch time of the routine
    pre_cost: int  # IPU cycles before the loop directive
    last_cycle: object = None
    done: int = 0


@dataclass
class RunReport:
    status: Status
    counters: dict
    packets: list
    length: int
    fault: Optional[dict] = None
    partial_loop: bool = False
    loop_progress: int = 0
    timer_fired: int = 0
    timer_overruns: int = 0
    idealized: bool = False
    clock_ratio: object = 1
    sample_every: int = 1

    @property
    def emitted_bytes(self) -> int:
        return self.counters["emitted_bytes"]

    def to_dict(self) -> dict:
        return {
            "status": self.status.name,
            "counters": dict(self.counters),
            "packets": len(self.packets),
            "length": self.length,
            "fault": self.fault,
            "partial_loop": self.partial_loop,
            "loop_progress": self.loop_progress,
            "timer_fired": self.timer_fired,
            "timer_overruns": self.timer_overruns,
            "idealized": self.idealized,
            "clock_ratio": str(self.clock_ratio),
            "sample_every": self.sample_every,
        }


class PlainSlregs:
    """SLReg bank used when no soft-logic block is attached."""

    name = "none"

    def __init__(self):
        self.regs = [0] * SLREG_COUNT

    def read_slreg(self, i):
        return self.regs[i]

    def write_slreg(self, i, v):
        self.regs[i] = v & M32


RET, LOOP = -1, -2
COUNTER_NAMES = ("active_cycles", "idle_cycles", "main_invocations", "dropped_arrivals", "emitted_bytes",
                 "consumed", "ignored", "handler_invocations", "delivered")


def _signed(v):
    return (v ^ 0x80000000) - 0x80000000


class IpuState:
    """Architectural state of one IPU plus the timing engine that drives it."""

    def __init__(self, ipu_id: int = 0, *, cost: Optional[CostModel] = None, clock_ratio=1,
                 sample_every: int = 1, idealized: bool = False, bucket_count: int = 128, block=None,
                 sink: Optional[Callable] = None, allowed_policies=isa.POLICIES, use_compiler: bool = True,
                 max_routine_cycles: int = 1 << 22):
        if Fraction(clock_ratio) <= 0:
            raise ValueError("clock ratio must be positive")
        if sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if not 1 <= bucket_count <= 2048:
            raise ValueError("bucket_count must be in 1..2048")
        self.ipu_id = ipu_id
        self.cost = cost or CostModel()
        r = Fraction(clock_ratio)
        self.clock_ratio = int(r) if r.denominator == 1 else r
        self.sample_every = int(sample_every)
        self.idealized = idealized
        self.allowed_policies = tuple(allowed_policies)
        self.use_compiler = use_compiler
        self.max_routine_cycles = max_routine_cycles
        self.sink = sink
        self.hist = HistogramUnit(bucket_count)
        self.mmio_lo = SLREG_BASE
        self.mmio_hi = HIST_ACC + 4 * bucket_count
        self.block = None
        self.slregs = PlainSlregs()
        if block is not None:
            self.attach_block(block)
        self.status = Status.UNDEFINED
        self.image: Optional[isa.ProgramImage] = None
        self.imem = [None] * isa.IMEM_WORDS
        self.main_pc = 0
        self.ts = None
        self.te = None
        self.ts_disarmed = False  # TE seen before TS: the region of interest is over
        self.addr = 0
        self._power_on()

    # ------------------------------------------------------------ setup

    def _power_on(self):
        self.pc = 0
        self.gprs = [0] * 32
        self.ioregs = [0] * 32
        self.valid = 0
        self.dmem = bytearray(SCRATCH_SIZE)
        self.timer = Timer()
        self.counters = dict.fromkeys(COUNTER_NAMES, 0)
        self.hist.reset()
        self.hist.window = 0
        self.packets = []
        self.busy_until = 0
        self.stop_pending = False
        self.pause_pending = False
        self.loop: Optional[LoopState] = None
        self.fault = None
        self.now = 0
        self._horizon = None
        self._ctx = None
        self._start = 0
        self._rcost = 0
        self._loop_req = None
        self._decoded = {}
        self._blocks = {}

    def attach_block(self, block):
        """Attach a soft-logic block; its SLRegs replace the plain register bank."""
        self.block = block
        self.slregs = block if block is not None else PlainSlregs()

    @property
    def handler_pc(self):
        return self.timer.handler if self.timer.armed else None

    def instruction_at(self, pc: int) -> Optional[isa.Instruction]:
        """Decoded instruction at a word address, or None if the slot is empty or illegal."""
        if pc in self._decoded:
            return self._decoded[pc]
        ins = None
        if 0 <= pc < isa.IMEM_WORDS and self.imem[pc] is not None:
            nxt = self.imem[pc + 1] if pc + 1 < isa.IMEM_WORDS else None
            try:
                ins = isa.decode(self.imem[pc], nxt)
            except isa.IllegalEncoding:
                ins = None
        self._decoded[pc] = ins
        return ins

    def load_image(self, image: isa.ProgramImage) -> "IpuState":
        if self.status not in (Status.UNDEFINED, Status.PAUSED, Status.ERROR):
            raise InvalidTransition(f"cannot load an image while {self.status.name}")
        if not image.checksum_ok():
            raise PolicyRejected("image checksum mismatch")
        if image.policy not in self.allowed_policies:
            raise PolicyRejected(f"policy {image.policy!r} not in allowed set {self.allowed_policies}")
        if len(image.body) > isa.FINISH_BASE or len(image.finish) > isa.FINISH_SLOTS:
            raise ImageTooLarge(f"{image.n_instructions} instructions exceed instruction memory")
        self.image = image
        self.imem = image.imem()
        self.main_pc = image.main
        self.ts = self.te = None
        self.ts_disarmed = False
        self.addr = 0
        self._power_on()
        # init runs to completion at load time
        self.status = Status.ACTIVE_RUNNING
        self._ctx = "init"
        self.pc = 0
        budget = self.max_routine_cycles
        try:
            while self.status == Status.ACTIVE_RUNNING and self.pc != self.main_pc:
                self._rcost = 0
                budget -= self._exec_one()
                if budget < 0:
                    raise RoutineTimeout("init exceeded the cycle budget", pc=self.pc)
        except MachineFault as f:
            self._set_fault(f, 0)
            return self
        self.status = Status.PAUSED
        self._ctx = None
        self.pc = self.main_pc
        return self

    # ------------------------------------------------------------ memory

    def load(self, a: int, size: int, signed: bool, pc: int) -> int:
        if a + size <= SCRATCH_SIZE and (a + size <= self.mmio_lo or a >= self.mmio_hi):
            v = int.from_bytes(self.dmem[a:a + size], "little")
        elif SLREG_BASE <= a < self.mmio_hi:
            if size != 4 or a & 3:
                raise MemFault(f"MMIO access must be an aligned word (0x{a:x})", pc=pc, addr=a)
            if a < HIST_CTRL:
                try:
                    v = self.slregs.read_slreg((a - SLREG_BASE) >> 2) & M32
                except MachineFault:
                    raise
                except Exception as e:
                    raise BlockFault(f"{self.slregs.name}: {e}", pc=pc, addr=a) from e
            elif a == HIST_STATUS:
                v = int(self.hist.overflow)
            elif a == HIST_COUNT:
                v = self.hist.classified & M32
            elif a == HIST_WINDOW:
                v = self.hist.window
            elif a == HIST_CTRL:
                v = 0
            elif a >= HIST_ACC:
                v = self.hist.acc[(a - HIST_ACC) >> 2]
            else:
                raise MemFault(f"reserved MMIO address 0x{a:x}", pc=pc, addr=a)
        elif IMEM_ALIAS <= a and a + size <= IMEM_ALIAS + 4 * isa.IMEM_WORDS:
            raw = b"".join((w or 0).to_bytes(4, "little") for w in
                           self.imem[(a - IMEM_ALIAS) >> 2:((a - IMEM_ALIAS + size - 1) >> 2) + 1])
            o = (a - IMEM_ALIAS) & 3
            v = int.from_bytes(raw[o:o + size], "little")
        elif a >= FIFO_BASE:
            raise MemFault(f"FIFO window is write-only (0x{a:x})", pc=pc, addr=a)
        else:
            raise MemFault(f"load from unmapped address 0x{a:x}", pc=pc, addr=a)
        if signed and v >> (8 * size - 1):
            v -= 1 << (8 * size)
        return v & M32

    def store(self, a: int, size: int, v: int, pc: int):
        v &= (1 << (8 * size)) - 1
        if a + size <= SCRATCH_SIZE and (a + size <= self.mmio_lo or a >= self.mmio_hi):
            self.dmem[a:a + size] = v.to_bytes(size, "little")
        elif SLREG_BASE <= a < self.mmio_hi:
            if size != 4 or a & 3:
                raise MemFault(f"MMIO access must be an aligned word (0x{a:x})", pc=pc, addr=a)
            if a < HIST_CTRL:
                try:
                    self.slregs.write_slreg((a - SLREG_BASE) >> 2, v)
                except MachineFault:
                    raise
                except Exception as e:  # block bug surfaces as a fault, not a crash
                    raise BlockFault(f"{self.slregs.name}: {e}", pc=pc, addr=a) from e
            elif a == HIST_CTRL:
                if v & 1:
                    self.hist.reset()
            elif a == HIST_WINDOW:
                if v > 511:
                    raise MemFault(f"hist window {v} exceeds 511", pc=pc, addr=a)
                self.hist.set_window(v)
            else:
                raise MemFault(f"store to read-only MMIO address 0x{a:x}", pc=pc, addr=a)
        elif IMEM_ALIAS <= a < IMEM_ALIAS + 4 * isa.IMEM_WORDS:
            raise WriteToImem(f"store to instruction memory 0x{a:x}", pc=pc, addr=a)
        elif FIFO_BASE <= a <= M32:
            self._push(v.to_bytes(size, "little"), self._emit_cycle(0), 0)
        else:
            raise MemFault(f"store to unmapped address 0x{a:x}", pc=pc, addr=a)

    # ------------------------------------------------------------ extension helpers

    def _r(self):
        return 0 if self.idealized else self.clock_ratio

    def _emit_cycle(self, off):
        return math.floor(self._start + (self._rcost + off) * self._r())

    def _push(self, data: bytes, cycle: int, header_len: int):
        if not data:
            return
        pkt = OutputPacket(int(cycle), bytes(data), self.ipu_id, header_len)
        self.counters["emitted_bytes"] += len(data)
        self.packets.append(pkt)
        if self.sink is not None:
            self.sink(pkt)

    def _emit(self, a: int, n: int, off: int, pc: int):
        if a + n > SCRATCH_SIZE:
            raise MemFault(f"emit range 0x{a:x}+{n} outside scratchpad", pc=pc, addr=a)
        self._push(self.dmem[a:a + n], self._emit_cycle(off), 0)

    def _hist(self, mode: int, values, off: int, pc: int):
        out = self.hist.classify(mode, values)
        if out is not None:
            self._push(out, self._emit_cycle(off), 1)

    def _regtimer(self, handler: int, period: int, off: int, pc: int):
        t = self.timer
        if t.armed and t.handler == handler and t.period == period:
            return  # re-arming with the same parameters is a no-op
        if period <= 0:
            self.timer = Timer(overruns=t.overruns, fired=t.fired)
            return
        self.timer = Timer(period, handler, 0, math.floor(self._start), False, t.overruns, t.fired)

    def _illegal(self, pc):
        raise IllegalInstruction(f"no legal instruction at word {pc}", pc=pc)

    # ------------------------------------------------------------ reference interpreter

    def _opnd(self, o: isa.Operand) -> int:
        if o.is_io:
            v = self.ioregs[o.index]
            return v >> 32 if o.hi else v & M32
        return self.gprs[o.index]

    def _wr(self, rd: int, v: int):
        if rd:
            self.gprs[rd] = v & M32

    def _exec_one(self) -> int:
        """Execute the instruction at ``pc``; returns its cost in IPU cycles."""
        pc = self.pc
        ins = self.instruction_at(pc)
        if ins is None:
            self._illegal(pc)
        op = ins.op
        nxt = pc + ins.size
        if op in isa.R_OPS:
            a, b = self._opnd(ins.rs1), self._opnd(ins.rs2)
            self._wr(ins.rd, _alu(op, a, b))
        elif op in isa.I_OPS or op in isa.SHIFT_OPS:
            a = self._opnd(ins.rs1)
            self._wr(ins.rd, _alu_imm(op, a, ins.imm))
        elif op == "lui":
            self._wr(ins.rd, ins.imm << 12)
        elif op == "auipc":
            self._wr(ins.rd, pc * 4 + (ins.imm << 12))
        elif op in isa.LOADS:
            a = (self._opnd(ins.rs1) + ins.imm) & M32
            size = {"lb": 1, "lbu": 1, "lh": 2, "lhu": 2, "lw": 4}[op]
            self._wr(ins.rd, self.load(a, size, op in ("lb", "lh"), pc))
        elif op in isa.STORES:
            a = (self._opnd(ins.rs1) + ins.imm) & M32
            self.store(a, {"sb": 1, "sh": 2, "sw": 4}[op], self._opnd(ins.rs2), pc)
        elif op in isa.BRANCHES:
            a = self._opnd(ins.rs1)
            b = ins.cmp & M32 if ins.cmp is not None else self._opnd(ins.rs2)
            if _branch(op, a, b):
                nxt = pc + ins.imm // 4
        elif op == "jal":
            self._wr(ins.rd, (pc + 1) * 4)
            nxt = pc + ins.imm // 4
        elif op == "jalr":
            t = ((self._opnd(ins.rs1) + ins.imm) & M32) >> 2
            self._wr(ins.rd, (pc + 1) * 4)
            nxt = t
        elif op == "hash":
            self._wr(ins.rd, hash32(self._opnd(ins.rs1)))
        elif op == "hist":
            src = ins.rs1
            vals = tuple(self._opnd(isa.Operand(src.file, src.index + k, src.hi)) for k in range(ins.lanes))
            self._hist(ins.mode, vals, 0, pc)
            lp = self.loop
            if lp is not None and pc == lp.body_pc:
                lp.remaining -= 1
                lp.done += 1
                if lp.remaining > 0:
                    nxt = pc  # wait here for the next arrival
                else:
                    self.loop = None
        elif op == "emit":
            self._emit(self._opnd(ins.rs1), ins.imm, 0, pc)
        elif op == "regtimer":
            self._regtimer(ins.imm, ins.period, 0, pc)
        elif op == "loopn":
            if self._ctx != "main":
                raise IllegalLoopBody("loop directive outside _main", pc=pc)
            body = self.instruction_at(pc + 1)
            if body is None or body.op != "hist":
                raise IllegalLoopBody("loop body must be a hist instruction", pc=pc)
            if ins.imm == 0:
                nxt = pc + 2
            else:
                self.loop = LoopState(ins.imm, pc + 1, body, self._start, 0)
        elif op == "ret":
            if self._ctx in ("finish", "init"):
                self.status = Status.PAUSED
            else:
                self.status = Status.ACTIVE_PAUSED
            self._ctx = None
            nxt = self.main_pc
        self.pc = nxt
        return self.cost.of(ins)

    def loop_waiting(self) -> bool:
        return self.loop is not None and self.pc == self.loop.body_pc and self.loop.done > 0

    def step(self) -> StepResult:
        """Execute exactly one instruction of the current routine."""
        if self.status not in (Status.ACTIVE_RUNNING, Status.FINALIZE):
            raise InvalidTransition(f"step requires ACTIVE_RUNNING or FINALIZE, not {self.status.name}")
        if self.loop_waiting():
            raise InvalidTransition("loop is waiting for the next arrival")
        if self._ctx is None:
            self._ctx = "finish" if self.status == Status.FINALIZE else "main"
        before = len(self.packets)
        try:
            c = self._exec_one()
        except MachineFault as f:
            self._set_fault(f, self._start)
            return StepResult(0, self.status, self.fault, [p.data for p in self.packets[before:]])
        self.gprs[0] = 0
        self.counters["active_cycles"] += c
        return StepResult(c, self.status, None, [p.data for p in self.packets[before:]])

    def _set_fault(self, f: MachineFault, t):
        self.status = Status.ERROR
        self.loop = None
        self._ctx = None
        self.fault = {"kind": f.kind, "message": str(f), "pc": f.pc if f.pc is not None else self.pc,
                      "addr": f.addr, "cycle": math.floor(t)}


    # ------------------------------------------------------------ routine execution

    def _continue(self, pc: int, ctx: str, t, cost: int):
        """Run from ``pc`` until ``ret`` or until a loop waits for input.

        Returns (cost, suspended). Registers/memory change immediately; the caller
        turns the cost into busy time.
        """
        self._ctx = ctx
        self._start = t
        self.status = Status.ACTIVE_RUNNING
        limit = self.max_routine_cycles
        if self.use_compiler:
            blocks = self._blocks
            while True:
                blk = blocks.get(pc)
                if blk is None:
                    blk = blocks[pc] = compile_block(self, pc)
                self._rcost = cost
                self.pc = pc
                nxt = blk.fn(self)
                cost += blk.cost
                if nxt is not None and nxt >= 0:
                    pc = nxt
                    if cost > limit:
                        raise RoutineTimeout(f"routine exceeded {limit} cycles", pc=pc)
                    continue
                if nxt == RET:
                    self.gprs[0] = 0
                    self.status = Status.ACTIVE_PAUSED
                    self._ctx = None
                    self.pc = self.main_pc
                    return cost, False
                # loop directive: let the interpreter set up the loop and run iteration 0
                n, lpc = self._loop_req
                self.pc = lpc
                self._rcost = cost - self.cost.loopn
                self._exec_one()
                if self.loop is None:  # loopn 0
                    pc = self.pc
                    continue
                self.loop.pre_cost = cost
                self._rcost = cost
                cost += self._exec_one()  # iteration 0 on the dispatch data
                if self.loop is not None:
                    return cost, True
                pc = self.pc
        else:
            self.pc = pc
            while True:
                self._rcost = cost
                was_loop = self.loop
                c = self._exec_one()
                self.gprs[0] = 0
                if was_loop is None and self.loop is not None:
                    self.loop.pre_cost = cost + c
                cost += c
                if self.status != Status.ACTIVE_RUNNING:
                    return cost, False
                if self.loop_waiting():
                    return cost, True
                if cost > limit:
                    raise RoutineTimeout(f"routine exceeded {limit} cycles", pc=self.pc)

    def _dispatch(self, entry: int, ctx: str, t):
        """Start a routine at time ``t``; the machine stays busy for its cost."""
        try:
            cost, suspended = self._continue(entry, ctx, t, self.cost.dispatch)
        except MachineFault as f:
            self._set_fault(f, t)
            return
        self.counters["active_cycles"] += cost
        self.status = Status.ACTIVE_RUNNING
        if suspended:
            return
        self._busy(t + cost * self._r(), t)

    def _busy(self, end, t):
        self.busy_until = end
        if end <= t:
            self._complete(end)

    def _complete(self, b):
        """In-flight routine finished at time ``b``."""
        self._count_to(math.ceil(b) - 1)
        if self.stop_pending or self.pause_pending:
            self.stop_pending = self.pause_pending = False
            self.status = Status.PAUSED
            return
        self.status = Status.ACTIVE_PAUSED
        if self.timer.pending:
            self._run_handler(b)

    def _run_handler(self, t):
        self.timer.pending = False
        self.counters["handler_invocations"] += 1
        self._dispatch(self.timer.handler, "handler", t)

    # ------------------------------------------------------------ timer

    def _count_to(self, x):
        """Count delivered active cycles up to and including ``x``."""
        tm = self.timer
        if self._horizon is not None:
            x = min(x, self._horizon - 1)
        if x <= tm.last:
            return
        if tm.armed and self.status in ACTIVE:
            k = self.sample_every
            tm.count += x // k - tm.last // k
        tm.last = x

    def _next_expiry(self):
        tm = self.timer
        if not tm.armed or self.status not in ACTIVE:
            return None
        k = self.sample_every
        first = (tm.last // k + 1) * k
        e = first + (tm.period - tm.count - 1) * k
        if self._horizon is not None and e >= self._horizon:
            return None
        return e

    def _expire(self, e):
        tm = self.timer
        tm.count = 0
        tm.last = e
        tm.fired += 1
        if tm.pending:
            tm.overruns += 1
        else:
            tm.pending = True
        if self.status == Status.ACTIVE_PAUSED:
            self._run_handler(e)

    def _advance(self, c):
        """Process routine completions at or before ``c`` and timer expiries before ``c``."""
        while self.status in ACTIVE:
            e = self._next_expiry()
            if self.status == Status.ACTIVE_RUNNING and self.loop is None and self.busy_until <= c:
                b = self.busy_until
                if e is not None and e < b:
                    self._expire(e)
                else:
                    self._complete(b)
                continue
            if e is not None and e < c:
                self._expire(e)
                continue
            break
        self._count_to(c - 1)

    def _count_cycle(self, c):
        """Cycle ``c`` itself is delivered while active."""
        if self.status in ACTIVE and c % self.sample_every == 0:
            if self._next_expiry() == c:
                self._expire(c)
            else:
                self._count_to(c)

    def _activate(self, t):
        self.status = Status.ACTIVE_PAUSED
        self.timer.last = t - 1

    # ------------------------------------------------------------ data delivery

    def _latch(self, upd):
        io = self.ioregs
        v = 0
        for r, val in upd:
            io[r] = val & M64
            v |= 1 << r
        self.valid |= v

    def _on_record(self, c, upd, addr):
        self._advance(c)
        st = self.status
        if addr is not None:
            self.addr = addr & M64
            if st == Status.PAUSED:
                if self.ts is not None and self.addr == self.ts and not self.ts_disarmed:
                    self._activate(c)
                elif self.te is not None and self.addr == self.te and self.ts is not None:
                    self.ts_disarmed = True
            elif self.te is not None and self.addr == self.te:
                if st == Status.ACTIVE_PAUSED:
                    self._count_to(c - 1)
                    self.status = Status.PAUSED
                elif st == Status.ACTIVE_RUNNING:
                    self.stop_pending = True
            st = self.status
        if st not in ACTIVE:
            if upd:
                self.counters["ignored"] += 1
            return
        self._count_cycle(c)
        if not upd:
            return
        self.counters["delivered"] += 1
        if self.block is not None:
            try:
                self.block.clock(c, upd)
            except MachineFault as f:
                self._set_fault(f, c)
                return
            except Exception as e:
                self._set_fault(BlockFault(f"{getattr(self.block, 'name', 'block')}: {e}"), c)
                return
        st = self.status
        if st == Status.ACTIVE_PAUSED:
            self.counters["consumed"] += 1
            self.counters["main_invocations"] += 1
            self._latch(upd)
            self.valid = 0
            self._dispatch(self.main_pc, "main", c)
        elif self.loop is not None:
            self.counters["consumed"] += 1
            self._latch(upd)
            self.valid = 0
            self._loop_iteration(c)
        else:
            self.counters["dropped_arrivals"] += 1

    def _loop_iteration(self, c):
        lp = self.loop
        self._start = c
        self._rcost = 0
        self._ctx = "main"
        try:
            self._exec_one()
        except MachineFault as f:
            self._set_fault(f, c)
            return
        self.counters["active_cycles"] += self.cost.hist
        lp.last_cycle = c
        if self.loop is None:
            self._loop_done(lp, c)

    def _loop_done(self, lp: LoopState, c_last):
        """All iterations ran; resume the code after the loop body."""
        r = self._r()
        t_post = c_last if self.idealized else c_last + 1
        pc = self.pc
        ins = self.instruction_at(pc)
        if ins is not None and ins.op == "ret":  # folded into the last iteration
            self.status = Status.ACTIVE_PAUSED
            self._ctx = None
            self.pc = self.main_pc
            post, suspended = 0, False
        else:
            try:
                post, suspended = self._continue(pc, "main", t_post, 0)
            except MachineFault as f:
                self._set_fault(f, t_post)
                return
            self.counters["active_cycles"] += post
        self.status = Status.ACTIVE_RUNNING
        if suspended:
            return
        end = max(t_post, lp.start + lp.pre_cost * r) + post * r
        self._busy(end, c_last)

    def deliver_cycle(self, record) -> StepResult:
        """Deliver one (already sampled) record."""
        if self.status == Status.UNDEFINED:
            raise InvalidTransition("no image loaded")
        before = len(self.packets)
        cost0 = self.counters["active_cycles"]
        if self.status != Status.ERROR:
            self._on_record(record.cycle, list(record.updates), record.addr)
        return StepResult(self.counters["active_cycles"] - cost0, self.status, self.fault,
                          [p.data for p in self.packets[before:]])

    # ------------------------------------------------------------ whole traces

    def run_trace(self, trace, clock_ratio=None, sample_every: Optional[int] = None,
                  auto_resume: bool = True) -> RunReport:
        """Drive a whole trace. Trace cycles are offset by the time already simulated."""
        from .trace import Trace  # local import keeps machine usable without numpy traces

        if self.status == Status.UNDEFINED:
            raise InvalidTransition("no image loaded")
        if clock_ratio is not None:
            r = Fraction(clock_ratio)
            if r <= 0:
                raise ValueError("clock ratio must be positive")
            self.clock_ratio = int(r) if r.denominator == 1 else r
        if sample_every is not None:
            if sample_every < 1:
                raise ValueError("sample_every must be >= 1")
            self.sample_every = int(sample_every)
        if not isinstance(trace, Trace):
            recs = list(trace)
            length = recs[-1].cycle + 1 if recs else 0
            trace = _RecordList(recs, length)
        t0 = self.now
        length = trace.length
        self._horizon = t0 + length
        first_packet = len(self.packets)
        counters0 = dict(self.counters)
        if self.status == Status.PAUSED and auto_resume and self.ts is None and length:
            self._activate(t0)
        if self.status != Status.ERROR:
            if isinstance(trace, _RecordList):
                for rec in trace.records:
                    if rec.cycle % self.sample_every:
                        continue
                    self._on_record(t0 + rec.cycle, list(rec.updates), rec.addr)
                    if self.status == Status.ERROR:
                        break
            else:
                self._run_columnar(trace, t0)
        if self.status != Status.ERROR:
            self._finish_trace(t0 + length)
        self.now = t0 + length
        self._horizon = None
        delta = {k: self.counters[k] - counters0.get(k, 0) for k in self.counters}
        busy_hit = delta["active_cycles"] * (0 if self.idealized else self.clock_ratio)
        delta["idle_cycles"] = max(0, math.floor(length - busy_hit))
        self.counters["idle_cycles"] += delta["idle_cycles"]
        return RunReport(self.status, delta, self.packets[first_packet:], length, self.fault,
                         self.loop is not None, self.loop.done if self.loop else 0, self.timer.fired,
                         self.timer.overruns, self.idealized, self.clock_ratio, self.sample_every)

    def _finish_trace(self, end):
        self._advance(end)
        # a handler that fell due while the last routine was still running still gets to run
        if (self.status == Status.ACTIVE_RUNNING and self.loop is None and self.timer.pending
                and not (self.stop_pending or self.pause_pending)):
            self._complete(self.busy_until)

    def _run_columnar(self, trace, t0):
        k = self.sample_every
        n = len(trace)
        if n == 0:
            return
        regs = trace.abi.ioregs
        cyc_np = trace.cycle_array()
        if k > 1:
            sel = (cyc_np % k == 0).nonzero()[0]
        else:
            sel = None
        mask_np = trace.mask
        full = trace.full_mask()
        has_addr = trace.has_addr
        no_addr = has_addr is None
        fast_loop = self.block is None and no_addr
        chunk = 1 << 15
        cache_id = -1
        cols = cyc = masks = haddr = addrs = None
        total = n if sel is None else len(sel)
        j = 0
        while j < total:
            i = j if sel is None else int(sel[j])
            cid = j // chunk
            if cid != cache_id:
                cache_id = cid
                lo, hi = cid * chunk, min(total, (cid + 1) * chunk)
                idx = slice(lo, hi) if sel is None else sel[lo:hi]
                cyc = cyc_np[idx].tolist()
                cols = [(r, trace.values[r][idx].tolist()) for r in regs]
                masks = mask_np[idx].tolist() if mask_np is not None else None
                if not no_addr:
                    haddr = has_addr[idx].tolist()
                    addrs = trace.addr[idx].tolist()
            q = j - cache_id * chunk
            c = t0 + cyc[q]
            m = full if masks is None else masks[q]
            upd = [(r, col[q]) for r, col in cols if m >> r & 1] if m else None
            a = addrs[q] if not no_addr and haddr[q] else None
            if fast_loop and upd and self.loop is not None and self.status == Status.ACTIVE_RUNNING:
                used = self._vector_loop(trace, cyc_np, sel, j, total, t0)
                if used:
                    j += used
                    continue
            self._on_record(c, upd, a)
            if self.status == Status.ERROR:
                return
            j += 1

    def _vector_loop(self, trace, cyc_all, sel, j, total, t0) -> int:
        """Feed the waiting loop from consecutive arrivals with numpy. Returns records consumed."""
        import numpy as np

        lp = self.loop
        need = min(lp.remaining, total - j)
        if need < 2:
            return 0
        idx = slice(j, j + need) if sel is None else sel[j:j + need]
        mask = trace.mask
        if mask is not None:
            mk = mask[idx]
            if not (mk != 0).all():
                return 0
        cyc = cyc_all[idx]
        c_first = t0 + int(cyc[0])
        c_last = t0 + int(cyc[-1])
        # time passes with the machine busy in the loop; timer expiries just queue
        self._advance(c_first)
        self._count_cycle(c_first)
        self._advance(c_last)
        self._count_cycle(c_last)
        src = lp.body.rs1
        lanes = []
        for q in range(lp.body.lanes):
            r = src.index + q
            if not src.is_io:
                vals = np.full(need, self.gprs[r], dtype=np.uint64)
            else:
                col = trace.values.get(r)
                if col is None:
                    vals = np.full(need, self.ioregs[r], dtype=np.uint64)
                elif mask is None:
                    vals = col[idx].astype(np.uint64)
                else:
                    hit = (mk >> np.uint32(r)) & 1
                    last = np.maximum.accumulate(np.where(hit == 1, np.arange(need), -1))
                    vals = np.where(last >= 0, col[idx][np.maximum(last, 0)].astype(np.uint64),
                                    np.uint64(self.ioregs[r]))
                vals = (vals >> np.uint64(32)) if src.hi else (vals & np.uint64(M32))
            lanes.append(vals)
        block = np.stack(lanes, axis=1)
        for row, payload in self.hist.classify_block(lp.body.mode, block):
            self._push(payload, t0 + int(cyc[row]), 1)
        # registers hold the last latched value of every signal updated in the range
        for r, col in trace.values.items():
            if mask is None:
                self.ioregs[r] = int(col[idx][-1])
            else:
                hit = ((mk >> np.uint32(r)) & 1).nonzero()[0]
                if len(hit):
                    self.ioregs[r] = int(col[idx][hit[-1]])
        self.valid = 0
        self.counters["delivered"] += need
        self.counters["consumed"] += need
        self.counters["active_cycles"] += need * self.cost.hist
        lp.remaining -= need
        lp.done += need
        lp.last_cycle = c_last
        if lp.remaining == 0:
            self.loop = None
            self.pc = lp.body_pc + 1
            self._loop_done(lp, c_last)
        return need

    # ------------------------------------------------------------ host commands

    def host_control(self, command, addr: Optional[int] = None) -> "IpuState":
        cmd = command if isinstance(command, Command) else Command(str(command).upper())
        st = self.status
        if cmd in (Command.CONFIG_START, Command.CONFIG_STOP):
            if st != Status.PAUSED:
                raise InvalidTransition(f"{cmd.value} requires PAUSED, not {st.name}")
            val = None if addr is None else addr & M64
            if cmd == Command.CONFIG_START:
                self.ts = val
                self.ts_disarmed = False
            else:
                self.te = val
                self.ts_disarmed = False
            return self
        if st in (Status.UNDEFINED, Status.ERROR, Status.FINALIZE):
            raise InvalidTransition(f"{cmd.value} not allowed while {st.name}")
        t = max(self.now, math.ceil(self.busy_until) if self.loop is None else self.now)
        if cmd == Command.PAUSE:
            if st == Status.ACTIVE_RUNNING:
                self.pause_pending = True
            elif st == Status.ACTIVE_PAUSED:
                self.status = Status.PAUSED
        elif cmd == Command.RESUME:
            if st == Status.PAUSED:
                self._activate(self.now)
            self.pause_pending = False
        elif cmd == Command.FINALIZE:
            self.loop = None
            self.stop_pending = self.pause_pending = False
            self.status = Status.FINALIZE
            self._ctx = "finish"
            self._start = t
            self.pc = isa.FINISH_BASE
            budget = self.max_routine_cycles
            try:
                while self.status == Status.FINALIZE:
                    self._rcost = 0
                    budget -= self._exec_one()
                    self.gprs[0] = 0
                    if budget < 0:
                        raise RoutineTimeout("finish exceeded the cycle budget", pc=self.pc)
            except MachineFault as f:
                self._set_fault(f, t)
                return self
            self.status = Status.PAUSED
            self._ctx = None
            self.pc = self.main_pc
        return self

    def snapshot(self) -> dict:
        """Comparable view of architectural state."""
        return {
            "status": self.status.name, "pc": self.pc, "gprs": list(self.gprs), "ioregs": list(self.ioregs),
            "dmem": bytes(self.dmem), "hist": (list(self.hist.acc), self.hist.overflow, self.hist.classified),
            "ts": self.ts, "te": self.te, "addr": self.addr, "counters": dict(self.counters),
            "packets": [(p.cycle, p.data) for p in self.packets],
        }

def _alu(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "sll":
        return a << (b & 31)
    if op == "slt":
        return int(_signed(a) < _signed(b))
    if op == "sltu":
        return int(a < b)
    if op == "xor":
        return a ^ b
    if op == "srl":
        return a >> (b & 31)
    if op == "sra":
        return _signed(a) >> (b & 31)
    if op == "or":
        return a | b
    return a & b


def _alu_imm(op, a, imm):
    if op == "addi":
        return a + imm
    if op == "slti":
        return int(_signed(a) < imm)
    if op == "sltiu":
        return int(a < (imm & M32))
    if op == "xori":
        return a ^ (imm & M32)
    if op == "ori":
        return a | (imm & M32)
    if op == "andi":
        return a & imm & M32
    if op == "slli":
        return a << imm
    if op == "srli":
        return a >> imm
    return _signed(a) >> imm


def _branch(op, a, b):
    if op == "beq":
        return a == b
    if op == "bne":
        return a != b
    if op == "blt":
        return _signed(a) < _signed(b)
    if op == "bge":
        return _signed(a) >= _signed(b)
    if op == "bltu":
        return a < b
    return a >= b


class _RecordList:
    def __init__(self, records, length):
        self.records = records
        self.length = length


# functional-style aliases mirroring the operation names
def load_image(state: IpuState, image) -> IpuState:
    return state.load_image(image)


def deliver_cycle(state: IpuState, record) -> StepResult:
    return state.deliver_cycle(record)


def step(state: IpuState) -> StepResult:
    return state.step()


def run_trace(state: IpuState, trace, clock_ratio=None, sample_every=None) -> RunReport:
    return state.run_trace(trace, clock_ratio, sample_every)


def host_control(state: IpuState, command, addr=None) -> IpuState:
    return state.host_control(command, addr)

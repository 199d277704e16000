"""Basic-block compiler: turns straight-line runs of instructions into Python functions.

Each generated function takes the machine, mutates its registers and memory
exactly as repeated ``step`` calls would, and returns the next pc (or the RET /
LOOP sentinels). Costs are static per block.
"""
from __future__ import annotations

from . import isa
from .errors import IllegalInstruction
from .funcunits import hash32

M = 0xFFFFFFFF
MAX_BLOCK = 64


class Block:
    __slots__ = ("fn", "cost", "start", "source")

    def __init__(self, fn, cost, start, source):
        self.fn = fn
        self.cost = cost
        self.start = start
        self.source = source


def _rd(o: isa.Operand) -> str:
    if o.is_io:
        return f"(x[{o.index}] >> 32)" if o.hi else f"(x[{o.index}] & M)"
    return "0" if o.index == 0 else f"g[{o.index}]"


def _s(expr: str) -> str:
    return f"((({expr}) ^ 0x80000000) - 0x80000000)"


_ALU = {
    "add": "({a} + {b}) & M",
    "sub": "({a} - {b}) & M",
    "sll": "({a} << ({b} & 31)) & M",
    "slt": "int({sa} < {sb})",
    "sltu": "int({a} < {b})",
    "xor": "{a} ^ {b}",
    "srl": "{a} >> ({b} & 31)",
    "sra": "({sa} >> ({b} & 31)) & M",
    "or": "{a} | {b}",
    "and": "{a} & {b}",
}

_COND = {"beq": "{a} == {b}", "bne": "{a} != {b}", "blt": "{sa} < {sb}", "bge": "{sa} >= {sb}",
         "bltu": "{a} < {b}", "bgeu": "{a} >= {b}"}


def _imm_expr(op: str, a: str, imm: int) -> str:
    if op == "addi":
        return f"({a} + {imm}) & M"
    if op == "slti":
        return f"int({_s(a)} < {imm})"
    if op == "sltiu":
        return f"int({a} < {imm & M})"
    if op == "xori":
        return f"{a} ^ {imm & M}"
    if op == "ori":
        return f"{a} | {imm & M}"
    if op == "andi":
        return f"{a} & {imm & M}"
    if op == "slli":
        return f"({a} << {imm}) & M"
    if op == "srli":
        return f"{a} >> {imm}"
    return f"({_s(a)} >> {imm}) & M"  # srai


def compile_block(m, start: int) -> Block:
    """Compile from ``start`` to the first control transfer (or MAX_BLOCK instructions)."""
    lo, hi = m.mmio_lo, m.mmio_hi
    body = []
    emit = body.append
    cost = 0
    pc = start
    n = 0
    while True:
        ins = m.instruction_at(pc)
        if ins is None:
            emit(f"m._illegal({pc})")
            break
        off = cost  # cost accrued inside this block before ``ins``
        c = m.cost.of(ins)
        cost += c
        op = ins.op
        rd = ins.rd
        dst = f"g[{rd}] = " if rd else "_ = "
        if op in isa.R_OPS:
            a, b = _rd(ins.rs1), _rd(ins.rs2)
            emit(dst + _ALU[op].format(a=a, b=b, sa=_s(a), sb=_s(b)))
        elif op in isa.I_OPS or op in isa.SHIFT_OPS:
            emit(dst + _imm_expr(op, _rd(ins.rs1), ins.imm))
        elif op == "lui":
            emit(dst + str((ins.imm << 12) & M))
        elif op == "auipc":
            emit(dst + str((pc * 4 + (ins.imm << 12)) & M))
        elif op in isa.LOADS:
            emit(f"a = ({_rd(ins.rs1)} + {ins.imm}) & M")
            if op == "lw":
                emit(f"v = int.from_bytes(d[a:a + 4], 'little') if a <= {lo - 4} or {hi} <= a <= 0x7FFC "
                     f"else m.load(a, 4, False, {pc})")
            else:
                size = {"lb": 1, "lbu": 1, "lh": 2, "lhu": 2}[op]
                emit(f"v = m.load(a, {size}, {op in ('lb', 'lh')}, {pc})")
            if rd:
                emit(f"g[{rd}] = v")
        elif op in isa.STORES:
            emit(f"a = ({_rd(ins.rs1)} + {ins.imm}) & M")
            v = _rd(ins.rs2)
            if op == "sw":
                emit(f"if a <= {lo - 4} or {hi} <= a <= 0x7FFC: d[a:a + 4] = ({v}).to_bytes(4, 'little')")
                emit(f"else: m.store(a, 4, {v}, {pc})")
            else:
                emit(f"m.store(a, {1 if op == 'sb' else 2}, {v}, {pc})")
        elif op == "hash":
            emit(dst + f"H({_rd(ins.rs1)})")
        elif op == "hist":
            src = ins.rs1
            lanes = [_rd(isa.Operand(src.file, src.index + k, src.hi)) for k in range(ins.lanes)]
            emit(f"m._hist({ins.mode}, ({', '.join(lanes)},), {off}, {pc})")
        elif op == "emit":
            emit(f"m._emit({_rd(ins.rs1)}, {ins.imm}, {off}, {pc})")
        elif op == "regtimer":
            emit(f"m._regtimer({ins.imm}, {ins.period}, {off}, {pc})")
        elif op in isa.BRANCHES:
            a = _rd(ins.rs1)
            b = str(ins.cmp & M) if ins.cmp is not None else _rd(ins.rs2)
            sb = str(ins.cmp) if ins.cmp is not None else _s(b)
            cond = _COND[op].format(a=a, b=b, sa=_s(a), sb=sb)
            emit(f"return {pc + ins.imm // 4} if {cond} else {pc + 1}")
            break
        elif op == "jal":
            if rd:
                emit(f"g[{rd}] = {((pc + 1) * 4) & M}")
            emit(f"return {pc + ins.imm // 4}")
            break
        elif op == "jalr":
            emit(f"t = (({_rd(ins.rs1)} + {ins.imm}) & M) >> 2")
            if rd:
                emit(f"g[{rd}] = {((pc + 1) * 4) & M}")
            emit("return t")
            break
        elif op == "loopn":
            emit(f"m._loop_req = ({ins.imm}, {pc})")
            emit("return LOOP")
            break
        elif op == "ret":
            emit("return RET")
            break
        else:  # pragma: no cover - decode() admits nothing else
            emit(f"m._illegal({pc})")
            break
        pc += ins.size
        n += 1
        if n >= MAX_BLOCK:
            emit(f"return {pc}")
            break
    src = "def blk(m):\n    g = m.gprs\n    x = m.ioregs\n    d = m.dmem\n" + "".join(f"    {s}\n" for s in body)
    ns = {"M": M, "H": hash32, "RET": -1, "LOOP": -2, "IllegalInstruction": IllegalInstruction}
    exec(compile(src, f"<ipu block {start}>", "exec"), ns)
    return Block(ns["blk"], cost, start, src)

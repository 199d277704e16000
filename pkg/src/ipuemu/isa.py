"""IPU instruction set: RV32I base subset plus introspection extensions.

Encoding summary (bit positions follow the usual RISC-V field layout):

* Pure-GPR base instructions use their standard RV32I encodings.
* R-type ALU ops carry IOReg selectors in funct7 bits 0-3
  (rs1 is-IOReg, rs1 high-half, rs2 is-IOReg, rs2 high-half).
* custom-0 (0x0B) holds the extensions, funct3 selects
  hash / hist / regtimer / loopn / emit / ret.
* custom-1 (0x2B) is OP-IMM with an IOReg rs1 (11-bit immediate, bit 31 = high half).
* custom-2 (0x5B) is compare-with-immediate branch (``beq x0, 1, label``).
* custom-3 (0x7B) is register/register branch with IOReg operands.

``regtimer`` is the one two-word instruction: the word after it is the
32-bit period literal.
"""
from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

from .errors import AsmSyntaxError, IllegalEncoding, ImageTooLarge, UnknownSignal

IMEM_WORDS = 2048
FINISH_BASE = 0x7F0  # word index of the finish region
FINISH_SLOTS = IMEM_WORDS - FINISH_BASE
M32 = 0xFFFFFFFF

OPC_LOAD, OPC_OPIMM, OPC_AUIPC, OPC_STORE = 0x03, 0x13, 0x17, 0x23
OPC_OP, OPC_LUI, OPC_BRANCH, OPC_JALR, OPC_JAL = 0x33, 0x37, 0x63, 0x67, 0x6F
OPC_EXT, OPC_IOIMM, OPC_BRI, OPC_IOBR = 0x0B, 0x2B, 0x5B, 0x7B

R_OPS = {"add": (0, 0), "sub": (0, 0x20), "sll": (1, 0), "slt": (2, 0), "sltu": (3, 0),
         "xor": (4, 0), "srl": (5, 0), "sra": (5, 0x20), "or": (6, 0), "and": (7, 0)}
I_OPS = {"addi": 0, "slti": 2, "sltiu": 3, "xori": 4, "ori": 6, "andi": 7}
SHIFT_OPS = {"slli": (1, 0), "srli": (5, 0), "srai": (5, 0x20)}
LOADS = {"lb": 0, "lh": 1, "lw": 2, "lbu": 4, "lhu": 5}
STORES = {"sb": 0, "sh": 1, "sw": 2}
BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
EXT_OPS = {"hash": 0, "hist": 1, "regtimer": 2, "loopn": 3, "emit": 4, "ret": 5}
HIST_MODES = {"hash": 0, "direct": 1, "simd": 2}

_R_BY_CODE = {v: k for k, v in R_OPS.items()}
_I_BY_CODE = {v: k for k, v in I_OPS.items()}
_SHIFT_BY_CODE = {v: k for k, v in SHIFT_OPS.items()}
_LOAD_BY_CODE = {v: k for k, v in LOADS.items()}
_STORE_BY_CODE = {v: k for k, v in STORES.items()}
_BR_BY_CODE = {v: k for k, v in BRANCHES.items()}
_EXT_BY_CODE = {v: k for k, v in EXT_OPS.items()}
_MODE_NAMES = {v: k for k, v in HIST_MODES.items()}

POLICIES = ("closed", "restrictive", "permissive")


class Operand(NamedTuple):
    file: str  # "r" (GPR) or "x" (IOReg)
    index: int
    hi: bool = False

    @property
    def is_io(self):
        return self.file == "x"

    def __str__(self):
        return f"{self.file}{self.index}{'.hi' if self.hi else ''}"


def gpr(i: int) -> Operand:
    return Operand("r", i)


def ioreg(i: int, hi: bool = False) -> Operand:
    return Operand("x", i, hi)


@dataclass(frozen=True)
class Instruction:
    op: str
    rd: int = 0
    rs1: Optional[Operand] = None
    rs2: Optional[Operand] = None
    imm: int = 0
    cmp: Optional[int] = None  # compare immediate of the branch-immediate form
    mode: int = 0  # hist mode
    lanes: int = 0  # hist lane count
    period: int = 0  # regtimer period (second word)

    @property
    def kind(self) -> str:
        if self.op in R_OPS or self.op in I_OPS or self.op in SHIFT_OPS or self.op in ("lui", "auipc"):
            return "alu"
        if self.op in LOADS:
            return "load"
        if self.op in STORES:
            return "store"
        if self.op in BRANCHES:
            return "branch"
        if self.op in ("jal", "jalr"):
            return "jump"
        return self.op

    @property
    def size(self) -> int:
        return 2 if self.op == "regtimer" else 1

    def io_operands(self):
        """IOReg indices read by this instruction."""
        out = []
        for o in (self.rs1, self.rs2):
            if o is not None and o.is_io:
                out.append(o.index)
        if self.op == "hist" and self.rs1 is not None and self.rs1.is_io:
            out.extend(range(self.rs1.index + 1, self.rs1.index + self.lanes))
        return out


def _sext(v, bits):
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


def _chk(cond, msg):
    if not cond:
        raise IllegalEncoding(msg)


def _fits(v, bits):
    return -(1 << (bits - 1)) <= v < (1 << (bits - 1))


# ---------------------------------------------------------------- encoding

def encode(ins: Instruction) -> list[int]:
    """Encode to one word (two for ``regtimer``). Raises ValueError on out-of-range fields."""
    op = ins.op
    rd = ins.rd
    if not 0 <= rd < 32:
        raise ValueError("rd out of range")
    s1, s2 = ins.rs1, ins.rs2
    for o in (s1, s2):
        if o is not None and (not 0 <= o.index < 32 or (o.hi and not o.is_io)):
            raise ValueError(f"bad operand {o}")

    if op in R_OPS:
        f3, alt = R_OPS[op]
        flags = (s1.is_io) | (s1.hi << 1) | (s2.is_io << 2) | (s2.hi << 3)
        return [((alt | flags) << 25) | (s2.index << 20) | (s1.index << 15) | (f3 << 12) | (rd << 7) | OPC_OP]
    if op in I_OPS or op in SHIFT_OPS:
        if op in SHIFT_OPS:
            f3, alt = SHIFT_OPS[op]
            if not 0 <= ins.imm < 32:
                raise ValueError("shift amount out of range")
            raw = (alt << 5) | ins.imm
        else:
            f3 = I_OPS[op]
            raw = ins.imm
        if s1.is_io:
            if op not in SHIFT_OPS and not _fits(raw, 11):
                raise ValueError("immediate out of 11-bit range")
            return [(s1.hi << 31) | ((raw & 0x7FF) << 20) | (s1.index << 15) | (f3 << 12) | (rd << 7) | OPC_IOIMM]
        if op not in SHIFT_OPS and not _fits(raw, 12):
            raise ValueError("immediate out of 12-bit range")
        return [((raw & 0xFFF) << 20) | (s1.index << 15) | (f3 << 12) | (rd << 7) | OPC_OPIMM]
    if op in LOADS or op == "jalr":
        if s1.is_io:
            raise ValueError(f"{op} base must be a GPR")
        if not _fits(ins.imm, 12):
            raise ValueError("offset out of range")
        f3, opc = (LOADS[op], OPC_LOAD) if op in LOADS else (0, OPC_JALR)
        return [((ins.imm & 0xFFF) << 20) | (s1.index << 15) | (f3 << 12) | (rd << 7) | opc]
    if op in STORES:
        if s1.is_io or s2.is_io:
            raise ValueError("store operands must be GPRs")
        if not _fits(ins.imm, 12):
            raise ValueError("offset out of range")
        i = ins.imm & 0xFFF
        return [((i >> 5) << 25) | (s2.index << 20) | (s1.index << 15) | (STORES[op] << 12)
                | ((i & 0x1F) << 7) | OPC_STORE]
    if op in BRANCHES:
        f3 = BRANCHES[op]
        if ins.imm % 4:
            raise ValueError("branch offset must be word aligned")
        w = ins.imm // 4
        if ins.cmp is not None:
            if not _fits(ins.cmp, 5) or not _fits(w, 10):
                raise ValueError("branch-immediate field out of range")
            w &= 0x3FF
            return [((w >> 5) << 27) | (s1.hi << 26) | (s1.is_io << 25) | ((ins.cmp & 0x1F) << 20)
                    | (s1.index << 15) | (f3 << 12) | ((w & 0x1F) << 7) | OPC_BRI]
        if s1.is_io or s2.is_io:
            if not _fits(w, 8):
                raise ValueError("IOReg branch offset out of range")
            w &= 0xFF
            flags = (s1.is_io) | (s1.hi << 1) | (s2.is_io << 2) | (s2.hi << 3)
            return [((w >> 5) << 29) | (flags << 25) | (s2.index << 20) | (s1.index << 15)
                    | (f3 << 12) | ((w & 0x1F) << 7) | OPC_IOBR]
        if not _fits(ins.imm, 13):
            raise ValueError("branch offset out of range")
        i = ins.imm & 0x1FFF
        return [(((i >> 12) & 1) << 31) | (((i >> 5) & 0x3F) << 25) | (s2.index << 20) | (s1.index << 15)
                | (f3 << 12) | (((i >> 1) & 0xF) << 8) | (((i >> 11) & 1) << 7) | OPC_BRANCH]
    if op == "jal":
        if ins.imm % 4 or not _fits(ins.imm, 21):
            raise ValueError("jal offset out of range")
        i = ins.imm & 0x1FFFFF
        return [(((i >> 20) & 1) << 31) | (((i >> 1) & 0x3FF) << 21) | (((i >> 11) & 1) << 20)
                | (((i >> 12) & 0xFF) << 12) | (rd << 7) | OPC_JAL]
    if op in ("lui", "auipc"):
        if not 0 <= ins.imm < (1 << 20):
            raise ValueError("upper immediate out of range")
        return [(ins.imm << 12) | (rd << 7) | (OPC_LUI if op == "lui" else OPC_AUIPC)]
    if op == "hash":
        return [(s1.hi << 21) | (s1.is_io << 20) | (s1.index << 15) | (rd << 7) | OPC_EXT]
    if op == "hist":
        if ins.mode not in _MODE_NAMES or not 1 <= ins.lanes <= 4 or s1.index + ins.lanes > 32:
            raise ValueError("bad hist configuration")
        return [((ins.lanes - 1) << 22) | (s1.hi << 21) | (s1.is_io << 20) | (s1.index << 15)
                | (1 << 12) | (ins.mode << 7) | OPC_EXT]
    if op == "regtimer":
        if not 0 <= ins.imm < IMEM_WORDS or not 0 <= ins.period <= M32:
            raise ValueError("regtimer field out of range")
        return [(ins.imm << 21) | (2 << 12) | OPC_EXT, ins.period]
    if op == "loopn":
        if not 0 <= ins.imm < (1 << 17):
            raise ValueError("loop count out of range")
        return [(ins.imm << 15) | (3 << 12) | OPC_EXT]
    if op == "emit":
        if not 0 <= ins.imm < 4096 or s1.is_io:
            raise ValueError("bad emit operands")
        return [(ins.imm << 20) | (s1.index << 15) | (4 << 12) | OPC_EXT]
    if op == "ret":
        return [(5 << 12) | OPC_EXT]
    raise ValueError(f"unknown op {op!r}")


# ---------------------------------------------------------------- decoding

def _ioflags(bits):
    """Operands from a 4-bit (io1, hi1, io2, hi2) flag field."""
    io1, hi1, io2, hi2 = bits & 1, (bits >> 1) & 1, (bits >> 2) & 1, (bits >> 3) & 1
    _chk(io1 or not hi1, "high-half flag without IOReg flag")
    _chk(io2 or not hi2, "high-half flag without IOReg flag")
    return io1, hi1, io2, hi2


def _opnd(io, idx, hi=0):
    return Operand("x" if io else "r", idx, bool(hi))


def decode(word: int, period: Optional[int] = None) -> Instruction:
    """Decode one word. ``period`` is the following word, needed only for ``regtimer``.

    Non-canonical encodings (stray bits in reserved fields) raise IllegalEncoding,
    so ``encode(decode(w)) == [w]`` for every accepted word.
    """
    _chk(0 <= word <= M32, "word out of range")
    opc = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 7
    r1 = (word >> 15) & 0x1F
    r2 = (word >> 20) & 0x1F
    f7 = word >> 25

    if opc == OPC_OP:
        _chk(f7 & ~0x2F == 0, "reserved funct7 bits set")
        io1, hi1, io2, hi2 = _ioflags(f7 & 0xF)
        name = _R_BY_CODE.get((f3, f7 & 0x20))
        _chk(name is not None, "bad funct7 for funct3")
        return Instruction(name, rd, _opnd(io1, r1, hi1), _opnd(io2, r2, hi2))
    if opc in (OPC_OPIMM, OPC_IOIMM):
        io = opc == OPC_IOIMM
        if io:
            hi = word >> 31
            raw = (word >> 20) & 0x7FF
            src = _opnd(1, r1, hi)
            bits = 11
        else:
            raw = word >> 20
            src = gpr(r1)
            bits = 12
        if f3 in (1, 5):
            alt = raw >> 5
            _chk(alt in (0, 0x20) and not (f3 == 1 and alt), "bad shift encoding")
            return Instruction(_SHIFT_BY_CODE[(f3, alt)], rd, src, imm=raw & 0x1F)
        return Instruction(_I_BY_CODE[f3], rd, src, imm=_sext(raw, bits))
    if opc == OPC_LOAD:
        _chk(f3 in _LOAD_BY_CODE, "bad load width")
        return Instruction(_LOAD_BY_CODE[f3], rd, gpr(r1), imm=_sext(word >> 20, 12))
    if opc == OPC_JALR:
        _chk(f3 == 0, "bad jalr funct3")
        return Instruction("jalr", rd, gpr(r1), imm=_sext(word >> 20, 12))
    if opc == OPC_STORE:
        _chk(f3 in _STORE_BY_CODE, "bad store width")
        imm = _sext(((word >> 25) << 5) | rd, 12)
        return Instruction(_STORE_BY_CODE[f3], 0, gpr(r1), gpr(r2), imm=imm)
    if opc == OPC_BRANCH:
        _chk(f3 in _BR_BY_CODE, "bad branch condition")
        i = (((word >> 31) & 1) << 12) | (((word >> 7) & 1) << 11) | (((word >> 25) & 0x3F) << 5) \
            | (((word >> 8) & 0xF) << 1)
        imm = _sext(i, 13)
        _chk(imm % 4 == 0, "misaligned branch offset")
        return Instruction(_BR_BY_CODE[f3], 0, gpr(r1), gpr(r2), imm=imm)
    if opc == OPC_BRI:
        _chk(f3 in _BR_BY_CODE, "bad branch condition")
        io, hi = (word >> 25) & 1, (word >> 26) & 1
        _chk(io or not hi, "high-half flag without IOReg flag")
        w = _sext(((word >> 27) << 5) | rd, 10)
        return Instruction(_BR_BY_CODE[f3], 0, _opnd(io, r1, hi), imm=w * 4, cmp=_sext(r2, 5))
    if opc == OPC_IOBR:
        _chk(f3 in _BR_BY_CODE, "bad branch condition")
        io1, hi1, io2, hi2 = _ioflags((word >> 25) & 0xF)
        _chk(io1 or io2, "IOReg branch without IOReg operand")
        w = _sext(((word >> 29) << 5) | rd, 8)
        return Instruction(_BR_BY_CODE[f3], 0, _opnd(io1, r1, hi1), _opnd(io2, r2, hi2), imm=w * 4)
    if opc == OPC_JAL:
        i = (((word >> 31) & 1) << 20) | (((word >> 12) & 0xFF) << 12) | (((word >> 20) & 1) << 11) \
            | (((word >> 21) & 0x3FF) << 1)
        imm = _sext(i, 21)
        _chk(imm % 4 == 0, "misaligned jump offset")
        return Instruction("jal", rd, imm=imm)
    if opc in (OPC_LUI, OPC_AUIPC):
        return Instruction("lui" if opc == OPC_LUI else "auipc", rd, imm=word >> 12)
    if opc == OPC_EXT:
        name = _EXT_BY_CODE.get(f3)
        _chk(name is not None, "reserved extension funct3")
        if name == "hash":
            _chk(word >> 22 == 0, "reserved bits set")
            io, hi = (word >> 20) & 1, (word >> 21) & 1
            _chk(io or not hi, "high-half flag without IOReg flag")
            return Instruction("hash", rd, _opnd(io, r1, hi))
        if name == "hist":
            _chk(word >> 24 == 0 and (word >> 9) & 7 == 0, "reserved bits set")
            mode = (word >> 7) & 3
            _chk(mode in _MODE_NAMES, "reserved hist mode")
            io, hi = (word >> 20) & 1, (word >> 21) & 1
            _chk(io or not hi, "high-half flag without IOReg flag")
            lanes = ((word >> 22) & 3) + 1
            _chk(r1 + lanes <= 32, "hist lanes run past the register file")
            return Instruction("hist", 0, _opnd(io, r1, hi), mode=mode, lanes=lanes)
        if name == "regtimer":
            _chk((word >> 7) & 0x1F == 0 and (word >> 15) & 0x3F == 0, "reserved bits set")
            _chk(period is not None, "regtimer without period word")
            return Instruction("regtimer", imm=word >> 21, period=period)
        if name == "loopn":
            _chk(rd == 0, "reserved bits set")
            return Instruction("loopn", imm=word >> 15)
        if name == "emit":
            _chk(rd == 0, "reserved bits set")
            return Instruction("emit", 0, gpr(r1), imm=word >> 20)
        _chk(word == (5 << 12) | OPC_EXT, "reserved bits set")
        return Instruction("ret")
    raise IllegalEncoding(f"unknown opcode 0x{opc:02x}")


def decode_words(words, base: int = 0):
    """Decode a contiguous run of words into ``(address, Instruction)`` pairs."""
    out = []
    i = 0
    n = len(words)
    while i < n:
        w = words[i]
        period = words[i + 1] if i + 1 < n else None
        ins = decode(w, period)
        out.append((base + i, ins))
        i += ins.size
    return out


# ---------------------------------------------------------------- image

_MAGIC = b"IPUI"
_HDR = struct.Struct("<4sHHHBB4x")


@dataclass(frozen=True)
class ProgramImage:
    """Assembled binary. ``body`` starts at word 0; ``finish`` sits at FINISH_BASE."""

    body: tuple
    finish: tuple = ()
    main: int = 0
    name: str = "program"
    version: int = 1
    policy: str = "closed"
    checksum: Optional[int] = None

    @property
    def n_instructions(self) -> int:
        return len(self.body) + len(self.finish)

    def imem(self) -> list:
        """Full 2048-slot instruction memory; unused slots are None."""
        mem = [None] * IMEM_WORDS
        for i, w in enumerate(self.body[:IMEM_WORDS]):
            mem[i] = w
        for i, w in enumerate(self.finish[:FINISH_SLOTS]):
            mem[FINISH_BASE + i] = w
        return mem

    def _header(self) -> bytes:
        return _HDR.pack(_MAGIC, self.version & 0xFFFF, self.main & 0xFFFF, len(self.body) & 0xFFFF,
                         POLICIES.index(self.policy), len(self.finish) & 0xFF)

    def compute_checksum(self) -> int:
        words = struct.pack(f"<{self.n_instructions}I", *self.body, *self.finish)
        return zlib.crc32(self._header() + words)

    def sealed(self) -> "ProgramImage":
        return replace(self, checksum=self.compute_checksum())

    def checksum_ok(self) -> bool:
        return self.checksum is not None and self.checksum == self.compute_checksum()

    def to_bytes(self) -> bytes:
        words = struct.pack(f"<{self.n_instructions}I", *self.body, *self.finish)
        crc = self.checksum if self.checksum is not None else self.compute_checksum()
        return self._header() + words + struct.pack("<I", crc)

    @classmethod
    def from_bytes(cls, data: bytes, name: str = "program") -> "ProgramImage":
        if len(data) < _HDR.size + 4:
            raise ValueError("image too short")
        magic, version, main, count, pol, nfin = _HDR.unpack_from(data)
        if magic != _MAGIC:
            raise ValueError("bad image magic")
        if pol >= len(POLICIES):
            raise ValueError(f"unknown policy tag {pol}")
        n = count + nfin
        if len(data) != _HDR.size + 4 * n + 4:
            raise ValueError("image length does not match header")
        words = struct.unpack_from(f"<{n}I", data, _HDR.size)
        (crc,) = struct.unpack_from("<I", data, _HDR.size + 4 * n)
        return cls(tuple(words[:count]), tuple(words[count:]), main, name, version, POLICIES[pol], crc)


# ---------------------------------------------------------------- assembler

_LABEL_RE = re.compile(r"^([A-Za-z_.][\w.]*)\s*:")
_REG_RE = re.compile(r"^([rx])(\d+)(?:\.(hi|lo))?$")
_MEM_RE = re.compile(r"^(.*)\((\s*r\d+\s*)\)$")
_IDENT_RE = re.compile(r"^[A-Za-z_][\w.]*$")


@dataclass
class _Line:
    lineno: int
    op: str
    args: list
    addr: int = 0
    size: int = 1


def _strip_comment(text: str) -> str:
    for c in (";", "#"):
        k = text.find(c)
        if k >= 0:
            text = text[:k]
    return text.strip()


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok.replace("_", ""), 0)
    except ValueError:
        raise AsmSyntaxError(f"expected integer, got {tok!r}", lineno) from None


def _parse_reg(tok: str, lineno: int, abi=None) -> Operand:
    m = _REG_RE.match(tok.strip())
    if not m:
        raise AsmSyntaxError(f"expected register, got {tok!r}", lineno)
    f, idx, half = m.group(1), int(m.group(2)), m.group(3)
    if idx > 31:
        raise AsmSyntaxError(f"register index out of range: {tok}", lineno)
    if f == "r" and half:
        raise AsmSyntaxError("GPRs have no .hi/.lo halves", lineno)
    if f == "x" and abi is not None and not abi.has_ioreg(idx):
        raise UnknownSignal(f"x{idx} is not declared in ABI {getattr(abi, 'name', '')!r} (line {lineno})")
    return Operand(f, idx, half == "hi")


def _is_int(tok):
    try:
        int(tok.replace("_", ""), 0)
        return True
    except ValueError:
        return False


def _li_size(args):
    # li expands to one addi, or lui+addi for wide constants
    if len(args) == 2 and _is_int(args[1]):
        v = int(args[1].replace("_", ""), 0)
        return 1 if -2048 <= v < 2048 else 2
    return 1


def _split_args(text: str) -> list:
    return [a.strip() for a in text.split(",")] if text.strip() else []


def assemble(source: str, abi=None, *, name: str = "program", version: int = 1,
             policy: str = "closed", fragment: bool = False) -> ProgramImage:
    """Assemble source text into a sealed ProgramImage.

    ``abi`` needs a ``has_ioreg(index)`` method; pass None to skip signal checks.
    A line holding only ``...`` marks elided code and is skipped. With
    ``fragment=True`` every referenced but undefined label gets a ``ret`` stub
    at the end of the body, so excerpts of larger programs still assemble.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    labels: dict = {}
    lines: list = []
    pending_labels = []
    finish_at = None  # index into ``lines`` where the finish region starts
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = _strip_comment(raw)
        while True:
            m = _LABEL_RE.match(text)
            if not m:
                break
            lab = m.group(1)
            if lab in labels or lab in [p for p, _ in pending_labels]:
                raise AsmSyntaxError(f"duplicate label {lab!r}", lineno)
            pending_labels.append((lab, lineno))
            text = text[m.end():].strip()
        if not text or text == "...":
            continue
        parts = text.split(None, 1)
        op = parts[0].lower()
        args = _split_args(parts[1] if len(parts) > 1 else "")
        ln = _Line(lineno, op, args)
        ln.size = 2 if op == "regtimer" else (_li_size(args) if op == "li" else 1)
        for lab, _ in pending_labels:
            if lab == "finish":
                finish_at = len(lines)
            labels[lab] = len(lines)
        pending_labels.clear()
        lines.append(ln)
    for lab, lineno in pending_labels:
        # trailing labels point past the last instruction
        if lab == "finish":
            finish_at = len(lines)
        labels[lab] = len(lines)

    if fragment:
        end = finish_at if finish_at is not None else len(lines)
        for ln in list(lines):
            ref = _label_ref(ln)
            if ref and ref not in labels:
                stub = _Line(ln.lineno, "ret", [])
                lines.insert(end, stub)
                for lab, i in labels.items():
                    if i >= end:
                        labels[lab] = i + 1
                labels[ref] = end
                end += 1
                if finish_at is not None:
                    finish_at += 1

    if "_main" not in labels:
        raise AsmSyntaxError("missing _main label", 1)
    if "init" in labels and labels["init"] != 0:
        raise AsmSyntaxError("init must be the first code in the program", lines[labels["init"]].lineno
                             if labels["init"] < len(lines) else 1)
    body_lines = lines[:finish_at] if finish_at is not None else lines
    fin_lines = lines[finish_at:] if finish_at is not None else []
    if finish_at is not None and labels["_main"] > finish_at:
        raise AsmSyntaxError("_main must precede finish", 1)

    addr = 0
    for ln in body_lines:
        ln.addr = addr
        addr += ln.size
    n_body = addr
    addr = FINISH_BASE
    for ln in fin_lines:
        ln.addr = addr
        addr += ln.size
    n_fin = addr - FINISH_BASE
    if finish_at is None:
        n_fin = 1
    if n_body > FINISH_BASE or n_fin > FINISH_SLOTS:
        raise ImageTooLarge(f"{n_body + n_fin} instructions exceed the 2048-slot instruction memory "
                            f"(body {n_body}/{FINISH_BASE}, finish {n_fin}/{FINISH_SLOTS})")

    def addr_of(idx):
        if idx < len(lines):
            return lines[idx].addr
        if finish_at is not None and idx >= finish_at:
            return FINISH_BASE + n_fin
        return n_body

    label_addr = {lab: addr_of(i) for lab, i in labels.items()}
    main = label_addr["_main"]
    if main >= FINISH_BASE:
        raise AsmSyntaxError("_main must be in the body region", 1)

    body, fin = [], []
    for ln in lines:
        for ins in _build(ln, label_addr, abi):
            try:
                ws = encode(ins)
            except ValueError as e:
                raise AsmSyntaxError(str(e), ln.lineno) from None
            (fin if ln.addr >= FINISH_BASE else body).extend(ws)
    if finish_at is None:
        fin = encode(Instruction("ret"))
    return ProgramImage(tuple(body), tuple(fin), main, name, version, policy).sealed()


def _label_ref(ln):
    """Label named by a control-transfer line, if any."""
    if ln.op in BRANCHES and len(ln.args) == 3:
        tok = ln.args[2]
    elif ln.op in ("jal", "j") and ln.args:
        tok = ln.args[-1]
    elif ln.op == "regtimer" and len(ln.args) == 2:
        tok = ln.args[1]
    else:
        return None
    return tok if _IDENT_RE.match(tok) and not _REG_RE.match(tok) else None


def _target(tok, ln, label_addr):
    """Branch/jump target as a byte offset from the instruction."""
    tok = tok.strip()
    if tok.startswith("."):
        rest = tok[1:].replace(" ", "")
        if rest[:1] in "+-" and _is_int(rest[1:]):
            return int(rest, 0)
        raise AsmSyntaxError(f"bad relative target {tok!r}", ln.lineno)
    if tok not in label_addr:
        raise AsmSyntaxError(f"undefined label {tok!r}", ln.lineno)
    return (label_addr[tok] - ln.addr) * 4


def _nargs(ln, n):
    if len(ln.args) != n:
        raise AsmSyntaxError(f"{ln.op} expects {n} operands, got {len(ln.args)}", ln.lineno)


def _mem_operand(ln, args, abi):
    """``imm(rs)`` or ``rs, imm`` -> (base, offset)."""
    if len(args) == 1:
        m = _MEM_RE.match(args[0])
        if not m:
            raise AsmSyntaxError(f"bad memory operand {args[0]!r}", ln.lineno)
        off = m.group(1).strip() or "0"
        return _parse_reg(m.group(2), ln.lineno, abi), _parse_int(off, ln.lineno)
    if len(args) == 2:
        return _parse_reg(args[0], ln.lineno, abi), _parse_int(args[1], ln.lineno)
    raise AsmSyntaxError(f"bad operands for {ln.op}", ln.lineno)


def _gpr_dest(tok, ln):
    o = _parse_reg(tok, ln.lineno)
    if o.is_io:
        raise AsmSyntaxError(f"IORegs are read-only and cannot be a destination ({tok})", ln.lineno)
    return o.index


def _build(ln: _Line, label_addr: dict, abi) -> list:
    op, a, L = ln.op, ln.args, ln.lineno
    reg = lambda t: _parse_reg(t, L, abi)  # noqa: E731
    if op == "ld":
        op = "lw"
    elif op == "st":
        op = "sw"
    if op == "nop":
        _nargs(ln, 0)
        return [Instruction("addi", 0, gpr(0), imm=0)]
    if op == "mv":
        _nargs(ln, 2)
        return [Instruction("addi", _gpr_dest(a[0], ln), reg(a[1]), imm=0)]
    if op == "li":
        _nargs(ln, 2)
        rd, v = _gpr_dest(a[0], ln), _parse_int(a[1], L)
        if not -(1 << 31) <= v <= M32:
            raise AsmSyntaxError("li constant out of 32-bit range", L)
        if -2048 <= v < 2048:
            return [Instruction("addi", rd, gpr(0), imm=v)]
        v &= M32
        lo = _sext(v, 12)
        hi = ((v - lo) >> 12) & 0xFFFFF
        return [Instruction("lui", rd, imm=hi), Instruction("addi", rd, gpr(rd), imm=lo)]
    if op == "j":
        _nargs(ln, 1)
        return [Instruction("jal", 0, imm=_target(a[0], ln, label_addr))]
    if op in R_OPS:
        _nargs(ln, 3)
        return [Instruction(op, _gpr_dest(a[0], ln), reg(a[1]), reg(a[2]))]
    if op in I_OPS or op in SHIFT_OPS:
        _nargs(ln, 3)
        return [Instruction(op, _gpr_dest(a[0], ln), reg(a[1]), imm=_parse_int(a[2], L))]
    if op in LOADS:
        if len(a) < 2:
            raise AsmSyntaxError(f"{op} needs a destination and an address", L)
        base, off = _mem_operand(ln, a[1:], abi)
        return [Instruction(op, _gpr_dest(a[0], ln), base, imm=off)]
    if op in STORES:
        if len(a) < 2:
            raise AsmSyntaxError(f"{op} needs a source and an address", L)
        base, off = _mem_operand(ln, a[1:], abi)
        return [Instruction(op, 0, base, reg(a[0]), imm=off)]
    if op in BRANCHES:
        _nargs(ln, 3)
        s1 = reg(a[0])
        off = _target(a[2], ln, label_addr)
        if _is_int(a[1]):
            return [Instruction(op, 0, s1, imm=off, cmp=_parse_int(a[1], L))]
        return [Instruction(op, 0, s1, reg(a[1]), imm=off)]
    if op == "jal":
        if len(a) == 1:
            return [Instruction("jal", 1, imm=_target(a[0], ln, label_addr))]
        _nargs(ln, 2)
        return [Instruction("jal", _gpr_dest(a[0], ln), imm=_target(a[1], ln, label_addr))]
    if op == "jalr":
        if len(a) not in (2, 3):
            raise AsmSyntaxError("jalr expects rd, rs, imm or rd, imm(rs)", L)
        base, off = _mem_operand(ln, a[1:], abi)
        return [Instruction("jalr", _gpr_dest(a[0], ln), base, imm=off)]
    if op in ("lui", "auipc"):
        _nargs(ln, 2)
        return [Instruction(op, _gpr_dest(a[0], ln), imm=_parse_int(a[1], L))]
    if op == "hash":
        _nargs(ln, 2)
        return [Instruction("hash", _gpr_dest(a[0], ln), reg(a[1]))]
    if op == "hist":
        if len(a) not in (2, 3):
            raise AsmSyntaxError("hist expects mode, src[, lanes]", L)
        mode = a[0].lower()
        if mode not in HIST_MODES:
            raise AsmSyntaxError(f"unknown hist mode {a[0]!r}", L)
        src = reg(a[1])
        lanes = _parse_int(a[2], L) if len(a) == 3 else 1
        if src.is_io and abi is not None:
            for k in range(src.index + 1, src.index + lanes):
                reg(f"x{k}")
        return [Instruction("hist", 0, src, mode=HIST_MODES[mode], lanes=lanes)]
    if op == "regtimer":
        _nargs(ln, 2)
        period = _parse_int(a[0], L)
        tok = a[1]
        if _is_int(tok):
            handler = _parse_int(tok, L)
        elif tok in label_addr:
            handler = label_addr[tok]
        else:
            raise AsmSyntaxError(f"undefined label {tok!r}", L)
        if period <= 0:
            raise AsmSyntaxError("regtimer period must be positive", L)
        return [Instruction("regtimer", imm=handler, period=period)]
    if op == "loopn":
        _nargs(ln, 1)
        return [Instruction("loopn", imm=_parse_int(a[0], L))]
    if op == "emit":
        _nargs(ln, 2)
        return [Instruction("emit", 0, reg(a[0]), imm=_parse_int(a[1], L))]
    if op == "ret":
        _nargs(ln, 0)
        return [Instruction("ret")]
    raise AsmSyntaxError(f"unknown mnemonic {ln.op!r}", L)


# ---------------------------------------------------------------- disassembler

def _fmt(ins: Instruction, addr: int, labels: dict) -> str:
    op = ins.op

    def tgt(off):
        t = addr + off // 4
        return labels.get(t, f".{off:+d}")

    if op in R_OPS:
        return f"{op} r{ins.rd}, {ins.rs1}, {ins.rs2}"
    if op in I_OPS or op in SHIFT_OPS:
        return f"{op} r{ins.rd}, {ins.rs1}, {ins.imm}"
    if op in LOADS or op == "jalr":
        return f"{op} r{ins.rd}, {ins.imm}({ins.rs1})"
    if op in STORES:
        return f"{op} {ins.rs2}, {ins.imm}({ins.rs1})"
    if op in BRANCHES:
        second = str(ins.cmp) if ins.cmp is not None else str(ins.rs2)
        return f"{op} {ins.rs1}, {second}, {tgt(ins.imm)}"
    if op == "jal":
        return f"jal r{ins.rd}, {tgt(ins.imm)}"
    if op in ("lui", "auipc"):
        return f"{op} r{ins.rd}, 0x{ins.imm:x}"
    if op == "hash":
        return f"hash r{ins.rd}, {ins.rs1}"
    if op == "hist":
        return f"hist {_MODE_NAMES[ins.mode]}, {ins.rs1}, {ins.lanes}"
    if op == "regtimer":
        return f"regtimer {ins.period}, {labels.get(ins.imm, str(ins.imm))}"
    if op == "loopn":
        return f"loopn {ins.imm}"
    if op == "emit":
        return f"emit {ins.rs1}, {ins.imm}"
    return "ret"


def decode_image(image: ProgramImage) -> list:
    """All ``(word_address, Instruction)`` pairs of an image."""
    return decode_words(list(image.body)) + decode_words(list(image.finish), FINISH_BASE)


def disassemble(image: ProgramImage) -> str:
    """Source text that re-assembles to an identical image."""
    decoded = decode_image(image)
    starts = {a for a, _ in decoded}
    targets = set()
    for a, ins in decoded:
        if ins.op in BRANCHES or ins.op == "jal":
            targets.add(a + ins.imm // 4)
        elif ins.op == "regtimer":
            targets.add(ins.imm)
    labels = {}
    body_end, fin_end = len(image.body), FINISH_BASE + len(image.finish)
    for t in sorted(targets):
        # a label at the body end would bind to the finish region on reassembly,
        # so such targets stay relative
        if t in starts or t == fin_end:
            labels[t] = f"L{t:04d}"
    # entry points take their reserved names
    labels[image.main] = "_main"
    if image.main > 0:
        labels[0] = "init"
    labels[FINISH_BASE] = "finish"
    out = [f"; {image.name} v{image.version} ({image.policy})"]
    emitted = set()
    for a, ins in decoded:
        if a == FINISH_BASE or (a > FINISH_BASE and FINISH_BASE not in emitted):
            if FINISH_BASE not in emitted:
                out.append("finish:")
                emitted.add(FINISH_BASE)
        if a in labels and a not in emitted:
            out.append(f"{labels[a]}:")
            emitted.add(a)
        out.append(f"    {_fmt(ins, a, labels)}")
    # labels that point just past a region (e.g. a branch to the end of the body)
    tail_body = [lab for t, lab in labels.items() if t == body_end and t not in emitted and t < FINISH_BASE]
    if tail_body or image.main == body_end:
        # has to come before the finish section in source order
        idx = out.index("finish:") if "finish:" in out else len(out)
        names = sorted(set(tail_body + (["_main"] if image.main == body_end else [])))
        out[idx:idx] = [f"{n}:" for n in names]
        emitted.add(body_end)
    if FINISH_BASE not in emitted:
        out.append("finish:")
    if fin_end in labels and fin_end not in emitted and fin_end != FINISH_BASE:
        out.append(f"{labels[fin_end]}:")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)  # (kind, message)
    n_instructions: int = 0

    @property
    def ok(self) -> bool:
        return not self.findings

    def kinds(self) -> set:
        return {k for k, _ in self.findings}

    def __str__(self):
        if self.ok:
            return f"valid ({self.n_instructions} instructions)"
        return "\n".join(f"{k}: {m}" for k, m in self.findings)


def validate_image(image: ProgramImage, abi=None) -> ValidationReport:
    """Check capacity, entry offsets, IOReg references and checksum. Never raises."""
    rep = ValidationReport(n_instructions=image.n_instructions)
    add = lambda k, m: rep.findings.append((k, m))  # noqa: E731
    nb, nf = len(image.body), len(image.finish)
    if nb + nf > IMEM_WORDS or nb > FINISH_BASE or nf > FINISH_SLOTS:
        add("ImageTooLarge", f"{nb + nf} instructions (body {nb}, finish {nf}); capacity is "
            f"{FINISH_BASE} body + {FINISH_SLOTS} finish = {IMEM_WORDS}")
    if not 0 <= image.main <= nb or image.main >= FINISH_BASE:
        add("EntryOffset", f"main offset {image.main} outside the body region (0..{nb})")
    if image.policy not in POLICIES:
        add("PolicyTag", f"unknown policy {image.policy!r}")
    try:
        decoded = decode_words(list(image.body)) + decode_words(list(image.finish), FINISH_BASE)
    except IllegalEncoding as e:
        add("IllegalEncoding", str(e))
        decoded = []
    if abi is not None:
        missing = sorted({i for _, ins in decoded for i in ins.io_operands() if not abi.has_ioreg(i)})
        for i in missing:
            add("UnknownSignal", f"x{i} is not declared in ABI {getattr(abi, 'name', '')!r}")
    if image.checksum is None:
        add("ChecksumMismatch", "image carries no checksum")
    elif not image.checksum_ok():
        add("ChecksumMismatch", f"stored 0x{image.checksum:08x} != computed 0x{image.compute_checksum():08x}")
    return rep

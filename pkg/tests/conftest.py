from __future__ import annotations

import random

import pytest

from ipuemu import isa
from ipuemu.isa import Instruction, Operand

SRC_OPS = list(isa.R_OPS) + list(isa.I_OPS) + list(isa.SHIFT_OPS) + list(isa.LOADS) + list(isa.STORES) + \
    list(isa.BRANCHES) + ["jal", "jalr", "lui", "auipc", "hash", "hist", "regtimer", "loopn", "emit", "ret"]


def _any_reg(rng, io_ok=True, hi_ok=True):
    if io_ok and rng.random() < 0.5:
        return Operand("x", rng.randrange(32), hi_ok and rng.random() < 0.5)
    return Operand("r", rng.randrange(32))


def _simm(rng, bits):
    return rng.randrange(-(1 << (bits - 1)), 1 << (bits - 1))


def random_instruction(rng: random.Random) -> Instruction:
    """A random member of the legal instruction space."""
    op = rng.choice(SRC_OPS)
    rd = rng.randrange(32)
    if op in isa.R_OPS:
        return Instruction(op, rd, _any_reg(rng), _any_reg(rng))
    if op in isa.I_OPS:
        s1 = _any_reg(rng)
        return Instruction(op, rd, s1, imm=_simm(rng, 11 if s1.is_io else 12))
    if op in isa.SHIFT_OPS:
        return Instruction(op, rd, _any_reg(rng), imm=rng.randrange(32))
    if op in isa.LOADS or op == "jalr":
        return Instruction(op, rd, _any_reg(rng, io_ok=False), imm=_simm(rng, 12))
    if op in isa.STORES:
        return Instruction(op, 0, _any_reg(rng, False), _any_reg(rng, False), imm=_simm(rng, 12))
    if op in isa.BRANCHES:
        form = rng.randrange(3)
        if form == 0:
            return Instruction(op, 0, _any_reg(rng), cmp=_simm(rng, 5), imm=4 * _simm(rng, 10))
        if form == 1:
            s1, s2 = _any_reg(rng), _any_reg(rng)
            if not (s1.is_io or s2.is_io):
                s1 = Operand("x", s1.index, False)
            return Instruction(op, 0, s1, s2, imm=4 * _simm(rng, 8))
        return Instruction(op, 0, _any_reg(rng, False), _any_reg(rng, False), imm=4 * _simm(rng, 11))
    if op == "jal":
        return Instruction(op, rd, imm=4 * _simm(rng, 19))
    if op in ("lui", "auipc"):
        return Instruction(op, rd, imm=rng.randrange(1 << 20))
    if op == "hash":
        return Instruction(op, rd, _any_reg(rng))
    if op == "hist":
        lanes = rng.randint(1, 4)
        s1 = _any_reg(rng)
        s1 = s1._replace(index=min(s1.index, 32 - lanes))
        return Instruction(op, 0, s1, mode=rng.randrange(3), lanes=lanes)
    if op == "regtimer":
        return Instruction(op, imm=rng.randrange(isa.IMEM_WORDS), period=rng.randrange(1 << 32))
    if op == "loopn":
        return Instruction(op, imm=rng.randrange(1 << 17))
    if op == "emit":
        return Instruction(op, 0, _any_reg(rng, False), imm=rng.randrange(4096))
    return Instruction("ret")


@pytest.fixture
def rng():
    return random.Random(1234)

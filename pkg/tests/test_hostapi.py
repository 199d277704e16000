from __future__ import annotations

import threading

import pytest

from ipuemu import analytics, isa
from ipuemu.errors import MalformedRecord, PolicyRejected, UnknownDevice
from ipuemu.hostapi import (DeviceRegistry, HostFifo, bandwidth_report, byte_conservation, fifo_drain,
                            ipu_config_image, ipu_trigger_calls, read_packets, run_device, write_packets)
from ipuemu.isa import assemble
from ipuemu.machine import OutputPacket, Status
from ipuemu.trace import CycleRecord, Trace, builtin_abi, synth_trace


def pkt(cycle, n, ipu=0, header=0):
    return OutputPacket(cycle, bytes(n), ipu, header)


def test_fifo_drops_on_overflow_and_counts():
    f = HostFifo(10)
    assert f.push(pkt(0, 6)) and not f.push(pkt(1, 6)) and f.push(pkt(2, 4))
    t = f.totals()
    assert t["bytes"] == 10 and t["overflow_drops"] == 1 and t["dropped_bytes"] == 6
    assert [p.cycle for p in fifo_drain(f)] == [0, 2]
    assert len(f) == 0 and f.push(pkt(3, 10))
    with pytest.raises(ValueError):
        HostFifo(0)


def test_fifo_is_thread_safe():
    f = HostFifo(1 << 30)

    def produce(k):
        for i in range(2000):
            f.push(pkt(i, 3, k))

    ts = [threading.Thread(target=produce, args=(k,)) for k in range(4)]
    got = []
    for t in ts:
        t.start()
    while any(t.is_alive() for t in ts):
        got += f.drain()
    got += f.drain()
    assert len(got) == 8000 and f.bytes == 24000


def test_registry_and_policy_gate():
    reg = DeviceRegistry()
    d = reg.add(idealized=True)
    with pytest.raises(UnknownDevice):
        reg.get(5)
    im = assemble("_main:\n    ret\n", policy="closed")
    with pytest.raises(PolicyRejected):
        ipu_config_image(reg, d, im, allowed=("permissive",))
    assert ipu_config_image(reg, d, im)
    bad = isa.ProgramImage(im.body, im.finish, im.main, checksum=1)
    with pytest.raises(PolicyRejected):
        ipu_config_image(reg, d, bad)
    faulty = assemble("init:\n    lui r1, 0x40\n    lw r1, 0(r1)\n_main:\n    ret\n")
    assert ipu_config_image(reg, d, faulty) is False
    assert reg.get(d).machine.status == Status.ERROR


def test_trigger_calls_and_run_device():
    reg = DeviceRegistry()
    d = reg.add(idealized=True)
    src = "_main:\n    li r1, 0x100\n    emit r1, 2\n    ret\n"
    ipu_config_image(reg, d, assemble(src))
    ipu_trigger_calls(reg, d, 10, 20)
    abi = builtin_abi("table1")
    tr = Trace.from_records(abi, [CycleRecord(c, ((0, 1),), c) for c in range(40)], 40)
    rep, packets = run_device(reg, d, tr)
    assert len(packets) == 10 and rep.counters["emitted_bytes"] == 20


def test_lazy_drain_keeps_bytes_and_order():
    reg = DeviceRegistry()
    d = reg.add(idealized=True, capacity=64, drain_interval=100)
    ipu_config_image(reg, d, assemble("_main:\n    li r1, 0x100\n    emit r1, 4\n    ret\n"))
    tr = Trace.from_records(builtin_abi("table1"), [CycleRecord(c, ((0, 1),)) for c in range(0, 1000, 10)], 1000)
    rep, packets = run_device(reg, d, tr, finalize=False)
    dev = reg.get(d)
    assert [p.cycle for p in packets] == list(range(0, 1000, 10))
    assert dev.fifo.overflow_drops == 0
    assert byte_conservation(rep, dev.fifo.bytes, dev.fifo.dropped_bytes)


def test_slow_host_drops_are_conserved():
    reg = DeviceRegistry()
    d = reg.add(idealized=True, capacity=40, drain_interval=1000)
    ipu_config_image(reg, d, assemble("_main:\n    li r1, 0x100\n    emit r1, 4\n    ret\n"))
    tr = Trace.from_records(builtin_abi("table1"), [CycleRecord(c, ((0, 1),)) for c in range(0, 3000, 10)], 3000)
    rep, packets = run_device(reg, d, tr, finalize=False)
    f = reg.get(d).fifo
    assert f.overflow_drops > 0
    assert byte_conservation(rep, f.bytes, f.dropped_bytes)
    assert sum(len(p.data) for p in packets) == f.bytes


def test_packet_file_roundtrip(tmp_path):
    ps = [OutputPacket(5, b"\x01\x02", 3, 0), OutputPacket(9, b"", 0, 0)]
    write_packets(tmp_path / "p", ps)
    back = read_packets(tmp_path / "p")
    assert [(p.cycle, p.data, p.ipu_id) for p in back] == [(5, b"\x01\x02", 3), (9, b"", 0)]
    (tmp_path / "q").write_text("1,0,zz\n")
    with pytest.raises(MalformedRecord):
        read_packets(tmp_path / "q")


def test_bandwidth_pics_example():
    ps = [pkt(400_000 * k - 1, 6) for k in (1, 2, 3)]
    bw = bandwidth_report(ps, 1e9, cycles=1_200_000)
    assert bw.per_ipu[0] == 15000 and bw.aggregate == 15000


def test_bandwidth_util_examples():
    ps = [pkt(256 * k + 255, 4, header=1) for k in range(1000)]
    assert bandwidth_report(ps, 1e9, cycles=256_000).aggregate == 15_625_000
    big = bandwidth_report(ps, 1.4e9, ipu_count=108, cycles=256_000, payload_only=True)
    assert big.aggregate == 1_771_875_000


def test_bandwidth_of_empty_stream_is_zero():
    bw = bandwidth_report([], 1e9, cycles=100)
    assert bw.aggregate == 0 and bw.per_ipu == {}
    assert bandwidth_report(HostFifo(), 1e9).aggregate == 0


def test_bandwidth_from_machine_run():
    reg = DeviceRegistry()
    d = reg.add()
    ipu_config_image(reg, d, analytics.util_program())
    g = synth_trace("gpu-activity-phases", 0, 256 * 400)
    rep, packets = run_device(reg, d, g.trace, finalize=False)
    bw = bandwidth_report(packets, 1e9, cycles=g.trace.length)
    assert bw.aggregate == pytest.approx(15_625_000)

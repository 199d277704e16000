"""Host-side view: device registry, policy gate, logical FIFO and bandwidth accounting."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import isa
from .errors import MalformedRecord, PolicyRejected, UnknownDevice
from .machine import Command, IpuState, OutputPacket, RunReport, Status

DEFAULT_CAPACITY = 64 * 1024
DRAIN_INTERVAL = 1 << 20  # host polls the FIFO this often (HIT cycles)


class HostFifo:
    """Bounded byte queue fed by one IPU and drained by the host.

    A packet that does not fit is dropped and counted; the producer never waits.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ValueError("FIFO capacity must be positive")
        self.capacity = capacity
        self._q = deque()
        self._lock = threading.Lock()
        self.queued_bytes = 0
        self.bytes = 0  # accepted over the FIFO's lifetime
        self.packets = 0
        self.overflow_drops = 0
        self.dropped_bytes = 0

    def push(self, pkt: OutputPacket) -> bool:
        n = len(pkt.data)
        with self._lock:
            if self.queued_bytes + n > self.capacity:
                self.overflow_drops += 1
                self.dropped_bytes += n
                return False
            self._q.append(pkt)
            self.queued_bytes += n
            self.bytes += n
            self.packets += 1
            return True

    __call__ = push  # usable directly as a machine sink

    def drain(self) -> list:
        with self._lock:
            out = list(self._q)
            self._q.clear()
            self.queued_bytes = 0
        return out

    def __len__(self):
        return len(self._q)

    def totals(self) -> dict:
        return {"bytes": self.bytes, "packets": self.packets, "overflow_drops": self.overflow_drops,
                "dropped_bytes": self.dropped_bytes, "queued_bytes": self.queued_bytes}


def fifo_drain(fifo: HostFifo) -> list:
    """Remove and return every queued packet, oldest first."""
    return fifo.drain()


@dataclass
class Device:
    device_id: int
    machine: IpuState
    fifo: HostFifo
    drain_interval: Optional[int] = DRAIN_INTERVAL
    received: list = field(default_factory=list)  # packets the host has already pulled
    _next_drain: int = 0

    def sink(self, pkt: OutputPacket):
        # the host polls on a fixed cadence; polling happens before the new packet lands
        if self.drain_interval and pkt.cycle >= self._next_drain:
            self.received.extend(self.fifo.drain())
            self._next_drain = (pkt.cycle // self.drain_interval + 1) * self.drain_interval
        self.fifo.push(pkt)

    def collect(self) -> list:
        """Everything the host has received so far, including a final drain."""
        self.received.extend(self.fifo.drain())
        out, self.received = self.received, []
        return out


class DeviceRegistry:
    """In-process stand-in for the set of IPU devices visible to the host."""

    def __init__(self):
        self._devices = {}

    def add(self, machine: Optional[IpuState] = None, *, capacity: int = DEFAULT_CAPACITY,
            drain_interval: Optional[int] = DRAIN_INTERVAL, **machine_opts) -> int:
        dev_id = len(self._devices)
        if machine is None:
            machine = IpuState(dev_id, **machine_opts)
        dev = Device(dev_id, machine, HostFifo(capacity), drain_interval)
        machine.sink = dev.sink
        self._devices[dev_id] = dev
        return dev_id

    def get(self, device_id: int) -> Device:
        try:
            return self._devices[device_id]
        except KeyError:
            raise UnknownDevice(f"no device with id {device_id}") from None

    def __len__(self):
        return len(self._devices)

    def __iter__(self):
        return iter(self._devices.values())


def ipu_config_image(registry: DeviceRegistry, device_id: int, image: isa.ProgramImage,
                     allowed=None) -> bool:
    """Policy gate then load. ``allowed`` narrows the machine's own allow-list."""
    dev = registry.get(device_id)
    if not image.checksum_ok():
        raise PolicyRejected("image checksum mismatch")
    allowed = tuple(allowed) if allowed is not None else dev.machine.allowed_policies
    if image.policy not in allowed:
        raise PolicyRejected(f"policy {image.policy!r} not allowed (allowed: {', '.join(allowed)})")
    dev.machine.load_image(image)
    if dev.machine.status == Status.ERROR:
        return False
    return True


def ipu_trigger_calls(registry: DeviceRegistry, device_id: int, start_addr=None, stop_addr=None) -> bool:
    """Set TS/TE; ``None`` leaves that trigger unset."""
    m = registry.get(device_id).machine
    m.host_control(Command.CONFIG_START, start_addr)
    m.host_control(Command.CONFIG_STOP, stop_addr)
    return True


def run_device(registry: DeviceRegistry, device_id: int, trace, *, finalize: bool = True,
               **run_opts) -> tuple:
    """Run a trace on one device, optionally finalize, and return (report, packets)."""
    dev = registry.get(device_id)
    m = dev.machine
    rep = m.run_trace(trace, **run_opts)
    if finalize and m.status in (Status.PAUSED, Status.ACTIVE_PAUSED, Status.ACTIVE_RUNNING):
        before = m.counters["emitted_bytes"]
        m.host_control(Command.FINALIZE)
        rep.counters["emitted_bytes"] += m.counters["emitted_bytes"] - before
        rep.status = m.status
        rep.fault = m.fault
    return rep, dev.collect()


# ---------------------------------------------------------------- packet files

def write_packets(path, packets) -> None:
    with open(path, "w") as f:
        for p in packets:
            f.write(f"{p.cycle},{p.ipu_id},{p.data.hex()}\n")


def read_packets(path, header_len: int = 0) -> list:
    """Parse a packet file. The file does not store header sizes, so the caller supplies one."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise MalformedRecord("expected cycle,ipu_id,hex", line=lineno)
        try:
            out.append(OutputPacket(int(parts[0]), bytes.fromhex(parts[2]), int(parts[1]), header_len))
        except ValueError as e:
            raise MalformedRecord(str(e), line=lineno) from None
    return out


# ---------------------------------------------------------------- bandwidth

@dataclass
class BandwidthReport:
    hit_clock_hz: float
    cycles: int
    ipu_count: int
    per_ipu_bytes: dict
    per_ipu: dict  # ipu id -> bytes/second
    aggregate: float

    def to_dict(self) -> dict:
        return {"hit_clock_hz": self.hit_clock_hz, "cycles": self.cycles, "ipu_count": self.ipu_count,
                "per_ipu_bytes": {str(k): v for k, v in self.per_ipu_bytes.items()},
                "per_ipu_bytes_per_s": {str(k): v for k, v in self.per_ipu.items()},
                "aggregate_bytes_per_s": self.aggregate}


def bandwidth_report(packets, hit_clock_hz: float, ipu_count: Optional[int] = None,
                     cycles: Optional[int] = None, payload_only: bool = False) -> BandwidthReport:
    """Bytes per second per IPU over ``cycles`` HIT cycles at ``hit_clock_hz``.

    ``packets`` may be a HostFifo (its queue is read, not drained) or a packet list.
    ``cycles`` defaults to the last packet cycle + 1. ``payload_only`` leaves out
    packet header bytes. With ``ipu_count`` above the number of IPUs seen, the
    missing ones are assumed to match the mean of the observed ones.
    """
    if isinstance(packets, HostFifo):
        packets = list(packets._q)
    packets = list(packets)
    per_bytes = {}
    for p in packets:
        n = len(p.payload) if payload_only else len(p.data)
        per_bytes[p.ipu_id] = per_bytes.get(p.ipu_id, 0) + n
    if cycles is None:
        cycles = max((p.cycle for p in packets), default=-1) + 1
    per = {k: (v * hit_clock_hz / cycles if cycles > 0 else 0.0) for k, v in per_bytes.items()}
    total = sum(per.values())
    n_seen = len(per)
    if ipu_count is None:
        ipu_count = max(n_seen, 1)
    if n_seen and ipu_count > n_seen:
        total += (ipu_count - n_seen) * total / n_seen
    return BandwidthReport(hit_clock_hz, cycles, ipu_count, per_bytes, per, total)


def byte_conservation(report: RunReport, fifo_bytes: int, dropped_bytes: int) -> bool:
    return report.counters["emitted_bytes"] == fifo_bytes + dropped_bytes

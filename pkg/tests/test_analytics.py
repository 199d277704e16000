from __future__ import annotations

import pytest

from ipuemu import analytics
from ipuemu.analytics import (PARTIAL_BIT, PicsTable, decode_pics_payload, decode_prefetch_payload,
                              decode_util_payload, dual_run, pics_postprocess, pics_recount, util_classify,
                              util_recount, util_windows)
from ipuemu.errors import MalformedPayload
from ipuemu.machine import Command, IpuState, OutputPacket
from ipuemu.trace import CycleRecord, Trace, builtin_abi, synth_trace

PICS = builtin_abi("pics")


def run_pics(trace, period, idealized=True, finalize=True):
    m = IpuState(idealized=idealized)
    m.load_image(analytics.pics_program(period))
    m.run_trace(trace)
    if finalize:
        m.host_control(Command.FINALIZE)
    return m


def pics_rec(c, pc, flags, flush_pc=0):
    ups = [(b, flags >> b & 1) for b in range(11)] + [(12, pc), (15, flush_pc)]
    return CycleRecord(c, tuple(ups))


def test_payload_decoders():
    data = (0x1234).to_bytes(4, "little") + (0x8005).to_bytes(2, "little")
    assert decode_pics_payload(data) == (0x1234, 5, True)
    with pytest.raises(MalformedPayload):
        decode_pics_payload(b"\0" * 5)
    assert decode_util_payload(bytes([0x31, 0xFF, 3, 7])) == (0x1FF, 3, 7)
    with pytest.raises(MalformedPayload):
        decode_util_payload(bytes([0x31, 1]))
    assert decode_prefetch_payload(bytes(range(12)))[0] == 0x020100


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("period", [50_000, 400_000])
def test_pics_machine_equals_recount(seed, period):
    g = synth_trace("pics-events", seed, 300_000)
    m = run_pics(g.trace, period)
    got = pics_postprocess(m.packets, period, g.trace.length)
    assert got == pics_recount(g.trace, period)


def test_pics_single_pc_gets_all_cycles():
    recs = [pics_rec(c, 0x4000, 1 << 3) for c in range(0, 1000, 2)]
    tr = Trace.from_records(PICS, recs, 1000)
    m = run_pics(tr, 300)
    t = pics_postprocess(m.packets, 300, 1000)
    assert t.as_dict() == {(0x4000, 8): 1000}
    assert t.samples == 3 and len(m.packets) == 4


def test_flush_is_charged_to_flushing_pc():
    recs = [pics_rec(c, 0x10, 1 << 8, flush_pc=0x99) for c in range(50)]
    tr = Trace.from_records(PICS, recs, 100)
    t = pics_postprocess(run_pics(tr, 1000).packets, 1000, 100)
    assert t.as_dict() == {(0x99, 1 << 8): 100}


def test_idle_windows_are_skipped():
    tr = Trace.from_records(PICS, [pics_rec(250, 0x20, 1)], 1000)
    m = run_pics(tr, 100)
    t = pics_postprocess(m.packets, 100, 1000)
    assert t.as_dict() == {(0x20, 1): 100} and t.idle_samples == 10  # nine regular plus the empty partial


def test_tie_goes_to_lowest_slot_like_recount():
    recs = [pics_rec(0, 0x100, 1), pics_rec(1, 0x200, 2)]
    tr = Trace.from_records(PICS, recs, 10)
    got = pics_postprocess(run_pics(tr, 10, finalize=False).packets, 10, 10)
    assert got == pics_recount(tr, 10)
    assert len(got.as_dict()) == 1


def test_partial_sample_uses_remaining_cycles():
    pkts = [OutputPacket(99, (7).to_bytes(4, "little") + (1).to_bytes(2, "little")),
            OutputPacket(150, (7).to_bytes(4, "little") + (1 | PARTIAL_BIT).to_bytes(2, "little"))]
    assert pics_postprocess(pkts, 100, 160).as_dict() == {(7, 1): 160}
    assert pics_postprocess(pkts, 100).as_dict() == {(7, 1): 150}


def test_dominant_pc_microbenchmark():
    g = synth_trace("pics-events", 11, 1_000_000, hot=0.995)
    t = pics_postprocess(run_pics(g.trace, 400_000).packets, 400_000, g.trace.length)
    tot = t.pc_totals()
    share = {pc: c / sum(tot.values()) for pc, c in tot.items()}
    assert [pc for pc, s in share.items() if s > 0.99] == [g.truth["pcs"][0]]


def test_pics_table_helpers():
    t = PicsTable.from_counts({(1, 1): 90, (1, 2): 5, (2, 4): 5}, samples=3)
    assert t.total == 100 and t.pc_totals() == {1: 95, 2: 5}
    assert t.heavy_pcs(0.06) == {1}
    assert t.top(1)[0].pc == 1
    assert analytics.signature_names(1 << 8 | 1) == ["itlb-miss", "flush"]


def test_dual_run_without_drops_has_zero_error():
    g = synth_trace("pics-events", 3, 400_000)
    rep = dual_run(analytics.pics_program(100_000), g.trace, 100_000, clock_ratio=1)
    assert rep.heavy_set_equal and rep.dropped_pc_fraction < 1e-3
    if rep.dropped_arrivals == 0:
        assert rep.max_rel_error == 0
    s = rep.summary()
    assert s["delivered"] == rep.delivered


def test_util_windows_match_recount():
    g = synth_trace("gpu-activity-phases", 5, 256 * 60 + 100)
    m = IpuState()
    m.load_image(analytics.util_program())
    rep = m.run_trace(g.trace)
    ws = util_windows(m.packets)
    assert len(ws) == 60 and rep.counters["dropped_arrivals"] == 0
    assert [w.counts for w in ws] == [w.counts for w in util_recount(g.trace)]
    assert [list(w.counts) for w in ws] == g.truth["window_counts"]


def test_util_classify_bins():
    from ipuemu.analytics import UtilWindow
    ws = [UtilWindow(0, (0, 0, 0)), UtilWindow(1, (65, 0, 0)), UtilWindow(2, (256, 256, 64)),
          UtilWindow(3, (256, 256, 256))]
    s = util_classify(ws)
    assert s.bins == {0: 1, 1: 1, 2: 1, 3: 1}
    assert s.window_bins == [0, 1, 2, 3]
    assert s.running_average[0] == (1.0, 1.0, 1.0)
    assert s.running_average[-1] == pytest.approx(((256 * 2 + 65) / 1024, 0.5, 320 / 1024))
    assert util_classify([]).fractions() == {0: 0.0, 1: 0.0, 2: 0.0, 3: 0.0}


def test_util_classify_matches_truth():
    for seed in range(3):
        g = synth_trace("gpu-activity-phases", seed, 256 * 200)
        assert util_classify(util_recount(g.trace)).window_bins == g.truth["window_bins"]


def test_prefetch_report_empty_and_ab():
    empty = analytics.prefetch_report([])
    assert empty.no_data and empty.stats["miss_rate"] == 0
    a = analytics.PrefetchSummary((100, 20, 0, 0), 1, False)
    b = analytics.PrefetchSummary((100, 10, 12, 10), 1, False)
    d = analytics.prefetch_ab(a, b)
    assert d["miss_rate"] == pytest.approx(-0.1) and d["accuracy"] == pytest.approx(10 / 12)

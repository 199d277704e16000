"""Command-line entry point: ``ipuemu asm|run|report|synth|dualrun``.

Exit status: 0 success, 1 usage, 2 input format, 3 runtime fault, 4 policy.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from . import analytics, hostapi, isa
from .errors import (AbiMismatch, AsmSyntaxError, ImageTooLarge, IpuError, MachineFault, MalformedPayload,
                     MalformedRecord, PolicyRejected, UnknownScenario, UnknownSignal)
from .machine import IpuState, Status
from .softlogic import make_block
from .trace import SCENARIOS, load_abi, load_trace, synth_trace

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_FAULT, EXIT_POLICY = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    image: Optional[str] = None
    trace: Optional[str] = None
    abi: Optional[str] = None
    clock_ratio: Fraction = Fraction(1)
    sample: int = 1
    idealized: bool = False
    block: Optional[str] = None
    block_params: dict = field(default_factory=dict)
    ts: Optional[int] = None
    te: Optional[int] = None
    fifo_capacity: int = hostapi.DEFAULT_CAPACITY
    hz: float = 1e9
    ipu_count: int = 1
    period: int = analytics.PICS_PERIOD
    finalize: bool = True
    out: str = "run"
    seed: int = 0

    def check(self):
        for key in ("image", "trace"):
            if getattr(self, key) is None:
                raise CliError(f"missing required setting: {key}", EXIT_USAGE)
        if self.clock_ratio <= 0:
            raise CliError("clock ratio must be positive", EXIT_USAGE)
        if self.sample < 1:
            raise CliError("sample divisor must be >= 1", EXIT_USAGE)


def _int(text: str) -> int:
    return int(str(text), 0)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _sample(text: str) -> int:
    """``1/k`` or ``k``."""
    t = str(text).strip()
    if t.startswith("1/"):
        t = t[2:]
    return int(t)


def _param_value(text: str):
    for conv in (_int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    try:
        return _bool(text)
    except ValueError:
        return text


_CONVERT = {
    "clock_ratio": Fraction, "sample": _sample, "idealized": _bool, "ts": _int, "te": _int,
    "fifo_capacity": _int, "hz": float, "ipu_count": _int, "period": _int, "finalize": _bool, "seed": _int,
}


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` comments; ``[section]`` lines are ignored; quotes are stripped.

    ``block.<name> = value`` sets a soft-logic block parameter.
    """
    out = {}
    params = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key = value", EXIT_INPUT)
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        if key.startswith("block."):
            params[key[6:]] = _param_value(val)
            continue
        if key not in RunConfig.__dataclass_fields__ or key == "block_params":
            raise CliError(f"config line {lineno}: unknown key {key!r}", EXIT_INPUT)
        try:
            out[key] = _CONVERT[key](val) if key in _CONVERT else val
        except (ValueError, ZeroDivisionError) as e:
            raise CliError(f"config line {lineno}: bad value for {key}: {e}", EXIT_INPUT) from None
    if params:
        out["block_params"] = params
    return out


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise CliError(f"config file not found: {p}", EXIT_INPUT)
        for k, v in parse_config(p.read_text()).items():
            setattr(cfg, k, v)
    for key in ("image", "trace", "abi", "block", "ts", "te", "fifo_capacity", "hz", "ipu_count", "period",
                "out", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "clock_ratio", None) is not None:
        cfg.clock_ratio = args.clock_ratio
    if getattr(args, "sample", None) is not None:
        cfg.sample = args.sample
    if getattr(args, "idealized", False):
        cfg.idealized = True
    if getattr(args, "no_finalize", False):
        cfg.finalize = False
    for kv in getattr(args, "block_param", None) or []:
        if "=" not in kv:
            raise CliError(f"--block-param expects key=value, got {kv!r}", EXIT_USAGE)
        k, v = kv.split("=", 1)
        cfg.block_params[k.strip()] = _param_value(v.strip())
    cfg.check()
    return cfg


# ---------------------------------------------------------------- loaders

_BUILTIN_ABI = {"pics": "pics", "util": "util", "prefetch": "prefetch"}


def _abi(path_or_name):
    try:
        return load_abi(path_or_name)
    except FileNotFoundError:
        raise CliError(f"ABI not found: {path_or_name}", EXIT_INPUT) from None


def load_image_arg(spec: str, abi=None, period: Optional[int] = None) -> isa.ProgramImage:
    """``builtin:<name>``, an assembly source (``.s``) or a binary image."""
    if spec.startswith("builtin:"):
        name = spec[8:]
        if name == "pics":
            return analytics.pics_program(period or analytics.PICS_PERIOD)
        if name in analytics.shipped_programs():
            return isa.assemble(analytics.program_source(name), _abi(_BUILTIN_ABI.get(name, name)),
                                name=name, policy="permissive")
        raise CliError(f"no shipped program named {name!r}", EXIT_INPUT)
    p = Path(spec)
    if not p.exists():
        raise CliError(f"image not found: {p}", EXIT_INPUT)
    if p.suffix == ".s":
        return isa.assemble(p.read_text(), abi, name=p.stem)
    try:
        return isa.ProgramImage.from_bytes(p.read_bytes(), p.stem)
    except ValueError as e:
        raise CliError(f"{p}: not a program image ({e})", EXIT_INPUT) from None


def _default_abi_for(image_spec: str):
    if image_spec.startswith("builtin:"):
        return _BUILTIN_ABI.get(image_spec[8:])
    return None


def _load_trace(path, abi):
    p = Path(path)
    if not p.exists():
        raise CliError(f"trace not found: {p}", EXIT_INPUT)
    return load_trace(p, abi)


# ---------------------------------------------------------------- commands

def cmd_asm(args) -> int:
    src_path = Path(args.source)
    if not src_path.exists():
        raise CliError(f"source not found: {src_path}", EXIT_INPUT)
    abi = _abi(args.abi) if args.abi else None
    image = isa.assemble(src_path.read_text(), abi, name=src_path.stem, policy=args.policy,
                         fragment=args.fragment)
    rep = isa.validate_image(image, abi)
    if not rep.ok:
        for kind, msg in rep.findings:
            print(f"{kind}: {msg}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out or src_path.with_suffix(".ipi"))
    out.write_bytes(image.to_bytes())
    if args.listing:
        print(isa.disassemble(image))
    print(f"{out}: {image.n_instructions} instructions, main at word {image.main}, "
          f"checksum 0x{image.checksum:08x}", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    abi_spec = cfg.abi or _default_abi_for(cfg.image)
    if abi_spec is None:
        raise CliError("an ABI is required (--abi or abi = ... in the config)", EXIT_USAGE)
    abi = _abi(abi_spec)
    image = load_image_arg(cfg.image, abi, cfg.period)
    trace = _load_trace(cfg.trace, abi)
    block = None
    if cfg.block:
        try:
            block = make_block(cfg.block, **cfg.block_params)
        except (TypeError, ValueError) as e:
            raise CliError(f"block {cfg.block!r}: {e}", EXIT_USAGE) from None
    reg = hostapi.DeviceRegistry()
    dev = reg.add(IpuState(0, clock_ratio=cfg.clock_ratio, sample_every=cfg.sample, idealized=cfg.idealized,
                           block=block), capacity=cfg.fifo_capacity)
    if not hostapi.ipu_config_image(reg, dev, image):
        raise CliError(f"init faulted: {reg.get(dev).machine.fault}", EXIT_FAULT)
    hostapi.ipu_trigger_calls(reg, dev, cfg.ts, cfg.te)
    rep, packets = hostapi.run_device(reg, dev, trace, finalize=cfg.finalize)
    fifo = reg.get(dev).fifo
    bw = hostapi.bandwidth_report(packets, cfg.hz, cfg.ipu_count, cycles=trace.length)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hostapi.write_packets(out.with_suffix(".packets"), packets)
    report = rep.to_dict()
    report.update({"image": image.name, "trace": str(cfg.trace), "abi": abi.name, "fifo": fifo.totals(),
                   "bandwidth": bw.to_dict(), "block": block.state() if block is not None else None})
    analytics.write_json(out.with_suffix(".report.json"), report)
    print(f"{len(packets)} packets, {sum(len(p.data) for p in packets)} bytes -> {out.with_suffix('.packets')}",
          file=sys.stderr)
    if rep.status == Status.ERROR:
        print(f"fault: {rep.fault}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


def _read_packet_files(paths, header_len=0) -> list:
    out = []
    for p in paths:
        if not Path(p).exists():
            raise CliError(f"packet file not found: {p}", EXIT_INPUT)
        out.extend(hostapi.read_packets(p, header_len))
    return out


def cmd_report(args) -> int:
    out = Path(args.out or f"{args.kind}_report")
    out.parent.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    if kind == "pics":
        table = analytics.pics_postprocess(_read_packet_files(args.packets), args.period, args.cycles)
        analytics.write_csv(out.with_suffix(".csv"), ["pc", "signature", "cycles"], table.csv_rows())
        analytics.write_json(out.with_suffix(".json"), {
            "rows": [{"pc": f"0x{e.pc:x}", "signature": analytics.signature_names(e.signature), "cycles": e.cycles}
                     for e in table.rows],
            "samples": table.samples, "idle_samples": table.idle_samples, "total_cycles": table.total})
    elif kind == "util":
        windows = analytics.util_windows(_read_packet_files(args.packets, 1))
        summ = analytics.util_classify(windows, args.threshold)
        rows = [[w.index, *w.counts[:3], b] for w, b in zip(windows, summ.window_bins)]
        analytics.write_csv(out.with_suffix(".csv"), ["window", "simt", "tc", "mem", "bin"], rows)
        analytics.write_json(out.with_suffix(".json"), {
            "windows": summ.n_windows, "threshold": summ.threshold,
            "bins": {f"{k}-high": v for k, v in summ.bins.items()},
            "running_average": [list(r) for r in summ.running_average]})
    elif kind == "prefetch":
        summ = analytics.prefetch_report(_read_packet_files(args.packets))
        d = summ.to_dict()
        s = summ.stats
        rows = [[s["coverage"], s["accuracy"], s["miss_rate"]]]
        if args.baseline:
            base = analytics.prefetch_report(_read_packet_files(args.baseline))
            d["delta_vs_baseline"] = analytics.prefetch_ab(base, summ)
            d["baseline"] = base.to_dict()
            bs = base.stats
            rows.insert(0, [bs["coverage"], bs["accuracy"], bs["miss_rate"]])
        analytics.write_csv(out.with_suffix(".csv"), ["coverage", "accuracy", "missrate"], rows)
        analytics.write_json(out.with_suffix(".json"), d)
    elif kind == "dualrun":
        if not args.baseline:
            raise CliError("dualrun report needs --baseline (idealized packets) and --packets (faithful)",
                           EXIT_USAGE)
        ideal = analytics.pics_postprocess(_read_packet_files(args.baseline), args.period, args.cycles)
        faith = analytics.pics_postprocess(_read_packet_files(args.packets), args.period, args.cycles)
        _write_dual(out, ideal, faith)
    print(f"report written to {out.with_suffix('.csv')}", file=sys.stderr)
    return EXIT_OK


def _write_dual(out: Path, ideal, faith, extra: Optional[dict] = None):
    ip, fp = ideal.pc_totals(), faith.pc_totals()
    err = {pc: abs(fp.get(pc, 0) - c) / c for pc, c in ip.items()}
    tot = sum(ip.values())
    lost = sum(c for pc, c in ip.items() if pc not in fp)
    rows = [[f"0x{pc:x}", e] for pc, e in sorted(err.items())]
    mean = sum(err.values()) / len(err) if err else 0.0
    rows.append(["summary", mean])
    analytics.write_csv(out.with_suffix(".csv"), ["pc", "rel_error"], rows)
    summary = {"dropped_pc_fraction": lost / tot if tot else 0.0, "mean_rel_error": mean,
               "max_rel_error": max(err.values(), default=0.0),
               "heavy_set_equal": ideal.heavy_pcs() == faith.heavy_pcs()}
    summary.update(extra or {})
    analytics.write_json(out.with_suffix(".json"), summary)
    return summary


def cmd_synth(args) -> int:
    opts = {}
    for kv in args.opt or []:
        if "=" not in kv:
            raise CliError(f"--opt expects key=value, got {kv!r}", EXIT_USAGE)
        k, v = kv.split("=", 1)
        opts[k.strip()] = _param_value(v.strip())
    try:
        syn = synth_trace(args.scenario, args.seed, args.length, **opts)
    except TypeError as e:
        raise CliError(f"bad scenario option: {e}", EXIT_USAGE) from None
    syn.write(args.out)
    print(f"{args.out}: {len(syn.trace)} records over {syn.trace.length} cycles", file=sys.stderr)
    return EXIT_OK


def cmd_dualrun(args) -> int:
    cfg = build_config(args)
    abi = _abi(cfg.abi or _default_abi_for(cfg.image) or "pics")
    image = load_image_arg(cfg.image, abi, cfg.period)
    trace = _load_trace(cfg.trace, abi)
    d = analytics.dual_run(image, trace, cfg.period, clock_ratio=cfg.clock_ratio, sample_every=cfg.sample)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = _write_dual(out, d.idealized, d.faithful,
                          {"dropped_arrivals": d.dropped_arrivals, "delivered": d.delivered})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _run_flags(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--image", help="program image, .s source, or builtin:<name>")
    p.add_argument("--trace", help=".ipt or .ipb trace file")
    p.add_argument("--abi", help="ABI file or shipped ABI name")
    p.add_argument("--clock-ratio", type=Fraction, help="HIT cycles per IPU cycle (e.g. 1, 1/4)")
    p.add_argument("--sample", type=_sample, help="deliver every k-th cycle, written 1/k")
    p.add_argument("--period", type=_int, help="PICS sample period for builtin:pics")
    p.add_argument("--out", help="output path prefix")
    p.add_argument("--seed", type=_int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipuemu", description="Introspection processing unit emulator")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("asm", help="assemble and validate a program")
    a.add_argument("source")
    a.add_argument("-o", "--out")
    a.add_argument("--abi", help="ABI file or shipped ABI name for IOReg checks")
    a.add_argument("--policy", default="permissive", choices=isa.POLICIES)
    a.add_argument("--fragment", action="store_true", help="accept '...' lines and undefined labels")
    a.add_argument("--listing", action="store_true", help="print the disassembly")
    a.set_defaults(func=cmd_asm)

    r = sub.add_parser("run", help="run a trace through one IPU")
    _run_flags(r)
    r.add_argument("--block", help="soft-logic block name")
    r.add_argument("--block-param", action="append", metavar="KEY=VALUE")
    r.add_argument("--ts", type=_int, help="trigger-start address")
    r.add_argument("--te", type=_int, help="trigger-end address")
    r.add_argument("--idealized", action="store_true", help="every routine takes zero HIT time")
    r.add_argument("--fifo-capacity", type=_int)
    r.add_argument("--hz", type=float, help="HIT clock for bandwidth figures")
    r.add_argument("--ipu-count", type=_int)
    r.add_argument("--no-finalize", action="store_true", help="skip the finish routine at trace end")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="post-process packet files")
    rp.add_argument("kind", choices=("pics", "util", "prefetch", "dualrun"))
    rp.add_argument("--packets", nargs="+", default=[], help="packet files")
    rp.add_argument("--baseline", nargs="+", help="A-side packets (prefetch A/B, dualrun idealized)")
    rp.add_argument("--period", type=_int, default=analytics.PICS_PERIOD)
    rp.add_argument("--cycles", type=_int, help="analyzed cycles (weights the partial PICS sample)")
    rp.add_argument("--threshold", type=float, default=0.25)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic trace plus ground-truth sidecar")
    s.add_argument("scenario", help=", ".join(SCENARIOS))
    s.add_argument("--seed", type=_int, default=0)
    s.add_argument("--length", type=_int, default=100_000)
    s.add_argument("--opt", action="append", metavar="KEY=VALUE", help="scenario option")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("dualrun", help="idealized vs faithful PICS comparison")
    _run_flags(d)
    d.set_defaults(func=cmd_dualrun)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except PolicyRejected as e:
        print(f"PolicyRejected: {e}", file=sys.stderr)
        return EXIT_POLICY
    except MachineFault as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAULT
    except (AsmSyntaxError, ImageTooLarge, UnknownSignal, AbiMismatch, MalformedRecord, MalformedPayload,
            UnknownScenario) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except IpuError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAULT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``gpucc-sim``.

Exit codes: 0 success, 1 a check or verdict failed, 2 bad input
(configuration, parse or scenario-step errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adversary as adv
from . import attestation as att
from . import bar0_map
from . import gsp_dma as dma
from . import scenario as sc
from . import system as sysm
from .errors import ConfigError, InsufficientSamples, ScenarioError, SimError, TraceParseError
from .fabric import MachineConfig, build_machine, make_firmware_bundle, secure_boot, set_cc_mode
from .trace import Trace, read_trace, trace_level_from_env


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _hex(text: str) -> int:
    return int(text, 16)


# -- run / report --------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = sc.Scenario.load(args.scenario)
    result = sc.run_scenario(scenario, args.seed, Trace(level=trace_level_from_env()))
    paths = sc.write_outputs(result, args.out)
    for step in result.steps:
        failed = [k for k, v in step["checks"].items() if not v]
        print(f"step {step['index']:2d} {step['op']:14s} {'ok' if step['ok'] else 'FAILED ' + ','.join(failed)}")
    print(f"{scenario.name} seed={result.seed} {'PASS' if result.ok else 'FAIL'} trace_sha256={result.trace.digest()}")
    print(f"artifacts: {', '.join(sorted(p.name for p in paths.values()))} in {args.out}")
    return 0 if result.ok else 1


def cmd_report(args) -> int:
    summary = sc.summarize_trace(read_trace(args.trace))
    if args.json:
        _emit(summary)
    else:
        sys.stdout.write(sc.format_summary(summary))
    return 0


def cmd_scenarios(args) -> int:
    for name in sc.BUNDLED:
        s = sc.Scenario.load(name)
        print(f"{name:24s} seed={s.seed:<4d} {len(s.steps):2d} steps  {s.description}")
    return 0


# -- attestation ---------------------------------------------------------------

def cmd_attest(args) -> int:
    try:
        nonce = bytes.fromhex(args.nonce)
    except ValueError:
        raise ConfigError("--nonce must be hex") from None
    v = att.verify_bundle(args.evidence, args.rim_store, args.trust_anchor, args.rim_trust_anchor, nonce, args.ocsp)
    _emit(v.to_dict())
    return 0 if v.passed else 1


def cmd_export_evidence(args) -> int:
    config = sysm.SystemConfig.small(seed=args.seed)
    s = sysm.build_system(config, Trace(level=0), stages=("boot", "attestation"))
    nonce = bytes.fromhex(args.nonce) if args.nonce else np.random.default_rng([args.seed, 0xA77]).bytes(32)
    out = att.export_bundle(s.machine, s.services, nonce, args.out)
    print(f"evidence bundle written to {out} (nonce {nonce.hex()})")
    return 0


# -- attacks -------------------------------------------------------------------

def cmd_scan_table(args) -> int:
    data = Path(args.dump).read_bytes()
    hits = adv.scan_for_address_table(data, args.base, args.stride)
    _emit({"dump": args.dump, "bytes": len(data), "base": hex(args.base),
           "hits": [{"page_addr": hex(h.page_addr), "confidence": h.confidence} for h in hits]})
    return 0


def cmd_replay(args) -> int:
    _emit(sc.replay_from_trace(read_trace(args.trace), args.index))
    return 0


def _svg_histogram(samples: list[dma.TimingSample], bins: int = 60) -> str:
    small = [s.micros for s in samples if s.size <= 256]
    large = [s.micros for s in samples if s.size == 4096]
    lo = min(s.micros for s in samples)
    hi = max(s.micros for s in samples) + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    hs, hl = np.histogram(small, edges)[0], np.histogram(large, edges)[0]
    w, h, pad = 640, 320, 30
    top = max(int(hs.max(initial=0)), int(hl.max(initial=0)), 1)
    bw = (w - 2 * pad) / bins
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="{pad}" y="18" font-size="12">DMA latency (us): &lt;=256 B blue, 4096 B orange; '
             f'{lo:.1f} to {hi:.1f}</text>']
    for counts, colour, dx in ((hs, "#3465a4", 0.0), (hl, "#f57900", bw / 2)):
        for i, c in enumerate(counts):
            bh = (h - 2 * pad) * c / top
            parts.append(f'<rect x="{pad + i * bw + dx:.1f}" y="{h - pad - bh:.1f}" width="{bw / 2:.1f}" '
                         f'height="{bh:.1f}" fill="{colour}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_timing(args) -> int:
    samples = dma.samples_from_csv(Path(args.csv).read_text())
    try:
        res = adv.classify_timing(samples, args.min_per_class)
    except InsufficientSamples as exc:
        _emit({"error": "insufficient_samples", "detail": str(exc)})
        return 1
    if args.plot:
        Path(args.plot).write_text(_svg_histogram(samples))
        res["plot"] = args.plot
    _emit(res)
    return 0


# -- BAR0 ----------------------------------------------------------------------

def cmd_bar0_audit(args) -> int:
    manifest = bar0_map.load_manifest(args.manifest) if args.manifest else None
    key = "raw_manifest" if args.non_cc else "cc_manifest"
    m = build_machine(MachineConfig.small(**{key: manifest}), Trace(level=0))
    set_cc_mode(m, not args.non_cc)  # takes effect at the next secure boot
    secure_boot(m, make_firmware_bundle(m.config.seed))
    stats = adv.audit_bar0(m)
    _emit({**stats.to_dict(), "cc_mode": not args.non_cc, "manifest": args.manifest or "default"})
    return 0


def cmd_bar0_manifest(args) -> int:
    text = json.dumps(bar0_map.default_manifest(not args.non_cc), indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpucc-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file or a bundled scenario by name")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the scenario's seed")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarise a trace: leak table, attack outcomes, timing")
    rep.add_argument("trace")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)

    sub.add_parser("scenarios", help="list bundled scenarios").set_defaults(func=cmd_scenarios)

    a = sub.add_parser("attest", help="verify an evidence bundle")
    a.add_argument("--evidence", required=True, help="directory holding chain.json and report.json")
    a.add_argument("--rim-store", required=True)
    a.add_argument("--trust-anchor", required=True)
    a.add_argument("--rim-trust-anchor", required=True)
    a.add_argument("--nonce", required=True)
    a.add_argument("--ocsp", default=None, help="serial->status JSON; defaults to EVIDENCE/ocsp.json")
    a.set_defaults(func=cmd_attest)

    e = sub.add_parser("export-evidence", help="boot a simulated device and write an evidence bundle")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--nonce", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_evidence)

    atk = sub.add_parser("attack", help="host-side attacks").add_subparsers(dest="attack", required=True)
    s = atk.add_parser("scan-table", help="find RPC address tables in a memory dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--base", required=True, type=_hex)
    s.add_argument("--stride", type=int, default=4096)
    s.set_defaults(func=cmd_scan_table)
    rp = atk.add_parser("replay", help="replay staging record N of a recorded run")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--index", required=True, type=int)
    rp.set_defaults(func=cmd_replay)
    t = atk.add_parser("timing", help="classify DMA sizes from a timing CSV")
    t.add_argument("--csv", required=True)
    t.add_argument("--plot", default=None, help="write an SVG histogram here")
    t.add_argument("--min-per-class", type=int, default=50)
    t.set_defaults(func=cmd_timing)

    b = sub.add_parser("bar0", help="BAR0 register map").add_subparsers(dest="bar0", required=True)
    au = b.add_parser("audit", help="scan every BAR0 word and count values, zeros and errors")
    au.add_argument("--manifest", default=None)
    au.add_argument("--non-cc", action="store_true")
    au.set_defaults(func=cmd_bar0_audit)
    mf = b.add_parser("manifest", help="write the default register-map manifest")
    mf.add_argument("--non-cc", action="store_true")
    mf.add_argument("--out", default=None)
    mf.set_defaults(func=cmd_bar0_manifest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario step failed: {exc}", file=sys.stderr)
        return 2
    except TraceParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

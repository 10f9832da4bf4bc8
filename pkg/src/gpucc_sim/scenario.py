"""Scenario files and the step runner.

A scenario is JSON::

    {"name": ..., "seed": 7, "machine": {"preset": "default", ...},
     "timing": {...}, "mitigations": {...}, "steps": [{"op": "boot"}, ...]}

Each step returns a result dict whose ``checks`` map names to booleans; the
run fails if any check is false. A step may declare ``expect_error`` with an
exception class name, in which case raising it is the success condition.
"""

from __future__ import annotations

import dataclasses
import hashlib
import inspect
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import adversary as adv
from . import attestation as att
from . import bar0_map
from . import crypto_keys as ck
from . import fault_channel as fc
from . import gsp_dma as dma
from . import gsp_rpc as rpc
from . import sec2_engine as sec2m
from . import system as sysm
from . import uvm_submission as uvm
from .errors import AuthError, BootFailure, ConfigError, KeyRevoked, ReplayError, ScenarioError, SimError
from .fabric import CPR, PAGE, SHARED, VIDMEM, MachineConfig, build_machine, firmware_image, host_dump, vendor_signing_key
from .trace import PRIVATE, Trace

BUNDLED = ("paper-e2e", "rpc-scan-attack", "timing-channel", "replay-suite", "attest-negative-matrix",
           "scrub-tamper", "fault-tamper")
_TOP_KEYS = {"name", "seed", "machine", "timing", "mitigations", "steps", "erot_present", "description"}


@dataclass
class Scenario:
    name: str
    seed: int = 0
    machine: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    mitigations: dict = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    erot_present: bool = True
    description: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ConfigError("scenario must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "name" not in d:
            raise ConfigError("scenario needs a name")
        sc = cls(**d)
        if not isinstance(sc.seed, int) or not 0 <= sc.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for i, step in enumerate(sc.steps):
            if not isinstance(step, dict) or step.get("op") not in STEPS:
                raise ConfigError(f"step {i}: unknown op {step.get('op') if isinstance(step, dict) else step!r}")
            _check_params(i, step)
        return sc

    @classmethod
    def load(cls, ref: str | Path) -> "Scenario":
        """Load a file path, or a bundled scenario by name."""
        p = Path(ref)
        if p.exists():
            text = p.read_text()
        elif str(ref) in BUNDLED:
            text = resources.files("gpucc_sim.scenarios").joinpath(f"{ref}.json").read_text()
        else:
            raise ConfigError(f"no scenario file or bundled scenario named {ref!r}")
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None

    def system_config(self, seed: int) -> sysm.SystemConfig:
        mc = dict(self.machine)
        preset = mc.pop("preset", "default")
        if preset == "small":
            machine = MachineConfig.small(seed=seed, **mc)
        elif preset == "default":
            machine = MachineConfig.from_dict({**mc, "seed": seed})
        else:
            raise ConfigError(f"unknown machine preset {preset!r}")
        return sysm.SystemConfig(seed=seed, machine=machine, timing=dma.TimingModel.from_dict(self.timing),
                                 mitigations=sysm.Mitigations.from_dict(self.mitigations),
                                 erot_present=self.erot_present)


@dataclass
class RunContext:
    scenario: Scenario
    seed: int
    system: sysm.System
    artifacts: dict[str, bytes] = field(default_factory=dict)
    samples: list[dma.TimingSample] = field(default_factory=list)
    index: int = 0

    @property
    def machine(self):
        return self.system.machine

    @property
    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.index, 0x5CE])


@dataclass
class RunResult:
    scenario: str
    seed: int
    ok: bool
    steps: list[dict]
    trace: Trace
    artifacts: dict[str, bytes]
    system: sysm.System = field(repr=False)

    def report(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "ok": self.ok, "trace_sha256": self.trace.digest(),
                "steps": self.steps}


# -- steps ---------------------------------------------------------------------

def _step_boot(ctx: RunContext, tamper_stage: str | None = None, tamper: str = "unsigned",
               expect: str = "ok") -> dict:
    s = ctx.system
    if tamper_stage is not None:
        if tamper == "unsigned":
            s.bundle = s.bundle.replace_image(tamper_stage, s.bundle.images[tamper_stage] + b"\x00patched")
        elif tamper == "alt_signed":
            s.bundle = s.bundle.replace_image(tamper_stage, firmware_image(tamper_stage, "1.0-alt"),
                                              resign_with=vendor_signing_key(s.config.machine.seed))
        else:
            raise ConfigError(f"unknown firmware tamper {tamper!r}")
    try:
        sysm.boot(s)
        booted, failed = True, None
    except BootFailure as exc:
        booted, failed = False, exc.stage
    return {"booted": booted, "failed_stage": failed, "epoch": ctx.machine.epoch,
            "checks": {"boot_outcome": booted == (expect == "ok")}}


def _step_setup(ctx: RunContext, stages: list[str] | None = None) -> dict:
    s, m = ctx.system, ctx.machine
    stages = stages or ["rpc", "faults", "scrubber", "uvm", "services"]
    for st in stages:
        if st == "rpc":
            sysm.start_rpc(s)
        elif st == "faults":
            s.faults = fc.register_shadow_buffers(m, s.rpc)
        elif st == "scrubber":
            s.scrubber = sec2m.create_swl_scrubber_channel(m, s.cvm_keys, s.config.mitigations.encrypt_scrubber_pushes,
                                                           s.cvm_ring)
        elif st == "uvm":
            s.sec2_channel = uvm.create_sec2_channel(m, s.cvm_keys, s.cvm_ring)
            s.uvm = uvm.bootstrap_wlc_lcic(m, s.sec2_channel)
        elif st == "services":
            s.services = att.default_services(s.pki, sysm.golden_boot_hashes(s.config), s.device_root)
        else:
            raise ConfigError(f"unknown setup stage {st!r}")
    checks = {}
    if "uvm" in stages:
        checks["all_uvm_channels_operational"] = all(uvm.is_operational(m, c) for c in s.uvm.channels)
    return {"stages": stages, "checks": checks}


def _step_get_kmb(ctx: RunContext, engine: str = "lce0", privilege: str = "kernel") -> dict:
    kmb = ck.get_kmb(ctx.system.cvm_keys, engine, privilege)
    return {"engine": engine, "privilege": privilege, "keys": sorted(kmb),
            "checks": {"two_keys": len(kmb) == 2, "key_lengths": all(len(v) == 32 for v in kmb.values())}}


def _step_rpc_calls(ctx: RunContext, count: int = 10, multi: int = 0) -> dict:
    session = ctx.system.rpc
    cap = session.infra.capacity
    ok = 0
    for i in range(count):
        size = cap * 2 if i < multi else 16
        status = session.call(rpc.RpcMessage(rpc.NOP if i % 2 else rpc.QUERY_STATUS, bytes(size)))
        ok += status.status_code == rpc.ST_OK
    return {"calls": count, "multi": multi, "checks": {"all_ok": ok == count}}


def _step_dma(ctx: RunContext, reads: int = dma.WORKLOAD_READS, writes: int = dma.WORKLOAD_WRITES) -> dict:
    s, m = ctx.system, ctx.machine
    buf = m.alloc(CPR, PAGE)
    mismatches = 0
    for i, (op, size) in enumerate(dma.reference_workload(ctx.rng, reads, writes)):
        req_dir = "write_cpr" if op == dma.WRITE else "read_cpr"
        req = dma.TransferRequest(req_dir, buf, 0, size)
        if op == dma.WRITE:
            data = sysm.canary(s, f"dma{i}", size)
            dma.write_cpr(m, s.dma, req, data)
        else:
            expect = m.read(buf, size)
            data, _ = dma.read_cpr(m, s.dma, req)
            mismatches += data != expect
    ctx.samples.extend(s.dma.samples)
    s.dma.samples.clear()
    return {"reads": reads, "writes": writes, "checks": {"roundtrip": mismatches == 0}}


def _cycle_events(trace: Trace, start_tick: int) -> dict[tuple[int, int], list]:
    cycles: dict[tuple[int, int], list] = {}
    for ev in trace:
        if ev.t < start_tick:
            continue
        if ev.event in ("wlc_decrypt", "wlc_run"):
            cycles.setdefault((ev.meta["channel"], ev.meta["cycle"]), []).append((ev.event, None))
        elif ev.event == "lcic_advance":
            cycles.setdefault((ev.meta["wlc"], ev.meta["cycle"]), []).append(
                (ev.event, ev.meta["gpput_after"] - ev.meta["gpput_before"]))
    return cycles


def _step_uvm_launch(ctx: RunContext, count: int = 100, wlcs: int = uvm.NUM_WLC, canary: bool = True,
                     fault_every: int = 0) -> dict:
    s, m = ctx.system, ctx.machine
    setup = s.uvm
    start = len(m.trace)
    target = m.alloc(CPR, PAGE)
    launched = {}
    probes = []
    for i in range(count):
        w = i % wlcs
        payload = sysm.canary(s, f"uvm{i}", 64) if canary else b""
        if payload:
            probes.append(payload)
        addr = m.cvm_private.base if fault_every and (i + 1) % fault_every == 0 else target
        tok = uvm.launch_uvm_push(m, setup, setup.wlc[w], setup.ce[w], uvm.pte_memset_push(addr, 64, i & 0xFF, payload))
        launched[setup.wlc[w].id] = tok.cycle
    cycles = _cycle_events(m.trace, start)
    order_ok = all([e for e, _ in evs] == ["wlc_decrypt", "wlc_run", "lcic_advance"] for evs in cycles.values())
    delta_ok = all(evs[-1][1] == 2 for evs in cycles.values())
    sema_ok = all(uvm.poll_semaphore(setup.wlc[w], s.cvm_keys) == launched[setup.wlc[w].id]
                  for w in range(min(wlcs, count)))
    find = adv.canary_scanner(probes)
    hits = len(find(m.read(m.shared_staging.base, m.shared_staging.size)))
    hits += sum(len(find(rec[1])) for rec in m.staging_log)
    return {"launches": count, "cycles": len(cycles), "checks": {
        "cycles_observed": len(cycles) == count, "event_order": order_ok, "gpput_delta_2": delta_ok,
        "semaphores": sema_ok, "no_canary_in_staging": hits == 0}}


def _step_scrub(ctx: RunContext, pages: int = 4, tamper_trials: int = 0) -> dict:
    s, m = ctx.system, ctx.machine
    ch = s.scrubber
    rng = ctx.rng
    base = m.alloc(CPR, (pages + 1) * PAGE)
    first = (base - m.cpr.base) // PAGE
    req = sec2m.ScrubRequest(list(range(first, first + pages)))
    control = base + pages * PAGE
    for p in range(pages + 1):
        m.write(base + p * PAGE, bytes([0xA5]) * PAGE)
    checks = {}
    rejected = accepted = 0
    for _ in range(tamper_trials):
        def flip(kind, addr, length):
            adv.tamper(m, addr, adv.flip_bit(int(rng.integers(length * 8))), length)
        ch.intercept = flip
        try:
            sec2m.submit_scrub(ch, req)
            accepted += 1
        except (AuthError, ReplayError):
            rejected += 1
        finally:
            ch.intercept = None
    if tamper_trials:
        intact = m.read(base, pages * PAGE) == bytes([0xA5]) * (pages * PAGE)
        checks.update(all_tampered_rejected=rejected == tamper_trials, no_partial_execution=intact)
    sema = sec2m.submit_scrub(ch, req)
    zeroed = m.read(base, pages * PAGE) == bytes(pages * PAGE)
    checks.update(requested_pages_zeroed=zeroed, control_page_intact=m.read(control, PAGE) == bytes([0xA5]) * PAGE,
                  semaphore=sema == ch.push_seq)
    return {"pages": pages, "tamper_trials": tamper_trials, "rejected": rejected, "accepted": accepted,
            "checks": checks}


def _step_fault(ctx: RunContext, count: int = 4, kind: str = fc.REPLAYABLE, tamper_trials: int = 0) -> dict:
    s, m = ctx.system, ctx.machine
    if kind not in fc.KINDS:
        raise ConfigError(f"unknown fault kind {kind!r}")
    gsp, handler = m.device.gsp, s.faults
    rng = ctx.rng
    got = []
    sent = []
    for i in range(count):
        pkt = fc.FaultPacket(kind, m.cpr.base + i * PAGE, i & 0xFFFF, "write" if i % 2 else "read")
        fc.raise_fault(m, gsp, pkt)
        sent.append(pkt)
        got += fc.handle_faults(m, handler)
    detected = 0
    for _ in range(tamper_trials):
        fc.raise_fault(m, gsp, fc.FaultPacket(kind, m.cpr.base, 1, "read"))
        buf = handler.buffers[kind]
        slot = buf.slot_addr(buf.get_index)
        original = m.read(slot, fc.SLOT_SIZE)
        adv.tamper(m, slot, adv.flip_bit(int(rng.integers((fc.VALID_OFFSET + 1) * 8))), fc.VALID_OFFSET + 1)
        try:
            fc.handle_faults(m, handler)
        except (AuthError, ReplayError):
            detected += 1
        m.write(slot, original)  # the host restores the bytes; the ISR retries
        fc.consume_slot(m, handler, kind)
    checks = {"delivered": got == sent, "put_register": fc.read_put_register(m, kind) == handler.buffers[kind].get_index}
    if tamper_trials:
        checks["all_tampered_detected"] = detected == tamper_trials
    return {"kind": kind, "count": count, "tamper_trials": tamper_trials, "detected": detected, "checks": checks}


def _step_attest(ctx: RunContext, expect: str = "pass", expect_indices: list[int] | None = None) -> dict:
    v = att.attest(ctx.machine, ctx.system.services, rng=ctx.rng)
    if expect == "pass":
        ok = v.passed and ctx.machine.ready
    else:
        ok = not v.passed and v.reasons == [expect] and not ctx.machine.ready
        if expect_indices is not None:
            ok = ok and v.indices == expect_indices
    return {"verdict": v.to_dict(), "checks": {"verdict": ok}}


def _step_attest_matrix(ctx: RunContext) -> dict:
    s = ctx.system
    res = att.run_matrix(ctx.machine, s.pki, sysm.golden_boot_hashes(s.config), ctx.rng.bytes(32))
    order = ["device_identity", "provisioner", "model", "root", "attestation", "rim_fetch"]
    return {"cases": {k: {kk: v[kk] for kk in ("result", "reasons", "indices", "expected")} for k, v in res.items()},
            "checks": {"every_case_as_expected": all(v["as_expected"] for v in res.values()),
                       "pass_only_when_clean": sorted(k for k, v in res.items() if v["result"] == "pass")
                       == ["clean", "garbage_root"],
                       "reverse_chain_order": res["clean"]["order"] == order,
                       "root_substitution": res["garbage_root"]["result"] == res["clean"]["result"]}}


def _step_attack_scan(ctx: RunContext, decoy: bool = False, save_dump: bool = False) -> dict:
    m = ctx.machine
    truth = ctx.system.rpc.infra.table_addr
    decoy_addr = None
    if decoy:
        decoy_addr = m.alloc(SHARED, PAGE)
        adv.plant_decoy(m, decoy_addr)
    base, dump = host_dump(m)
    hits = [h.page_addr for h in adv.scan_for_address_table(dump, base)]
    if save_dump:
        ctx.artifacts["dump.bin"] = dump
        ctx.artifacts["dump.json"] = json.dumps({"base": base, "size": len(dump), "table": truth}).encode()
    want = sorted([truth] + ([decoy_addr] if decoy else []))
    return {"dump_bytes": len(dump), "hits": [hex(h) for h in hits], "table": hex(truth),
            "checks": {"hits_exact": sorted(hits) == want}}


def _step_attack_replay(ctx: RunContext, trials: int = 1000, classes: list[str] | None = None) -> dict:
    targets = adv.replay_targets(ctx.system)
    classes = classes or list(adv.AEAD_CLASSES) + ["sec2_semaphore"]
    rng = ctx.rng
    out, checks = {}, {}
    for name in classes:
        rep = adv.run_replay_suite(ctx.machine, targets[name], trials, rng)
        out[name] = rep.to_dict()
        if targets[name].aead:
            checks[f"{name}_zero_accepted"] = rep.accepted_forgeries == 0 and rep.genuine_rejected == 0
        else:
            checks[f"{name}_accepted_unprotected"] = rep.outcomes[adv.ACCEPTED] == rep.attempts
    return {"classes": out, "checks": checks}


def _step_attack_timing(ctx: RunContext, per_class: int = 1000, source: str = "dma", min_accuracy: float | None = None,
                        max_accuracy: float | None = None, constant_time: bool | None = None) -> dict:
    s = ctx.system
    saved = s.dma.timing
    if constant_time is not None:
        s.dma.timing = dataclasses.replace(saved, constant_time=constant_time)
    try:
        return _timing(ctx, per_class, source, min_accuracy, max_accuracy)
    finally:
        s.dma.timing = saved


def _timing(ctx: RunContext, per_class: int, source: str, min_accuracy: float | None,
            max_accuracy: float | None) -> dict:
    s, m = ctx.system, ctx.machine
    if source == "dma":
        buf = m.alloc(CPR, PAGE)
        sizes = [sz for sz in dma.SIZE_CLASSES if sz <= 256]
        for i in range(per_class):
            for sz in (sizes[i % len(sizes)], 4096):
                dma.write_cpr(m, s.dma, dma.TransferRequest("write_cpr", buf, 0, sz), bytes(sz))
        samples = list(s.dma.samples[-2 * per_class:])
        s.dma.samples.clear()
    elif source == "workload":
        samples = list(ctx.samples)
    else:
        raise ConfigError(f"unknown timing source {source!r}")
    ctx.samples.extend(samples if source == "dma" else [])
    res = adv.classify_timing(samples)
    checks = {}
    if min_accuracy is not None:
        checks["accuracy_at_least"] = res["accuracy"] >= min_accuracy
    if max_accuracy is not None:
        checks["accuracy_at_most"] = res["accuracy"] <= max_accuracy
    res = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in res.items()}
    return {**res, "constant_time": s.dma.timing.constant_time, "checks": checks}


def _step_attack_infer(ctx: RunContext, commands: int = 200, max_over_chance: float | None = None,
                       min_accuracy: float | None = None) -> dict:
    res = adv.run_inference_experiment(ctx.system, commands, ctx.rng)
    checks = {}
    if max_over_chance is not None:
        checks["at_most_chance_plus"] = res["accuracy"] <= res["chance"] + max_over_chance
    if min_accuracy is not None:
        checks["accuracy_at_least"] = res["accuracy"] >= min_accuracy
    return {**res, "checks": checks}


def _step_bar0_audit(ctx: RunContext, mode: str = "current") -> dict:
    m = ctx.machine
    if mode == "raw":
        m = build_machine(ctx.system.config.machine, Trace(level=0))
    elif mode != "current":
        raise ConfigError(f"unknown bar0 audit mode {mode!r}")
    stats = adv.audit_bar0(m)
    want = bar0_map.CC_COUNTS if m.cc_mode_active else bar0_map.RAW_COUNTS
    return {**stats.to_dict(), "cc_mode": m.cc_mode_active,
            "checks": {"values": stats.values == want["value"], "errors": stats.errors == want["error"],
                       "sum": stats.values + stats.zeros + stats.errors == stats.total}}


def _step_leak_sweep(ctx: RunContext, expect_exact: bool = True) -> dict:
    s = ctx.system
    rep = adv.leak_sweep(ctx.machine, s.canaries, s.config.mitigations)
    d = rep.to_dict()
    checks = {"no_canary_hits": not rep.canary_hits, "no_unexpected_surfaces": not rep.unexpected}
    if expect_exact:
        checks["surfaces_exact"] = rep.exact
    if s.canaries:
        checks["positive_control"] = rep.positive_control
    return {**d, "checks": checks}


def _step_soft_reset(ctx: RunContext) -> dict:
    s, m = ctx.system, ctx.machine
    states = [st for st in s.cvm_ring.states.values() if ck.key_kind(st.key_id) == "aead"]
    start = len(m.trace)
    sec2m.soft_reset(m)
    zero = all(m.region(r).content.count(0) == m.region(r).size for r in (CPR, VIDMEM))
    events = [e.event for e in m.trace.events()[start:]]
    order_ok = (events.index("keys_deleted") < events.index("host_visible")
                and max(i for i, e in enumerate(events) if e == "wipe") < events.index("host_visible"))
    dead = 0
    for st in states:
        try:
            ck.seal(st, s.cvm_keys, b"x")
        except KeyRevoked:
            dead += 1
    return {"cipher_states": len(states), "checks": {"device_memory_zero": zero, "wipe_before_visible": order_ok,
                                                      "cipher_states_invalidated": dead == len(states)}}


def _step_dump(ctx: RunContext, regions: list[str] | None = None, name: str = "dump.bin") -> dict:
    base, data = host_dump(ctx.machine, regions or ["cvm_private", SHARED])
    ctx.artifacts[name] = data
    return {"name": name, "base": base, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest(), "checks": {}}


STEPS: dict[str, Callable[..., dict]] = {
    "boot": _step_boot, "setup": _step_setup, "get_kmb": _step_get_kmb, "rpc_calls": _step_rpc_calls,
    "dma": _step_dma, "uvm_launch": _step_uvm_launch, "scrub": _step_scrub, "fault": _step_fault,
    "attest": _step_attest, "attest_matrix": _step_attest_matrix, "attack_scan": _step_attack_scan,
    "attack_replay": _step_attack_replay, "attack_timing": _step_attack_timing,
    "attack_infer": _step_attack_infer, "bar0_audit": _step_bar0_audit, "leak_sweep": _step_leak_sweep,
    "soft_reset": _step_soft_reset, "dump": _step_dump,
}

# Components a step reads from the System; missing ones mean the scenario skipped a setup stage.
_REQUIRES = {"get_kmb": ("cvm_keys", "boot"), "rpc_calls": ("rpc", "setup rpc"), "dma": ("dma", "setup rpc"),
             "attack_scan": ("rpc", "setup rpc"), "attack_timing": ("dma", "setup rpc"),
             "uvm_launch": ("uvm", "setup uvm"), "scrub": ("scrubber", "setup scrubber"),
             "fault": ("faults", "setup faults"), "attest": ("services", "setup services")}


def _check_params(index: int, step: dict) -> None:
    params = set(inspect.signature(STEPS[step["op"]]).parameters) - {"ctx"}
    extra = set(step) - params - {"op", "expect_error"}
    if extra:
        raise ConfigError(f"step {index} ({step['op']}): unknown parameters {sorted(extra)}")


def run_scenario(scenario: Scenario, seed: int | None = None, trace: Trace | None = None,
                 stop_after: int | None = None) -> RunResult:
    """Run every step (or steps ``0..stop_after``) and collect checks, trace and artifacts."""
    seed = scenario.seed if seed is None else seed
    trace = trace if trace is not None else Trace()
    config = scenario.system_config(seed)
    system = sysm.build_system(config, trace, stages=())
    trace.emit("runner", "scenario_start", PRIVATE, scenario=scenario.name, seed=seed, steps=len(scenario.steps),
               source=dataclasses.asdict(scenario))
    ctx = RunContext(scenario, seed, system)
    results = []
    for i, step in enumerate(scenario.steps):
        if stop_after is not None and i > stop_after:
            break
        ctx.index = i
        params = {k: v for k, v in step.items() if k not in ("op", "expect_error")}
        trace.emit("runner", "step_start", PRIVATE, index=i, op=step["op"])
        try:
            need = _REQUIRES.get(step["op"])
            if need and getattr(system, need[0]) is None:
                raise ConfigError(f"needs an earlier '{need[1]}' step")
            res = STEPS[step["op"]](ctx, **params)
            if step.get("expect_error"):
                res["checks"]["expected_error_raised"] = False
        except SimError as exc:
            if type(exc).__name__ != step.get("expect_error"):
                trace.emit("runner", "step_error", PRIVATE, index=i, op=step["op"], error=type(exc).__name__)
                raise ScenarioError(i, f"{step['op']}: {type(exc).__name__}: {exc}") from exc
            res = {"error": type(exc).__name__, "checks": {"expected_error_raised": True}}
        res = {"index": i, "op": step["op"], **res}
        res["ok"] = all(res["checks"].values())
        trace.emit("runner", "step_done", PRIVATE, index=i, op=step["op"], ok=res["ok"],
                   failed=sorted(k for k, v in res["checks"].items() if not v))
        results.append(res)
    if ctx.samples:
        ctx.artifacts["timing.csv"] = dma.samples_to_csv(ctx.samples).encode()
    ok = all(r["ok"] for r in results)
    trace.emit("runner", "scenario_done", PRIVATE, scenario=scenario.name, ok=ok)
    return RunResult(scenario.name, seed, ok, results, trace, ctx.artifacts, system)


def write_outputs(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.jsonl", "report": out / "report.json"}
    result.trace.write(paths["trace"])
    paths["report"].write_text(json.dumps(result.report(), indent=1, sort_keys=True) + "\n")
    for name, data in sorted(result.artifacts.items()):
        (out / name).write_bytes(data)
        paths[name] = out / name
    return paths


def replay_from_trace(events: list[dict], staging_index: int) -> dict:
    """Re-run the recorded scenario up to the step that wrote staging record ``staging_index``, then
    hand that captured record back to its consumer, as a host replaying old ciphertext would."""
    start = next((e for e in events if e.get("event") == "scenario_start"), None)
    if start is None or "source" not in start:
        raise ConfigError("trace does not record the scenario it came from")
    write = next((e for e in events if e.get("event") == "staging_write" and e.get("index") == staging_index), None)
    if write is None:
        raise ConfigError(f"trace has no staging write with index {staging_index} (needs trace level >= 1)")
    step = max((e["index"] for e in events if e.get("event") == "step_start" and e["t"] < write["t"]), default=None)
    if step is None:
        raise ConfigError("that staging write happened outside any step")
    target_name = adv.SURFACE_TARGETS.get(write["surface"])
    if target_name is None:
        raise ConfigError(f"no replay consumer for surface {write['surface']!r}; "
                          f"supported: {sorted(adv.SURFACE_TARGETS)}")
    scenario = Scenario.from_dict(start["source"])
    result = run_scenario(scenario, start["seed"], Trace(level=1), stop_after=step)
    m = result.system.machine
    if not m.config.record_staging:
        raise ConfigError("the scenario disables record_staging, so captures cannot be rebuilt")
    addr, data, surface, _sealed = m.staging_log[staging_index]
    if target_name == "rpc":
        prev = m.staging_log[staging_index - 1]
        if prev[2] != "rpc.element_header" or prev[0] + len(prev[1]) != addr:
            raise ConfigError("payload record is not preceded by its element header")
        data = prev[1] + data
    targets = adv.replay_targets(result.system)
    if target_name not in targets:
        raise ConfigError(f"the rebuilt system has no live {target_name} consumer")
    if target_name == "semaphore":
        # The driver has already read the live value, as it would have by now.
        lcic = result.system.uvm.lcic[0]
        uvm.poll_semaphore(lcic, lcic.owner_keys)
    outcome = adv.replay_ciphertext(m, targets[target_name], data)
    return {"scenario": scenario.name, "seed": start["seed"], "index": staging_index, "step": step,
            "surface": surface, "addr": hex(addr), "target": target_name, "aead": targets[target_name].aead,
            "outcome": outcome}


# -- trace summaries -----------------------------------------------------------

def summarize_trace(events: list[dict]) -> dict:
    """Leak table, attack outcomes, timing statistics and verdicts from a parsed trace."""
    if not events:
        return {}
    leak: dict[str, dict[str, list[int]]] = {}
    replay: dict[str, dict[str, int]] = {}
    timing: dict[str, list[float]] = {}
    verdicts, audits, steps = [], [], []
    for ev in events:
        name = ev.get("event")
        if name == "staging_write":
            row = leak.setdefault(ev["surface"], {"plaintext": [0, 0], "sealed": [0, 0]})
            cell = row["sealed" if ev.get("sealed") else "plaintext"]
            cell[0] += 1
            cell[1] += int(ev.get("len", 0))
        elif name == "bar0_update":
            row = leak.setdefault("bar0:" + ev["role"], {"plaintext": [0, 0], "sealed": [0, 0]})
            row["plaintext"][0] += 1
            row["plaintext"][1] += 4
        elif name == "replay_attempt":
            r = replay.setdefault(ev["channel"], {})
            r[ev["outcome"]] = r.get(ev["outcome"], 0) + 1
        elif name == "dma_timing":
            timing.setdefault(f"{ev['op']}:{ev['size']}", []).append(float(ev["micros"]))
        elif name == "verdict":
            verdicts.append({"result": ev.get("result"), "reasons": ev.get("reasons", [])})
        elif name == "bar0_audit":
            audits.append({k: ev[k] for k in ("cc_mode", "values", "zeros", "errors") if k in ev})
        elif name == "step_done":
            steps.append({"index": ev["index"], "op": ev["op"], "ok": ev["ok"]})
    groups = {}
    for surface, row in leak.items():
        if row["plaintext"][0]:
            g = adv._group_of(surface) or "UNEXPECTED"
            groups.setdefault(g, []).append(surface)
    stats = {k: {"n": len(v), "mean": round(float(np.mean(v)), 3), "std": round(float(np.std(v)), 3)}
             for k, v in sorted(timing.items())}
    return {"leak_table": dict(sorted(leak.items())), "plaintext_groups": {k: sorted(v) for k, v in sorted(groups.items())},
            "replay": dict(sorted(replay.items())), "timing": stats, "verdicts": verdicts, "bar0_audits": audits,
            "steps": steps}


def format_summary(summary: dict) -> str:
    if not summary:
        return "empty trace\n"
    lines = ["leak budget (surface: plaintext writes/bytes | sealed writes/bytes)"]
    for surface, row in summary["leak_table"].items():
        p, s = row["plaintext"], row["sealed"]
        lines.append(f"  {surface:32s} {p[0]:7d} / {p[1]:10d} | {s[0]:7d} / {s[1]:10d}")
    lines.append("plaintext surface groups")
    for g, members in summary["plaintext_groups"].items():
        lines.append(f"  {g}: {', '.join(members)}")
    if summary["replay"]:
        lines.append("replay/tamper outcomes")
        for ch, outcomes in summary["replay"].items():
            lines.append(f"  {ch:16s} " + ", ".join(f"{k}={v}" for k, v in sorted(outcomes.items())))
    if summary["timing"]:
        lines.append("DMA timing (us)")
        for k, st in summary["timing"].items():
            lines.append(f"  {k:14s} n={st['n']:5d} mean={st['mean']:9.3f} std={st['std']:8.3f}")
    for v in summary["verdicts"]:
        lines.append(f"attestation verdict: {v['result']} {' '.join(v['reasons'])}".rstrip())
    for a in summary["bar0_audits"]:
        lines.append(f"BAR0 audit (cc={a.get('cc_mode')}): values={a.get('values')} zeros={a.get('zeros')} "
                     f"errors={a.get('errors')}")
    for st in summary["steps"]:
        lines.append(f"step {st['index']:2d} {st['op']:14s} {'ok' if st['ok'] else 'FAILED'}")
    return "\n".join(lines) + "\n"

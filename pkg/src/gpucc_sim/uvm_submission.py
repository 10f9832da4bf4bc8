"""Two-phase secure work submission.

Phase I: the single SEC2 channel (staging-resident, HMAC-signed) bootstraps
16 WLC, 16 LCIC and 16 UVM-CE channels whose GPFIFO, GPPUT and pushbuffers
live in CPR. Nothing becomes operational until a final signed activation.

Phase II: each launch on WLC ``i`` (engine ``lce x = i % 8``) runs one cycle
of two GPFIFO entries:

1. the static ``decrypt_push`` opens the sealed ``run_push`` from staging
   into CPR;
2. the ``run_push`` opens the sealed UVM push into the CE pushbuffer, points
   the CE (engine ``lce y = (i + 1) % 8``) at it, triggers it, and signals
   the paired LCIC, whose static schedule advances the WLC GPPUT by two.

Both sealed pushes use ``lce{x}_h2d_kernel`` with distinct IV salts. Tracking
semaphores are sealed into staging under the d2h keys with the channel id as
AAD.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import bar0_map
from . import crypto_keys as ck
from . import sec2_engine as sec2m
from .channel import (
    ADVANCE_GPPUT,
    CE_MEMSET,
    CE_NOP,
    DECRYPT_RUN_PUSH,
    DECRYPT_UVM_PUSH,
    DECRYPT_TO_CPR,
    GPFIFO_CAPACITY,
    GPFIFO_ENTRY,
    SEMAPHORE_RELEASE,
    SET_CE_GPFIFO,
    SETUP_CHANNEL_STATE,
    SIGNAL_LCIC,
    TRIGGER_CE,
    Channel,
    Method,
    allocate_channel,
    parse_methods,
    serialize_methods,
)
from .errors import AuthError, ChannelBusy, ReplayError, SimError, SingletonViolation
from .fabric import SHARED, Machine, bar0_write
from .trace import HOST_VISIBLE, PRIVATE

NUM_WLC = 16
WLC_BASE, LCIC_BASE, CE_BASE = 0x100, 0x200, 0x300
ROLE_CODES = {"wlc": 1, "lcic": 2, "uvm_ce": 3}
UVM_PUSH_MAX = 4096
RUN_PUSH_OFFSET = 256  # run_push slot inside the WLC arena; decrypt_push sits at offset 0
CTRL_GPPUT_OFFSET = GPFIFO_CAPACITY * GPFIFO_ENTRY.size
_SEMA = struct.Struct("<Q")


def wlc_lce(i: int) -> int:
    return i % ck.NUM_LCE


def ce_lce(i: int) -> int:
    return (i + 1) % ck.NUM_LCE


def run_push_methods(uvm_src: int, uvm_len: int, ce_pb: int, ce_id: int, wlc_id: int) -> list[Method]:
    return [
        Method(DECRYPT_UVM_PUSH, (uvm_src, uvm_len, ce_pb)),
        Method(SET_CE_GPFIFO, (ce_id, ce_pb, uvm_len)),
        Method(TRIGGER_CE, (ce_id,)),
        Method(SIGNAL_LCIC, (wlc_id,)),
    ]


RUN_PUSH_LEN = len(serialize_methods(run_push_methods(0, 0, 0, 0, 0)))


@dataclass
class UvmDevice:
    """Device-side engine state for all CPR channels."""

    keys: ck.KeyTable
    ring: ck.KeyRing
    chans: dict[int, Channel] = field(default_factory=dict)
    gpget: dict[int, int] = field(default_factory=dict)
    sema_values: dict[int, int] = field(default_factory=dict)
    cycles: dict[int, int] = field(default_factory=dict)


@dataclass
class UvmSetup:
    sec2: Channel
    wlc: list[Channel]
    lcic: list[Channel]
    ce: list[Channel]
    uvm_slots: dict[int, int]  # wlc id -> staging slot for the sealed UVM push
    run_slots: dict[int, int]  # wlc id -> staging slot for the sealed run_push

    @property
    def channels(self) -> list[Channel]:
        return self.wlc + self.lcic + self.ce


@dataclass
class LaunchToken:
    wlc_id: int
    ce_id: int
    cycle: int
    gpput_before: int
    gpput_after: int
    fault: bool = False


def create_sec2_channel(machine: Machine, key_table: ck.KeyTable, ring: ck.KeyRing | None = None) -> Channel:
    sec2 = sec2m._require_sec2(machine)
    if any(info.role == "sec2" for info in sec2.channels.values()):
        raise SingletonViolation("only one SEC2 channel may exist")
    ch = allocate_channel(machine, sec2m.SEC2_CHANNEL_ID, "sec2", "sec2", "staging")
    ch.keys = {"hmac": "cpu_sec2_hmac_kernel", "data": "cpu_sec2_data_kernel"}
    key_table.key(ch.keys["hmac"])
    ch.owner_keys = key_table
    ch.owner_ring = ring or ck.KeyRing(key_table)
    sec2.attach(ch)
    machine.trace.emit("cvm", "channel_create", PRIVATE, channel=ch.id, role="sec2", location="staging")
    return ch


def _cpr_channel(machine: Machine, ch_id: int, lce: int, role: str, key_table, ring) -> Channel:
    ch = allocate_channel(machine, ch_id, f"lce{lce}", role, "cpr", arena_size=2 * UVM_PUSH_MAX)
    ch.keys = {"h2d": f"lce{lce}_h2d_kernel", "d2h": f"lce{lce}_d2h_kernel"}
    ch.owner_keys = key_table
    ch.owner_ring = ring
    return ch


def _label(ch: Channel, what: str) -> str:
    return f"{ch.role}{ch.id:#x}/{what}"


def bootstrap_wlc_lcic(machine: Machine, sec2_channel: Channel, sign: bool = True) -> UvmSetup:
    """Phase I. Raises AuthError (after tracing an abort) if any SEC2 push is rejected."""
    if sec2_channel.role != "sec2":
        raise SimError("bootstrap needs the SEC2 channel")
    sec2m._require_sec2(machine)
    keys, ring = sec2_channel.owner_keys, sec2_channel.owner_ring
    dev_keys = machine.device.keys
    uvm = UvmDevice(dev_keys, ck.KeyRing(dev_keys))
    wlcs, lcics, ces = [], [], []
    uvm_slots, run_slots = {}, {}
    for i in range(NUM_WLC):
        x, y = wlc_lce(i), ce_lce(i)
        wlc = _cpr_channel(machine, WLC_BASE + i, x, "wlc", keys, ring)
        lcic = _cpr_channel(machine, LCIC_BASE + i, x, "lcic", keys, ring)
        ce = _cpr_channel(machine, CE_BASE + i, y, "uvm_ce", keys, ring)
        wlcs.append(wlc)
        lcics.append(lcic)
        ces.append(ce)
        uvm_slots[wlc.id] = machine.alloc(SHARED, ck.SealedBlob.packed_size(UVM_PUSH_MAX), align=64)
        run_slots[wlc.id] = machine.alloc(SHARED, ck.SealedBlob.packed_size(RUN_PUSH_LEN), align=64)
    setup = UvmSetup(sec2_channel, wlcs, lcics, ces, uvm_slots, run_slots)

    try:
        for i in range(NUM_WLC):
            wlc, lcic, ce = wlcs[i], lcics[i], ces[i]
            run_cpr = wlc.arena_addr + RUN_PUSH_OFFSET
            decrypt_push = serialize_methods([Method(DECRYPT_RUN_PUSH, (run_slots[wlc.id], RUN_PUSH_LEN, run_cpr))])
            wlc_gpfifo = b"".join(
                GPFIFO_ENTRY.pack(*((wlc.arena_addr, len(decrypt_push)) if k % 2 == 0 else (run_cpr, RUN_PUSH_LEN)))
                for k in range(GPFIFO_CAPACITY))
            schedule = serialize_methods([Method(ADVANCE_GPPUT, (wlc.id, 2))])
            lcic_gpfifo = GPFIFO_ENTRY.pack(lcic.arena_addr, len(schedule))
            uploads = [
                (wlc.gpfifo_addr, wlc_gpfifo + struct.pack("<I", 2)),
                (wlc.arena_addr, decrypt_push),
                (lcic.gpfifo_addr, lcic_gpfifo + bytes(CTRL_GPPUT_OFFSET - len(lcic_gpfifo)) + struct.pack("<I", 1)),
                (lcic.arena_addr, schedule),
            ]
            methods = []
            for dst, data in uploads:
                src, sel = sec2m.encrypt_for_sec2(sec2_channel, data, dst, "kernel")
                methods.append(Method(DECRYPT_TO_CPR, (src, len(data), dst, sel)))
            for ch in (wlc, lcic, ce):
                methods.append(Method(SETUP_CHANNEL_STATE, (ch.id, ROLE_CODES[ch.role], ch.lce,
                                                             ch.gpfifo_addr, ch.arena_addr)))
            methods.append(Method(SEMAPHORE_RELEASE, (sec2_channel.tracking_semaphore_addr, i + 1)))
            sec2m.submit(sec2_channel, methods, sign)
        sec2m.submit(sec2_channel, [Method(SETUP_CHANNEL_STATE, (sec2m.ACTIVATE_ALL, 0, 0, 0, 0)),
                                    Method(SEMAPHORE_RELEASE, (sec2_channel.tracking_semaphore_addr, NUM_WLC + 1))],
                     sign)
    except (AuthError, ReplayError) as exc:
        machine.trace.emit("cvm", "bootstrap_abort", PRIVATE, error=type(exc).__name__, classification="dos")
        raise
    for ch in setup.channels:
        uvm.chans[ch.id] = ch
        uvm.gpget[ch.id] = 0
        uvm.sema_values[ch.id] = 0
        uvm.cycles[ch.id] = 0
    machine.device.uvm = uvm
    machine.trace.emit("sec2", "bootstrap_done", PRIVATE, wlc=NUM_WLC, lcic=NUM_WLC, ce=NUM_WLC)
    return setup


def is_operational(machine: Machine, ch: Channel) -> bool:
    sec2 = machine.device.sec2
    return bool(sec2 is not None and machine.device.uvm is not None and ch.id in sec2.registered)


def wlc_gpput(machine: Machine, wlc: Channel) -> int:
    """Device-side view of a CPR channel's GPPUT (trusted read)."""
    return struct.unpack("<I", machine.read(wlc.gpfifo_addr + CTRL_GPPUT_OFFSET, 4))[0]


# -- Phase II -----------------------------------------------------------------

def launch_uvm_push(machine: Machine, setup: UvmSetup, wlc: Channel, ce: Channel, methods: list[Method],
                    intercept=None) -> LaunchToken:
    """Seal a UVM push and its run_push, ring the doorbell, and run the WLC cycle.

    ``intercept(kind, addr, length)`` is called once both sealed pushes sit in
    staging and before the doorbell, modelling the host's tamper window.
    """
    if not (is_operational(machine, wlc) and is_operational(machine, ce)):
        raise SimError("channel not operational")
    if wlc.role != "wlc" or ce.role != "uvm_ce":
        raise SimError("launch needs a WLC and a UVM CE channel")
    if ce.lce == wlc.lce:
        raise SimError("the UVM CE engine must differ from the WLC engine")
    if wlc.in_flight:
        raise ChannelBusy(f"WLC {wlc.id:#x} already has a launch in flight")
    uvm_bytes = serialize_methods(methods)
    if len(uvm_bytes) > UVM_PUSH_MAX:
        raise SimError("UVM push too large")
    keys, ring = wlc.owner_keys, wlc.owner_ring
    h2d = wlc.keys["h2d"]
    ce_pb = ce.arena_addr
    uvm_slot, run_slot = setup.uvm_slots[wlc.id], setup.run_slots[wlc.id]

    blob_u = ck.seal(ring.state(h2d, _label(wlc, "uvm")), keys, uvm_bytes, struct.pack("<IQ", wlc.id, ce_pb))
    machine.stage_write(uvm_slot, blob_u.pack(), "uvm.push", True)
    machine.trace.emit("cvm", "uvm_seal", HOST_VISIBLE, channel=wlc.id, key=h2d, len=len(uvm_bytes), sealed=True)
    run = serialize_methods(run_push_methods(uvm_slot, len(uvm_bytes), ce_pb, ce.id, wlc.id))
    blob_r = ck.seal(ring.state(h2d, _label(wlc, "run")), keys, run, struct.pack("<I", wlc.id))
    machine.stage_write(run_slot, blob_r.pack(), "uvm.run_push", True)
    machine.trace.emit("cvm", "run_seal", HOST_VISIBLE, channel=wlc.id, key=h2d, sealed=True)
    if intercept is not None:
        intercept("uvm", uvm_slot, len(uvm_bytes))
        intercept("run", run_slot, RUN_PUSH_LEN)

    wlc.in_flight = True
    try:
        bar0_write(machine, machine.bar0_role_offset(bar0_map.ROLE_DOORBELL), wlc.id, "cvm")
        return _wlc_cycle(machine, machine.device.uvm, wlc.id)
    finally:
        wlc.in_flight = False


def _seal_semaphore(machine: Machine, uvm: UvmDevice, ch: Channel) -> None:
    uvm.sema_values[ch.id] += 1
    state = uvm.ring.state(ch.keys["d2h"], _label(ch, "sema"))
    blob = ck.seal(state, uvm.keys, _SEMA.pack(uvm.sema_values[ch.id]), struct.pack("<I", ch.id))
    machine.stage_write(ch.tracking_semaphore_addr, blob.pack(), f"{ch.role}.semaphore", True, ch.engine)
    machine.trace.emit(ch.engine, "semaphore_update", HOST_VISIBLE, channel=ch.id, sealed=True)


def _read_push(machine: Machine, ch: Channel, index: int) -> list[Method]:
    addr, length = ch.read_entry(index)
    return parse_methods(machine.read(addr, length))


def open_run_push(machine: Machine, uvm: UvmDevice, wlc: Channel, src: int, length: int) -> bytes:
    """Device-side decrypt of a sealed run_push sitting in staging."""
    blob = ck.SealedBlob.unpack(machine.read(src, ck.SealedBlob.packed_size(length)), struct.pack("<I", wlc.id))
    return ck.open_blob(uvm.ring.state(wlc.keys["h2d"], _label(wlc, "run")), uvm.keys, blob)


def open_uvm_push(machine: Machine, uvm: UvmDevice, wlc: Channel, src: int, length: int, ce_pb: int) -> bytes:
    blob = ck.SealedBlob.unpack(machine.read(src, ck.SealedBlob.packed_size(length)), struct.pack("<IQ", wlc.id, ce_pb))
    return ck.open_blob(uvm.ring.state(wlc.keys["h2d"], _label(wlc, "uvm")), uvm.keys, blob)


def _wlc_cycle(machine: Machine, uvm: UvmDevice, wlc_id: int) -> LaunchToken:
    wlc = uvm.chans[wlc_id]
    get = uvm.gpget[wlc_id]
    put = wlc_gpput(machine, wlc)
    if put - get < 2:
        raise SimError(f"WLC {wlc_id:#x} has no scheduled cycle (GPPUT {put}, GPGET {get})")
    cycle = uvm.cycles[wlc_id] + 1

    # Entry 1: the static decrypt_push.
    (dp,) = _read_push(machine, wlc, get)
    if dp.opcode != DECRYPT_RUN_PUSH:
        raise SimError("decrypt_push slot does not hold DECRYPT_RUN_PUSH")
    src, length, dst = dp.args
    try:
        machine.write(dst, open_run_push(machine, uvm, wlc, src, length))
    except (AuthError, ReplayError) as exc:
        machine.trace.emit(wlc.engine, "wlc_abort", PRIVATE, channel=wlc_id, cycle=cycle, stage="decrypt_push",
                           error=type(exc).__name__)
        raise
    machine.trace.emit(wlc.engine, "wlc_decrypt", PRIVATE, channel=wlc_id, cycle=cycle, gpget=get)
    uvm.gpget[wlc_id] = get + 1

    # Entry 2: the freshly decrypted run_push.
    run = _read_push(machine, wlc, get + 1)
    machine.trace.emit(wlc.engine, "wlc_run", PRIVATE, channel=wlc_id, cycle=cycle, gpget=get + 1)
    fault = False
    ce = None
    for meth in run:
        a = meth.args
        if meth.opcode == DECRYPT_UVM_PUSH:
            src, length, ce_pb = a
            try:
                machine.write(ce_pb, open_uvm_push(machine, uvm, wlc, src, length, ce_pb))
            except (AuthError, ReplayError) as exc:
                machine.trace.emit(wlc.engine, "wlc_abort", PRIVATE, channel=wlc_id, cycle=cycle, stage="run_push",
                                   error=type(exc).__name__)
                uvm.gpget[wlc_id] = get  # the cycle did not complete
                raise
        elif meth.opcode == SET_CE_GPFIFO:
            ce_id, pb, length = a
            ce = uvm.chans[ce_id]
            slot = struct.unpack("<I", machine.read(ce.gpput_addr, 4))[0]
            machine.write(ce.gpfifo_addr + (slot % GPFIFO_CAPACITY) * GPFIFO_ENTRY.size, GPFIFO_ENTRY.pack(pb, length))
            machine.write(ce.gpput_addr, struct.pack("<I", slot + 1))
        elif meth.opcode == TRIGGER_CE:
            fault = _run_ce(machine, uvm, uvm.chans[a[0]], wlc_id) or fault
        elif meth.opcode == SIGNAL_LCIC:
            if a[0] != wlc_id:
                raise SimError("run_push may only signal its own LCIC")
            _run_lcic(machine, uvm, uvm.chans[LCIC_BASE + (wlc_id - WLC_BASE)], wlc, cycle)
        else:
            raise SimError(f"unexpected {meth.name} in run_push")
    uvm.gpget[wlc_id] = get + 2
    uvm.cycles[wlc_id] = cycle
    _seal_semaphore(machine, uvm, wlc)
    return LaunchToken(wlc_id, ce.id if ce else -1, cycle, put, wlc_gpput(machine, wlc), fault)


def _run_ce(machine: Machine, uvm: UvmDevice, ce: Channel, wlc_id: int) -> bool:
    put = struct.unpack("<I", machine.read(ce.gpput_addr, 4))[0]
    faulted = False
    while uvm.gpget[ce.id] < put:
        methods = _read_push(machine, ce, uvm.gpget[ce.id])
        uvm.gpget[ce.id] += 1
        ok = True
        for meth in methods:
            if meth.opcode == CE_NOP:
                continue
            if meth.opcode != CE_MEMSET:
                raise SimError(f"CE cannot execute {meth.name}")
            addr, length, value = meth.args
            if not machine.cpr.contains(addr, max(length, 1)):
                ok = False
                faulted = True
                machine.trace.emit(ce.engine, "ce_blocked", PRIVATE, channel=ce.id, addr=addr)
                _raise_ce_fault(machine, ce, addr)
                break
            machine.write(addr, bytes([value & 0xFF]) * length)
        machine.trace.emit(ce.engine, "ce_exec", PRIVATE, channel=ce.id, wlc=wlc_id, methods=len(methods), ok=ok)
        if ok:
            _seal_semaphore(machine, uvm, ce)
    return faulted


def _raise_ce_fault(machine: Machine, ce: Channel, addr: int) -> None:
    from . import fault_channel as fc

    dev = machine.device.gsp
    if dev is None or getattr(dev, "fault_buffers", None) is None:
        machine.trace.emit(ce.engine, "fault_unregistered", PRIVATE, addr=addr)
        return
    fc.raise_fault(machine, dev, fc.FaultPacket(fc.NON_REPLAYABLE, addr, ce.id & 0xFFFF, "write"))


def _run_lcic(machine: Machine, uvm: UvmDevice, lcic: Channel, wlc: Channel, cycle: int) -> None:
    (adv,) = _read_push(machine, lcic, 0)  # the LCIC schedule is a single static entry
    target, delta = adv.args
    if adv.opcode != ADVANCE_GPPUT or target != wlc.id:
        raise SimError("LCIC schedule is bound to a different WLC")
    before = wlc_gpput(machine, wlc)
    machine.write(wlc.gpfifo_addr + CTRL_GPPUT_OFFSET, struct.pack("<I", before + delta))
    machine.trace.emit(lcic.engine, "lcic_advance", PRIVATE, channel=lcic.id, wlc=wlc.id, cycle=cycle,
                       gpput_before=before, gpput_after=before + delta)
    _seal_semaphore(machine, uvm, lcic)


# -- driver polling ------------------------------------------------------------

def poll_semaphore(channel: Channel, key_table: ck.KeyTable, key_id: str | None = None) -> int:
    """Open the channel's sealed tracking semaphore; unchanged bytes return the cached value."""
    raw = channel.machine.read(channel.tracking_semaphore_addr, ck.SealedBlob.packed_size(_SEMA.size))
    if channel.semaphore_cache is not None and channel.semaphore_cache[0] == raw:
        return channel.semaphore_cache[1]
    if raw == bytes(len(raw)):
        return 0
    key = key_id or channel.keys["d2h"]
    state = channel.owner_ring.state(key, _label(channel, "sema"))
    if key_id is not None and key_id != channel.keys["d2h"]:
        state = ck.ChannelCipherState.for_channel(key_table, key_id, _label(channel, "sema"))
        state.recv_last = channel.owner_ring.state(channel.keys["d2h"], _label(channel, "sema")).recv_last
    blob = ck.SealedBlob.unpack(raw, struct.pack("<I", channel.id))
    (value,) = _SEMA.unpack(ck.open_blob(state, key_table, blob, monotonic=True))
    prev = channel.semaphore_cache[1] if channel.semaphore_cache else 0
    if value < prev:
        raise ReplayError("tracking semaphore moved backwards")
    channel.semaphore_cache = (raw, value)
    return value


def pte_memset_push(addr: int, length: int, value: int = 0, payload: bytes = b"") -> list[Method]:
    """A synthetic 'write PTEs for a range' push, optionally carrying opaque payload bytes."""
    methods = [Method(CE_MEMSET, (addr, length, value))]
    if payload:
        payload = payload + bytes(-len(payload) % 8)
        words = struct.unpack(f"<{len(payload) // 8}Q", payload)
        for i in range(0, len(words), 8):
            methods.append(Method(CE_NOP, words[i:i + 8]))
    return methods

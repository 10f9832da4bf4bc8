"""Host-level attacks: memory scans, replay/tamper, metadata inference, timing, BAR0 audit.

Everything here uses only what a hypervisor-level adversary can touch: host
reads and writes of unprotected memory, BAR0, and host-visible trace events.
The replay harness is the one exception that needs a live machine, since it
must hand bytes to the real receive paths to observe what they accept.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import bar0_map
from . import crypto_keys as ck
from . import fault_channel as fc
from . import gsp_dma as dma
from . import gsp_rpc as rpc
from . import sec2_engine as sec2m
from . import uvm_submission as uvm
from .errors import AuthError, ChecksumMismatch, ConfigError, InsufficientSamples, ReplayError
from .fabric import CPR, FAULT, PAGE, AccessResult, Machine, bar0_read_block, host_read, host_write
from .trace import HOST_VISIBLE, PRIVATE

ACCEPTED = "accepted"
REJECTED_REPLAY = "rejected_replay"
REJECTED_AUTH = "rejected_auth"
OUTCOMES = (REJECTED_REPLAY, REJECTED_AUTH, ACCEPTED)
CANARY_PREFIX = b"CANARY"


# -- address-table scan --------------------------------------------------------

@dataclass(frozen=True)
class ScanHit:
    page_addr: int
    confidence: str = "self_referential"


def scan_for_address_table(dump: bytes, base_addr: int, stride: int = PAGE) -> list[ScanHit]:
    """Pages whose first little-endian u64 equals their own physical address."""
    if stride <= 0 or stride % 8 or len(dump) % stride:
        raise ConfigError(f"dump length {len(dump)} is not a multiple of stride {stride}")
    if not dump:
        return []
    firsts = np.frombuffer(dump, dtype="<u8").reshape(-1, stride // 8)[:, 0]
    addrs = np.uint64(base_addr) + np.arange(firsts.size, dtype=np.uint64) * np.uint64(stride)
    return [ScanHit(int(a)) for a in addrs[firsts == addrs]]


def plant_decoy(machine: Machine, page_addr: int) -> AccessResult:
    """Write a self-referential page into staging so the scanner sees two candidates."""
    return host_write(machine, page_addr, struct.pack("<Q", page_addr))


# -- tamper --------------------------------------------------------------------

Mutation = Callable[[bytes], bytes]


def flip_bit(bit: int) -> Mutation:
    def mutate(data: bytes) -> bytes:
        b = bytearray(data)
        b[bit // 8] ^= 1 << (bit % 8)
        return bytes(b)
    return mutate


def tamper(machine: Machine, addr: int, mutation: Mutation | bytes, length: int = 1) -> AccessResult:
    """Read-modify-write through the host interface; protected memory yields FAULT."""
    if isinstance(mutation, (bytes, bytearray)):
        new, length = bytes(mutation), len(mutation)
    else:
        cur = host_read(machine, addr, length)
        if cur.kind != "value":
            machine.trace.emit("host", "tamper", HOST_VISIBLE, addr=addr, len=length, result="fault")
            return FAULT
        new = mutation(cur.data)
    res = host_write(machine, addr, new)
    machine.trace.emit("host", "tamper", HOST_VISIBLE, addr=addr, len=len(new),
                       result="ok" if res.kind == "ok" else "fault")
    return res


# -- replay --------------------------------------------------------------------

@dataclass
class ReplayTarget:
    """One AEAD channel class as the host sees it.

    ``fresh`` has the legitimate producer seal a new message and returns the
    bytes it would place in staging; nothing is delivered yet. ``deliver``
    places bytes where the consumer reads them and runs the consumer's real
    receive path, raising AuthError / ReplayError on rejection.
    ``foreign`` returns same-shaped bytes sealed under a different key.
    """

    name: str
    fresh: Callable[[], bytes]
    deliver: Callable[[bytes], None]
    foreign: Callable[[], bytes] | None = None
    recounter: Callable[[bytes, int], bytes] | None = None
    expected_counter: Callable[[], int] | None = None
    aead: bool = True


def replay_ciphertext(machine: Machine, channel: ReplayTarget, captured: bytes | ck.SealedBlob) -> str:
    data = captured.pack() if isinstance(captured, ck.SealedBlob) else bytes(captured)
    try:
        channel.deliver(data)
        outcome = ACCEPTED
    except ReplayError:
        outcome = REJECTED_REPLAY
    except (AuthError, ChecksumMismatch):
        outcome = REJECTED_AUTH
    machine.trace.emit("host", "replay_attempt", HOST_VISIBLE, channel=channel.name, outcome=outcome)
    return outcome


def _iv_recounter(offset: int) -> Callable[[bytes, int], bytes]:
    def recount(data: bytes, counter: int) -> bytes:
        b = bytearray(data)
        b[offset + 4:offset + 12] = counter.to_bytes(8, "big")
        return bytes(b)
    return recount


def _throwaway(keys: ck.KeyTable, key_id: str, label: str, counter: int) -> ck.ChannelCipherState:
    st = ck.ChannelCipherState.for_channel(keys, key_id, label)
    st.send_counter = max(0, counter - 1)
    return st


def _rpc_target(session: rpc.RpcSession) -> ReplayTarget:
    infra, gsp = session.infra, session.gsp
    m = infra.machine
    if infra.encrypt_metadata:
        raise ConfigError("the RPC replay harness drives plaintext queue headers")

    def page_for(state: ck.ChannelCipherState, keys: ck.KeyTable, params: bytes) -> bytes:
        blob, seq, count = rpc._seal_message(state, keys, rpc.RpcMessage(rpc.NOP, params), infra.capacity)
        hdr = rpc.ElementHeader(blob.tag, blob.aad, 0, seq, count)
        hdr = rpc.ElementHeader(blob.tag, blob.aad, rpc._element_checksum(hdr, blob.payload), seq, count)
        return hdr.pack() + blob.payload

    def fresh() -> bytes:
        return page_for(session.cpu_tx, session.cvm_keys, b"replay-probe")

    def foreign() -> bytes:
        st = _throwaway(session.cvm_keys, "gsp_cpu_locked_rpc", "rpc", gsp.rx_rpc.recv_last + 1)
        return page_for(st, session.cvm_keys, b"replay-probe")

    def deliver(page: bytes) -> None:
        slot = infra.tx.elem_addrs[infra.gsp_tx_read]
        host_write(m, slot, page)
        host_write(m, infra.tx.header_addr + 4, struct.pack("<I", (infra.gsp_tx_read + 1) % rpc.NUM_ELEMS))
        rpc.gsp_service(infra, gsp)
        # The host impersonated the producer, so the driver adopts the new TX position.
        infra.cpu_tx_write = infra.gsp_tx_read
        status = rpc.recv_status(infra, session.cpu_rx, session.cvm_keys)
        if status.function == rpc.STATUS_UNPARSED:
            code = struct.unpack_from("<I", status.params)[0]
            raise {rpc.ST_REPLAY: ReplayError, rpc.ST_CHECKSUM: ChecksumMismatch}.get(code, AuthError)(
                rpc.STATUS_NAMES[code])

    def recount(page: bytes, counter: int) -> bytes:
        b = bytearray(page)
        struct.pack_into("<I", b, 36, counter)  # seqNum
        return bytes(b)

    return ReplayTarget("rpc", fresh, deliver, foreign, recount, lambda: gsp.rx_rpc.recv_last + 1)


def _dma_target(sessions: dma.DmaSessions) -> ReplayTarget:
    m = sessions.infra.machine
    size = 64
    cpr_addr = m.alloc(CPR, PAGE)
    staging = dma._slot(sessions, size)
    aad = dma._XFER.pack(cpr_addr, staging, size)
    gsp_state = sessions.gsp.ring.state("cpu_gsp_dma", "dma")

    def fresh() -> bytes:
        return ck.seal(sessions.cpu_dma_tx, sessions.cvm_keys, bytes(size), aad).pack()

    def foreign() -> bytes:
        st = _throwaway(sessions.cvm_keys, "gsp_cpu_dma", "dma", gsp_state.recv_last + 1)
        return ck.seal(st, sessions.cvm_keys, bytes(size), aad).pack()

    def deliver(data: bytes) -> None:
        host_write(m, staging, data)
        status = rpc.call(sessions.infra, sessions.cpu_tx, sessions.cpu_rx, sessions.gsp,
                          rpc.RpcMessage(rpc.MEM_WRITE, aad), sessions.cvm_keys)
        rpc.raise_for_status(status)

    return ReplayTarget("dma", fresh, deliver, foreign, _iv_recounter(0), lambda: gsp_state.recv_last + 1)


def _uvm_targets(machine: Machine, setup: uvm.UvmSetup, index: int = 0) -> list[ReplayTarget]:
    dev = machine.device.uvm
    wlc, ce = setup.wlc[index], setup.ce[index]
    keys, ring = wlc.owner_keys, wlc.owner_ring
    h2d = wlc.keys["h2d"]
    other = f"lce{(wlc.lce + 3) % ck.NUM_LCE}_h2d_kernel"
    run_slot, uvm_slot = setup.run_slots[wlc.id], setup.uvm_slots[wlc.id]
    run_bytes = uvm.serialize_methods(uvm.run_push_methods(uvm_slot, 16, ce.arena_addr, ce.id, wlc.id))
    push_bytes = uvm.serialize_methods(uvm.pte_memset_push(machine.cpr.base, 8, 0))
    run_aad, uvm_aad = struct.pack("<I", wlc.id), struct.pack("<IQ", wlc.id, ce.arena_addr)
    run_label, uvm_label = uvm._label(wlc, "run"), uvm._label(wlc, "uvm")

    def dev_state(label: str) -> ck.ChannelCipherState:
        return dev.ring.state(h2d, label)

    def run_deliver(data: bytes) -> None:
        host_write(machine, run_slot, data)
        uvm.open_run_push(machine, dev, wlc, run_slot, len(run_bytes))

    def uvm_deliver(data: bytes) -> None:
        host_write(machine, uvm_slot, data)
        uvm.open_uvm_push(machine, dev, wlc, uvm_slot, len(push_bytes), ce.arena_addr)

    run = ReplayTarget(
        "wlc_run_push",
        lambda: ck.seal(ring.state(h2d, run_label), keys, run_bytes, run_aad).pack(),
        run_deliver,
        lambda: ck.seal(_throwaway(keys, other, run_label, dev_state(run_label).recv_last + 1), keys, run_bytes,
                        run_aad).pack(),
        _iv_recounter(0), lambda: dev_state(run_label).recv_last + 1)
    push = ReplayTarget(
        "uvm_ce_push",
        lambda: ck.seal(ring.state(h2d, uvm_label), keys, push_bytes, uvm_aad).pack(),
        uvm_deliver,
        lambda: ck.seal(_throwaway(keys, other, uvm_label, dev_state(uvm_label).recv_last + 1), keys, push_bytes,
                        uvm_aad).pack(),
        _iv_recounter(0), lambda: dev_state(uvm_label).recv_last + 1)
    return [run, push]


def _semaphore_target(machine: Machine, setup: uvm.UvmSetup, index: int = 0) -> ReplayTarget:
    dev = machine.device.uvm
    ch = setup.lcic[index]
    label = uvm._label(ch, "sema")
    other = f"lce{(ch.lce + 5) % ck.NUM_LCE}_d2h_kernel"
    aad = struct.pack("<I", ch.id)
    counter = [10**6]

    def fresh() -> bytes:
        counter[0] += 1
        return ck.seal(dev.ring.state(ch.keys["d2h"], label), dev.keys, uvm._SEMA.pack(counter[0]), aad).pack()

    def foreign() -> bytes:
        nxt = ch.owner_ring.state(ch.keys["d2h"], label).recv_last + 1
        return ck.seal(_throwaway(dev.keys, other, label, nxt), dev.keys, uvm._SEMA.pack(counter[0] + 1), aad).pack()

    def deliver(data: bytes) -> None:
        host_write(machine, ch.tracking_semaphore_addr, data)
        before = ch.semaphore_cache
        uvm.poll_semaphore(ch, ch.owner_keys)
        if ch.semaphore_cache is before:
            raise ReplayError("semaphore bytes unchanged")  # the poller ignored them

    return ReplayTarget("semaphore", fresh, deliver, foreign, _iv_recounter(0),
                        lambda: ch.owner_ring.state(ch.keys["d2h"], label).recv_last + 1)


def _fault_target(machine: Machine, handler: fc.FaultHandler, kind: str = fc.REPLAYABLE) -> ReplayTarget:
    gsp = handler.session.gsp
    buf = handler.buffers[kind]
    other_kind = fc.NON_REPLAYABLE if kind == fc.REPLAYABLE else fc.REPLAYABLE
    label = f"fault/{kind}"
    pkt = fc.FaultPacket(kind, machine.cpr.base, 7, "read")

    def record(state: ck.ChannelCipherState) -> bytes:
        return ck.seal(state, gsp.keys, pkt.body(), b"\x01").pack() + b"\x01"

    def deliver(data: bytes) -> None:
        slot = buf.slot_addr(buf.get_index)
        host_write(machine, slot, data)
        fc.consume_slot(machine, handler, kind)

    def expected() -> int:
        return handler.session.cpu_ring.state(buf.key_id, label).recv_last + 1

    return ReplayTarget(
        "fault_packet",
        lambda: record(gsp.ring.state(buf.key_id, label)),
        deliver,
        lambda: record(_throwaway(gsp.keys, fc.KEY_FOR[other_kind], label, expected())),
        _iv_recounter(0), expected)


def _sec2_semaphore_target(channel) -> ReplayTarget:
    m = channel.machine
    value = [0]

    def fresh() -> bytes:
        value[0] += 1
        return struct.pack("<Q", value[0])

    def deliver(data: bytes) -> None:
        host_write(m, channel.tracking_semaphore_addr, data)
        sec2m.read_semaphore(channel)

    return ReplayTarget("sec2_semaphore", fresh, deliver, aead=False)


def replay_targets(system) -> dict[str, ReplayTarget]:
    """AEAD channel classes of a built system, plus the plaintext SEC2 semaphore; absent parts are skipped."""
    m = system.machine
    out = {}
    if system.rpc is not None and not system.rpc.infra.encrypt_metadata:
        out["rpc"] = _rpc_target(system.rpc)
    if system.dma is not None:
        out["dma"] = _dma_target(system.dma)
    if system.uvm is not None:
        for t in _uvm_targets(m, system.uvm):
            out[t.name] = t
        out["semaphore"] = _semaphore_target(m, system.uvm)
    if system.faults is not None:
        out["fault_packet"] = _fault_target(m, system.faults)
    if system.sec2_channel is not None:
        out["sec2_semaphore"] = _sec2_semaphore_target(system.sec2_channel)
    return out


# Staging surfaces whose records a host can capture and feed back to a replay target.
SURFACE_TARGETS = {"rpc.payload": "rpc", "dma.staging": "dma", "uvm.run_push": "wlc_run_push",
                   "uvm.push": "uvm_ce_push", "wlc.semaphore": "semaphore", "lcic.semaphore": "semaphore",
                   "uvm_ce.semaphore": "semaphore", "fault.shadow_buffer": "fault_packet",
                   "sec2.semaphore": "sec2_semaphore"}


AEAD_CLASSES = ("rpc", "dma", "wlc_run_push", "uvm_ce_push", "semaphore", "fault_packet")
TRIAL_KINDS = ("replay_old", "bitflip", "truncate", "foreign_key", "recounter")


@dataclass
class ReplayClassReport:
    name: str
    attempts: int = 0
    outcomes: Counter = field(default_factory=Counter)
    by_kind: dict[str, Counter] = field(default_factory=dict)
    genuine_accepted: int = 0
    genuine_rejected: int = 0

    @property
    def accepted_forgeries(self) -> int:
        return self.outcomes[ACCEPTED]

    def to_dict(self) -> dict:
        return {"name": self.name, "attempts": self.attempts, "outcomes": dict(sorted(self.outcomes.items())),
                "by_kind": {k: dict(sorted(v.items())) for k, v in sorted(self.by_kind.items())},
                "accepted_forgeries": self.accepted_forgeries, "genuine_accepted": self.genuine_accepted,
                "genuine_rejected": self.genuine_rejected}


def run_replay_suite(machine: Machine, target: ReplayTarget, trials: int, rng: np.random.Generator) -> ReplayClassReport:
    """Randomised replay and tamper attempts against one channel class.

    Every attack that hits a fresh message is followed by delivery of the
    untouched original, which must be accepted; that keeps sender and receiver
    counters aligned and shows that rejection did not wedge the channel.
    """
    rep = ReplayClassReport(target.name)
    history: list[bytes] = []

    def genuine(data: bytes) -> None:
        if replay_ciphertext(machine, target, data) == ACCEPTED:
            rep.genuine_accepted += 1
            history.append(data)
        else:
            rep.genuine_rejected += 1

    while len(history) < 2:
        genuine(target.fresh())
    kinds = [k for k in TRIAL_KINDS if (k != "foreign_key" or target.foreign) and (k != "recounter" or target.recounter)]
    for _ in range(trials):
        kind = kinds[int(rng.integers(len(kinds)))]
        original = None
        if kind == "replay_old":
            attack = history[int(rng.integers(len(history) - 1))]  # strictly older than the latest
        elif kind == "foreign_key":
            attack = target.foreign()
        elif kind == "recounter":
            attack = target.recounter(history[int(rng.integers(len(history)))], target.expected_counter())
        else:
            original = target.fresh()
            if kind == "bitflip":
                attack = flip_bit(int(rng.integers(len(original) * 8)))(original)
            else:
                cut = int(rng.integers(1, len(original)))
                attack = original[:cut] + bytes(len(original) - cut)
                if attack == original:
                    attack = flip_bit(len(original) * 8 - 1)(original)
        outcome = replay_ciphertext(machine, target, attack)
        rep.attempts += 1
        rep.outcomes[outcome] += 1
        rep.by_kind.setdefault(kind, Counter())[outcome] += 1
        if original is not None:
            genuine(original)
        if len(history) > 64:
            del history[:-64]
    return rep


# -- RPC metadata inference ------------------------------------------------------

@dataclass
class Snapshot:
    """Host copy of the RPC region (address table through the last RX element)."""

    base: int
    data: bytes


@dataclass
class InferenceReport:
    table_addr: int | None
    observations: list[dict] = field(default_factory=list)
    sends: int | None = 0
    elements: int | None = 0
    classes: list[str] = field(default_factory=list)  # per message: single | multi
    per_interval: list[str] = field(default_factory=list)  # per snapshot gap: multi | single | idle | unknown
    defined: bool = True

    def to_dict(self) -> dict:
        return {"table_addr": self.table_addr, "sends": self.sends, "elements": self.elements,
                "classes": self.classes, "per_interval": self.per_interval, "defined": self.defined,
                "observations": self.observations}


def snapshot_rpc_region(machine: Machine, table_addr: int) -> Snapshot:
    res = host_read(machine, table_addr, rpc.TABLE_ENTRIES * PAGE)
    return Snapshot(table_addr, res.data)


def infer_rpc_activity(snapshots: Iterable[Snapshot], prior: str = "single") -> InferenceReport:
    """Reconstruct command traffic from plaintext queue and element headers.

    Only the TX (command) queue is modelled. When headers do not parse (for
    instance because they are sealed) the interval is labelled with ``prior``
    and the report is marked undefined.
    """
    rep: InferenceReport | None = None
    prev_write: int | None = None
    for snap in snapshots:
        baseline = rep is None
        if rep is None:
            hits = scan_for_address_table(snap.data, snap.base)
            rep = InferenceReport(hits[0].page_addr if hits else None)
        label, write_ptr = _interval(rep, snap, prev_write, prior)
        if not baseline:
            rep.per_interval.append(label)
        prev_write = write_ptr
    if rep is None:
        return InferenceReport(None, defined=False, sends=None, elements=None)
    if not rep.defined:
        rep.sends = rep.elements = None
    return rep


def _interval(rep: InferenceReport, snap: Snapshot, prev_write: int | None, prior: str) -> tuple[str, int | None]:
    """Classify the traffic between the previous snapshot and ``snap``."""
    if rep.table_addr is None:
        rep.defined = False
        return prior, None
    table = struct.unpack_from(f"<{rpc.TABLE_ENTRIES}Q", snap.data, rep.table_addr - snap.base)
    read_ptr, write_ptr = struct.unpack_from("<II", snap.data, table[rpc.TX_HEADER_ENTRY] - snap.base)
    obs: dict = {"readPtr": read_ptr, "writePtr": write_ptr, "elements": []}
    rep.observations.append(obs)
    if read_ptr >= rpc.NUM_ELEMS or write_ptr >= rpc.NUM_ELEMS:
        rep.defined = False
        return prior, None
    if prev_write is None:
        return prior, write_ptr
    label = "idle"
    idx = prev_write
    while idx != write_ptr:
        off = table[rpc.TX_FIRST_ELEM + idx] - snap.base
        hdr = rpc.ElementHeader.unpack(snap.data[off:off + rpc.HEADER_SIZE])
        if not 1 <= hdr.elemCount < rpc.NUM_ELEMS:
            rep.defined = False
            return prior, write_ptr
        obs["elements"].append({"seqNum": hdr.seqNum, "elemCount": hdr.elemCount})
        cls = "multi" if hdr.elemCount > 1 else "single"
        rep.classes.append(cls)
        rep.sends += 1
        rep.elements += hdr.elemCount
        label = "multi" if "multi" in (cls, label) else "single"
        idx = (idx + hdr.elemCount) % rpc.NUM_ELEMS
    return label, write_ptr


def run_inference_experiment(system, commands: int, rng: np.random.Generator) -> dict:
    """Send a balanced mix of single- and multi-element commands, snapshotting after each.

    Returns the adversary's per-command accuracy at telling multi from single
    element commands, alongside chance (the majority-class rate).
    """
    session = system.rpc
    cap = session.infra.capacity
    truth = ["multi"] * (commands // 2) + ["single"] * (commands - commands // 2)
    truth = [truth[i] for i in rng.permutation(len(truth))]
    table = session.infra.table_addr

    def drive() -> Iterator[Snapshot]:
        for label in truth:
            size = int(rng.integers(cap + 1, 3 * cap)) if label == "multi" else int(rng.integers(0, cap - 16))
            session.call(rpc.RpcMessage(rpc.NOP, bytes(size)))
            yield snapshot_rpc_region(system.machine, table)

    first = snapshot_rpc_region(system.machine, table)
    rep = infer_rpc_activity(iter([first, *drive()]))
    preds = rep.per_interval
    correct = sum(p == t for p, t in zip(preds, truth))
    chance = max(Counter(truth).values()) / len(truth)
    return {"accuracy": correct / len(truth), "chance": chance, "commands": len(truth),
            "defined": rep.defined, "sends_inferred": rep.sends}


# -- timing --------------------------------------------------------------------

def classify_timing(samples: Iterable[dma.TimingSample], min_per_class: int = 50) -> dict:
    """Best single threshold on latency separating 4096-byte from <=256-byte transfers."""
    xs, ys = [], []
    for s in samples:
        if s.size == 4096:
            xs.append(s.micros)
            ys.append(1)
        elif s.size <= 256:
            xs.append(s.micros)
            ys.append(0)
    n_pos, n_neg = sum(ys), len(ys) - sum(ys)
    if n_pos < min_per_class or n_neg < min_per_class:
        raise InsufficientSamples(f"need {min_per_class} per class, have {n_neg} small and {n_pos} large")
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=int)
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    # predict large when micros > threshold: correct = negatives at or below + positives above
    neg_below = np.concatenate([[0], np.cumsum(1 - y)])
    pos_above = n_pos - np.concatenate([[0], np.cumsum(y)])
    acc_up = (neg_below + pos_above) / len(y)
    acc_down = 1.0 - acc_up
    k_up, k_down = int(np.argmax(acc_up)), int(np.argmax(acc_down))
    if acc_up[k_up] >= acc_down[k_down]:
        k, acc, direction = k_up, acc_up[k_up], "large_above"
    else:
        k, acc, direction = k_down, acc_down[k_down], "large_below"
    if k == 0:
        thr = float(x[0]) - 1.0
    elif k == len(x):
        thr = float(x[-1]) + 1.0
    else:
        thr = float((x[k - 1] + x[k]) / 2)
    return {"threshold": thr, "accuracy": float(acc), "direction": direction, "small": n_neg, "large": n_pos}


# -- BAR0 ----------------------------------------------------------------------

@dataclass(frozen=True)
class Bar0Stats:
    values: int
    zeros: int
    errors: int
    total: int = bar0_map.BAR0_WORDS

    @property
    def counts(self) -> dict[str, int]:
        return {"values": self.values, "zeros": self.zeros, "errors": self.errors}

    def fractions(self) -> dict[str, float]:
        return {k: v / self.total for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"counts": self.counts, "total": self.total,
                "percent": {k: round(100 * v, 2) for k, v in self.fractions().items()}}


def audit_bar0(machine: Machine) -> Bar0Stats:
    """Read every 4-byte word of BAR0 and classify it the way a host scan would."""
    words = bar0_read_block(machine)
    zeros = int(np.count_nonzero(words == 0))
    errors = int(np.count_nonzero((words >> 20) == 0xBAD))
    stats = Bar0Stats(int(words.size) - zeros - errors, zeros, errors, int(words.size))
    machine.trace.emit("host", "bar0_audit", HOST_VISIBLE, cc_mode=machine.cc_mode_active, **stats.counts)
    return stats


# -- leak budget ---------------------------------------------------------------

SURFACE_GROUPS: dict[str, frozenset[str]] = {
    "address table": frozenset({"rpc.addr_table"}),
    "queue headers": frozenset({"rpc.queue_header"}),
    "element headers": frozenset({"rpc.element_header"}),
    "SEC2-channel GPFIFO/GPPUT/semaphores": frozenset(
        {"sec2.gpfifo", "sec2.gpput", "sec2.semaphore", "sec2.pushbuffer", "sec2.scrub_tags", "sec2.sema_tags"}),
    "scrubber pushbuffers+tag buffers": frozenset(
        {"scrubber.pushbuffer", "scrubber.scrub_tags", "scrubber.sema_tags", "scrubber.gpfifo", "scrubber.gpput",
         "scrubber.semaphore"}),
    "fault put registers": frozenset({"bar0:" + bar0_map.ROLE_FAULT_PUT_REPLAYABLE,
                                      "bar0:" + bar0_map.ROLE_FAULT_PUT_NON_REPLAYABLE}),
    "allowlisted BAR0 words": frozenset({"bar0:allowlist", "bar0:" + bar0_map.ROLE_DOORBELL}),
}
PLAINTEXT_BUDGET = frozenset(SURFACE_GROUPS)
RPC_HEADER_GROUPS = frozenset({"queue headers", "element headers"})


def leak_budget(mitigations=None) -> frozenset[str]:
    budget = set(PLAINTEXT_BUDGET)
    if mitigations is not None and getattr(mitigations, "encrypt_rpc_metadata", False):
        budget -= RPC_HEADER_GROUPS
    return frozenset(budget)


def _group_of(surface: str) -> str | None:
    for g, members in SURFACE_GROUPS.items():
        if surface in members:
            return g
    return None


@dataclass
class LeakReport:
    plaintext: dict[str, list[int]]  # surface -> [writes, bytes]
    sealed: dict[str, list[int]]
    groups: list[str]
    budget: list[str]
    unexpected: list[str]
    canaries: int
    canary_hits: list[dict]
    positive_control: bool

    @property
    def exact(self) -> bool:
        return set(self.groups) == set(self.budget) and not self.unexpected and not self.canary_hits

    def to_dict(self) -> dict:
        return {"exact": self.exact, "groups": self.groups, "budget": self.budget, "unexpected": self.unexpected,
                "plaintext": self.plaintext, "sealed": self.sealed, "canaries": self.canaries,
                "canary_hits": self.canary_hits, "positive_control": self.positive_control}


def _host_visible_bytes(machine: Machine) -> Iterator[tuple[str, bytes]]:
    staging = machine.shared_staging
    yield "staging", host_read(machine, staging.base, staging.size).data
    for i, (addr, data, surface, _sealed) in enumerate(machine.staging_log):
        yield f"staging_log[{i}]:{surface}", data
    yield "cvm_private", host_read(machine, machine.cvm_private.base, machine.cvm_private.size).data
    vid = machine.vidmem_unprotected
    res = host_read(machine, vid.base, vid.size)
    if res.kind == "value":
        yield "vidmem", res.data
    events = [e.to_dict() for e in machine.trace if e.visibility == HOST_VISIBLE]
    yield "trace", json.dumps(events, sort_keys=True).encode()


def canary_scanner(canaries: Iterable[bytes]) -> Callable[[bytes], set[str]]:
    """Build a search returning the tags of canaries whose first 24 bytes occur in ``data``.

    Prefixed canaries are found by anchoring on the prefix, so a scan stays
    linear in the bytes searched however many canaries a run planted.
    """
    anchored: dict[int, dict[bytes, str]] = {}
    loose: dict[str, bytes] = {}
    for c in canaries:
        c = bytes(c)
        tag, probe = hashlib.sha256(c).hexdigest()[:12], c[:24]
        if probe.startswith(CANARY_PREFIX):
            anchored.setdefault(len(probe), {})[probe] = tag
        elif probe:
            loose[tag] = probe

    def find(data) -> set[str]:
        found = set()
        pos = data.find(CANARY_PREFIX) if anchored else -1
        while pos != -1:
            for n, table in anchored.items():
                tag = table.get(bytes(data[pos:pos + n]))
                if tag is not None:
                    found.add(tag)
            pos = data.find(CANARY_PREFIX, pos + 1)
        found.update(tag for tag, probe in loose.items() if probe in data)
        return found

    return find


def leak_sweep(machine: Machine, canaries: Iterable[bytes] = (), mitigations=None) -> LeakReport:
    """Which host-visible surfaces carried plaintext, and did any secret canary leak?"""
    plain, sealed = {}, {}
    for (surface, is_sealed), stat in sorted(machine.surface_stats.items()):
        (sealed if is_sealed else plain)[surface] = list(stat)
    observed = set(plain)
    for ev in machine.trace:
        if ev.event == "bar0_update" and ev.visibility == HOST_VISIBLE:
            observed.add("bar0:" + ev.meta["role"])
        elif ev.event == "doorbell":
            observed.add("bar0:" + bar0_map.ROLE_DOORBELL)
    if machine.cc_mode_active and machine.bar0_map().counts()["values"] > 0:
        observed.add("bar0:allowlist")
    groups, unexpected = set(), []
    for s in sorted(observed):
        g = _group_of(s)
        if g is None:
            unexpected.append(s)
        else:
            groups.add(g)
    canaries = [bytes(c) for c in canaries]
    find = canary_scanner(canaries)
    hits = []
    for where, data in _host_visible_bytes(machine):
        hits.extend({"where": where, "canary": tag} for tag in sorted(find(data)))
    # The same search must see canaries where they legitimately live.
    control = bool(canaries) and bool(find(machine.cvm_private.content) | find(machine.cpr.content))
    rep = LeakReport(plain, sealed, sorted(groups), sorted(leak_budget(mitigations)), unexpected, len(canaries),
                     hits, control)
    machine.trace.emit("adversary", "leak_sweep", PRIVATE, exact=rep.exact, groups=rep.groups,
                       unexpected=rep.unexpected, canary_hits=len(hits))
    return rep

"""Encrypted fault delivery through staging shadow buffers.

Packet (64 bytes): ``kind u8 | access u8 | engine_id u16 | fault_addr u64 |
pad | valid u8`` with ``valid`` at byte 63. The first 63 bytes are sealed;
``valid`` stays in the clear and is bound as AAD.

Slot (128 bytes): ``iv 12 | tag 16 | ciphertext 63 | valid 1 | pad``.
The GSP treats the slot at PUT as occupied while its valid byte is 1, so a
full ring is an error rather than an overwrite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import bar0_map
from . import crypto_keys as ck
from . import gsp_rpc as rpc
from .errors import AuthError, ReplayError, RingFull, SimError
from .fabric import SHARED, Machine, bar0_read
from .trace import PRIVATE

REPLAYABLE = "replayable"
NON_REPLAYABLE = "non_replayable"
KINDS = (REPLAYABLE, NON_REPLAYABLE)
KIND_CODES = {REPLAYABLE: 0, NON_REPLAYABLE: 1}
ACCESS_CODES = {"read": 0, "write": 1, "atomic": 2}
KEY_FOR = {REPLAYABLE: "gsp_cpu_replayable_fault", NON_REPLAYABLE: "gsp_cpu_non_replayable_fault"}
ROLE_FOR = {REPLAYABLE: bar0_map.ROLE_FAULT_PUT_REPLAYABLE, NON_REPLAYABLE: bar0_map.ROLE_FAULT_PUT_NON_REPLAYABLE}

PACKET_SIZE = 64
SLOT_SIZE = 128
VALID_OFFSET = ck.IV_LEN + ck.TAG_LEN + PACKET_SIZE - 1
DEFAULT_CAPACITY = 16
_BODY = struct.Struct("<BBHQ")


@dataclass(frozen=True)
class FaultPacket:
    kind: str
    fault_addr: int
    engine_id: int
    access_type: str = "read"
    valid: int = 1

    def body(self) -> bytes:
        b = _BODY.pack(KIND_CODES[self.kind], ACCESS_CODES[self.access_type], self.engine_id & 0xFFFF,
                       self.fault_addr)
        return b + bytes(PACKET_SIZE - 1 - len(b))

    def serialize(self) -> bytes:
        return self.body() + bytes([self.valid])

    @classmethod
    def parse(cls, data: bytes) -> "FaultPacket":
        if len(data) != PACKET_SIZE:
            raise SimError("fault packet must be 64 bytes")
        k, a, eng, addr = _BODY.unpack_from(data)
        kinds = {v: n for n, v in KIND_CODES.items()}
        access = {v: n for n, v in ACCESS_CODES.items()}
        return cls(kinds[k], addr, eng, access[a], data[-1])


@dataclass
class ShadowBuffer:
    kind: str
    base: int
    capacity: int = DEFAULT_CAPACITY
    put_index: int = 0  # GSP-owned, mirrored into BAR0
    get_index: int = 0  # CVM-owned, never leaves the CVM

    @property
    def key_id(self) -> str:
        return KEY_FOR[self.kind]

    def slot_addr(self, index: int) -> int:
        return self.base + (index % self.capacity) * SLOT_SIZE


@dataclass
class FaultHandler:
    """CVM side of fault delivery."""

    session: rpc.RpcSession
    buffers: dict[str, ShadowBuffer]
    delivered: list[FaultPacket] = field(default_factory=list)

    @property
    def machine(self) -> Machine:
        return self.session.infra.machine


def _gsp_register(gsp: rpc.GspFirmware, params: bytes) -> bytes:
    rep, nrep, cap = struct.unpack_from("<QQI", params)
    m = gsp.machine
    for addr in (rep, nrep):
        if not m.shared_staging.contains(addr, cap * SLOT_SIZE):
            raise SimError("shadow buffer outside staging")
    gsp.fault_buffers = {REPLAYABLE: ShadowBuffer(REPLAYABLE, rep, cap),
                         NON_REPLAYABLE: ShadowBuffer(NON_REPLAYABLE, nrep, cap)}
    for kind in KINDS:
        m.set_bar0_role(ROLE_FOR[kind], 0)
    return b""


def install_faults(gsp: rpc.GspFirmware, infra: rpc.RpcInfra) -> None:
    gsp.register_handler(rpc.REGISTER_FAULT_BUFFERS, _gsp_register)
    gsp.rpc_infra = infra


def register_shadow_buffers(machine: Machine, session: rpc.RpcSession,
                            capacity: int = DEFAULT_CAPACITY) -> FaultHandler:
    """Allocate both rings in staging and hand their addresses to the GSP over RPC."""
    install_faults(session.gsp, session.infra)
    bufs = {}
    for kind in KINDS:
        base = machine.alloc(SHARED, capacity * SLOT_SIZE)
        machine.stage_write(base, bytes(capacity * SLOT_SIZE), "fault.shadow_buffer", True)
        bufs[kind] = ShadowBuffer(kind, base, capacity)
    params = struct.pack("<QQI", bufs[REPLAYABLE].base, bufs[NON_REPLAYABLE].base, capacity)
    rpc.raise_for_status(session.call(rpc.RpcMessage(rpc.REGISTER_FAULT_BUFFERS, params)))
    machine.trace.emit("cvm", "fault_register", PRIVATE, capacity=capacity)
    return FaultHandler(session, bufs)


def raise_fault(machine: Machine, gsp_state: rpc.GspFirmware, packet: FaultPacket) -> None:
    bufs = getattr(gsp_state, "fault_buffers", None)
    if not bufs:
        raise SimError("shadow buffers are not registered")
    buf = bufs[packet.kind]
    slot = buf.slot_addr(buf.put_index)
    if machine.read(slot + VALID_OFFSET, 1) == b"\x01":
        machine.trace.emit("gsp", "fault_dropped", PRIVATE, kind=packet.kind, reason="ring_full")
        raise RingFull(f"{packet.kind} shadow buffer is full")
    state = gsp_state.ring.state(buf.key_id, f"fault/{packet.kind}")
    blob = ck.seal(state, gsp_state.keys, packet.body(), bytes([1]))
    record = blob.pack() + b"\x01"
    machine.stage_write(slot, record + bytes(SLOT_SIZE - len(record)), "fault.shadow_buffer", True, "gsp")
    buf.put_index = (buf.put_index + 1) % buf.capacity
    machine.set_bar0_role(ROLE_FOR[packet.kind], buf.put_index)
    rpc.post_event(gsp_state.rpc_infra, gsp_state, rpc.EVENT_MMU_FAULT_QUEUED, bytes([KIND_CODES[packet.kind]]))
    machine.trace.emit("gsp", "fault_raise", PRIVATE, kind=packet.kind, put=buf.put_index)


def read_put_register(machine: Machine, kind: str) -> int:
    res = bar0_read(machine, machine.bar0_role_offset(ROLE_FOR[kind]))
    return res.word & ~bar0_map.ROLE_VALID_BIT & 0xFFFF


def handle_faults(machine: Machine, cvm_state: FaultHandler) -> list[FaultPacket]:
    """ISR: on MMU_FAULT_QUEUED, open every slot between GET and the BAR0 PUT value."""
    events = [e for e in cvm_state.session.drain_events() if e.function == rpc.EVENT_MMU_FAULT_QUEUED]
    out: list[FaultPacket] = []
    if not events:
        return out
    for kind in KINDS:
        buf = cvm_state.buffers[kind]
        put = read_put_register(machine, kind) % buf.capacity
        pending = (put - buf.get_index) % buf.capacity
        # PUT == GET is either empty or a full ring; the valid byte tells them apart.
        if pending == 0 and machine.read(buf.slot_addr(buf.get_index) + VALID_OFFSET, 1) == b"\x01":
            pending = buf.capacity
        for _ in range(pending):
            out.append(consume_slot(machine, cvm_state, kind))
    cvm_state.delivered.extend(out)
    return out


def consume_slot(machine: Machine, cvm_state: FaultHandler, kind: str) -> FaultPacket:
    """Open the packet at GET, clear its valid byte and advance GET. Raises AuthError/ReplayError."""
    buf = cvm_state.buffers[kind]
    slot = buf.slot_addr(buf.get_index)
    raw = machine.read(slot, SLOT_SIZE)
    valid = raw[VALID_OFFSET]
    blob = ck.SealedBlob.unpack(raw[:VALID_OFFSET], bytes([valid]))
    state = cvm_state.session.cpu_ring.state(buf.key_id, f"fault/{kind}")
    try:
        body = ck.open_blob(state, cvm_state.session.cvm_keys, blob)
    except (AuthError, ReplayError) as exc:
        machine.trace.emit("cvm", "fault_handle", PRIVATE, kind=kind, ok=False, error=type(exc).__name__)
        raise
    pkt = FaultPacket.parse(body + bytes([valid]))
    # Consumed: clear the AAD-bound valid byte so the GSP may reuse the slot.
    machine.stage_write(slot + VALID_OFFSET, b"\x00", "fault.shadow_buffer", True)
    buf.get_index = (buf.get_index + 1) % buf.capacity
    machine.trace.emit("cvm", "fault_handle", PRIVATE, kind=kind, ok=True)
    return pkt

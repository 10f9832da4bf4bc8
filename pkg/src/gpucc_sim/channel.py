"""GPU channels: GPFIFO ring, GPPUT cursor, pushbuffer arena, tracking semaphore.

Wire formats (little-endian):

* GPFIFO entry, 16 bytes: ``pushbuffer_addr u64 | length u32 | pad u32``
* GPPUT: ``u32`` entry count (monotonic; the ring slot is ``gpput % capacity``)
* Method: ``opcode u32 | argc u32 | args u64 * argc``
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import AccessFault, RingFull, SimError
from .fabric import CPR, PAGE, SHARED, Machine

GPFIFO_ENTRY = struct.Struct("<QI4x")
GPFIFO_CAPACITY = 32
ARENA_SIZE = 64 * 1024

# SEC2 methods
MEMSET_SECURE = 0x01
SEMAPHORE_RELEASE = 0x02
DECRYPT_TO_CPR = 0x03
SETUP_CHANNEL_STATE = 0x04
ENCRYPT_FROM_CPR = 0x05  # hypothetical: SEC2 has no encrypt capability
# WLC / LCIC / CE methods
DECRYPT_RUN_PUSH = 0x10
DECRYPT_UVM_PUSH = 0x11
SET_CE_GPFIFO = 0x12
TRIGGER_CE = 0x13
SIGNAL_LCIC = 0x14
ADVANCE_GPPUT = 0x15
CE_MEMSET = 0x20
CE_NOP = 0x21  # args are opaque payload; lets a push carry arbitrary bytes

OPCODE_NAMES = {
    MEMSET_SECURE: "memset_secure", SEMAPHORE_RELEASE: "semaphore_release", DECRYPT_TO_CPR: "decrypt_to_cpr",
    SETUP_CHANNEL_STATE: "setup_channel_state", ENCRYPT_FROM_CPR: "encrypt_from_cpr",
    DECRYPT_RUN_PUSH: "decrypt_run_push", DECRYPT_UVM_PUSH: "decrypt_uvm_push", SET_CE_GPFIFO: "set_ce_gpfifo",
    TRIGGER_CE: "trigger_ce", SIGNAL_LCIC: "signal_lcic", ADVANCE_GPPUT: "advance_gpput", CE_MEMSET: "ce_memset",
    CE_NOP: "ce_nop",
}
MAX_ARGS = 8


@dataclass(frozen=True)
class Method:
    opcode: int
    args: tuple[int, ...] = ()

    def serialize(self) -> bytes:
        return struct.pack(f"<II{len(self.args)}Q", self.opcode, len(self.args), *self.args)

    @property
    def name(self) -> str:
        return OPCODE_NAMES.get(self.opcode, f"op{self.opcode:#x}")


def serialize_methods(methods: list[Method]) -> bytes:
    return b"".join(m.serialize() for m in methods)


def parse_methods(data: bytes, expected: int | None = None) -> list[Method]:
    """Strict inverse of :func:`serialize_methods`; any slack or overrun is an error."""
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < 8:
            raise SimError("truncated method header")
        op, argc = struct.unpack_from("<II", data, pos)
        pos += 8
        if argc > MAX_ARGS or pos + 8 * argc > len(data):
            raise SimError("method argument count overruns the pushbuffer")
        out.append(Method(op, struct.unpack_from(f"<{argc}Q", data, pos)))
        pos += 8 * argc
    if expected is not None and len(out) != expected:
        raise SimError(f"expected {expected} methods, parsed {len(out)}")
    return out


@dataclass
class Channel:
    id: int
    engine: str  # "sec2" | "lce<x>"
    role: str  # sec2 | scrubber | wlc | lcic | uvm_ce
    location: str  # "staging" | "cpr"
    machine: Machine = field(repr=False)
    gpfifo_addr: int = 0
    gpput_addr: int = 0
    tracking_semaphore_addr: int = 0
    arena_addr: int = 0
    arena_size: int = ARENA_SIZE
    capacity: int = GPFIFO_CAPACITY
    gpput: int = 0
    gpget: int = 0
    keys: dict[str, str] = field(default_factory=dict)  # purpose -> KeyId
    _arena_off: int = field(default=0, repr=False)
    intercept: Callable[[str, int, int], None] | None = field(default=None, repr=False)
    semaphore_cache: tuple[bytes, int] | None = field(default=None, repr=False)
    in_flight: bool = False
    push_seq: int = 0  # driver-side count of pushes signed for this channel
    owner_keys: Any = field(default=None, repr=False)  # driver KeyTable
    owner_ring: Any = field(default=None, repr=False)  # driver KeyRing
    encrypted_pushes: bool = False

    @property
    def region(self) -> str:
        return SHARED if self.location == "staging" else CPR

    @property
    def lce(self) -> int | None:
        return int(self.engine[3:]) if self.engine.startswith("lce") else None

    def arena_alloc(self, size: int, align: int = 16) -> int:
        """Bump allocator over the channel's pushbuffer arena; wraps when full."""
        size = -(-size // align) * align
        if size > self.arena_size:
            raise SimError(f"{size} B push exceeds the {self.arena_size} B arena")
        if self._arena_off + size > self.arena_size:
            self._arena_off = 0
        addr = self.arena_addr + self._arena_off
        self._arena_off += size
        return addr

    def _write(self, addr: int, data: bytes, surface: str, actor: str) -> None:
        if self.location == "staging":
            self.machine.stage_write(addr, data, surface, False, actor)
        else:
            self.machine.write(addr, data)

    def push_gpfifo(self, pb_addr: int, length: int, actor: str = "cvm") -> int:
        if not self.machine.region(self.region).contains(pb_addr, max(length, 1)):
            raise AccessFault(f"pushbuffer {pb_addr:#x} is outside the channel's {self.region}")
        if self.gpput - self.gpget >= self.capacity:
            raise RingFull(f"channel {self.id} GPFIFO is full")
        idx = self.gpput % self.capacity
        self._write(self.gpfifo_addr + idx * GPFIFO_ENTRY.size, GPFIFO_ENTRY.pack(pb_addr, length),
                    f"{self.role}.gpfifo", actor)
        self.gpput += 1
        self._write(self.gpput_addr, struct.pack("<I", self.gpput & 0xFFFFFFFF), f"{self.role}.gpput", actor)
        return idx

    def read_entry(self, index: int) -> tuple[int, int]:
        return GPFIFO_ENTRY.unpack(self.machine.read(self.gpfifo_addr + (index % self.capacity) * GPFIFO_ENTRY.size,
                                                     GPFIFO_ENTRY.size))

    def read_gpput(self) -> int:
        return struct.unpack("<I", self.machine.read(self.gpput_addr, 4))[0]


def allocate_channel(machine: Machine, ch_id: int, engine: str, role: str, location: str,
                     arena_size: int = ARENA_SIZE, semaphore_size: int = 64) -> Channel:
    """Carve GPFIFO, GPPUT, pushbuffer arena and tracking semaphore out of one region.

    The tracking semaphore always lives in staging, since the driver polls it.
    """
    region = SHARED if location == "staging" else CPR
    ctrl = machine.alloc(region, PAGE)  # GPFIFO (512 B) + GPPUT in one page
    arena = machine.alloc(region, arena_size)
    sema = machine.alloc(SHARED, semaphore_size, align=64)
    return Channel(ch_id, engine, role, location, machine, gpfifo_addr=ctrl,
                   gpput_addr=ctrl + GPFIFO_CAPACITY * GPFIFO_ENTRY.size, tracking_semaphore_addr=sema,
                   arena_addr=arena, arena_size=arena_size)

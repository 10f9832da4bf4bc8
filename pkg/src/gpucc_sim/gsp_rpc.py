"""CPU <-> GSP RPC over shared staging memory.

Layout, one 4 KiB page per address-table entry::

    entry 0        the table page itself (self-referential)
    entry 1        TX queue header   (readPtr, writePtr)
    entries 2..64  63 TX element pages
    entry 65       RX queue header
    entries 66..128  63 RX element pages

Each element page holds a plaintext :class:`ElementHeader` followed by a chunk
of the AES-GCM ciphertext. The header's ``seqNum`` is the sender's IV counter,
so the receiver rebuilds the IV from it; editing ``seqNum`` breaks the tag and
re-inserting an old element trips the replay check.

With ``encrypt_metadata`` the element headers and queue pointers are sealed
under a metadata sub-key as well, leaving only the address table legible.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

from . import crypto_keys as ck
from .errors import (
    AccessFault,
    AuthError,
    ChecksumMismatch,
    QueueEmpty,
    QueueFull,
    ReplayError,
    SimError,
)
from .fabric import CVM_PRIVATE, PAGE, SHARED, Machine
from .trace import HOST_VISIBLE, PRIVATE

NUM_ELEMS = 63
TABLE_ENTRIES = 1 + 1 + NUM_ELEMS + 1 + NUM_ELEMS
TX_HEADER_ENTRY = 1
TX_FIRST_ELEM = 2
RX_HEADER_ENTRY = 2 + NUM_ELEMS
RX_FIRST_ELEM = RX_HEADER_ENTRY + 1

_HDR = struct.Struct("<16s16sIII")  # authTagBuffer, aadBuffer, checkSum, seqNum, elemCount
_AAD = struct.Struct("<IIII")  # seqNum, elemCount, ciphertext length, reserved
HEADER_SIZE = _HDR.size
CHECKSUM_OFFSET = 32
PAYLOAD_CAPACITY = PAGE - HEADER_SIZE

_META_NONCE = 12
_META_TAG = 16
SEALED_HEADER_SIZE = _META_NONCE + HEADER_SIZE + _META_TAG
SEALED_PAYLOAD_CAPACITY = PAGE - SEALED_HEADER_SIZE
SEALED_PTR_SIZE = _META_NONCE + 4 + _META_TAG
READ_PTR_OFFSET = 0
WRITE_PTR_OFFSET = 64  # separate field when sealed, since two parties write the header

# Synthetic command vocabulary.
NOP = 0x00
MEM_READ = 0x01
MEM_WRITE = 0x02
REGISTER_FAULT_BUFFERS = 0x03
SET_CC_POLICY = 0x04
QUERY_STATUS = 0x05
ALLOC = 0x06
FREE = 0x07
COMMANDS = {
    "NOP": NOP, "MEM_READ": MEM_READ, "MEM_WRITE": MEM_WRITE,
    "REGISTER_FAULT_BUFFERS": REGISTER_FAULT_BUFFERS, "SET_CC_POLICY": SET_CC_POLICY,
    "QUERY_STATUS": QUERY_STATUS, "ALLOC": ALLOC, "FREE": FREE,
}
STATUS_BIT = 0x8000_0000
STATUS_UNPARSED = STATUS_BIT | 0xFFFF
EVENT_MMU_FAULT_QUEUED = 0x4000_0001

ST_OK, ST_AUTH, ST_REPLAY, ST_CHECKSUM, ST_BAD_COMMAND, ST_RANGE, ST_RING_FULL, ST_FAILED = range(8)
STATUS_NAMES = ["ok", "auth", "replay", "checksum", "bad_command", "range", "ring_full", "failed"]


def compute_checksum(data: bytes) -> int:
    """CRC-32/ISO-HDLC."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class ElementHeader:
    authTagBuffer: bytes
    aadBuffer: bytes
    checkSum: int
    seqNum: int
    elemCount: int

    def pack(self) -> bytes:
        return _HDR.pack(self.authTagBuffer, self.aadBuffer, self.checkSum, self.seqNum, self.elemCount)

    @classmethod
    def unpack(cls, data: bytes) -> "ElementHeader":
        return cls(*_HDR.unpack(data[:HEADER_SIZE]))


@dataclass
class RpcMessage:
    function: int
    params: bytes = b""
    seq: int | None = None

    def serialize(self) -> bytes:
        return struct.pack("<II", self.function, len(self.params)) + self.params

    @classmethod
    def parse(cls, data: bytes, seq: int | None = None) -> "RpcMessage":
        if len(data) < 8:
            raise SimError("RPC message shorter than its header")
        fn, n = struct.unpack_from("<II", data)
        if n != len(data) - 8:
            raise SimError("RPC message length field disagrees with payload")
        return cls(fn, bytes(data[8:]), seq)

    @property
    def status_code(self) -> int:
        return struct.unpack_from("<I", self.params)[0]

    @property
    def result(self) -> bytes:
        return self.params[4:]


class MetaCipher:
    """Seals queue metadata under a sub-key of ``cpu_gsp_locked_rpc``.

    Nonces are HMAC(counter) so sealed headers do not leak a running count.
    """

    def __init__(self, key_table: ck.KeyTable, sender: str):
        base = key_table.key("cpu_gsp_locked_rpc")
        self._key = HKDFExpand(hashes.SHA256(), 32, b"rpc-metadata").derive(base)
        self._sender = sender.encode()
        self._ctr = 0

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        self._ctr += 1
        nonce = hmac.new(self._key, self._sender + self._ctr.to_bytes(8, "big"), hashlib.sha256).digest()[:_META_NONCE]
        return nonce + AESGCM(self._key).encrypt(nonce, plaintext, aad)

    def open(self, blob: bytes, aad: bytes = b"") -> bytes:
        try:
            return AESGCM(self._key).decrypt(blob[:_META_NONCE], blob[_META_NONCE:], aad)
        except InvalidTag:
            raise AuthError("sealed RPC metadata failed authentication") from None


@dataclass
class QueueCursor:
    header_addr: int
    elem_addrs: list[int]


@dataclass
class RpcInfra:
    machine: Machine
    table_addr: int
    addr_table: list[int]
    encrypt_metadata: bool = False
    scratch_addr: int = 0
    scratch_size: int = 0
    # Each party's private copy of the pointer it owns.
    cpu_tx_write: int = 0
    cpu_rx_read: int = 0
    gsp_tx_read: int = 0
    gsp_rx_write: int = 0
    cpu_meta: MetaCipher | None = field(default=None, repr=False)
    sent: int = 0
    consumed: int = 0

    @property
    def tx(self) -> QueueCursor:
        return QueueCursor(self.addr_table[TX_HEADER_ENTRY], self.addr_table[TX_FIRST_ELEM:TX_FIRST_ELEM + NUM_ELEMS])

    @property
    def rx(self) -> QueueCursor:
        return QueueCursor(self.addr_table[RX_HEADER_ENTRY], self.addr_table[RX_FIRST_ELEM:RX_FIRST_ELEM + NUM_ELEMS])

    @property
    def capacity(self) -> int:
        return SEALED_PAYLOAD_CAPACITY if self.encrypt_metadata else PAYLOAD_CAPACITY

    def element_count(self, serialized_len: int) -> int:
        return max(1, -(-serialized_len // self.capacity))


Handler = Callable[["GspFirmware", bytes], bytes]


class GspFirmware:
    """GSP-RM: the only RPC peer of the kernel driver, running inside the device."""

    def __init__(self, machine: Machine, key_table: ck.KeyTable):
        self.machine = machine
        self.keys = key_table
        self.ring = ck.KeyRing(key_table)
        self.rx_rpc = self.ring.state("cpu_gsp_locked_rpc", "rpc")
        self.tx_rpc = self.ring.state("gsp_cpu_locked_rpc", "rpc")
        self.meta = MetaCipher(key_table, "gsp")
        self.handlers: dict[int, Handler] = {
            NOP: lambda gsp, p: b"",
            QUERY_STATUS: lambda gsp, p: struct.pack("<II", gsp.machine.epoch, int(gsp.machine.cc_mode_active)),
            SET_CC_POLICY: _set_cc_policy,
            ALLOC: _alloc,
            FREE: lambda gsp, p: b"",
        }
        self.executed: list[int] = []
        self.policy: dict[str, int] = {}
        self.fault_buffers = None

    def register_handler(self, function: int, handler: Handler) -> None:
        self.handlers[function] = handler


def _set_cc_policy(gsp: GspFirmware, params: bytes) -> bytes:
    if len(params) < 8:
        raise SimError("SET_CC_POLICY wants (key u32, value u32)")
    k, v = struct.unpack_from("<II", params)
    gsp.policy[str(k)] = v
    return b""


def _alloc(gsp: GspFirmware, params: bytes) -> bytes:
    (size,) = struct.unpack_from("<Q", params)
    return struct.pack("<Q", gsp.machine.alloc("cpr", size))


def init_rpc_infrastructure(machine: Machine, key_table: ck.KeyTable, encrypt_metadata: bool = False) -> RpcInfra:
    if not machine.cc_mode_active:
        raise SimError("RPC infrastructure needs CC mode")
    key_table.key("cpu_gsp_locked_rpc")  # raises if keys are gone
    base = machine.alloc(SHARED, TABLE_ENTRIES * PAGE)
    table = [base + i * PAGE for i in range(TABLE_ENTRIES)]
    scratch_size = NUM_ELEMS * PAGE
    infra = RpcInfra(machine, base, table, encrypt_metadata,
                     scratch_addr=machine.alloc(CVM_PRIVATE, scratch_size), scratch_size=scratch_size)
    machine.stage_write(base, b"".join(struct.pack("<Q", a) for a in table), "rpc.addr_table", False)
    if encrypt_metadata:
        infra.cpu_meta = MetaCipher(key_table, "cpu")
        for hdr in (infra.tx.header_addr, infra.rx.header_addr):
            _write_ptr(infra, infra.cpu_meta, hdr, READ_PTR_OFFSET, 0, "cpu")
            _write_ptr(infra, infra.cpu_meta, hdr, WRITE_PTR_OFFSET, 0, "cpu")
    else:
        for hdr in (infra.tx.header_addr, infra.rx.header_addr):
            machine.stage_write(hdr, bytes(8), "rpc.queue_header", False)
    machine.trace.emit("cvm", "rpc_init", PRIVATE, table=base, encrypt_metadata=encrypt_metadata)
    return infra


# -- pointer and element codecs ----------------------------------------------

def _write_ptr(infra: RpcInfra, meta: MetaCipher | None, hdr_addr: int, field_off: int, value: int, actor: str) -> None:
    m = infra.machine
    if infra.encrypt_metadata:
        blob = meta.seal(struct.pack("<I", value), struct.pack("<QI", hdr_addr, field_off))
        m.stage_write(hdr_addr + field_off, blob, "rpc.queue_header", True, actor)
    else:
        plain_off = 0 if field_off == READ_PTR_OFFSET else 4
        m.stage_write(hdr_addr + plain_off, struct.pack("<I", value), "rpc.queue_header", False, actor)


def _read_ptr(infra: RpcInfra, meta: MetaCipher | None, hdr_addr: int, field_off: int) -> int:
    m = infra.machine
    if infra.encrypt_metadata:
        blob = m.read(hdr_addr + field_off, SEALED_PTR_SIZE)
        (v,) = struct.unpack("<I", meta.open(blob, struct.pack("<QI", hdr_addr, field_off)))
    else:
        (v,) = struct.unpack("<I", m.read(hdr_addr + (0 if field_off == READ_PTR_OFFSET else 4), 4))
    return v


def _encode_header(infra: RpcInfra, meta: MetaCipher | None, hdr: ElementHeader, addr: int) -> bytes:
    if infra.encrypt_metadata:
        return meta.seal(hdr.pack(), struct.pack("<Q", addr))
    return hdr.pack()


def _decode_header(infra: RpcInfra, meta: MetaCipher | None, page: bytes, addr: int) -> ElementHeader:
    if infra.encrypt_metadata:
        return ElementHeader.unpack(meta.open(page[:SEALED_HEADER_SIZE], struct.pack("<Q", addr)))
    return ElementHeader.unpack(page)


def _header_len(infra: RpcInfra) -> int:
    return SEALED_HEADER_SIZE if infra.encrypt_metadata else HEADER_SIZE


def _element_checksum(hdr: ElementHeader, chunk: bytes) -> int:
    zeroed = ElementHeader(hdr.authTagBuffer, hdr.aadBuffer, 0, hdr.seqNum, hdr.elemCount)
    return compute_checksum(zeroed.pack() + chunk)


def _enqueue(infra: RpcInfra, q: QueueCursor, write_idx: int, read_idx: int, blob: ck.SealedBlob,
             seq: int, elem_count: int, meta: MetaCipher | None, actor: str) -> int:
    used = (write_idx - read_idx) % NUM_ELEMS
    if elem_count > NUM_ELEMS - 1 - used:
        raise QueueFull(f"{elem_count} elements needed, {NUM_ELEMS - 1 - used} free")
    cap = infra.capacity
    ct = blob.payload
    for k in range(elem_count):
        chunk = ct[k * cap:(k + 1) * cap]
        hdr = ElementHeader(blob.tag, blob.aad, 0, seq, elem_count)
        hdr = ElementHeader(hdr.authTagBuffer, hdr.aadBuffer, _element_checksum(hdr, chunk), seq, elem_count)
        addr = q.elem_addrs[(write_idx + k) % NUM_ELEMS]
        enc = _encode_header(infra, meta, hdr, addr)
        infra.machine.stage_write(addr, enc, "rpc.element_header", infra.encrypt_metadata, actor)
        infra.machine.stage_write(addr + len(enc), chunk, "rpc.payload", True, actor)
    return (write_idx + elem_count) % NUM_ELEMS


def _dequeue(infra: RpcInfra, q: QueueCursor, read_idx: int, write_idx: int,
             meta: MetaCipher | None) -> tuple[ElementHeader, bytes, int]:
    """Read one message worth of elements; returns (first header, ciphertext, elements consumed).

    Checksum and framing failures raise after computing how many elements to skip,
    stored on the exception as ``skip``.
    """
    m = infra.machine
    avail = (write_idx - read_idx) % NUM_ELEMS
    hlen = _header_len(infra)
    addr0 = q.elem_addrs[read_idx]
    page0 = m.read(addr0, PAGE)
    try:
        first = _decode_header(infra, meta, page0, addr0)
    except AuthError as exc:
        exc.skip = 1
        raise
    count = first.elemCount
    if not 1 <= count <= avail:
        err = ChecksumMismatch(f"element count {count} outside the {avail} queued elements")
        err.skip = max(1, min(avail, 1))
        raise err
    seq, count_aad, ct_len, _ = _AAD.unpack(first.aadBuffer)
    chunks = []
    cap = infra.capacity
    for k in range(count):
        addr = q.elem_addrs[(read_idx + k) % NUM_ELEMS]
        page = page0 if k == 0 else m.read(addr, PAGE)
        hdr = first if k == 0 else _decode_header(infra, meta, page, addr)
        chunk_len = max(0, min(cap, ct_len - k * cap))
        chunk = page[hlen:hlen + chunk_len]
        if _element_checksum(hdr, chunk) != hdr.checkSum:
            err = ChecksumMismatch(f"checksum mismatch in element {(read_idx + k) % NUM_ELEMS}")
            err.skip = count
            raise err
        chunks.append(chunk)
    return first, b"".join(chunks), count


def _open_message(state: ck.ChannelCipherState, keys: ck.KeyTable, hdr: ElementHeader, ct: bytes) -> bytes:
    blob = ck.SealedBlob(state.iv_for(hdr.seqNum), ct, hdr.authTagBuffer, hdr.aadBuffer)
    return ck.open_blob(state, keys, blob)


def _seal_message(state: ck.ChannelCipherState, keys: ck.KeyTable, msg: RpcMessage, cap: int) -> tuple[ck.SealedBlob, int, int]:
    data = msg.serialize()
    count = max(1, -(-len(data) // cap))
    seq = state.send_counter + 1
    blob = ck.seal(state, keys, data, _AAD.pack(seq, count, len(data), 0))
    assert blob.counter == seq
    return blob, seq, count


# -- CPU side ----------------------------------------------------------------

def send_command(infra: RpcInfra, cipher_state: ck.ChannelCipherState, msg: RpcMessage,
                 key_table: ck.KeyTable | None = None) -> int:
    """Seal ``msg`` under ``cpu_gsp_locked_rpc`` and queue it on TX; returns seqNum."""
    keys = key_table if key_table is not None else _cvm_keys(infra)
    m = infra.machine
    q = infra.tx
    read_idx = _read_ptr(infra, infra.cpu_meta, q.header_addr, READ_PTR_OFFSET)
    data = msg.serialize()
    count = infra.element_count(len(data))
    used = (infra.cpu_tx_write - read_idx) % NUM_ELEMS
    if count > NUM_ELEMS - 1 - used:
        raise QueueFull(f"TX has {NUM_ELEMS - 1 - used} free elements, message needs {count}")
    if len(data) <= infra.scratch_size:
        m.write(infra.scratch_addr, data)  # plaintext staged in private memory only
    blob, seq, count = _seal_message(cipher_state, keys, msg, infra.capacity)
    infra.cpu_tx_write = _enqueue(infra, q, infra.cpu_tx_write, read_idx, blob, seq, count, infra.cpu_meta, "cvm")
    _write_ptr(infra, infra.cpu_meta, q.header_addr, WRITE_PTR_OFFSET, infra.cpu_tx_write, "cvm")
    infra.sent += count
    m.trace.emit("cvm", "rpc_send", HOST_VISIBLE, seq=seq, elemCount=count, function=msg.function)
    return seq


def recv_status(infra: RpcInfra, cipher_state: ck.ChannelCipherState, key_table: ck.KeyTable | None = None) -> RpcMessage:
    keys = key_table if key_table is not None else _cvm_keys(infra)
    m = infra.machine
    q = infra.rx
    write_idx = _read_ptr(infra, infra.cpu_meta, q.header_addr, WRITE_PTR_OFFSET)
    if write_idx >= NUM_ELEMS:
        raise AuthError(f"RX writePtr {write_idx} is out of range")
    if write_idx == infra.cpu_rx_read:
        raise QueueEmpty("RX queue is empty")
    try:
        hdr, ct, count = _dequeue(infra, q, infra.cpu_rx_read, write_idx, infra.cpu_meta)
        plain = _open_message(cipher_state, keys, hdr, ct)
    except (AuthError, ReplayError, ChecksumMismatch) as exc:
        m.trace.emit("cvm", "rpc_status", PRIVATE, result=type(exc).__name__)
        raise
    if len(plain) <= infra.scratch_size:
        m.write(infra.scratch_addr, plain)
    infra.cpu_rx_read = (infra.cpu_rx_read + count) % NUM_ELEMS
    _write_ptr(infra, infra.cpu_meta, q.header_addr, READ_PTR_OFFSET, infra.cpu_rx_read, "cvm")
    msg = RpcMessage.parse(plain, hdr.seqNum)
    m.trace.emit("cvm", "rpc_status", PRIVATE, seq=hdr.seqNum, elemCount=count, function=msg.function, result="ok")
    return msg


def raise_for_status(msg: RpcMessage) -> bytes:
    """Map an error status back to the exception the GSP detected."""
    code = msg.status_code
    if code == ST_OK:
        return msg.result
    detail = msg.result.decode(errors="replace")
    exc = {ST_AUTH: AuthError, ST_REPLAY: ReplayError, ST_CHECKSUM: ChecksumMismatch, ST_RANGE: AccessFault}.get(code, SimError)
    raise exc(f"GSP reported {STATUS_NAMES[code] if code < len(STATUS_NAMES) else code}: {detail}")


def _cvm_keys(infra: RpcInfra) -> ck.KeyTable:
    keys = getattr(infra, "cvm_keys", None)
    if keys is None:
        raise SimError("pass key_table or attach infra.cvm_keys")
    return keys


# -- GSP side ----------------------------------------------------------------

def _status_code(exc: Exception) -> int:
    if isinstance(exc, ReplayError):
        return ST_REPLAY
    if isinstance(exc, AuthError):
        return ST_AUTH
    if isinstance(exc, ChecksumMismatch):
        return ST_CHECKSUM
    if isinstance(exc, AccessFault):
        return ST_RANGE
    return ST_FAILED


def post_to_rx(infra: RpcInfra, gsp: GspFirmware, msg: RpcMessage) -> int:
    q = infra.rx
    read_idx = _read_ptr(infra, gsp.meta, q.header_addr, READ_PTR_OFFSET)
    blob, seq, count = _seal_message(gsp.tx_rpc, gsp.keys, msg, infra.capacity)
    infra.gsp_rx_write = _enqueue(infra, q, infra.gsp_rx_write, read_idx, blob, seq, count, gsp.meta, "gsp")
    _write_ptr(infra, gsp.meta, q.header_addr, WRITE_PTR_OFFSET, infra.gsp_rx_write, "gsp")
    return seq


def gsp_service(infra: RpcInfra, gsp: GspFirmware) -> list[int]:
    """Drain TX: verify checksum, open, execute, and post one status per message."""
    if gsp is None or gsp.keys.revoked:
        raise SimError("GSP is not running")
    m = infra.machine
    q = infra.tx
    produced: list[int] = []
    try:
        write_idx = _read_ptr(infra, gsp.meta, q.header_addr, WRITE_PTR_OFFSET)
    except AuthError:
        m.trace.emit("gsp", "rpc_service", PRIVATE, result="header_auth")
        return produced
    if write_idx >= NUM_ELEMS:
        m.trace.emit("gsp", "rpc_service", PRIVATE, result="bad_write_ptr", writePtr=write_idx)
        return produced
    while infra.gsp_tx_read != write_idx:
        seq = None
        try:
            hdr, ct, count = _dequeue(infra, q, infra.gsp_tx_read, write_idx, gsp.meta)
            seq = hdr.seqNum
            infra.gsp_tx_read = (infra.gsp_tx_read + count) % NUM_ELEMS
            infra.consumed += count
            plain = _open_message(gsp.rx_rpc, gsp.keys, hdr, ct)
            cmd = RpcMessage.parse(plain, seq)
        except (AuthError, ReplayError, ChecksumMismatch, SimError) as exc:
            skip = getattr(exc, "skip", None)
            if skip is not None:
                infra.gsp_tx_read = (infra.gsp_tx_read + skip) % NUM_ELEMS
                infra.consumed += skip
            code = _status_code(exc)
            m.trace.emit("gsp", "rpc_service", PRIVATE, seq=seq, tampered=True, result=STATUS_NAMES[code])
            status = RpcMessage(STATUS_UNPARSED, struct.pack("<II", code, seq or 0))
            produced.append(post_to_rx(infra, gsp, status))
            continue
        handler = gsp.handlers.get(cmd.function)
        if handler is None:
            code, result = ST_BAD_COMMAND, b""
        else:
            try:
                result, code = handler(gsp, cmd.params), ST_OK
            except (AuthError, ReplayError, ChecksumMismatch, AccessFault, SimError) as exc:
                code, result = _status_code(exc), str(exc).encode()
        gsp.executed.append(cmd.function)
        m.trace.emit("gsp", "rpc_service", PRIVATE, seq=seq, elemCount=count, function=cmd.function,
                     tampered=False, result=STATUS_NAMES[code])
        status = RpcMessage(STATUS_BIT | cmd.function, struct.pack("<I", code) + result)
        produced.append(post_to_rx(infra, gsp, status))
    _write_ptr(infra, gsp.meta, q.header_addr, READ_PTR_OFFSET, infra.gsp_tx_read, "gsp")
    return produced


def post_event(infra: RpcInfra, gsp: GspFirmware, function: int, params: bytes = b"") -> int:
    """Unsolicited GSP -> CPU notification on the RX (status) path."""
    seq = post_to_rx(infra, gsp, RpcMessage(function, params))
    infra.machine.trace.emit("gsp", "rpc_event", PRIVATE, seq=seq, function=function)
    return seq


def call(infra: RpcInfra, cpu_tx: ck.ChannelCipherState, cpu_rx: ck.ChannelCipherState,
         gsp: GspFirmware, msg: RpcMessage, key_table: ck.KeyTable | None = None) -> RpcMessage:
    """Send, let the GSP run, and collect the matching status (events are stashed)."""
    send_command(infra, cpu_tx, msg, key_table)
    gsp_service(infra, gsp)
    while True:
        status = recv_status(infra, cpu_rx, key_table)
        if status.function & STATUS_BIT:
            return status
        pending = getattr(infra, "pending_events", None)
        if pending is None:
            infra.pending_events = pending = []
        pending.append(status)


@dataclass
class RpcSession:
    """CVM-side handle bundling the infra, the driver's keys and the GSP peer."""

    infra: RpcInfra
    gsp: GspFirmware
    cvm_keys: ck.KeyTable
    cpu_ring: ck.KeyRing

    @property
    def cpu_tx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("cpu_gsp_locked_rpc", "rpc")

    @property
    def cpu_rx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("gsp_cpu_locked_rpc", "rpc")

    def call(self, msg: RpcMessage) -> RpcMessage:
        return call(self.infra, self.cpu_tx, self.cpu_rx, self.gsp, msg, self.cvm_keys)

    def drain_events(self) -> list[RpcMessage]:
        """Collect unsolicited GSP messages, including any stashed by :func:`call`."""
        out = list(getattr(self.infra, "pending_events", None) or [])
        self.infra.pending_events = []
        while True:
            try:
                msg = recv_status(self.infra, self.cpu_rx, self.cvm_keys)
            except QueueEmpty:
                return out
            out.append(msg)

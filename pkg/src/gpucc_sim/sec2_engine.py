"""SEC2: HMAC-verified method execution, the scrubber channel, and soft reset.

SEC2 verifies and decrypts but has no way to seal anything. A push in staging
is laid out as::

    header  push_seq u64 | count u32 | flags u32 | scrub_tag_addr u64 | sema_tag_addr u64
    body    serialized methods (or iv | tag | ciphertext when flags & PUSH_ENCRYPTED)

Each method ``i`` carries its own HMAC over ``push_seq | count | i | method``;
semaphore-method digests go to the semaphore tag buffer, the rest to the
scrub tag buffer. Verification is all-or-nothing: nothing executes unless
every digest checks out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import crypto_keys as ck
from .channel import (
    DECRYPT_TO_CPR,
    ENCRYPT_FROM_CPR,
    MEMSET_SECURE,
    SEMAPHORE_RELEASE,
    SETUP_CHANNEL_STATE,
    Channel,
    Method,
    allocate_channel,
    parse_methods,
    serialize_methods,
)
from .errors import AccessFault, AuthError, CapabilityViolation, NotBooted, ReplayError, SimError
from .fabric import CPR, PAGE, VIDMEM, Machine, wipe_device_memory
from .trace import HOST_VISIBLE, PRIVATE

PUSH_HEADER = struct.Struct("<QIIQQ")
PUSH_ENCRYPTED = 1
DIGEST_LEN = 32
ACTIVATE_ALL = 0xFFFF_FFFF
DATA_KEY_SELECT = {0: "kernel", 1: "user", 2: "scrubber"}
SCRUBBER_CHANNEL_ID = 0x5C
SEC2_CHANNEL_ID = 0x5E


@dataclass
class ScrubRequest:
    pages: list[int]


@dataclass
class SignedPush:
    channel_id: int
    gpfifo_index: int
    pushbuffer_addr: int
    length: int
    methods: list[Method]
    scrub_tag_buffer_addr: int
    sema_tag_buffer_addr: int
    hmac_key_id: str
    push_seq: int


@dataclass
class _ChannelInfo:
    role: str
    hmac_key: str
    data_key: str
    encrypted: bool
    last_seq: int = 0


@dataclass
class Sec2Engine:
    machine: Machine
    keys: ck.KeyTable
    ring: ck.KeyRing = None
    channels: dict[int, _ChannelInfo] = field(default_factory=dict)
    pending: dict[int, tuple] = field(default_factory=dict)
    registered: dict[int, tuple] = field(default_factory=dict)
    channel_objs: dict[int, Channel] = field(default_factory=dict)
    executed: int = 0

    def __post_init__(self):
        if self.ring is None:
            self.ring = ck.KeyRing(self.keys)

    def attach(self, ch: Channel) -> None:
        self.channels[ch.id] = _ChannelInfo(ch.role, ch.keys["hmac"], ch.keys["data"], ch.encrypted_pushes)
        self.channel_objs[ch.id] = ch


def method_digest_input(push_seq: int, count: int, index: int, method: Method) -> bytes:
    return struct.pack("<QII", push_seq, count, index) + method.serialize()


def _require_sec2(machine: Machine) -> Sec2Engine:
    sec2 = machine.device.sec2
    if sec2 is None or machine.boot_state != "sec2_booted":
        raise NotBooted("SEC2 is not running")
    return sec2


def create_swl_scrubber_channel(machine: Machine, key_table: ck.KeyTable, encrypt_pushes: bool = False,
                                ring: ck.KeyRing | None = None) -> Channel:
    sec2 = _require_sec2(machine)
    ch = allocate_channel(machine, SCRUBBER_CHANNEL_ID, "sec2", "scrubber", "staging")
    ch.keys = {"hmac": "cpu_sec2_hmac_scrubber", "data": "cpu_sec2_data_scrubber"}
    key_table.key(ch.keys["hmac"])
    ch.owner_keys = key_table
    ch.owner_ring = ring or ck.KeyRing(key_table)
    ch.encrypted_pushes = encrypt_pushes
    sec2.attach(ch)
    machine.trace.emit("cvm", "channel_create", PRIVATE, channel=ch.id, role="scrubber", location="staging",
                       encrypted_pushes=encrypt_pushes)
    return ch


# -- driver side --------------------------------------------------------------

def build_push(channel: Channel, methods: list[Method], sign: bool = True) -> SignedPush:
    """Sign ``methods``, lay the push and its tag buffers out in staging, append a GPFIFO entry."""
    m = channel.machine
    keys = channel.owner_keys
    hkey = channel.keys["hmac"]
    seq = channel.push_seq + 1
    count = len(methods)
    scrub_digests, sema_digests = [], []
    for i, meth in enumerate(methods):
        d = ck.sign(hkey, keys, method_digest_input(seq, count, i, meth)) if sign else bytes(DIGEST_LEN)
        (sema_digests if meth.opcode == SEMAPHORE_RELEASE else scrub_digests).append(d)
    scrub_tags = channel.arena_alloc(max(1, len(scrub_digests)) * DIGEST_LEN)
    sema_tags = channel.arena_alloc(max(1, len(sema_digests)) * DIGEST_LEN)
    flags = PUSH_ENCRYPTED if channel.encrypted_pushes else 0
    header = PUSH_HEADER.pack(seq, count, flags, scrub_tags, sema_tags)
    body = serialize_methods(methods)
    if channel.encrypted_pushes:
        state = channel.owner_ring.state(channel.keys["data"], f"sec2ch{channel.id}/push")
        body = ck.seal(state, keys, body, header).pack()
    pb = header + body
    pb_addr = channel.arena_alloc(len(pb))
    role = channel.role
    m.stage_write(scrub_tags, b"".join(scrub_digests), f"{role}.scrub_tags", False)
    m.stage_write(sema_tags, b"".join(sema_digests), f"{role}.sema_tags", False)
    m.stage_write(pb_addr, pb, f"{role}.pushbuffer", channel.encrypted_pushes)
    idx = channel.push_gpfifo(pb_addr, len(pb))
    channel.push_seq = seq
    m.trace.emit("cvm", "scrub_submit" if role == "scrubber" else "sec2_push", HOST_VISIBLE,
                 channel=channel.id, push_seq=seq, methods=count, sealed=channel.encrypted_pushes)
    return SignedPush(channel.id, idx, pb_addr, len(pb), list(methods), scrub_tags, sema_tags, hkey, seq)


def submit(channel: Channel, methods: list[Method], sign: bool = True) -> list[dict]:
    push = build_push(channel, methods, sign)
    if channel.intercept is not None:
        channel.intercept("push", push.pushbuffer_addr, push.length)
    return sec2_execute(channel.machine, push)


# -- device side --------------------------------------------------------------

def _fetch(machine: Machine, sec2: Sec2Engine, info: _ChannelInfo, ch_id: int, push: SignedPush):
    """Read the push the GPFIFO entry points at; return (seq, methods) once every digest verifies."""
    # The GPFIFO entry, push and tag buffers all sit in staging; SEC2 trusts none of it.
    ch = sec2.channel_objs[ch_id]
    pb_addr, length = ch.read_entry(push.gpfifo_index)
    try:
        raw = machine.read(pb_addr, length)
    except AccessFault:
        raise AuthError("GPFIFO entry points outside memory") from None
    if len(raw) < PUSH_HEADER.size:
        raise AuthError("push shorter than its header")
    header = raw[:PUSH_HEADER.size]
    seq, count, flags, scrub_tags, sema_tags = PUSH_HEADER.unpack(header)
    body = raw[PUSH_HEADER.size:]
    if bool(flags & PUSH_ENCRYPTED) != info.encrypted or flags & ~PUSH_ENCRYPTED:
        raise AuthError("push encryption flag does not match the channel policy")
    if info.encrypted:
        state = sec2.ring.state(info.data_key, f"sec2ch{ch_id}/push")
        # Decrypt with a scratch copy so a rejected push does not consume the counter.
        probe = ck.ChannelCipherState(state.key_id, state.salt, recv_last=state.recv_last, epoch=state.epoch,
                                      label=state.label)
        body = ck.open_blob(probe, sec2.keys, ck.SealedBlob.unpack(body, header))
        pending_state = (state, probe.recv_last)
    else:
        pending_state = None
    try:
        methods = parse_methods(body, count)
    except SimError as exc:
        raise AuthError(f"malformed push: {exc}") from None
    n_sema = sum(1 for mt in methods if mt.opcode == SEMAPHORE_RELEASE)
    try:
        scrub_blob = machine.read(scrub_tags, max(1, count - n_sema) * DIGEST_LEN)
        sema_blob = machine.read(sema_tags, max(1, n_sema) * DIGEST_LEN)
    except AccessFault:
        raise AuthError("tag buffer address outside memory") from None
    si = mi = 0
    for i, meth in enumerate(methods):
        if meth.opcode == SEMAPHORE_RELEASE:
            d, mi = sema_blob[mi * DIGEST_LEN:(mi + 1) * DIGEST_LEN], mi + 1
        else:
            d, si = scrub_blob[si * DIGEST_LEN:(si + 1) * DIGEST_LEN], si + 1
        ck.verify(info.hmac_key, sec2.keys, method_digest_input(seq, count, i, meth), d)
    if seq <= info.last_seq:
        raise ReplayError(f"push_seq {seq} on channel {ch_id} is not above {info.last_seq}")
    if pending_state is not None:
        pending_state[0].recv_last = pending_state[1]
    return seq, methods


def sec2_execute(machine: Machine, push: SignedPush) -> list[dict]:
    """Verify every method of ``push`` and, only if all pass, execute them in order."""
    sec2 = _require_sec2(machine)
    info = sec2.channels.get(push.channel_id)
    if info is None:
        raise SimError(f"channel {push.channel_id} is not bound to SEC2")
    event = "scrub_verify"
    ch = sec2.channel_objs[push.channel_id]
    try:
        seq, methods = _fetch(machine, sec2, info, push.channel_id, push)
        for meth in methods:
            if meth.opcode == ENCRYPT_FROM_CPR:
                raise CapabilityViolation("SEC2 cannot encrypt: encrypt_from_cpr rejected")
    except (AuthError, ReplayError, CapabilityViolation) as exc:
        sec2.pending.clear()
        machine.trace.emit("sec2", event, PRIVATE, channel=push.channel_id, ok=False, error=type(exc).__name__)
        raise
    finally:
        ch.gpget = min(ch.gpput, ch.gpget + 1)  # the entry is consumed whether or not it verified
    info.last_seq = seq
    machine.trace.emit("sec2", event, PRIVATE, channel=push.channel_id, ok=True, push_seq=seq, methods=len(methods))
    results = [_execute(machine, sec2, info, meth) for meth in methods]
    sec2.executed += len(methods)
    if info.role == "scrubber":
        machine.trace.emit("sec2", "scrub_done", PRIVATE, channel=push.channel_id, push_seq=seq)
    return results


def _device_range(machine: Machine, addr: int, length: int) -> None:
    for name in (CPR, VIDMEM):
        if machine.region(name).contains(addr, max(length, 1)):
            return
    raise AccessFault(f"[{addr:#x}, +{length:#x}) is not device memory")


def _execute(machine: Machine, sec2: Sec2Engine, info: _ChannelInfo, meth: Method) -> dict:
    a = meth.args
    if meth.opcode == MEMSET_SECURE:
        addr, length, value = a
        _device_range(machine, addr, length)
        machine.write(addr, bytes([value & 0xFF]) * length)
        machine.trace.emit("sec2", "memset", PRIVATE, addr=addr, len=length)
        return {"op": meth.name, "addr": addr, "len": length}
    if meth.opcode == SEMAPHORE_RELEASE:
        addr, value = a
        machine.stage_write(addr, struct.pack("<Q", value), f"{info.role}.semaphore", False, "sec2")
        return {"op": meth.name, "value": value}
    if meth.opcode == DECRYPT_TO_CPR:
        src, length, dst, sel = a
        if not machine.cpr.contains(dst, max(length, 1)):
            raise AccessFault(f"decrypt_to_cpr destination {dst:#x} is outside CPR")
        key_id = f"cpu_sec2_data_{DATA_KEY_SELECT.get(sel, 'kernel')}"
        state = sec2.ring.state(key_id, "sec2/data")
        blob = ck.SealedBlob.unpack(machine.read(src, ck.SealedBlob.packed_size(length)), struct.pack("<Q", dst))
        machine.write(dst, ck.open_blob(state, sec2.keys, blob))
        machine.trace.emit("sec2", "decrypt_to_cpr", PRIVATE, dst=dst, len=length, key=key_id)
        return {"op": meth.name, "dst": dst, "len": length}
    if meth.opcode == SETUP_CHANNEL_STATE:
        ch_id = a[0]
        if ch_id == ACTIVATE_ALL:
            sec2.registered.update(sec2.pending)
            activated = sorted(sec2.pending)
            sec2.pending.clear()
            machine.trace.emit("sec2", "channels_activated", PRIVATE, count=len(activated))
            return {"op": meth.name, "activated": activated}
        sec2.pending[ch_id] = tuple(a[1:])
        return {"op": meth.name, "channel": ch_id}
    raise SimError(f"SEC2 does not implement {meth.name}")


def encrypt_for_sec2(channel: Channel, plaintext: bytes, dst: int, privilege: str = "kernel") -> tuple[int, int]:
    """Driver seals ``plaintext`` for a later decrypt_to_cpr; returns (staging addr, key selector)."""
    sel = {v: k for k, v in DATA_KEY_SELECT.items()}[privilege]
    key_id = f"cpu_sec2_data_{privilege}"
    state = channel.owner_ring.state(key_id, "sec2/data")
    blob = ck.seal(state, channel.owner_keys, plaintext, struct.pack("<Q", dst))
    addr = channel.arena_alloc(ck.SealedBlob.packed_size(len(plaintext)))
    channel.machine.stage_write(addr, blob.pack(), "sec2.data", True)
    return addr, sel


# -- scrubbing and reset ------------------------------------------------------

def read_semaphore(channel: Channel) -> int:
    return struct.unpack("<Q", channel.machine.read(channel.tracking_semaphore_addr, 8))[0]


def submit_scrub(channel: Channel, req: ScrubRequest) -> int:
    if channel.role != "scrubber":
        raise SimError("submit_scrub needs the scrubber channel")
    m = channel.machine
    cpr = m.cpr
    n_pages = cpr.size // PAGE
    for p in req.pages:
        if not 0 <= p < n_pages:
            raise AccessFault(f"page {p} outside CPR ({n_pages} pages)")
    target = channel.push_seq + 1
    methods = [Method(MEMSET_SECURE, (cpr.base + p * PAGE, PAGE, 0)) for p in req.pages]
    methods.append(Method(SEMAPHORE_RELEASE, (channel.tracking_semaphore_addr, target)))
    submit(channel, methods)
    observed = read_semaphore(channel)
    if observed != target:
        m.trace.emit("cvm", "semaphore_mismatch", PRIVATE, channel=channel.id, expected=target, observed=observed,
                     classification="dos_only")
    return observed


def soft_reset(machine: Machine) -> None:
    """Delete keys and wipe device memory; the host regains visibility only afterwards."""
    machine.trace.emit("device_root", "reset", PRIVATE, epoch=machine.epoch, boot_state=machine.boot_state)
    machine.host_visible = False
    wipe_device_memory(machine)
    machine.revoke_keys()
    machine.trace.emit("device_root", "keys_deleted", PRIVATE)
    machine.epoch += 1
    machine.boot_state = "cold"
    machine.boot_measurements = []
    machine.ready = False
    machine.bar0_live.clear()
    machine.host_visible = True
    machine.trace.emit("device_root", "host_visible", PRIVATE, epoch=machine.epoch)

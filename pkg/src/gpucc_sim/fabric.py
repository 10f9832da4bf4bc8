"""The simulated machine: memory regions, host access policy, BAR0, secure boot.

Address map (defaults, desk scale)::

    0x1_0000_0000  cvm_private      48 MiB  CPU-CC encrypted guest memory
    0x1_0300_0000  shared_staging   16 MiB  unencrypted, host- and GPU-visible
    0x20_0000_0000 cpr             ~57.6 MiB  compute protected region
    ...            vidmem_unprotected  rest of the 64 MiB GPU memory

Trusted actors use :meth:`Machine.read` / :meth:`Machine.write`; the untrusted
host only gets :func:`host_read`, :func:`host_write` and :func:`bar0_read`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import bar0_map
from .errors import AccessFault, BootFailure, ConfigError, SimError, StagingExhausted
from .trace import HOST_VISIBLE, PRIVATE, Trace

PAGE = 4096
MiB = 1024 * 1024

CVM_PRIVATE = "cvm_private"
SHARED = "shared_staging"
CPR = "cpr"
VIDMEM = "vidmem_unprotected"
REGION_CLASSES = {CVM_PRIVATE: "cvm_private", SHARED: "shared", CPR: "cpr", VIDMEM: "vidmem"}

BOOT_STAGES = ("fsp", "gsp_fmc", "gsp_rm", "sec2")
STAGE_STATES = {"fsp": "fsp_booted", "gsp_fmc": "fsp_booted", "gsp_rm": "gsp_booted", "sec2": "sec2_booted"}


class UnalignedAccess(AccessFault):
    pass


@dataclass
class MachineConfig:
    cvm_memory_size: int = 64 * MiB
    staging_size: int = 16 * MiB
    gpu_memory_size: int = 64 * MiB
    cpr_fraction: float = 0.9
    system_base: int = 0x1_0000_0000
    gpu_base: int = 0x20_0000_0000
    seed: int = 0
    cc_manifest: Any = None  # list of manifest entries or a path; None selects the default
    raw_manifest: Any = None
    record_staging: bool = True
    regions: list[dict] | None = None  # explicit layout override: [{name, base, size}]

    @classmethod
    def from_dict(cls, d: dict) -> "MachineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown machine config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def small(cls, **kw) -> "MachineConfig":
        """A 4 MiB + 4 MiB machine for fast unit tests."""
        base = dict(cvm_memory_size=4 * MiB, staging_size=2 * MiB, gpu_memory_size=4 * MiB)
        base.update(kw)
        return cls(**base)


@dataclass
class Region:
    name: str
    base: int
    size: int
    cls: str
    content: bytearray = field(repr=False, default_factory=bytearray)
    _brk: int = field(default=0, repr=False)

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + max(length, 1) <= self.end


@dataclass(frozen=True)
class AccessResult:
    """What one host access observed.

    ``kind`` is one of value, zeros, error, fault, opaque, ok. BAR0 reads fill
    ``word``; memory reads fill ``data``.
    """

    kind: str
    word: int | None = None
    data: bytes | None = None

    @classmethod
    def of_word(cls, word: int) -> "AccessResult":
        word &= 0xFFFFFFFF
        if word == 0:
            return cls("zeros", 0)
        if word >> 20 == 0xBAD:
            return cls("error", word)
        return cls("value", word)

    @property
    def is_fault(self) -> bool:
        return self.kind == "fault"


FAULT = AccessResult("fault")
OK = AccessResult("ok")


@dataclass
class FirmwareBundle:
    images: dict[str, bytes]
    signatures: dict[str, bytes]
    vendor_public_key: bytes
    erot_present: bool = False
    erot_signature: bytes = b""  # the external RoT's own signature over the FSP image

    def replace_image(self, stage: str, image: bytes, resign_with: Ed25519PrivateKey | None = None) -> "FirmwareBundle":
        images = dict(self.images)
        sigs = dict(self.signatures)
        images[stage] = image
        if resign_with is not None:
            sigs[stage] = resign_with.sign(_signed_image(stage, image))
        return FirmwareBundle(images, sigs, self.vendor_public_key, self.erot_present, self.erot_signature)


@dataclass
class BootReport:
    success: bool
    boot_state: str
    measurements: list[tuple[str, bytes]]
    epoch: int
    cc_mode_active: bool
    failed_stage: str | None = None


@dataclass
class DeviceState:
    """GPU-side actor state; replaced wholesale on reset so nothing survives it."""

    keys: Any = None
    gsp: Any = None
    sec2: Any = None
    uvm: Any = None
    attestation: Any = None


def _seed_bytes(seed: int, label: str) -> bytes:
    return hashlib.sha256(f"gpucc-sim/{label}/{seed}".encode()).digest()


def vendor_signing_key(seed: int) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(_seed_bytes(seed, "vendor-firmware-key"))


def _raw_public(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _signed_image(stage: str, image: bytes) -> bytes:
    return b"gpucc-sim/fw/" + stage.encode() + b"\x00" + image


def firmware_image(stage: str, version: str = "1.0") -> bytes:
    header = f"GPUCC-FW {stage} v{version}\n".encode()
    body = b"".join(hashlib.sha256(f"{stage}/{version}/{i}".encode()).digest() for i in range(124))
    return header + body


def make_firmware_bundle(seed: int = 0, erot_present: bool = False, versions: dict[str, str] | None = None) -> FirmwareBundle:
    key = vendor_signing_key(seed)
    versions = versions or {}
    images = {s: firmware_image(s, versions.get(s, "1.0")) for s in BOOT_STAGES}
    sigs = {s: key.sign(_signed_image(s, img)) for s, img in images.items()}
    erot_sig = key.sign(b"erot/" + _signed_image("fsp", images["fsp"]))
    return FirmwareBundle(images, sigs, _raw_public(key.public_key()), erot_present, erot_sig)


def measure(image: bytes) -> bytes:
    return hashlib.sha384(image).digest()


class Machine:
    def __init__(self, config: MachineConfig, regions: list[Region], trace: Trace | None = None):
        self.config = config
        self.regions = {r.name: r for r in regions}
        self.trace = trace if trace is not None else Trace()
        self.cc_mode_active = False
        self.cc_mode_pending = False
        self.boot_state = "cold"
        self.boot_measurements: list[bytes] = []
        self.epoch = 0
        self.host_visible = True
        self.ready = False
        self.device = DeviceState()
        self.key_tables: list = []
        self.bar0_live: dict[str, int] = {}
        self.doorbells: list[int] = []
        self.staging_log: list[tuple[int, bytes, str, bool]] = []
        self.staging_count = 0  # index of the next staging write, logged or not
        self.surface_stats: dict[tuple[str, bool], list[int]] = {}
        self._vendor_key = _raw_public(vendor_signing_key(config.seed).public_key())
        self._mem_key = _seed_bytes(config.seed, "cvm-memory-encryption")
        self._maps: dict[bool, bar0_map.Bar0Map] = {}

    # -- layout --------------------------------------------------------------
    def region(self, name: str) -> Region:
        return self.regions[name]

    @property
    def cvm_private(self) -> Region:
        return self.regions[CVM_PRIVATE]

    @property
    def shared_staging(self) -> Region:
        return self.regions[SHARED]

    @property
    def cpr(self) -> Region:
        return self.regions[CPR]

    @property
    def vidmem_unprotected(self) -> Region:
        return self.regions[VIDMEM]

    def region_of(self, addr: int, length: int = 1) -> Region:
        for r in self.regions.values():
            if r.contains(addr, length):
                return r
        raise AccessFault(f"[{addr:#x}, +{length:#x}) is not inside a single region")

    def alloc(self, region: str, size: int, align: int = PAGE) -> int:
        r = self.regions[region]
        off = -(-r._brk // align) * align
        if off + size > r.size:
            if region == SHARED:
                raise StagingExhausted(f"staging needs {size:#x} more bytes")
            raise SimError(f"{region} exhausted")
        r._brk = off + size
        return r.base + off

    # -- trusted access (actors inside the trust boundary, and DMA) -----------
    def read(self, addr: int, length: int) -> bytes:
        r = self.region_of(addr, length)
        off = addr - r.base
        return bytes(r.content[off:off + length])

    def write(self, addr: int, data: bytes) -> None:
        r = self.region_of(addr, len(data))
        off = addr - r.base
        r.content[off:off + len(data)] = data

    def stage_write(self, addr: int, data: bytes, surface: str, sealed: bool, actor: str = "cvm") -> None:
        """Write into shared staging, labelling which protocol surface the bytes belong to."""
        data = bytes(data)
        if not self.shared_staging.contains(addr, len(data)):
            raise AccessFault(f"{surface} write at {addr:#x} is outside shared staging")
        self.write(addr, data)
        stat = self.surface_stats.setdefault((surface, sealed), [0, 0])
        stat[0] += 1
        stat[1] += len(data)
        index = self.staging_count
        self.staging_count += 1
        if self.config.record_staging:
            self.staging_log.append((addr, data, surface, sealed))
        if self.trace.level >= 1:
            meta = {"index": index, "addr": addr, "len": len(data), "surface": surface, "sealed": sealed}
            if self.trace.level >= 2:
                meta["sha256"] = hashlib.sha256(data).hexdigest()
            self.trace.emit(actor, "staging_write", HOST_VISIBLE, **meta)

    # -- key lifecycle -------------------------------------------------------
    def register_key_table(self, table) -> None:
        self.key_tables.append(table)

    def revoke_keys(self) -> None:
        for t in self.key_tables:
            t.revoke()
        self.key_tables.clear()
        self.device = DeviceState()

    # -- BAR0 ----------------------------------------------------------------
    def bar0_map(self, cc: bool | None = None) -> bar0_map.Bar0Map:
        cc = self.cc_mode_active if cc is None else cc
        if cc not in self._maps:
            src = self.config.cc_manifest if cc else self.config.raw_manifest
            if src is None:
                self._maps[cc] = bar0_map.default_map(cc)
            else:
                entries = bar0_map.load_manifest(src) if isinstance(src, str) else src
                self._maps[cc] = bar0_map.build_map(entries)
        return self._maps[cc]

    def set_bar0_role(self, role: str, value: int) -> None:
        self.bar0_live[role] = value & 0xFFFF
        self.trace.emit("gpu", "bar0_update", HOST_VISIBLE, role=role, value=value & 0xFFFF)

    def bar0_role_offset(self, role: str) -> int:
        return self.bar0_map(True).role_offset(role)

    # -- CVM memory encryption model ----------------------------------------
    def opaque_bytes(self, addr: int, length: int) -> bytes:
        first = addr // 16
        skip = addr - first * 16
        nonce = self.epoch.to_bytes(8, "big") + first.to_bytes(8, "big")
        enc = Cipher(algorithms.AES(self._mem_key), modes.CTR(nonce)).encryptor()
        return enc.update(bytes(skip + length))[skip:]


def _layout(config: MachineConfig) -> list[Region]:
    if config.regions is not None:
        out = []
        for d in config.regions:
            name = d["name"]
            if name not in REGION_CLASSES:
                raise ConfigError(f"unknown region {name!r}")
            out.append(Region(name, int(d["base"]), int(d["size"]), REGION_CLASSES[name]))
        return out
    if not 0 < config.cpr_fraction < 1:
        raise ConfigError("cpr_fraction must be in (0, 1)")
    sizes = (config.cvm_memory_size, config.staging_size, config.gpu_memory_size)
    if any(s <= 0 or s % PAGE for s in sizes):
        raise ConfigError("memory sizes must be positive multiples of 4096")
    if config.staging_size >= config.cvm_memory_size:
        raise ConfigError("staging must be a strict part of CVM memory")
    private = config.cvm_memory_size - config.staging_size
    # Round CPR up to a page so it never drops below the requested fraction.
    cpr = math.ceil(config.cpr_fraction * config.gpu_memory_size / PAGE) * PAGE
    if cpr >= config.gpu_memory_size:
        raise ConfigError("cpr_fraction leaves no unprotected video memory")
    sb, gb = config.system_base, config.gpu_base
    return [
        Region(CVM_PRIVATE, sb, private, "cvm_private"),
        Region(SHARED, sb + private, config.staging_size, "shared"),
        Region(CPR, gb, cpr, "cpr"),
        Region(VIDMEM, gb + cpr, config.gpu_memory_size - cpr, "vidmem"),
    ]


def build_machine(config: MachineConfig | None = None, trace: Trace | None = None) -> Machine:
    config = config or MachineConfig()
    regions = _layout(config)
    spans = sorted((r.base, r.end, r.name) for r in regions)
    for r in regions:
        if r.base % PAGE or r.size <= 0:
            raise ConfigError(f"region {r.name} must be page-aligned with positive size")
    for (_, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ConfigError(f"regions {n0} and {n1} overlap")
    if {r.name for r in regions} != set(REGION_CLASSES):
        raise ConfigError("config must define all four regions")
    for r in regions:
        r.content = bytearray(r.size)
    m = Machine(config, regions, trace)
    m.trace.emit("host", "machine_built", PRIVATE, regions={r.name: [r.base, r.size] for r in regions})
    return m


def set_cc_mode(machine: Machine, enable: bool) -> None:
    machine.cc_mode_pending = bool(enable)
    machine.trace.emit("host", "set_cc_mode", PRIVATE, pending=bool(enable), active=machine.cc_mode_active)


def _verify(pub: bytes, sig: bytes, msg: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError):
        return False


def secure_boot(machine: Machine, bundle: FirmwareBundle) -> BootReport:
    """Run the EROT -> FSP -> GSP-FMC -> GSP-RM -> SEC2 chain of trust.

    A new boot is a new epoch: the pending CC mode latches and every key table
    from the previous epoch is revoked before any stage runs. Raises
    :class:`BootFailure` (with ``.report``) at the first bad signature.
    """
    if machine.boot_state != "cold":
        raise SimError(f"secure_boot needs a cold machine, state is {machine.boot_state}")
    machine.revoke_keys()
    machine.epoch += 1
    machine.cc_mode_active = machine.cc_mode_pending
    machine.boot_measurements = []
    machine.ready = False
    machine.bar0_live.clear()
    machine.trace.emit("device_root", "boot_start", PRIVATE, epoch=machine.epoch, cc_mode=machine.cc_mode_active)

    anchor = machine._vendor_key
    measured: list[tuple[str, bytes]] = []

    def fail(stage: str) -> BootReport:
        machine.boot_state = f"failed:{stage}"
        machine.trace.emit("device_root", "boot_fail", PRIVATE, stage=stage)
        report = BootReport(False, machine.boot_state, measured, machine.epoch, machine.cc_mode_active, stage)
        err = BootFailure(stage)
        err.report = report
        raise err

    if bundle.vendor_public_key != anchor:
        fail("fsp")
    for stage in BOOT_STAGES:
        image = bundle.images.get(stage, b"")
        msg = _signed_image(stage, image)
        if stage == "fsp" and bundle.erot_present:
            ok = _verify(anchor, bundle.erot_signature, b"erot/" + msg)
            machine.trace.emit("erot", "verify", PRIVATE, stage=stage, ok=ok)
            if not ok:
                fail(stage)
        ok = _verify(anchor, bundle.signatures.get(stage, b""), msg)
        verifier = {"fsp": "fsp_brom", "gsp_fmc": "fsp", "gsp_rm": "gsp_fmc", "sec2": "gsp"}[stage]
        machine.trace.emit(verifier, "verify", PRIVATE, stage=stage, ok=ok)
        if not ok:
            fail(stage)
        h = measure(image)
        measured.append((stage, h))
        machine.boot_measurements.append(h)
        machine.boot_state = STAGE_STATES[stage]
        machine.trace.emit(stage, "stage_booted", PRIVATE, measurement=h.hex())
    return BootReport(True, machine.boot_state, measured, machine.epoch, machine.cc_mode_active)


def wipe_device_memory(machine: Machine) -> None:
    for name in (CPR, VIDMEM):
        r = machine.regions[name]
        r.content = bytearray(r.size)
        r._brk = 0
        machine.trace.emit("sec2", "wipe", PRIVATE, region=name, size=r.size)


# -- untrusted host interface -------------------------------------------------

def host_read(machine: Machine, addr: int, length: int) -> AccessResult:
    r = machine.region_of(addr, length)
    if r.cls in ("cpr", "vidmem") and not machine.host_visible:
        return FAULT
    if r.cls == "cvm_private":
        return AccessResult("opaque", data=machine.opaque_bytes(addr, length))
    if r.cls == "cpr" and machine.cc_mode_active:
        return FAULT
    return AccessResult("value", data=machine.read(addr, length))


def host_write(machine: Machine, addr: int, data: bytes) -> AccessResult:
    r = machine.region_of(addr, len(data))
    if r.cls == "cvm_private" or (r.cls == "cpr" and machine.cc_mode_active):
        return FAULT
    if r.cls in ("cpr", "vidmem") and not machine.host_visible:
        return FAULT
    machine.write(addr, data)
    machine.trace.emit("host", "host_write", HOST_VISIBLE, addr=addr, len=len(data), region=r.name)
    return OK


def host_dump(machine: Machine, names: Iterable[str] = (CVM_PRIVATE, SHARED)) -> tuple[int, bytes]:
    """Host view of contiguous regions, as (base address, bytes)."""
    regs = sorted((machine.regions[n] for n in names), key=lambda r: r.base)
    for a, b in zip(regs, regs[1:]):
        if a.end != b.base:
            raise ConfigError("dumped regions must be contiguous")
    parts = []
    for r in regs:
        res = host_read(machine, r.base, r.size)
        parts.append(bytes(r.size) if res.is_fault else res.data)
    return regs[0].base, b"".join(parts)


def _check_bar0_offset(offset: int) -> None:
    if offset % 4:
        raise UnalignedAccess(f"BAR0 offset {offset:#x} is not 4-byte aligned")
    if not 0 <= offset < bar0_map.BAR0_SIZE:
        raise AccessFault(f"BAR0 offset {offset:#x} beyond 16 MiB")


def bar0_read(machine: Machine, offset: int, actor: str = "host") -> AccessResult:
    _check_bar0_offset(offset)
    m = machine.bar0_map()
    role = m.roles.get(offset)
    if role is not None:
        return AccessResult.of_word(bar0_map.ROLE_VALID_BIT | machine.bar0_live.get(role, 0))
    return AccessResult.of_word(int(m.words[offset // 4]))


def bar0_read_block(machine: Machine, start_word: int = 0, count: int = bar0_map.BAR0_WORDS) -> np.ndarray:
    """Bulk BAR0 read through the same decoupler policy as :func:`bar0_read`."""
    m = machine.bar0_map()
    out = np.array(m.words[start_word:start_word + count])
    for off, role in m.roles.items():
        w = off // 4
        if start_word <= w < start_word + count:
            out[w - start_word] = bar0_map.ROLE_VALID_BIT | machine.bar0_live.get(role, 0)
    return out


def bar0_write(machine: Machine, offset: int, value: int, actor: str = "host") -> AccessResult:
    """Only the doorbell register accepts writes; everything else is dropped."""
    _check_bar0_offset(offset)
    if machine.cc_mode_active and machine.bar0_map().roles.get(offset) == bar0_map.ROLE_DOORBELL:
        machine.doorbells.append(value & 0xFFFFFFFF)
        machine.trace.emit(actor, "doorbell", HOST_VISIBLE, value=value & 0xFFFFFFFF)
    return OK

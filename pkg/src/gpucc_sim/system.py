"""Wiring: one call from a config to a booted machine with every channel up."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import attestation as att
from . import crypto_keys as ck
from . import fault_channel as fc
from . import gsp_dma as dma
from . import gsp_rpc as rpc
from . import sec2_engine as sec2m
from . import uvm_submission as uvm
from .errors import ConfigError
from .fabric import FirmwareBundle, Machine, MachineConfig, build_machine, make_firmware_bundle, secure_boot, set_cc_mode
from .trace import PRIVATE, Trace


@dataclass
class Mitigations:
    encrypt_rpc_metadata: bool = False
    constant_time_dma: bool = False
    encrypt_scrubber_pushes: bool = False

    @classmethod
    def from_dict(cls, d: dict | None) -> "Mitigations":
        d = d or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown mitigations: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SystemConfig:
    seed: int = 0
    machine: MachineConfig = field(default_factory=MachineConfig)
    timing: dma.TimingModel = field(default_factory=dma.TimingModel)
    mitigations: Mitigations = field(default_factory=Mitigations)
    erot_present: bool = True
    cc_mode: bool = True
    firmware_versions: dict[str, str] = field(default_factory=dict)

    @classmethod
    def small(cls, **kw) -> "SystemConfig":
        seed = kw.pop("seed", 0)
        return cls(seed=seed, machine=MachineConfig.small(seed=seed), **kw)


@dataclass
class System:
    config: SystemConfig
    machine: Machine
    bundle: FirmwareBundle
    pki: att.VendorPki
    cvm_keys: ck.KeyTable | None = None
    cvm_ring: ck.KeyRing | None = None
    rpc: rpc.RpcSession | None = None
    dma: dma.DmaSessions | None = None
    faults: fc.FaultHandler | None = None
    scrubber: Any = None
    sec2_channel: Any = None
    uvm: uvm.UvmSetup | None = None
    device_root: att.DeviceRoot | None = None
    services: att.AttestationServices | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    canaries: list[bytes] = field(default_factory=list)

    @property
    def trace(self) -> Trace:
        return self.machine.trace


def session_randoms(seed: int, epoch: int) -> tuple[bytes, bytes]:
    req = hashlib.sha256(f"gpucc-sim/requester/{seed}/{epoch}".encode()).digest()
    resp = hashlib.sha256(f"gpucc-sim/responder/{seed}/{epoch}".encode()).digest()
    return req, resp


def establish_keys(machine: Machine, seed: int) -> tuple[ck.KeyTable, ck.KeyTable]:
    """Both sides run the handshake and derive their own copy of the 44 keys."""
    req, resp = session_randoms(seed, machine.epoch)
    cvm_master = ck.establish_session(req, resp)
    dev_master = ck.establish_session(req, resp)
    cvm = ck.derive_all_keys(cvm_master, machine.epoch)
    dev = ck.derive_all_keys(dev_master, machine.epoch)
    machine.register_key_table(cvm)
    machine.register_key_table(dev)
    machine.device.keys = dev
    machine.trace.emit("cvm", "session_established", PRIVATE, epoch=machine.epoch, keys=len(cvm))
    return cvm, dev


def boot(system: System) -> None:
    m = system.machine
    set_cc_mode(m, system.config.cc_mode)
    secure_boot(m, system.bundle)
    cvm, dev = establish_keys(m, system.config.seed)
    system.cvm_keys = cvm
    system.cvm_ring = ck.KeyRing(cvm)
    m.device.sec2 = sec2m.Sec2Engine(m, dev)
    system.device_root = att.provision_device(m, system.pki)


def start_rpc(system: System) -> rpc.RpcSession:
    m = system.machine
    infra = rpc.init_rpc_infrastructure(m, system.cvm_keys, system.config.mitigations.encrypt_rpc_metadata)
    gsp = rpc.GspFirmware(m, m.device.keys)
    dma.install_dma(gsp)
    fc.install_faults(gsp, infra)
    m.device.gsp = gsp
    system.rpc = rpc.RpcSession(infra, gsp, system.cvm_keys, system.cvm_ring)
    timing = dma.TimingModel(**{**system.config.timing.__dict__,
                                "constant_time": system.config.timing.constant_time
                                or system.config.mitigations.constant_time_dma})
    system.dma = dma.DmaSessions(infra, gsp, system.cvm_keys, system.cvm_ring, timing,
                                 np.random.default_rng([system.config.seed, 0xD3A]))
    return system.rpc


def golden_boot_hashes(config: SystemConfig) -> list[bytes]:
    """Reference measurements come from the vendor's release images, not from what booted."""
    return att.boot_hashes_for(make_firmware_bundle(config.machine.seed).images)


def build_system(config: SystemConfig | None = None, trace: Trace | None = None,
                 stages: tuple[str, ...] = ("boot", "rpc", "faults", "scrubber", "uvm", "attestation")) -> System:
    config = config or SystemConfig()
    m = build_machine(config.machine, trace)
    bundle = make_firmware_bundle(config.machine.seed, config.erot_present, config.firmware_versions)
    system = System(config, m, bundle, att.VendorPki(config.seed), rng=np.random.default_rng(config.seed))
    if "boot" in stages:
        boot(system)
    if "rpc" in stages:
        start_rpc(system)
    if "faults" in stages:
        system.faults = fc.register_shadow_buffers(m, system.rpc)
    if "scrubber" in stages:
        system.scrubber = sec2m.create_swl_scrubber_channel(
            m, system.cvm_keys, config.mitigations.encrypt_scrubber_pushes, system.cvm_ring)
    if "uvm" in stages:
        system.sec2_channel = uvm.create_sec2_channel(m, system.cvm_keys, system.cvm_ring)
        system.uvm = uvm.bootstrap_wlc_lcic(m, system.sec2_channel)
    if "attestation" in stages:
        system.services = att.default_services(system.pki, golden_boot_hashes(config), system.device_root)
    return system


def canary(system: System, label: str, size: int = 32) -> bytes:
    """A recognisable secret payload; the leak sweep checks it never reaches the host."""
    c = hashlib.sha256(f"gpucc-sim/canary/{system.config.seed}/{label}/{len(system.canaries)}".encode()).digest()
    c = (b"CANARY" + c * (size // 32 + 1))[:size]
    system.canaries.append(c)
    return c

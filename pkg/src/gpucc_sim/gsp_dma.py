"""Encrypted CPU <-> GPU bulk transfers through staging, plus the latency model.

A transfer is an RPC (MEM_READ / MEM_WRITE) naming a CPR range and a staging
slot. Data crosses the boundary only as ``iv | tag | ciphertext`` under
``cpu_gsp_dma`` (writes) or ``gsp_cpu_dma`` (reads).
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import crypto_keys as ck
from . import gsp_rpc as rpc
from .errors import AccessFault, ConfigError, SimError
from .fabric import CVM_PRIVATE, SHARED, Machine
from .trace import HOST_VISIBLE, PRIVATE

READ = "read"
WRITE = "write"
SIZE_CLASSES = (8, 16, 32, 64, 128, 256, 4096)
WORKLOAD_READS = 453
WORKLOAD_WRITES = 3941


@dataclass
class TimingModel:
    base_fast: float = 40.0
    base_slow: float = 85.0
    p_slow: float = 0.35
    per_byte: float = 0.02
    noise_sigma: float = 3.0
    constant_time: bool = False
    # Padded cost used when constant_time is on: every call costs as much as this size.
    constant_time_size: int = 4096

    def __post_init__(self):
        if min(self.base_fast, self.base_slow, self.per_byte, self.noise_sigma) < 0:
            raise ConfigError("timing parameters must be non-negative")
        if not 0.0 <= self.p_slow <= 1.0:
            raise ConfigError("p_slow must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TimingModel":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown timing keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TimingSample:
    op: str
    size: int
    micros: float


@dataclass
class TransferRequest:
    direction: str  # "read_cpr" | "write_cpr"
    cpr_addr: int
    staging_addr: int
    size: int


def sample_latency(model: TimingModel, size: int, rng: np.random.Generator) -> float:
    """Bimodal base + linear size term + Gaussian noise, clamped at zero.

    With ``constant_time`` the size term is padded to the largest class and
    the slow mode is taken on every call, so the output no longer depends on
    ``size``.
    """
    if model.constant_time:
        base = model.base_slow
        eff = max(size, model.constant_time_size)
        rng.random()  # keep the draw sequence aligned with the variable-time model
    else:
        base = model.base_slow if rng.random() < model.p_slow else model.base_fast
        eff = size
    noise = rng.normal(0.0, model.noise_sigma) if model.noise_sigma > 0 else 0.0
    return max(0.0, base + model.per_byte * eff + noise)


@dataclass
class DmaSessions:
    """Cipher states for both directions on both sides, plus the RPC plumbing."""

    infra: rpc.RpcInfra
    gsp: rpc.GspFirmware
    cvm_keys: ck.KeyTable
    cpu_ring: ck.KeyRing
    timing: TimingModel = field(default_factory=TimingModel)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    slot_addr: int = 0
    slot_size: int = 0
    private_addr: int = 0
    # Tamper window: called with the staging address after the producer wrote the sealed blob.
    intercept: Callable[[int, int], None] | None = None
    samples: list[TimingSample] = field(default_factory=list)

    @property
    def cpu_tx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("cpu_gsp_locked_rpc", "rpc")

    @property
    def cpu_rx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("gsp_cpu_locked_rpc", "rpc")

    @property
    def cpu_dma_tx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("cpu_gsp_dma", "dma")

    @property
    def cpu_dma_rx(self) -> ck.ChannelCipherState:
        return self.cpu_ring.state("gsp_cpu_dma", "dma")


def install_dma(gsp: rpc.GspFirmware) -> None:
    """Register the GSP-side MEM_READ / MEM_WRITE handlers."""
    gsp.register_handler(rpc.MEM_READ, _gsp_mem_read)
    gsp.register_handler(rpc.MEM_WRITE, _gsp_mem_write)


_XFER = struct.Struct("<QQI")  # cpr_addr, staging_addr, size


def _check_ranges(m: Machine, cpr_addr: int, staging_addr: int, size: int) -> None:
    if not m.cpr.contains(cpr_addr, size):
        raise AccessFault(f"CPR range [{cpr_addr:#x}, +{size:#x}) out of range")
    if not m.shared_staging.contains(staging_addr, ck.SealedBlob.packed_size(size)):
        raise AccessFault(f"staging slot at {staging_addr:#x} cannot hold {size} bytes")


def _gsp_mem_read(gsp: rpc.GspFirmware, params: bytes) -> bytes:
    cpr_addr, staging_addr, size = _XFER.unpack_from(params)
    m = gsp.machine
    _check_ranges(m, cpr_addr, staging_addr, size)
    state = gsp.ring.state("gsp_cpu_dma", "dma")
    blob = ck.seal(state, gsp.keys, m.read(cpr_addr, size), _XFER.pack(cpr_addr, staging_addr, size))
    m.stage_write(staging_addr, blob.pack(), "dma.staging", True, "gsp")
    m.trace.emit("gsp", "dma_read", PRIVATE, size=size, counter=blob.counter)
    return b""


def _gsp_mem_write(gsp: rpc.GspFirmware, params: bytes) -> bytes:
    cpr_addr, staging_addr, size = _XFER.unpack_from(params)
    m = gsp.machine
    _check_ranges(m, cpr_addr, staging_addr, size)
    state = gsp.ring.state("cpu_gsp_dma", "dma")
    blob = ck.SealedBlob.unpack(m.read(staging_addr, ck.SealedBlob.packed_size(size)),
                                _XFER.pack(cpr_addr, staging_addr, size))
    m.write(cpr_addr, ck.open_blob(state, gsp.keys, blob))
    m.trace.emit("gsp", "dma_write", PRIVATE, size=size, counter=blob.counter)
    return b""


def _slot(sessions: DmaSessions, size: int) -> int:
    m = sessions.infra.machine
    need = ck.SealedBlob.packed_size(size)
    if need > sessions.slot_size:
        sessions.slot_size = max(need, 2 * sessions.slot_size, 4096 + 64)
        sessions.slot_addr = m.alloc(SHARED, sessions.slot_size)
    return sessions.slot_addr


def _private(sessions: DmaSessions, size: int) -> int:
    if not sessions.private_addr:
        sessions.private_addr = sessions.infra.machine.alloc(CVM_PRIVATE, 64 * 1024)
    if size > 64 * 1024:
        raise SimError("transfer larger than the private bounce buffer")
    return sessions.private_addr


def _record(sessions: DmaSessions, op: str, size: int) -> TimingSample:
    s = TimingSample(op, size, sample_latency(sessions.timing, size, sessions.rng))
    sessions.samples.append(s)
    sessions.infra.machine.trace.emit("cvm", "dma_timing", HOST_VISIBLE, op=op, size=size, micros=round(s.micros, 6))
    return s


def read_cpr(machine: Machine, sessions: DmaSessions, req: TransferRequest) -> tuple[bytes, TimingSample]:
    if req.direction != "read_cpr":
        raise SimError("read_cpr needs a read_cpr request")
    if not machine.cc_mode_active:
        raise SimError("DMA staging path requires CC mode")
    staging = req.staging_addr or _slot(sessions, req.size)
    status = rpc.call(sessions.infra, sessions.cpu_tx, sessions.cpu_rx, sessions.gsp,
                      rpc.RpcMessage(rpc.MEM_READ, _XFER.pack(req.cpr_addr, staging, req.size)), sessions.cvm_keys)
    sample = _record(sessions, READ, req.size)
    rpc.raise_for_status(status)
    if sessions.intercept is not None:
        sessions.intercept(staging, req.size)
    blob = ck.SealedBlob.unpack(machine.read(staging, ck.SealedBlob.packed_size(req.size)),
                                _XFER.pack(req.cpr_addr, staging, req.size))
    data = ck.open_blob(sessions.cpu_dma_rx, sessions.cvm_keys, blob)
    if data:
        machine.write(_private(sessions, len(data)), data)
    return data, sample


def write_cpr(machine: Machine, sessions: DmaSessions, req: TransferRequest, data: bytes) -> TimingSample:
    if req.direction != "write_cpr":
        raise SimError("write_cpr needs a write_cpr request")
    if not machine.cc_mode_active:
        raise SimError("DMA staging path requires CC mode")
    if len(data) != req.size:
        raise SimError("data length differs from request size")
    if not machine.cpr.contains(req.cpr_addr, req.size):
        raise AccessFault(f"CPR range [{req.cpr_addr:#x}, +{req.size:#x}) out of range")
    staging = req.staging_addr or _slot(sessions, req.size)
    if data:
        machine.write(_private(sessions, len(data)), data)
    blob = ck.seal(sessions.cpu_dma_tx, sessions.cvm_keys, data, _XFER.pack(req.cpr_addr, staging, req.size))
    machine.stage_write(staging, blob.pack(), "dma.staging", True, "cvm")
    if sessions.intercept is not None:
        sessions.intercept(staging, req.size)
    status = rpc.call(sessions.infra, sessions.cpu_tx, sessions.cpu_rx, sessions.gsp,
                      rpc.RpcMessage(rpc.MEM_WRITE, _XFER.pack(req.cpr_addr, staging, req.size)), sessions.cvm_keys)
    sample = _record(sessions, WRITE, req.size)
    rpc.raise_for_status(status)
    return sample


def reference_workload(rng: np.random.Generator, reads: int = WORKLOAD_READS, writes: int = WORKLOAD_WRITES,
                   sizes: Iterable[int] = SIZE_CLASSES) -> list[tuple[str, int]]:
    """The transfer mix (op, size) in a seeded shuffled order."""
    sizes = list(sizes)
    ops = [READ] * reads + [WRITE] * writes
    picks = rng.integers(0, len(sizes), size=len(ops))
    order = rng.permutation(len(ops))
    return [(ops[i], sizes[picks[i]]) for i in order]


def synthetic_samples(model: TimingModel, per_class: int, rng: np.random.Generator,
                      small_sizes: Iterable[int] = SIZE_CLASSES[:-1], large: int = 4096) -> list[TimingSample]:
    """Latency samples without driving the machine: ``per_class`` small and large draws."""
    small_sizes = list(small_sizes)
    out = []
    for i in range(per_class):
        s = small_sizes[i % len(small_sizes)]
        out.append(TimingSample(WRITE, s, sample_latency(model, s, rng)))
        out.append(TimingSample(WRITE, large, sample_latency(model, large, rng)))
    return out


def samples_to_csv(samples: Iterable[TimingSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op", "size", "micros"])
    for s in samples:
        w.writerow([s.op, s.size, f"{s.micros:.6f}"])
    return buf.getvalue()


def samples_from_csv(text: str) -> list[TimingSample]:
    rows = csv.DictReader(io.StringIO(text))
    if rows.fieldnames is None or [f.strip() for f in rows.fieldnames] != ["op", "size", "micros"]:
        raise ConfigError("timing CSV header must be op,size,micros")
    try:
        return [TimingSample(r["op"], int(r["size"]), float(r["micros"])) for r in rows]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"timing CSV line {rows.line_num}: {exc}") from None

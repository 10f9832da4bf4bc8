"""Evidence generation and the attestation verifier.

Certificates, reports and RIMs are canonical-JSON documents signed with
Ed25519. The device chain is ``[attestation, device_identity, provisioner,
model, root]``; the verifier swaps in its own root before checking anything,
then walks ``device_identity -> provisioner -> model -> root`` and finally the
attestation certificate, asking OCSP about each one.

Report slots 0..3 are the boot measurements (fsp, gsp_fmc, gsp_rm, sec2);
slots 4..63 are constants derived from the firmware versions. The driver RIM
covers slots 1..3 and 32..63, the VBIOS RIM slot 0 and 4..31.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import AttestationError, ConfigError, NotBooted
from .fabric import Machine, measure
from .trace import PRIVATE

NUM_RECORDS = 64
HASH_LEN = 48
SPEC_DMTF = 1
RIM_SCHEMA = "gpucc-sim/rim/v1"
ALG = "ed25519"
DEVICE_ORDER = ("attestation", "device_identity", "provisioner", "model", "root")
RIM_ORDER = ("rim_leaf", "rim_intermediate", "rim_root")
DRIVER_SLOTS = tuple([1, 2, 3] + list(range(32, 64)))
VBIOS_SLOTS = tuple([0] + list(range(4, 32)))
REASONS = ("chain_sig", "revoked", "ocsp_unknown", "report_sig", "stale_nonce", "rim_not_found",
           "rim_schema", "rim_chain", "rim_sig", "measurement_mismatch", "not_booted")


def canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _raw_pub(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def _ed_verify(pub_hex: str, sig_hex: str, msg: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes.fromhex(pub_hex)).verify(bytes.fromhex(sig_hex), msg)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def _unsigned(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k != "signature"}


def sign_doc(doc: dict, key: Ed25519PrivateKey) -> dict:
    out = _unsigned(doc)
    out["signature"] = key.sign(canonical(out)).hex()
    return out


def doc_signed_by(doc: dict, pub_hex: str) -> bool:
    return isinstance(doc, dict) and _ed_verify(pub_hex, str(doc.get("signature", "")), canonical(_unsigned(doc)))


def make_cert(subject: str, issuer: str, role: str, subject_key: Ed25519PrivateKey,
              issuer_key: Ed25519PrivateKey, serial: int) -> dict:
    return sign_doc({"subject": subject, "issuer": issuer, "role": role, "public_key": _raw_pub(subject_key).hex(),
                     "serial": serial, "alg": ALG}, issuer_key)


class VendorPki:
    """Every key and certificate of the vendor's two hierarchies, derived from one seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        names = DEVICE_ORDER + RIM_ORDER
        self.keys = {n: self._key(n) for n in names}
        self.serials = {n: int.from_bytes(hashlib.sha256(f"serial/{seed}/{n}".encode()).digest()[:8], "big")
                        for n in names}
        k, s = self.keys, self.serials
        subj = {"root": "GPUCC Root CA", "model": "GPUCC H100 Model CA", "provisioner": "GPUCC Provisioner CA",
                "device_identity": "GPUCC Device Identity", "attestation": "GPUCC Attestation",
                "rim_root": "GPUCC RIM Root CA", "rim_intermediate": "GPUCC RIM Intermediate CA",
                "rim_leaf": "GPUCC RIM Signer"}
        issuer = {"root": "root", "model": "root", "provisioner": "model", "device_identity": "provisioner",
                  "attestation": "device_identity", "rim_root": "rim_root", "rim_intermediate": "rim_root",
                  "rim_leaf": "rim_intermediate"}
        self.subjects = subj
        self.certs = {n: make_cert(subj[n], subj[issuer[n]], n, k[n], k[issuer[n]], s[n]) for n in names}

    def _key(self, label: str) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(hashlib.sha256(f"gpucc-sim/pki/{self.seed}/{label}".encode()).digest())

    @property
    def local_root(self) -> dict:
        return self.certs["root"]

    @property
    def local_rim_root(self) -> dict:
        return self.certs["rim_root"]

    def device_chain(self) -> list[dict]:
        return [self.certs[n] for n in DEVICE_ORDER]

    def rim_chain(self) -> list[dict]:
        return [self.certs["rim_leaf"], self.certs["rim_intermediate"]]


# -- device side --------------------------------------------------------------

@dataclass
class DeviceRoot:
    """The trusted device-root actor: owns the attestation key and the device-held certs."""

    pki: VendorPki
    driver_version: str = "550.54.14"
    vbios_version: str = "96.00.5e.00.01"

    def sign_report(self, report: dict) -> dict:
        return sign_doc(report, self.pki.keys["attestation"])


def config_measurement(slot: int, version: str) -> bytes:
    return hashlib.sha384(f"gpucc-sim/slot/{slot}/{version}".encode()).digest()


def expected_measurements(boot_hashes: list[bytes], driver_version: str, vbios_version: str) -> list[bytes]:
    out = []
    for i in range(NUM_RECORDS):
        if i < 4:
            out.append(boot_hashes[i])
        else:
            out.append(config_measurement(i, vbios_version if i in VBIOS_SLOTS else driver_version))
    return out


def build_report(hashes: list[bytes], nonce: bytes, driver_version: str, vbios_version: str) -> dict:
    return {
        "measurements": [{"index": i, "spec": SPEC_DMTF, "size": len(h), "hash": h.hex()} for i, h in enumerate(hashes)],
        "opaque": {"driver_version": driver_version, "vbios_version": vbios_version},
        "nonce": nonce.hex(),
    }


def provision_device(machine: Machine, pki: VendorPki, **versions) -> DeviceRoot:
    root = DeviceRoot(pki, **versions)
    machine.device.attestation = root
    return root


def collect_evidence(machine: Machine, nonce: bytes, driver_store: list[dict] | None = None) -> tuple[list[dict], dict]:
    """Return (device chain, signed report). Two certs come from the device, three from the driver."""
    dev = machine.device.attestation
    if machine.boot_state != "sec2_booted" or dev is None or len(machine.boot_measurements) != 4:
        raise NotBooted("attestation needs a completed secure boot")
    if len(nonce) != 32:
        raise ValueError("nonce must be 32 bytes")
    certs = dev.pki.certs
    store = driver_store if driver_store is not None else [certs["provisioner"], certs["model"], certs["root"]]
    for name in ("attestation", "device_identity"):
        machine.trace.emit("device_root", "evidence_cert", PRIVATE, cert=name, source="device")
    for c in store:
        machine.trace.emit("cvm", "evidence_cert", PRIVATE, cert=c.get("role"), source="driver")
    chain = [certs["attestation"], certs["device_identity"]] + list(store)
    hashes = expected_measurements(machine.boot_measurements, dev.driver_version, dev.vbios_version)
    report = dev.sign_report(build_report(hashes, nonce, dev.driver_version, dev.vbios_version))
    machine.trace.emit("device_root", "report_signed", PRIVATE, records=NUM_RECORDS)
    return chain, report


def make_rim(pki: VendorPki, target: str, rim_id: str, golden: dict[int, list[bytes]],
             schema_id: str = RIM_SCHEMA) -> dict:
    doc = {"schema_id": schema_id, "target": target, "id": rim_id,
           "golden": {str(i): [h.hex() for h in hs] for i, hs in sorted(golden.items())},
           "cert_chain": pki.rim_chain()}
    return sign_doc(doc, pki.keys["rim_leaf"])


def golden_rims(pki: VendorPki, boot_hashes: list[bytes], driver_version: str, vbios_version: str,
                extra: dict[int, list[bytes]] | None = None) -> tuple[dict, dict]:
    hashes = expected_measurements(boot_hashes, driver_version, vbios_version)
    extra = extra or {}
    g = {i: [hashes[i]] + list(extra.get(i, [])) for i in range(NUM_RECORDS)}
    drv = make_rim(pki, "driver", driver_version, {i: g[i] for i in DRIVER_SLOTS})
    vb = make_rim(pki, "vbios", vbios_version, {i: g[i] for i in VBIOS_SLOTS})
    return drv, vb


# -- services -------------------------------------------------------------------

class MockOcspService:
    """Serial -> good | revoked; serials it has never heard of answer unknown."""

    def __init__(self, statuses: dict[int, str] | None = None):
        self.statuses = {int(k): v for k, v in (statuses or {}).items()}
        self.queries: list[int] = []

    def query(self, serial: int) -> str:
        self.queries.append(int(serial))
        return self.statuses.get(int(serial), "unknown")

    @classmethod
    def for_pki(cls, pki: VendorPki, overrides: dict[str, str] | None = None) -> "MockOcspService":
        st = {pki.serials[n]: "good" for n in pki.serials}
        for name, status in (overrides or {}).items():
            st[pki.serials[name]] = status
        return cls(st)

    @classmethod
    def load(cls, path: str | Path) -> "MockOcspService":
        return cls(json.loads(Path(path).read_text()))

    def dump(self) -> dict[str, str]:
        return {str(k): v for k, v in sorted(self.statuses.items())}


class RimStore:
    def __init__(self, rims: dict[tuple[str, str], dict] | None = None):
        self.rims = dict(rims or {})
        self.fetches: list[tuple[str, str]] = []

    def put(self, rim: dict) -> None:
        self.rims[(rim.get("target"), rim.get("id"))] = rim

    def fetch(self, target: str, rim_id: str) -> dict:
        self.fetches.append((target, rim_id))
        try:
            return self.rims[(target, rim_id)]
        except KeyError:
            raise AttestationError("rim_not_found", f"no RIM for {target} {rim_id}") from None

    @staticmethod
    def filename(target: str, rim_id: str) -> str:
        return f"rim_{target}_{rim_id}.json"

    @classmethod
    def load(cls, directory: str | Path) -> "RimStore":
        store = cls()
        for p in sorted(Path(directory).glob("rim_*.json")):
            doc = json.loads(p.read_text())
            _, target, rim_id = p.stem.split("_", 2)
            store.rims[(target, rim_id)] = doc
        return store

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for (target, rim_id), doc in sorted(self.rims.items()):
            (d / self.filename(target, rim_id)).write_text(json.dumps(doc, indent=1, sort_keys=True))


@dataclass
class AttestationServices:
    ocsp: MockOcspService
    rim_store: RimStore
    local_root: dict
    local_rim_root: dict


@dataclass
class Verdict:
    result: str
    reasons: list[str] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.result == "pass"

    @classmethod
    def ok(cls) -> "Verdict":
        return cls("pass")

    @classmethod
    def fail(cls, reason: str, indices=(), detail: str = "") -> "Verdict":
        return cls("fail", [reason], list(indices), detail)

    def to_dict(self) -> dict:
        return {"result": self.result, "reasons": self.reasons, "indices": self.indices, "detail": self.detail}


# -- verifier -------------------------------------------------------------------

def _check_cert(cert: dict, role: str, issuer: dict, ocsp: MockOcspService | None, log: list | None) -> None:
    if not isinstance(cert, dict) or cert.get("role") != role:
        raise AttestationError("chain_sig", f"expected a {role} certificate")
    if cert.get("issuer") != issuer.get("subject") or not doc_signed_by(cert, str(issuer.get("public_key", ""))):
        raise AttestationError("chain_sig", f"{role} certificate does not verify under {issuer.get('role')}")
    if log is not None:
        log.append(role)
    if ocsp is not None:
        status = ocsp.query(cert.get("serial", -1))
        if status == "revoked":
            raise AttestationError("revoked", f"{role} certificate is revoked")
        if status != "good":
            raise AttestationError("ocsp_unknown", f"OCSP has no status for the {role} certificate")


def verify_device_chain(chain: list[dict], local_root: dict, ocsp_client: MockOcspService | None,
                        log: list | None = None) -> None:
    """Raise :class:`AttestationError` unless the chain anchors to ``local_root``."""
    if not isinstance(chain, list) or len(chain) != len(DEVICE_ORDER):
        raise AttestationError("chain_sig", "device chain must hold five certificates")
    chain = list(chain[:-1]) + [local_root]  # the in-evidence root is never consulted
    by_role = dict(zip(DEVICE_ORDER, chain))
    for role, issuer in (("device_identity", "provisioner"), ("provisioner", "model"), ("model", "root"),
                         ("root", "root")):
        _check_cert(by_role[role], role, by_role[issuer], ocsp_client, log)
    _check_cert(by_role["attestation"], "attestation", by_role["device_identity"], ocsp_client, log)


def verify_report(report: dict, attestation_cert: dict, nonce: bytes) -> None:
    if not doc_signed_by(report, str(attestation_cert.get("public_key", ""))):
        raise AttestationError("report_sig", "report signature does not verify")
    recs = report.get("measurements")
    if not isinstance(recs, list) or len(recs) != NUM_RECORDS:
        raise AttestationError("report_sig", "report must carry 64 measurement records")
    if report.get("nonce") != nonce.hex():
        raise AttestationError("stale_nonce", "report nonce does not match the challenge")


def _verify_rim(rim: dict, local_rim_root: dict, ocsp: MockOcspService | None) -> None:
    required = {"schema_id", "target", "id", "golden", "cert_chain", "signature"}
    if not isinstance(rim, dict) or rim.get("schema_id") != RIM_SCHEMA or not required <= set(rim):
        raise AttestationError("rim_schema", "RIM schema not recognised")
    if not isinstance(rim["golden"], dict) or not isinstance(rim["cert_chain"], list) or len(rim["cert_chain"]) != 2:
        raise AttestationError("rim_schema", "RIM fields malformed")
    chain = list(rim["cert_chain"]) + [local_rim_root]
    by_role = dict(zip(RIM_ORDER, chain))
    try:
        for role, issuer in (("rim_leaf", "rim_intermediate"), ("rim_intermediate", "rim_root"),
                             ("rim_root", "rim_root")):
            _check_cert(by_role[role], role, by_role[issuer], ocsp, None)
    except AttestationError as exc:
        if exc.reason == "chain_sig":
            raise AttestationError("rim_chain", str(exc)) from None
        raise
    if not doc_signed_by(rim, by_role["rim_leaf"]["public_key"]):
        raise AttestationError("rim_sig", "RIM signature does not verify under its leaf")


def fetch_and_verify_rims(opaque: dict, rim_store: RimStore, local_rim_root: dict,
                          ocsp: MockOcspService | None = None) -> tuple[dict, dict]:
    out = []
    for target in ("driver", "vbios"):
        rim = rim_store.fetch(target, str(opaque.get(f"{target}_version")))
        _verify_rim(rim, local_rim_root, ocsp)
        if rim.get("target") != target:
            raise AttestationError("rim_schema", f"RIM target is {rim.get('target')}, wanted {target}")
        out.append(rim)
    return out[0], out[1]


def compare_measurements(report: dict, rims: tuple[dict, ...]) -> Verdict:
    golden: dict[int, set[str]] = {}
    for rim in rims:
        for idx, hashes in rim["golden"].items():
            golden.setdefault(int(idx), set()).update(hashes)
    bad = [r["index"] for r in report["measurements"] if r["hash"] not in golden.get(r["index"], set())]
    if bad:
        return Verdict.fail("measurement_mismatch", bad, f"{len(bad)} records outside the golden lists")
    return Verdict.ok()


def verify_evidence(chain: list[dict], report: dict, nonce: bytes, services: AttestationServices,
                    log: list | None = None) -> Verdict:
    """Chain, then report, then RIMs, then measurements; the first failure decides."""
    stage = "chain"
    try:
        verify_device_chain(chain, services.local_root, services.ocsp, log)
        stage = "report"
        verify_report(report, chain[0], nonce)
        stage = "rims"
        if log is not None:
            log.append("rim_fetch")
        rims = fetch_and_verify_rims(report["opaque"], services.rim_store, services.local_rim_root, services.ocsp)
    except AttestationError as exc:
        return Verdict.fail(exc.reason, exc.indices, f"{stage}: {exc}")
    return compare_measurements(report, rims)


def set_ready_state(machine: Machine) -> None:
    machine.ready = True
    machine.trace.emit("cvm", "ready", PRIVATE, epoch=machine.epoch)


def attest(machine: Machine, services: AttestationServices, policy: dict | None = None, rng=None) -> Verdict:
    policy = policy or {}
    if rng is None:
        import numpy as np
        rng = np.random.default_rng(machine.config.seed)
    nonce = rng.bytes(32) if hasattr(rng, "bytes") else rng.randbytes(32)
    machine.trace.emit("cvm", "attest_start", PRIVATE, nonce=nonce.hex())
    try:
        chain, report = collect_evidence(machine, nonce)
    except NotBooted as exc:
        v = Verdict.fail("not_booted", detail=str(exc))
        machine.trace.emit("cvm", "verdict", PRIVATE, **v.to_dict())
        return v
    if policy.get("substitute_report") is not None:
        report = policy["substitute_report"]
    log: list = []
    v = verify_evidence(chain, report, policy.get("expected_nonce", nonce), services, log)
    for step in log:
        machine.trace.emit("verifier", "verify_step", PRIVATE, step=step)
    machine.trace.emit("cvm", "verdict", PRIVATE, **v.to_dict())
    if v.passed and policy.get("set_ready", True):
        set_ready_state(machine)
    return v


def default_services(pki: VendorPki, boot_hashes: list[bytes], dev: DeviceRoot,
                     ocsp_overrides: dict[str, str] | None = None) -> AttestationServices:
    store = RimStore()
    for rim in golden_rims(pki, boot_hashes, dev.driver_version, dev.vbios_version):
        store.put(rim)
    return AttestationServices(MockOcspService.for_pki(pki, ocsp_overrides), store, pki.local_root, pki.local_rim_root)


def boot_hashes_for(images: dict[str, bytes]) -> list[bytes]:
    return [measure(images[s]) for s in ("fsp", "gsp_fmc", "gsp_rm", "sec2")]


# -- fixture matrix -------------------------------------------------------------

MATRIX_EXPECTED = {
    "clean": None,
    "garbage_root": None,
    "revoked_cert": "revoked",
    "bad_chain_sig": "chain_sig",
    "bad_report_sig": "report_sig",
    "stale_nonce": "stale_nonce",
    "bad_rim_schema": "rim_schema",
    "bad_rim_chain": "rim_chain",
    "perturbed_measurement": "measurement_mismatch",
}


def _flip_sig(doc: dict) -> dict:
    out = dict(doc)
    sig = bytearray(bytes.fromhex(out["signature"]))
    sig[0] ^= 1
    out["signature"] = sig.hex()
    return out


def build_matrix(machine: Machine, pki: VendorPki, golden_boot: list[bytes], nonce: bytes,
                 perturb_index: int = 2) -> dict[str, tuple[list[dict], dict, bytes, AttestationServices]]:
    """Clean evidence plus one negative fixture per failure class, as (chain, report, nonce, services)."""
    dev = machine.device.attestation
    chain, report = collect_evidence(machine, nonce)

    def services(**kw) -> AttestationServices:
        return default_services(pki, golden_boot, dev, kw.get("ocsp"))

    cases = {"clean": (chain, report, nonce, services())}
    garbage = {"role": "root", "subject": "Garbage CA", "issuer": "Garbage CA", "public_key": "00" * 32,
               "serial": 1, "signature": "00" * 64}
    cases["garbage_root"] = (chain[:-1] + [garbage], report, nonce, services())
    cases["revoked_cert"] = (chain, report, nonce, services(ocsp={"provisioner": "revoked"}))
    bad_chain = list(chain)
    bad_chain[1] = _flip_sig(chain[1])
    cases["bad_chain_sig"] = (bad_chain, report, nonce, services())
    cases["bad_report_sig"] = (chain, _flip_sig(report), nonce, services())
    cases["stale_nonce"] = (chain, report, hashlib.sha256(b"stale" + nonce).digest(), services())

    svc = services()
    drv = dict(svc.rim_store.fetch("driver", dev.driver_version))
    drv["schema_id"] = "gpucc-sim/rim/v0"
    svc.rim_store.put(sign_doc(drv, pki.keys["rim_leaf"]))
    cases["bad_rim_schema"] = (chain, report, nonce, svc)

    svc = services()
    rogue = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"gpucc-sim/rogue-rim-ca").digest())
    inter = make_cert(pki.subjects["rim_intermediate"], pki.subjects["rim_root"], "rim_intermediate",
                      pki.keys["rim_intermediate"], rogue, pki.serials["rim_intermediate"])
    drv = dict(svc.rim_store.fetch("driver", dev.driver_version))
    drv["cert_chain"] = [pki.certs["rim_leaf"], inter]
    svc.rim_store.put(sign_doc(drv, pki.keys["rim_leaf"]))
    cases["bad_rim_chain"] = (chain, report, nonce, svc)

    body = {k: v for k, v in report.items() if k != "signature"}
    recs = [dict(r) for r in body["measurements"]]
    h = bytearray(bytes.fromhex(recs[perturb_index]["hash"]))
    h[-1] ^= 0x01
    recs[perturb_index]["hash"] = h.hex()
    cases["perturbed_measurement"] = (chain, dev.sign_report({**body, "measurements": recs}), nonce, services())
    return cases


def run_matrix(machine: Machine, pki: VendorPki, golden_boot: list[bytes], nonce: bytes) -> dict[str, dict]:
    """Verify every fixture; each entry reports the verdict and whether it is the expected one."""
    out = {}
    for name, (chain, report, n, svc) in build_matrix(machine, pki, golden_boot, nonce).items():
        log: list = []
        v = verify_evidence(chain, report, n, svc, log)
        want = MATRIX_EXPECTED[name]
        ok = v.passed if want is None else (not v.passed and v.reasons == [want])
        out[name] = {**v.to_dict(), "expected": want or "pass", "as_expected": ok, "order": log}
        machine.trace.emit("verifier", "matrix_case", PRIVATE, case=name, result=v.result, reasons=v.reasons,
                           as_expected=ok)
    return out


# -- evidence bundles on disk ----------------------------------------------------

def export_bundle(machine: Machine, services: AttestationServices, nonce: bytes, out: str | Path) -> Path:
    """Write evidence/{chain,report,ocsp}.json, rims/, root.json, rim_root.json and nonce.txt."""
    out = Path(out)
    ev = out / "evidence"
    ev.mkdir(parents=True, exist_ok=True)
    chain, report = collect_evidence(machine, nonce)
    for name, doc in (("chain.json", chain), ("report.json", report), ("ocsp.json", services.ocsp.dump())):
        (ev / name).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    services.rim_store.save(out / "rims")
    (out / "root.json").write_text(json.dumps(services.local_root, indent=1, sort_keys=True) + "\n")
    (out / "rim_root.json").write_text(json.dumps(services.local_rim_root, indent=1, sort_keys=True) + "\n")
    (out / "nonce.txt").write_text(nonce.hex() + "\n")
    return out


def verify_bundle(evidence: str | Path, rim_store: str | Path, trust_anchor: str | Path,
                  rim_trust_anchor: str | Path, nonce: bytes, ocsp: str | Path | None = None) -> Verdict:
    """Verify an on-disk evidence bundle; OCSP answers default to evidence/ocsp.json."""
    ev = Path(evidence)
    try:
        chain = json.loads((ev / "chain.json").read_text())
        report = json.loads((ev / "report.json").read_text())
        services = AttestationServices(
            MockOcspService.load(ocsp if ocsp is not None else ev / "ocsp.json"), RimStore.load(rim_store),
            json.loads(Path(trust_anchor).read_text()), json.loads(Path(rim_trust_anchor).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load attestation inputs: {exc}") from None
    return verify_evidence(chain, report, nonce, services)

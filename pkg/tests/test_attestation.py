import copy
import json

import numpy as np
import pytest

import oracles
from conftest import FIXTURES
from gpucc_sim import attestation as att
from gpucc_sim import fabric as fab
from gpucc_sim import system as sysm
from gpucc_sim.trace import Trace

ATT = FIXTURES / "attestation"
EXPECTED = json.loads((ATT / "expected.json").read_text())


@pytest.fixture
def sa(make_system):
    return make_system(stages=("boot", "attestation"))


def nonce():
    return np.random.default_rng(5).bytes(32)


def bundle_verdict(case):
    d = ATT / case
    return att.verify_bundle(d / "evidence", d / "rims", ATT / "root.json", ATT / "rim_root.json",
                             bytes.fromhex((d / "nonce.txt").read_text().strip()))


# -- frozen fixtures ------------------------------------------------------------------

def test_fixture_matrix_is_complete():
    assert set(EXPECTED) == set(att.MATRIX_EXPECTED)
    assert sorted(c for c, r in EXPECTED.items() if r == "pass") == ["clean", "garbage_root"]


@pytest.mark.parametrize("case", sorted(EXPECTED))
def test_fixture_bundle_verdicts(case):
    v = bundle_verdict(case)
    if EXPECTED[case] == "pass":
        assert v.passed, v.to_dict()
    else:
        assert not v.passed and v.reasons == [EXPECTED[case]], v.to_dict()


def test_fixture_signatures_check_out_under_independent_ed25519():
    root = json.loads((ATT / "root.json").read_text())
    chain = json.loads((ATT / "clean/evidence/chain.json").read_text())
    report = json.loads((ATT / "clean/evidence/report.json").read_text())
    pub = {c["role"]: bytes.fromhex(c["public_key"]) for c in chain[:-1]}
    pub["root"] = bytes.fromhex(root["public_key"])
    issuer_role = {"attestation": "device_identity", "device_identity": "provisioner", "provisioner": "model",
                   "model": "root"}
    for cert in chain[:-1]:
        assert oracles.ed25519_verify(pub[issuer_role[cert["role"]]], att.canonical(att._unsigned(cert)),
                                      bytes.fromhex(cert["signature"]))
    msg = att.canonical(att._unsigned(report))
    sig = bytes.fromhex(report["signature"])
    assert oracles.ed25519_verify(pub["attestation"], msg, sig)
    forged = bytearray(sig)
    forged[5] ^= 1
    assert not oracles.ed25519_verify(pub["attestation"], msg, bytes(forged))


def test_oracle_rfc8032_vector():
    sk = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    pk = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
    sig = bytes.fromhex("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bac"
                        "c61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")
    assert oracles.ed25519_public_key(sk) == pk
    assert oracles.ed25519_verify(pk, b"", sig)


def test_report_layout():
    report = json.loads((ATT / "clean/evidence/report.json").read_text())
    recs = report["measurements"]
    assert len(recs) == att.NUM_RECORDS == 64
    assert [r["index"] for r in recs] == list(range(64))
    assert all(len(bytes.fromhex(r["hash"])) == att.HASH_LEN for r in recs)


# -- live matrix and properties -----------------------------------------------------------

def test_live_matrix(sa):
    res = att.run_matrix(sa.machine, sa.pki, sysm.golden_boot_hashes(sa.config), nonce())
    assert all(r["as_expected"] for r in res.values()), res
    assert [k for k, r in res.items() if r["result"] == "pass"] == ["clean", "garbage_root"]


def test_perturbed_measurement_reports_index(sa):
    cases = att.build_matrix(sa.machine, sa.pki, sysm.golden_boot_hashes(sa.config), nonce(), perturb_index=7)
    chain, report, n, svc = cases["perturbed_measurement"]
    v = att.verify_evidence(chain, report, n, svc)
    assert v.reasons == ["measurement_mismatch"] and v.indices == [7]


def test_verification_order(sa):
    chain, report = att.collect_evidence(sa.machine, nonce())
    log = []
    assert att.verify_evidence(chain, report, nonce(), sa.services, log).passed
    assert log[:4] == ["device_identity", "provisioner", "model", "root"]
    assert log.index("attestation") < log.index("rim_fetch")


def test_reversed_chain_rejected(sa):
    chain, report = att.collect_evidence(sa.machine, nonce())
    v = att.verify_evidence(list(reversed(chain)), report, nonce(), sa.services)
    assert v.reasons == ["chain_sig"]


@pytest.mark.parametrize("garbage", [{}, {"role": "root"}, None, {"role": "root", "public_key": "zz"}])
def test_in_evidence_root_is_ignored(sa, garbage):
    chain, report = att.collect_evidence(sa.machine, nonce())
    assert att.verify_evidence(chain[:-1] + [garbage], report, nonce(), sa.services).passed


def test_foreign_root_anchor_fails(sa):
    chain, report = att.collect_evidence(sa.machine, nonce())
    other = att.VendorPki(seed=99)
    svc = copy.copy(sa.services)
    svc.local_root = other.local_root
    assert att.verify_evidence(chain, report, nonce(), svc).reasons == ["chain_sig"]


def test_ocsp_unknown_and_revoked_intermediates(sa):
    chain, report = att.collect_evidence(sa.machine, nonce())
    svc = copy.copy(sa.services)
    svc.ocsp = att.MockOcspService({})
    assert att.verify_evidence(chain, report, nonce(), svc).reasons == ["ocsp_unknown"]
    svc.ocsp = att.MockOcspService.for_pki(sa.pki, {"rim_leaf": "revoked"})
    assert att.verify_evidence(chain, report, nonce(), svc).reasons == ["revoked"]


def test_missing_rim(sa):
    chain, report = att.collect_evidence(sa.machine, nonce())
    svc = copy.copy(sa.services)
    svc.rim_store = att.RimStore()
    assert att.verify_evidence(chain, report, nonce(), svc).reasons == ["rim_not_found"]


def test_tampered_firmware_fails_measurements(make_system):
    cfg = sysm.SystemConfig.small(seed=0)
    s = sysm.build_system(cfg, Trace(level=0), stages=("boot", "attestation"))
    golden = sysm.golden_boot_hashes(cfg)
    bad = list(golden)
    bad[2] = fab.measure(b"someone else's gsp_rm")
    svc = att.default_services(s.pki, bad, s.device_root)
    v = att.attest(s.machine, svc, rng=np.random.default_rng(1))
    assert v.reasons == ["measurement_mismatch"] and not s.machine.ready


def test_attest_sets_ready(sa):
    v = att.attest(sa.machine, sa.services, rng=np.random.default_rng(2))
    assert v.passed and sa.machine.ready
    assert sa.machine.trace.events("ready")


def test_attest_before_boot(make_system):
    s = make_system(stages=("boot", "attestation"))
    from gpucc_sim import sec2_engine
    sec2_engine.soft_reset(s.machine)
    v = att.attest(s.machine, s.services, rng=np.random.default_rng(3))
    assert v.reasons == ["not_booted"]


def test_stale_nonce_via_policy(sa):
    v = att.attest(sa.machine, sa.services, {"expected_nonce": bytes(32)}, np.random.default_rng(4))
    assert v.reasons == ["stale_nonce"] and not sa.machine.ready


def test_export_and_verify_bundle_roundtrip(sa, tmp_path):
    n = nonce()
    out = att.export_bundle(sa.machine, sa.services, n, tmp_path / "b")
    v = att.verify_bundle(out / "evidence", out / "rims", out / "root.json", out / "rim_root.json", n)
    assert v.passed
    v = att.verify_bundle(out / "evidence", out / "rims", out / "root.json", out / "rim_root.json", bytes(32))
    assert v.reasons == ["stale_nonce"]


def test_canonical_form():
    assert att.canonical({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'

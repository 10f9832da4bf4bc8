import dataclasses
import time

import pytest

from gpucc_sim import bar0_map
from gpucc_sim import fabric as fab
from gpucc_sim import adversary as adv
from gpucc_sim.errors import AccessFault, BootFailure, SimError
from gpucc_sim.trace import Trace


def fresh(cc=True, **kw):
    m = fab.build_machine(fab.MachineConfig.small(**kw), Trace(level=1))
    fab.set_cc_mode(m, cc)
    return m


def booted(cc=True, **kw):
    m = fresh(cc, **kw)
    fab.secure_boot(m, fab.make_firmware_bundle(m.config.seed))
    return m


# -- boot chain -----------------------------------------------------------------

def test_clean_boot_measures_every_stage():
    m = fresh()
    bundle = fab.make_firmware_bundle(0)
    rep = fab.secure_boot(m, bundle)
    assert rep.success and rep.boot_state == "sec2_booted" and rep.cc_mode_active
    assert [s for s, _ in rep.measurements] == list(fab.BOOT_STAGES)
    for stage, h in rep.measurements:
        assert h == fab.measure(bundle.images[stage]) and len(h) == 48
    verified = m.trace.events("verify")
    assert [e.meta["stage"] for e in verified] == list(fab.BOOT_STAGES)


@pytest.mark.parametrize("stage,state_before", [("fsp", "cold"), ("gsp_fmc", "fsp_booted"),
                                                ("gsp_rm", "fsp_booted"), ("sec2", "gsp_booted")])
def test_tampered_stage_halts_boot(stage, state_before):
    m = fresh()
    bundle = fab.make_firmware_bundle(0).replace_image(stage, b"evil " + stage.encode())
    with pytest.raises(BootFailure) as ei:
        fab.secure_boot(m, bundle)
    rep = ei.value.report
    assert m.boot_state == f"failed:{stage}" and rep.failed_stage == stage and not rep.success
    assert len(rep.measurements) == fab.BOOT_STAGES.index(stage)


def test_resigned_with_foreign_key_still_fails():
    m = fresh()
    rogue = fab.vendor_signing_key(99)
    bundle = fab.make_firmware_bundle(0).replace_image("gsp_rm", b"patched", resign_with=rogue)
    with pytest.raises(BootFailure):
        fab.secure_boot(m, bundle)


def test_resigned_with_vendor_key_boots_with_new_measurement():
    m = fresh()
    bundle = fab.make_firmware_bundle(0).replace_image("gsp_rm", b"v2", resign_with=fab.vendor_signing_key(0))
    rep = fab.secure_boot(m, bundle)
    assert dict(rep.measurements)["gsp_rm"] == fab.measure(b"v2")


def test_erot_signature_checked_when_present():
    good = fab.make_firmware_bundle(0, erot_present=True)
    fab.secure_boot(fresh(), good)
    bad = dataclasses.replace(good, erot_signature=bytes(64))
    m = fresh()
    with pytest.raises(BootFailure):
        fab.secure_boot(m, bad)
    assert m.boot_state == "failed:fsp"


def test_boot_requires_cold_machine():
    m = booted()
    with pytest.raises(SimError):
        fab.secure_boot(m, fab.make_firmware_bundle(0))


# -- CC mode and memory access -------------------------------------------------------

def test_cc_mode_latches_at_next_boot():
    m = fresh(cc=False)
    fab.set_cc_mode(m, True)
    assert not m.cc_mode_active
    fab.secure_boot(m, fab.make_firmware_bundle(0))
    assert m.cc_mode_active and m.epoch == 1


def test_host_cannot_touch_cpr_in_cc_mode():
    m = booted()
    addr = m.cpr.base + 0x100
    m.write(addr, b"secret")
    assert fab.host_read(m, addr, 6).is_fault
    assert fab.host_write(m, addr, b"x").is_fault
    assert m.read(addr, 6) == b"secret"


def test_host_reads_cpr_without_cc():
    m = booted(cc=False)
    m.write(m.cpr.base, b"plain")
    assert fab.host_read(m, m.cpr.base, 5).data == b"plain"


def test_cvm_private_is_opaque_to_host():
    m = booted()
    m.write(m.cvm_private.base, b"A" * 64)
    res = fab.host_read(m, m.cvm_private.base, 64)
    assert res.kind == "opaque" and res.data != b"A" * 64 and len(res.data) == 64
    assert fab.host_write(m, m.cvm_private.base, b"x").is_fault


def test_staging_is_shared_and_vidmem_writable():
    m = booted()
    assert fab.host_write(m, m.shared_staging.base, b"hi") == fab.OK
    assert fab.host_read(m, m.shared_staging.base, 2).data == b"hi"
    assert fab.host_write(m, m.vidmem_unprotected.base, b"v") == fab.OK


def test_cross_region_access_faults():
    m = booted()
    with pytest.raises(AccessFault):
        m.read(m.cvm_private.end - 2, 4)


def test_cpr_covers_configured_fraction():
    m = booted()
    gpu = m.cpr.size + m.vidmem_unprotected.size
    assert m.cpr.size / gpu == pytest.approx(0.9, abs=0.01)


def test_host_dump_returns_contiguous_view():
    m = booted()
    base, data = fab.host_dump(m)
    assert base == m.cvm_private.base
    assert len(data) == m.cvm_private.size + m.shared_staging.size


def test_staging_writes_are_labelled():
    m = booted()
    addr = m.alloc(fab.SHARED, 64)
    m.stage_write(addr, b"z" * 8, "dma.staging", True)
    assert m.staging_log[-1] == (addr, b"z" * 8, "dma.staging", True)
    assert m.surface_stats[("dma.staging", True)] == [1, 8]
    with pytest.raises(AccessFault):
        m.stage_write(m.cpr.base, b"x", "dma.staging", True)


# -- BAR0 ---------------------------------------------------------------------------

def test_bar0_cc_audit_counts():
    m = booted()
    t0 = time.perf_counter()
    stats = adv.audit_bar0(m)
    assert time.perf_counter() - t0 < 5
    assert stats.total == 0x400000 == bar0_map.BAR0_WORDS
    assert stats.values == 1042
    pct = stats.to_dict()["percent"]
    assert pct["zeros"] == 99.78 and pct["errors"] == 0.19


def test_bar0_raw_audit_counts():
    m = booted(cc=False)
    pct = adv.audit_bar0(m).to_dict()["percent"]
    assert pct["values"] == 7.94 and pct["errors"] == 80.25


def test_bar0_word_classes():
    assert fab.AccessResult.of_word(0).kind == "zeros"
    assert fab.AccessResult.of_word(0xBAD00123).kind == "error"
    assert fab.AccessResult.of_word(0x12345).kind == "value"


def test_bar0_alignment_and_range():
    m = booted()
    with pytest.raises(AccessFault):
        fab.bar0_read(m, 2)
    with pytest.raises(AccessFault):
        fab.bar0_read(m, bar0_map.BAR0_SIZE)


def test_bar0_role_registers_track_live_values():
    m = booted()
    off = m.bar0_role_offset(bar0_map.ROLE_FAULT_PUT_REPLAYABLE)
    m.set_bar0_role(bar0_map.ROLE_FAULT_PUT_REPLAYABLE, 5)
    assert fab.bar0_read(m, off).word == bar0_map.ROLE_VALID_BIT | 5


def test_bar0_only_doorbell_accepts_writes():
    m = booted()
    door = m.bar0_role_offset(bar0_map.ROLE_DOORBELL)
    fab.bar0_write(m, door, 7)
    before = fab.bar0_read(m, 0).word
    fab.bar0_write(m, 0, 0xFFFF)
    assert m.doorbells == [7] and fab.bar0_read(m, 0).word == before


def test_bar0_manifest_roundtrip(tmp_path):
    import json
    p = tmp_path / "cc.json"
    p.write_text(json.dumps(bar0_map.default_manifest(True)))
    m = booted(cc_manifest=str(p))
    assert adv.audit_bar0(m).values == 1042


# -- epochs ---------------------------------------------------------------------------

def test_reboot_revokes_previous_key_tables():
    from gpucc_sim import crypto_keys as ck
    m = booted()
    keys = ck.derive_all_keys(ck.establish_session(bytes(32), bytes(32)))
    m.register_key_table(keys)
    m.boot_state = "cold"
    fab.secure_boot(m, fab.make_firmware_bundle(0))
    assert keys.revoked and m.epoch == 2

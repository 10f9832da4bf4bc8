import struct

import pytest

from gpucc_sim import adversary as adv
from gpucc_sim import crypto_keys as ck
from gpucc_sim import fabric as fab
from gpucc_sim import system as sysm
from gpucc_sim import uvm_submission as uvm
from gpucc_sim.channel import CE_NOP, Method
from gpucc_sim.errors import AuthError, ReplayError, SimError, SingletonViolation


@pytest.fixture
def su(make_system):
    return make_system(stages=("boot", "rpc", "faults", "uvm"))


def cycle_events(trace, wlc_id, cycle):
    out = []
    for e in trace.events("wlc_decrypt", "wlc_run", "lcic_advance"):
        owner = e.meta["wlc"] if e.event == "lcic_advance" else e.meta["channel"]
        if owner == wlc_id and e.meta["cycle"] == cycle:
            out.append(e.event)
    return out


def target(s, n=64):
    return s.machine.alloc(fab.CPR, n)


def test_bootstrap_builds_sixteen_triples(su):
    setup = su.uvm
    assert len(setup.wlc) == len(setup.lcic) == len(setup.ce) == uvm.NUM_WLC == 16
    for w, l, c in zip(setup.wlc, setup.lcic, setup.ce):
        assert w.location == l.location == c.location == "cpr"
        assert w.lce == l.lce != c.lce
        assert all(uvm.is_operational(su.machine, ch) for ch in (w, l, c))
    assert uvm.wlc_gpput(su.machine, setup.wlc[0]) == 2
    assert su.machine.trace.events("bootstrap_done")


def test_sec2_channel_is_singleton(su):
    with pytest.raises(SingletonViolation):
        uvm.create_sec2_channel(su.machine, su.cvm_keys)


def test_unsigned_bootstrap_aborts(make_system):
    s = make_system(stages=("boot",))
    ch = uvm.create_sec2_channel(s.machine, s.cvm_keys, s.cvm_ring)
    with pytest.raises(AuthError):
        uvm.bootstrap_wlc_lcic(s.machine, ch, sign=False)
    assert s.machine.trace.events("bootstrap_abort")
    assert not any(uvm.is_operational(s.machine, c) for c in s.machine.device.sec2.channel_objs.values())


def test_100_launches_alternate_and_advance_by_two(su):
    m, setup = su.machine, su.uvm
    canaries = [sysm.canary(su, f"uvm{i}", 48) for i in range(4)]
    dst = target(su)
    for n in range(100):
        i = n % 16
        w, c = setup.wlc[i], setup.ce[i]
        methods = uvm.pte_memset_push(dst, 64, n & 0xFF, payload=canaries[n % 4])
        tok = uvm.launch_uvm_push(m, setup, w, c, methods)
        assert tok.gpput_after - tok.gpput_before == 2
        assert cycle_events(m.trace, w.id, tok.cycle) == ["wlc_decrypt", "wlc_run", "lcic_advance"]
        assert m.read(dst, 64) == bytes([n & 0xFF]) * 64
    staged = b"".join(data for _, data, _, _ in m.staging_log)
    _, dump = fab.host_dump(m)
    for cn in canaries:
        assert staged.count(cn) == 0 and dump.count(cn) == 0
    assert not adv.canary_scanner(canaries)(dump)


def test_wlc_and_ce_semaphores_advance(su):
    m, setup = su.machine, su.uvm
    w, c = setup.wlc[3], setup.ce[3]
    dst = target(su)
    for k in range(1, 4):
        uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8))
        assert uvm.poll_semaphore(w, su.cvm_keys) == k
        assert uvm.poll_semaphore(c, su.cvm_keys) == k


def test_semaphore_rollback_detected(su):
    m, setup = su.machine, su.uvm
    w, c = setup.wlc[0], setup.ce[0]
    dst = target(su)
    uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8))
    size = ck.SealedBlob.packed_size(8)
    old = m.read(w.tracking_semaphore_addr, size)
    uvm.poll_semaphore(w, su.cvm_keys)
    uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8))
    uvm.poll_semaphore(w, su.cvm_keys)
    m.write(w.tracking_semaphore_addr, old)
    with pytest.raises(ReplayError):
        uvm.poll_semaphore(w, su.cvm_keys)


def test_semaphore_under_wrong_key_rejected(su):
    m, setup = su.machine, su.uvm
    w, c = setup.wlc[0], setup.ce[0]
    uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(target(su), 8))
    other = setup.wlc[1].keys["d2h"]
    with pytest.raises(AuthError):
        uvm.poll_semaphore(w, su.cvm_keys, key_id=other)


@pytest.mark.parametrize("kind", ["uvm", "run"])
def test_tampered_push_aborts_cycle(su, kind):
    m, setup = su.machine, su.uvm
    w, c = setup.wlc[5], setup.ce[5]
    dst = target(su)
    m.write(dst, b"\x77" * 8)

    def hook(k, addr, length):
        if k == kind:
            adv.tamper(m, addr + ck.IV_LEN + ck.TAG_LEN, adv.flip_bit(2))

    gp = uvm.wlc_gpput(m, w)
    with pytest.raises(AuthError):
        uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8), intercept=hook)
    assert m.read(dst, 8) == b"\x77" * 8
    assert uvm.wlc_gpput(m, w) == gp
    assert m.trace.events("wlc_abort")[-1].meta["stage"] == ("decrypt_push" if kind == "run" else "run_push")


def test_replayed_run_push_rejected(su):
    m, setup = su.machine, su.uvm
    w, c = setup.wlc[2], setup.ce[2]
    dst = target(su)
    saved = {}

    def grab(k, addr, length):
        if k == "run":
            saved["run"] = m.read(addr, ck.SealedBlob.packed_size(length))

    uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8), intercept=grab)

    def replay(k, addr, length):
        if k == "run":
            m.write(addr, saved["run"])

    with pytest.raises(ReplayError):
        uvm.launch_uvm_push(m, setup, w, c, uvm.pte_memset_push(dst, 8, 1), intercept=replay)


def test_ce_must_differ_from_wlc_engine(su):
    setup = su.uvm
    same = next(c for c in setup.ce if c.lce == setup.wlc[0].lce) if any(
        c.lce == setup.wlc[0].lce for c in setup.ce) else None
    if same is None:
        pytest.skip("layout never pairs a CE with the WLC engine")
    with pytest.raises(SimError):
        uvm.launch_uvm_push(su.machine, setup, setup.wlc[0], same, [])


def test_wrong_roles_rejected(su):
    setup = su.uvm
    with pytest.raises(SimError):
        uvm.launch_uvm_push(su.machine, setup, setup.ce[0], setup.wlc[1], [])


def test_oversized_push_rejected(su):
    setup = su.uvm
    big = [Method(CE_NOP, (0,) * 8)] * 100
    with pytest.raises(SimError):
        uvm.launch_uvm_push(su.machine, setup, setup.wlc[0], setup.ce[0], big)


def test_out_of_range_memset_faults(su):
    m, setup = su.machine, su.uvm
    tok = uvm.launch_uvm_push(m, setup, setup.wlc[1], setup.ce[1],
                              uvm.pte_memset_push(m.shared_staging.base, 8))
    assert tok.fault and m.trace.events("ce_blocked")


def test_pte_memset_push_payload_words():
    methods = uvm.pte_memset_push(0x1000, 16, 0, payload=b"A" * 70)
    assert methods[0].args == (0x1000, 16, 0)
    words = b"".join(struct.pack("<Q", w) for mth in methods[1:] for w in mth.args)
    assert words[:70] == b"A" * 70 and len(words) == 72

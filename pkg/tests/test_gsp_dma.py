import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpucc_sim import adversary as adv
from gpucc_sim import fabric as fab
from gpucc_sim import gsp_dma as dma
from gpucc_sim.errors import AccessFault, AuthError, ConfigError, InsufficientSamples, ReplayError


@pytest.fixture
def sysd(make_system):
    return make_system(stages=("boot", "rpc"))


def cpr_buf(s, size=8192):
    return s.machine.alloc(fab.CPR, size)


def test_write_then_read_roundtrip(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    data = np.random.default_rng(3).bytes(4096)
    dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, 4096), data)
    assert m.read(addr, 4096) == data
    back, sample = dma.read_cpr(m, d, dma.TransferRequest("read_cpr", addr, 0, 4096))
    assert back == data and sample.op == dma.READ and sample.size == 4096


def test_staging_holds_ciphertext_only(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    secret = b"CANARY-dma-" + bytes(range(64))
    dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, len(secret)), secret)
    dma.read_cpr(m, d, dma.TransferRequest("read_cpr", addr, 0, len(secret)))
    _, dump = fab.host_dump(m)
    assert secret not in dump
    assert all(sealed for _, _, surf, sealed in m.staging_log if surf == "dma.staging")


def test_tampered_read_rejected(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    d.intercept = lambda staging, size: adv.tamper(m, staging + 30, adv.flip_bit(0))
    with pytest.raises(AuthError):
        dma.read_cpr(m, d, dma.TransferRequest("read_cpr", addr, 0, 64))


def test_tampered_write_never_lands(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    d.intercept = lambda staging, size: adv.tamper(m, staging + 40, adv.flip_bit(3))
    with pytest.raises(AuthError):
        dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, 64), b"\x55" * 64)
    assert m.read(addr, 64) == bytes(64)


def test_replayed_staging_blob_rejected(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    captured = {}

    def grab(staging, size):
        captured.setdefault("blob", m.read(staging, size + 28))

    d.intercept = grab
    dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, 32), b"A" * 32)

    def replay(staging, size):
        m.write(staging, captured["blob"])

    d.intercept = replay
    with pytest.raises(ReplayError):
        dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, 32), b"B" * 32)
    assert m.read(addr, 32) == b"A" * 32


def test_out_of_range_transfer(sysd):
    m, d = sysd.machine, sysd.dma
    with pytest.raises(AccessFault):
        dma.write_cpr(m, d, dma.TransferRequest("write_cpr", m.vidmem_unprotected.base, 0, 16), bytes(16))
    with pytest.raises(AccessFault):
        dma.read_cpr(m, d, dma.TransferRequest("read_cpr", m.cpr.end - 8, 0, 16))


def test_zero_length_transfer(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, 0), b"")
    assert dma.read_cpr(m, d, dma.TransferRequest("read_cpr", addr, 0, 0))[0] == b""


def test_samples_recorded_and_traced(sysd):
    m, d = sysd.machine, sysd.dma
    addr = cpr_buf(sysd)
    for size in (8, 4096):
        dma.write_cpr(m, d, dma.TransferRequest("write_cpr", addr, 0, size), bytes(size))
    assert [s.size for s in d.samples[-2:]] == [8, 4096]
    assert len(m.trace.events("dma_timing")) >= 2


# -- timing model --------------------------------------------------------------------

def test_latency_is_bimodal_and_size_dependent():
    rng = np.random.default_rng(0)
    model = dma.TimingModel(noise_sigma=0)
    small = {round(dma.sample_latency(model, 8, rng), 6) for _ in range(200)}
    assert small == {round(40 + 0.02 * 8, 6), round(85 + 0.02 * 8, 6)}
    assert dma.sample_latency(model, 4096, rng) >= 40 + 0.02 * 4096


def test_constant_time_ignores_size():
    model = dma.TimingModel(constant_time=True)
    a = [dma.sample_latency(model, 8, np.random.default_rng(5)) for _ in range(3)]
    b = [dma.sample_latency(model, 4096, np.random.default_rng(5)) for _ in range(3)]
    assert a == b


@pytest.mark.parametrize("kw", [{"p_slow": 1.5}, {"per_byte": -1}, {"noise_sigma": -0.1}])
def test_timing_model_validation(kw):
    with pytest.raises(ConfigError):
        dma.TimingModel(**kw)


def test_timing_model_from_dict_rejects_unknown():
    assert dma.TimingModel.from_dict({"p_slow": 0.2}).p_slow == 0.2
    with pytest.raises(ConfigError):
        dma.TimingModel.from_dict({"jitter": 1})


def test_classifier_separates_default_model():
    samples = dma.synthetic_samples(dma.TimingModel(), 1000, np.random.default_rng(0))
    assert adv.classify_timing(samples)["accuracy"] >= 0.90


def test_classifier_blind_under_constant_time():
    samples = dma.synthetic_samples(dma.TimingModel(constant_time=True), 1000, np.random.default_rng(0))
    assert adv.classify_timing(samples)["accuracy"] <= 0.55


def test_classifier_needs_enough_samples():
    samples = dma.synthetic_samples(dma.TimingModel(), 10, np.random.default_rng(0))
    with pytest.raises(InsufficientSamples):
        adv.classify_timing(samples)


def test_workload_mix():
    w = dma.reference_workload(np.random.default_rng(0))
    assert sum(op == dma.READ for op, _ in w) == 453
    assert sum(op == dma.WRITE for op, _ in w) == 3941
    assert {s for _, s in w} <= set(dma.SIZE_CLASSES)


@given(st.lists(st.tuples(st.sampled_from(["read", "write"]), st.integers(0, 1 << 20),
                          st.floats(0, 1e6, allow_nan=False)), max_size=30))
def test_csv_roundtrip(rows):
    samples = [dma.TimingSample(o, s, round(u, 6)) for o, s, u in rows]
    back = dma.samples_from_csv(dma.samples_to_csv(samples))
    assert [(b.op, b.size) for b in back] == [(s.op, s.size) for s in samples]
    assert all(abs(b.micros - s.micros) < 1e-5 for b, s in zip(back, samples))


def test_csv_bad_header():
    with pytest.raises(ConfigError):
        dma.samples_from_csv("a,b,c\n1,2,3\n")

import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import FIXTURES
from gpucc_sim import crypto_keys as ck
from gpucc_sim.errors import AuthError, CounterExhausted, KeyKindError, KeyRevoked, ReplayError, UnknownEngine

# Frozen from the oracle, never from the library.
V0 = "5c2ca9ac36c209094b30e05666ce8b435aa3493cfe66e24b2ca49cbaac50b0b9"
HMAC_EMPTY_RANGE32 = "d38b42096d80f45f826b44a9d5607de72496a415d3f4a1a8c88e3bb9da8dc1cb"

TABLE_NAMES = (
    {"gsp_cpu_locked_rpc", "cpu_gsp_locked_rpc", "gsp_cpu_dma", "cpu_gsp_dma",
     "gsp_cpu_replayable_fault", "gsp_cpu_non_replayable_fault"}
    | {f"cpu_sec2_{k}_{p}" for k in ("data", "hmac") for p in ("user", "kernel", "scrubber")}
    | {f"lce{x}_{d}_{p}" for x in range(8) for d in ("h2d", "d2h") for p in ("user", "kernel")}
)


def table(seed=b"\x01"):
    return ck.derive_all_keys(ck.establish_session(seed * 32, b"\x02" * 32))


def pair(name="lce0_h2d_kernel", label="test"):
    keys = table()
    return keys, ck.ChannelCipherState.for_channel(keys, name, label), ck.ChannelCipherState.for_channel(keys, name, label)


# -- session and derivation ------------------------------------------------------

def test_all_zero_session_matches_pinned_value():
    assert ck.establish_session(bytes(32), bytes(32)).secret.hex() == V0


def test_session_role_separation_and_determinism():
    r1, r2 = b"\x11" * 32, b"\x22" * 32
    assert ck.establish_session(r1, r2) == ck.establish_session(r1, r2)
    assert ck.establish_session(r1, r2) != ck.establish_session(r2, r1)


def test_key_names_are_the_table_expansion():
    keys = table()
    assert len(keys) == 44
    assert set(keys.names()) == TABLE_NAMES
    assert "cpu_gsp_locked_rpc" in keys and "lce7_d2h_user" in keys
    assert len([n for n in keys.names() if n.startswith("lce")]) == 32


def test_key_kinds():
    keys = table()
    for n in keys.names():
        assert keys.kind(n) == ("mac" if n.startswith("cpu_sec2_hmac_") else "aead")


def test_keys_pairwise_distinct():
    for s in (b"\x00", b"\x01", b"\xff"):
        vals = list(table(s).entries.values())
        assert len(set(vals)) == 44 and all(len(v) == 32 for v in vals)


def test_golden_fixture_against_oracle_and_library():
    doc = json.loads((FIXTURES / "golden_keys.json").read_text())
    req, resp = bytes.fromhex(doc["requester_random"]), bytes.fromhex(doc["responder_random"])
    master = oracles.master_secret(req, resp)
    assert master.hex() == doc["master_secret"]
    assert set(doc["keys"]) == TABLE_NAMES
    for name, hexkey in doc["keys"].items():
        assert oracles.channel_key(master, name).hex() == hexkey, name
    lib = ck.derive_all_keys(ck.establish_session(req, resp))
    assert lib.to_hex() == doc["keys"]
    assert lib.key("gsp_cpu_dma").hex() == oracles.channel_key(master, "gsp_cpu_dma").hex()


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_derivation_matches_oracle(req, resp):
    master = ck.establish_session(req, resp)
    assert master.secret == oracles.master_secret(req, resp)
    assert ck.derive_key(master, "lce3_d2h_user") == oracles.channel_key(master.secret, "lce3_d2h_user")


def test_derivation_under_one_second():
    t0 = time.perf_counter()
    for _ in range(10):
        table()
    assert (time.perf_counter() - t0) / 10 < 1.0


# -- AEAD ----------------------------------------------------------------------

def test_gcm_known_answer():
    # AES-256-GCM vector with 60-byte plaintext and 20-byte AAD; its IV splits as salt|counter.
    key = bytes.fromhex("feffe9928665731c6d6a8f9467308308" * 2)
    keys = ck.KeyTable({n: key for n in ck.KEY_NAMES})
    state = ck.ChannelCipherState("lce0_h2d_user", salt=0xCAFEBABE, send_counter=0xFACEDBADDECAF888 - 1)
    pt = bytes.fromhex("d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
                       "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39")
    aad = bytes.fromhex("feedfacedeadbeeffeedfacedeadbeefabaddad2")
    blob = ck.seal(state, keys, pt, aad)
    assert blob.iv.hex() == "cafebabefacedbaddecaf888"
    assert blob.payload.hex() == ("522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa"
                                  "8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662")
    assert blob.tag.hex() == "76fc6ece0f4e1768cddf8853bb2d551b"


def test_seal_empty_plaintext():
    keys, tx, _ = pair()
    blob = ck.seal(tx, keys, b"")
    assert blob.payload == b"" and len(blob.tag) == 16 and tx.send_counter == 1


def test_iv_layout_and_monotonic_counter():
    keys, tx, _ = pair(label="chan-a")
    a, b = ck.seal(tx, keys, b"same"), ck.seal(tx, keys, b"same")
    assert a.iv != b.iv and a.payload != b.payload
    assert (a.counter, b.counter) == (1, 2)
    assert a.salt == ck.channel_salt("chan-a") and len(a.iv) == 12


def test_roundtrip_4k():
    keys, tx, rx = pair()
    data = np.random.default_rng(1).bytes(4096)
    assert ck.open_blob(rx, keys, ck.seal(tx, keys, data, b"aad")) == data
    assert rx.recv_last == 1


def test_replay_rejected():
    keys, tx, rx = pair()
    blob = ck.seal(tx, keys, b"x")
    ck.open_blob(rx, keys, blob)
    with pytest.raises(ReplayError):
        ck.open_blob(rx, keys, blob)


def test_skipped_counter_rejected():
    keys, tx, rx = pair()
    ck.seal(tx, keys, b"lost")
    with pytest.raises(ReplayError):
        ck.open_blob(rx, keys, ck.seal(tx, keys, b"next"))


def test_bitflip_and_aad_mismatch_rejected():
    keys, tx, rx = pair()
    blob = ck.seal(tx, keys, b"payload", b"hdr")
    flipped = ck.SealedBlob(blob.iv, bytes([blob.payload[0] ^ 1]) + blob.payload[1:], blob.tag, blob.aad)
    with pytest.raises(AuthError):
        ck.open_blob(rx, keys, flipped)
    with pytest.raises(AuthError):
        ck.open_blob(rx, keys, blob, aad=b"HDR")
    assert ck.open_blob(rx, keys, blob) == b"payload"


def test_wrong_salt_rejected():
    keys = table()
    tx = ck.ChannelCipherState.for_channel(keys, "cpu_gsp_dma", "one")
    rx = ck.ChannelCipherState.for_channel(keys, "cpu_gsp_dma", "two")
    with pytest.raises(AuthError):
        ck.open_blob(rx, keys, ck.seal(tx, keys, b"x"))


def test_counter_exhaustion():
    keys, tx, _ = pair()
    tx.send_counter = ck.MAX_COUNTER - 1
    ck.seal(tx, keys, b"last")
    with pytest.raises(CounterExhausted):
        ck.seal(tx, keys, b"one too many")


def test_mac_key_cannot_seal():
    keys = table()
    st_ = ck.ChannelCipherState.for_channel(keys, "cpu_sec2_hmac_user", "x")
    with pytest.raises(KeyKindError):
        ck.seal(st_, keys, b"")


def test_cross_channel_isolation_1000():
    keys = table()
    rng = np.random.default_rng(7)
    tx = ck.ChannelCipherState.for_channel(keys, "lce0_h2d_kernel", "iso")
    rejected = 0
    for _ in range(1000):
        rx = ck.ChannelCipherState.for_channel(keys, "lce1_h2d_kernel", "iso")
        rx.recv_last = tx.send_counter
        blob = ck.seal(tx, keys, rng.bytes(int(rng.integers(0, 64))))
        try:
            ck.open_blob(rx, keys, blob)
        except AuthError:
            rejected += 1
    assert rejected == 1000


def test_revoked_table_blocks_everything():
    keys, tx, _ = pair()
    keys.revoke()
    with pytest.raises(KeyRevoked):
        ck.seal(tx, keys, b"x")
    with pytest.raises(KeyRevoked):
        ck.sign("cpu_sec2_hmac_kernel", keys, b"x")


@given(st.lists(st.tuples(st.binary(max_size=200), st.binary(max_size=32)), min_size=1, max_size=20))
def test_stream_roundtrip_and_iv_uniqueness(msgs):
    keys, tx, rx = pair()
    ivs = set()
    for pt, aad in msgs:
        blob = ck.seal(tx, keys, pt, aad)
        assert len(blob.payload) == len(pt)
        ivs.add(blob.iv)
        assert ck.open_blob(rx, keys, ck.SealedBlob.unpack(blob.pack(), aad)) == pt
    assert len(ivs) == len(msgs)


# -- MAC -----------------------------------------------------------------------

def test_sign_verify():
    keys = table()
    d = ck.sign("cpu_sec2_hmac_scrubber", keys, b"method")
    ck.verify("cpu_sec2_hmac_scrubber", keys, b"method", d)
    with pytest.raises(AuthError):
        ck.verify("cpu_sec2_hmac_scrubber", keys, b"Method", d)
    with pytest.raises(KeyKindError):
        ck.sign("lce0_h2d_user", keys, b"")


def test_empty_message_digest_pinned():
    keys = ck.KeyTable({n: bytes(range(32)) for n in ck.KEY_NAMES})
    assert ck.sign("cpu_sec2_hmac_scrubber", keys, b"").hex() == HMAC_EMPTY_RANGE32


@given(st.binary(max_size=128), st.integers(min_value=0))
def test_mac_matches_oracle_and_detects_bit_flips(msg, bit):
    keys = table()
    d = ck.sign("cpu_sec2_hmac_kernel", keys, msg)
    assert d == oracles.hmac_sha256(keys.key("cpu_sec2_hmac_kernel"), msg)
    if msg:
        b = bytearray(msg)
        b[(bit // 8) % len(b)] ^= 1 << (bit % 8)
        with pytest.raises(AuthError):
            ck.verify("cpu_sec2_hmac_kernel", keys, bytes(b), d)


# -- GetKMB ----------------------------------------------------------------------

def test_get_kmb_examples():
    keys = table()
    assert set(ck.get_kmb(keys, "sec2", "user")) == {"cpu_sec2_data_user", "cpu_sec2_hmac_user"}
    assert set(ck.get_kmb(keys, ("lce", 3), "user")) == {"lce3_h2d_user", "lce3_d2h_user"}
    assert set(ck.get_kmb(keys, "lce0", "kernel")) == {"lce0_h2d_kernel", "lce0_d2h_kernel"}
    with pytest.raises(UnknownEngine):
        ck.get_kmb(keys, ("lce", 9), "user")
    with pytest.raises(UnknownEngine):
        ck.get_kmb(keys, "fsp", "user")

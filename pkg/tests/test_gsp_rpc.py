import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gpucc_sim import fabric as fab
from gpucc_sim import gsp_rpc as rpc
from gpucc_sim.errors import QueueEmpty, QueueFull, ReplayError, SimError


@pytest.fixture
def sess(make_system):
    return make_system(stages=("boot", "rpc")).rpc


def host_page(m, addr, n=fab.PAGE):
    res = fab.host_read(m, addr, n)
    assert res.kind == "value"
    return res.data


def send_only(s, msg):
    return rpc.send_command(s.infra, s.cpu_tx, msg, s.cvm_keys)


def status_code(msg):
    return struct.unpack_from("<I", msg.params)[0]


# -- layout -----------------------------------------------------------------------

def test_table_layout_from_host_dump(sess):
    infra, m = sess.infra, sess.infra.machine
    assert rpc.TABLE_ENTRIES == 129 == 1 + 1 + 63 + 1 + 63
    raw = host_page(m, infra.table_addr, 129 * 8)
    table = list(struct.unpack("<129Q", raw))
    assert table == infra.addr_table
    assert table[0] == infra.table_addr
    assert len(set(table)) == 129
    assert infra.tx.header_addr == table[1] and infra.rx.header_addr == table[65]
    assert infra.tx.elem_addrs == table[2:65] and infra.rx.elem_addrs == table[66:129]
    assert all(m.shared_staging.contains(a, fab.PAGE) for a in table)


def test_element_headers_are_host_legible(sess):
    m = sess.infra.machine
    send_only(sess, rpc.RpcMessage(rpc.QUERY_STATUS, b"abc"))
    page = host_page(m, sess.infra.tx.elem_addrs[0])
    hdr = rpc.ElementHeader.unpack(page)
    assert rpc.HEADER_SIZE == 44
    assert hdr.seqNum == 1 and hdr.elemCount == 1
    assert len(hdr.authTagBuffer) == 16 and len(hdr.aadBuffer) == 16
    ct_len = struct.unpack_from("<III", hdr.aadBuffer)[2]
    assert ct_len == 8 + 3
    chunk = page[rpc.HEADER_SIZE:rpc.HEADER_SIZE + ct_len]
    zeroed = page[:rpc.CHECKSUM_OFFSET] + bytes(4) + page[rpc.CHECKSUM_OFFSET + 4:rpc.HEADER_SIZE]
    assert oracles.crc32(zeroed + chunk) == hdr.checkSum
    # The write pointer is plaintext too.
    assert struct.unpack("<II", host_page(m, sess.infra.tx.header_addr, 8)) == (0, 1)


def test_payload_is_not_plaintext(sess):
    m = sess.infra.machine
    marker = b"CANARY-rpc-params-0123456789"
    send_only(sess, rpc.RpcMessage(rpc.SET_CC_POLICY, marker))
    _, dump = fab.host_dump(m)
    assert marker not in dump


def test_capacity_boundary_one_vs_two_elements(sess):
    assert rpc.PAYLOAD_CAPACITY == 4052
    one = rpc.RpcMessage(rpc.NOP, bytes(rpc.PAYLOAD_CAPACITY - 8))
    two = rpc.RpcMessage(rpc.NOP, bytes(rpc.PAYLOAD_CAPACITY - 7))
    infra = sess.infra
    assert infra.element_count(len(one.serialize())) == 1
    assert infra.element_count(len(two.serialize())) == 2
    before = infra.sent
    sess.call(one)
    sess.call(two)
    assert infra.sent - before == 3


def test_multi_element_roundtrip(sess):
    big = bytes(range(256)) * 40
    status = sess.call(rpc.RpcMessage(rpc.ALLOC, struct.pack("<Q", 4096) + big))
    assert status_code(status) == rpc.ST_OK
    assert sess.gsp.executed[-1] == rpc.ALLOC


def test_call_returns_results_and_sequence(sess):
    st_ = sess.call(rpc.RpcMessage(rpc.QUERY_STATUS))
    assert st_.function == rpc.STATUS_BIT | rpc.QUERY_STATUS
    epoch, cc = struct.unpack("<II", rpc.raise_for_status(st_))
    assert (epoch, cc) == (1, 1)
    assert sess.call(rpc.RpcMessage(rpc.NOP)).seq == st_.seq + 1


def test_unknown_command_gets_bad_command(sess):
    assert status_code(sess.call(rpc.RpcMessage(0x77))) == rpc.ST_BAD_COMMAND


# -- tampering -----------------------------------------------------------------------

def test_tampered_payload_rejected_as_auth(sess):
    infra, m = sess.infra, sess.infra.machine
    send_only(sess, rpc.RpcMessage(rpc.SET_CC_POLICY, struct.pack("<II", 1, 2)))
    a = infra.tx.elem_addrs[0] + rpc.HEADER_SIZE
    b = m.read(a, 1)
    # Recompute the checksum so only the AEAD catches it.
    m.write(a, bytes([b[0] ^ 1]))
    page = m.read(infra.tx.elem_addrs[0], fab.PAGE)
    hdr = rpc.ElementHeader.unpack(page)
    ct_len = struct.unpack_from("<III", hdr.aadBuffer)[2]
    chunk = page[rpc.HEADER_SIZE:rpc.HEADER_SIZE + ct_len]
    zeroed = rpc.ElementHeader(hdr.authTagBuffer, hdr.aadBuffer, 0, hdr.seqNum, hdr.elemCount).pack()
    m.write(infra.tx.elem_addrs[0] + rpc.CHECKSUM_OFFSET, struct.pack("<I", rpc.compute_checksum(zeroed + chunk)))
    rpc.gsp_service(infra, sess.gsp)
    status = rpc.recv_status(infra, sess.cpu_rx, sess.cvm_keys)
    assert status.function == rpc.STATUS_UNPARSED and status_code(status) == rpc.ST_AUTH
    assert sess.gsp.policy == {}


def test_tampered_checksum_rejected(sess):
    infra, m = sess.infra, sess.infra.machine
    send_only(sess, rpc.RpcMessage(rpc.NOP))
    m.write(infra.tx.elem_addrs[0] + rpc.CHECKSUM_OFFSET, b"\x00\x00\x00\x00")
    rpc.gsp_service(infra, sess.gsp)
    assert status_code(rpc.recv_status(infra, sess.cpu_rx, sess.cvm_keys)) == rpc.ST_CHECKSUM


def test_rx_replay_detected(sess):
    infra, m = sess.infra, sess.infra.machine
    sess.call(rpc.RpcMessage(rpc.NOP))
    old = m.read(infra.rx.elem_addrs[0], fab.PAGE)
    m.write(infra.rx.elem_addrs[1], old)
    m.write(infra.rx.header_addr + 4, struct.pack("<I", 2))
    with pytest.raises(ReplayError):
        rpc.recv_status(infra, sess.cpu_rx, sess.cvm_keys)


def test_tx_replay_gets_replay_status(sess):
    infra, m = sess.infra, sess.infra.machine
    sess.call(rpc.RpcMessage(rpc.NOP))
    m.write(infra.tx.elem_addrs[1], m.read(infra.tx.elem_addrs[0], fab.PAGE))
    m.write(infra.tx.header_addr + 4, struct.pack("<I", 2))
    rpc.gsp_service(infra, sess.gsp)
    assert status_code(rpc.recv_status(infra, sess.cpu_rx, sess.cvm_keys)) == rpc.ST_REPLAY


def test_empty_rx_raises(sess):
    with pytest.raises(QueueEmpty):
        rpc.recv_status(sess.infra, sess.cpu_rx, sess.cvm_keys)


def test_queue_full(sess):
    for _ in range(rpc.NUM_ELEMS - 1):
        send_only(sess, rpc.RpcMessage(rpc.NOP))
    with pytest.raises(QueueFull):
        send_only(sess, rpc.RpcMessage(rpc.NOP))


def test_requires_cc_mode():
    from gpucc_sim import crypto_keys as ck
    from gpucc_sim.trace import Trace
    m = fab.build_machine(fab.MachineConfig.small(), Trace(level=0))
    fab.secure_boot(m, fab.make_firmware_bundle(0))
    keys = ck.derive_all_keys(ck.establish_session(bytes(32), bytes(32)))
    with pytest.raises(SimError):
        rpc.init_rpc_infrastructure(m, keys)


# -- sealed metadata ---------------------------------------------------------------

def test_sealed_metadata_hides_headers(make_system):
    s = make_system(stages=("boot", "rpc"), encrypt_rpc_metadata=True).rpc
    infra, m = s.infra, s.infra.machine
    assert infra.encrypt_metadata and infra.capacity == rpc.SEALED_PAYLOAD_CAPACITY
    for _ in range(3):
        s.call(rpc.RpcMessage(rpc.NOP))
    page = host_page(m, infra.tx.elem_addrs[2])
    guess = rpc.ElementHeader.unpack(page)
    assert (guess.seqNum, guess.elemCount) != (3, 1)
    assert struct.unpack_from("<II", host_page(m, infra.tx.header_addr, 8)) != (3, 3)
    assert not any(k == ("rpc.element_header", False) for k in m.surface_stats)


def test_sealed_metadata_tamper_is_dropped(make_system):
    s = make_system(stages=("boot", "rpc"), encrypt_rpc_metadata=True).rpc
    infra, m = s.infra, s.infra.machine
    send_only(s, rpc.RpcMessage(rpc.NOP))
    m.write(infra.tx.header_addr + rpc.WRITE_PTR_OFFSET + 13, b"\xff")
    assert rpc.gsp_service(infra, s.gsp) == []
    assert s.gsp.executed == []


# -- checksum ------------------------------------------------------------------------

def test_checksum_known_value():
    assert rpc.compute_checksum(b"123456789") == 0xCBF43926 == oracles.crc32(b"123456789")


@given(st.binary(max_size=512))
def test_checksum_matches_oracle(data):
    assert rpc.compute_checksum(data) == oracles.crc32(data)


@given(st.integers(0, 0xFFFFFFFF), st.binary(max_size=9000))
def test_message_serialize_roundtrip(fn, params):
    msg = rpc.RpcMessage(fn, params)
    back = rpc.RpcMessage.parse(msg.serialize())
    assert (back.function, back.params) == (fn, params)

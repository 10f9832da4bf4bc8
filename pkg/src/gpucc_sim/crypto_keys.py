"""Session establishment, the 44-key hierarchy, and AEAD/MAC channel primitives.

The master secret comes from a two-nonce HKDF exchange standing in for the
SPDM handshake. Every channel key is ``HKDF-Expand(master, info=<key name>)``.
Channels seal with AES-256-GCM; the 96-bit IV is a 32-bit channel salt
followed by a 64-bit counter that the receiver requires to advance by exactly
one per accepted message.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand

from .errors import AuthError, CounterExhausted, KeyKindError, KeyRevoked, ReplayError, UnknownEngine

KEY_LEN = 32
TAG_LEN = 16
IV_LEN = 12
MAX_COUNTER = 2**64 - 1
NUM_LCE = 8

SESSION_SALT = b"gpucc-sim/spdm-session"
SESSION_INFO = b"master secret"

GSP_KEYS = (
    "gsp_cpu_locked_rpc",
    "cpu_gsp_locked_rpc",
    "gsp_cpu_dma",
    "cpu_gsp_dma",
    "gsp_cpu_replayable_fault",
    "gsp_cpu_non_replayable_fault",
)
SEC2_KEYS = tuple(
    f"cpu_sec2_{kind}_{priv}" for priv in ("user", "kernel", "scrubber") for kind in ("data", "hmac")
)
CE_KEYS = tuple(
    f"lce{x}_{d}_{p}" for x in range(NUM_LCE) for d in ("h2d", "d2h") for p in ("user", "kernel")
)
KEY_NAMES = GSP_KEYS + SEC2_KEYS + CE_KEYS


def key_kind(name: str) -> str:
    if name not in KEY_NAMES:
        raise KeyError(name)
    return "mac" if name.startswith("cpu_sec2_hmac_") else "aead"


@dataclass(frozen=True)
class MasterSecret:
    secret: bytes

    def __post_init__(self):
        if len(self.secret) != KEY_LEN:
            raise ValueError("master secret must be 32 bytes")

    def __repr__(self) -> str:
        return "MasterSecret(<redacted>)"


def establish_session(requester_random: bytes, responder_random: bytes) -> MasterSecret:
    if len(requester_random) != 32 or len(responder_random) != 32:
        raise ValueError("both session randoms must be 32 bytes")
    ikm = b"requester" + requester_random + b"responder" + responder_random
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=SESSION_SALT, info=SESSION_INFO)
    return MasterSecret(hkdf.derive(ikm))


class KeyTable:
    """Immutable mapping of key name to key bytes for one boot epoch.

    ``revoke`` models key deletion on reset: the bytes stay in the object but
    every seal/open/sign through a revoked table fails.
    """

    __slots__ = ("_entries", "epoch", "_revoked")

    def __init__(self, entries: Mapping[str, bytes], epoch: int = 0):
        self._entries = MappingProxyType(dict(entries))
        self.epoch = epoch
        self._revoked = False

    @property
    def entries(self) -> Mapping[str, bytes]:
        return self._entries

    @property
    def revoked(self) -> bool:
        return self._revoked

    def revoke(self) -> None:
        self._revoked = True

    def kind(self, name: str) -> str:
        return key_kind(name)

    def key(self, name: str) -> bytes:
        if self._revoked:
            raise KeyRevoked(f"key table for epoch {self.epoch} was deleted")
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no such key: {name}") from None

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def to_hex(self) -> dict[str, str]:
        return {k: v.hex() for k, v in self._entries.items()}


def derive_key(master: MasterSecret, name: str) -> bytes:
    return HKDFExpand(algorithm=hashes.SHA256(), length=KEY_LEN, info=name.encode()).derive(master.secret)


def derive_all_keys(master: MasterSecret, epoch: int = 0) -> KeyTable:
    return KeyTable({name: derive_key(master, name) for name in KEY_NAMES}, epoch=epoch)


def channel_salt(label: str) -> int:
    """32-bit IV salt for a named channel; both endpoints compute it from the label."""
    return int.from_bytes(hashlib.sha256(b"gpucc-sim/iv-salt/" + label.encode()).digest()[:4], "big")


@dataclass
class ChannelCipherState:
    """One endpoint's IV bookkeeping for one key on one channel."""

    key_id: str
    salt: int
    send_counter: int = 0
    recv_last: int = 0
    epoch: int = 0
    label: str = ""

    @classmethod
    def for_channel(cls, key_table: KeyTable, key_id: str, label: str) -> "ChannelCipherState":
        if key_id not in KEY_NAMES:
            raise KeyError(key_id)
        return cls(key_id=key_id, salt=channel_salt(label), epoch=key_table.epoch, label=label)

    def iv_for(self, counter: int) -> bytes:
        return struct.pack(">IQ", self.salt, counter)


@dataclass(frozen=True)
class SealedBlob:
    iv: bytes
    payload: bytes
    tag: bytes
    aad: bytes = b""

    @property
    def counter(self) -> int:
        return struct.unpack(">IQ", self.iv)[1]

    @property
    def salt(self) -> int:
        return struct.unpack(">IQ", self.iv)[0]

    def pack(self) -> bytes:
        """Staging wire form: iv | tag | payload. AAD travels separately."""
        return self.iv + self.tag + self.payload

    @classmethod
    def unpack(cls, data: bytes, aad: bytes = b"") -> "SealedBlob":
        if len(data) < IV_LEN + TAG_LEN:
            raise AuthError("sealed blob truncated")
        return cls(data[:IV_LEN], data[IV_LEN + TAG_LEN:], data[IV_LEN:IV_LEN + TAG_LEN], aad)

    @staticmethod
    def packed_size(plaintext_len: int) -> int:
        return IV_LEN + TAG_LEN + plaintext_len


def _check_live(state: ChannelCipherState, key_table: KeyTable) -> bytes:
    key = key_table.key(state.key_id)
    if state.epoch != key_table.epoch:
        raise KeyRevoked(f"cipher state from epoch {state.epoch} used with epoch {key_table.epoch} keys")
    return key


def seal(state: ChannelCipherState, key_table: KeyTable, plaintext: bytes, aad: bytes = b"") -> SealedBlob:
    if key_kind(state.key_id) != "aead":
        raise KeyKindError(f"{state.key_id} is a MAC key")
    key = _check_live(state, key_table)
    if state.send_counter >= MAX_COUNTER:
        raise CounterExhausted(f"IV counter exhausted on {state.key_id}")
    state.send_counter += 1
    iv = state.iv_for(state.send_counter)
    out = AESGCM(key).encrypt(iv, bytes(plaintext), bytes(aad))
    return SealedBlob(iv=iv, payload=out[:-TAG_LEN], tag=out[-TAG_LEN:], aad=bytes(aad))


def open_blob(state: ChannelCipherState, key_table: KeyTable, blob: SealedBlob, aad: bytes | None = None,
              monotonic: bool = False) -> bytes:
    """Verify and decrypt; advance the receive counter only on success.

    The tag is checked first, so a forged or re-keyed blob is an
    ``AuthError``; an authentic blob with a stale or skipped counter is a
    ``ReplayError``. ``monotonic`` relaxes last+1 to "greater than last" for
    latest-value registers such as tracking semaphores, where the reader may
    legitimately miss overwritten values.
    """
    if key_kind(state.key_id) != "aead":
        raise KeyKindError(f"{state.key_id} is a MAC key")
    key = _check_live(state, key_table)
    aad = blob.aad if aad is None else bytes(aad)
    if len(blob.iv) != IV_LEN or len(blob.tag) != TAG_LEN:
        raise AuthError("malformed IV or tag")
    try:
        plaintext = AESGCM(key).decrypt(blob.iv, blob.payload + blob.tag, aad)
    except InvalidTag:
        raise AuthError(f"authentication tag mismatch on {state.key_id}") from None
    if blob.salt != state.salt:
        raise AuthError(f"IV salt does not belong to channel {state.label or state.key_id}")
    if blob.counter <= state.recv_last or (not monotonic and blob.counter != state.recv_last + 1):
        raise ReplayError(f"IV counter {blob.counter} on {state.key_id}, expected {state.recv_last + 1}")
    state.recv_last = blob.counter
    return plaintext


# ``open`` is the operation name used throughout the docs; keep the builtin intact elsewhere.
open = open_blob  # noqa: A001


def sign(mac_key_id: str, key_table: KeyTable, message: bytes) -> bytes:
    if key_kind(mac_key_id) != "mac":
        raise KeyKindError(f"{mac_key_id} is not a MAC key")
    return hmac.new(key_table.key(mac_key_id), bytes(message), hashlib.sha256).digest()


def verify(mac_key_id: str, key_table: KeyTable, message: bytes, digest: bytes) -> None:
    expected = sign(mac_key_id, key_table, message)
    if not hmac.compare_digest(expected, bytes(digest)):
        raise AuthError(f"HMAC mismatch under {mac_key_id}")


def parse_engine(engine: str | tuple) -> tuple[str, int | None]:
    """Accept ``"sec2"``, ``"lce3"`` or ``("lce", 3)``."""
    if isinstance(engine, tuple):
        name, idx = engine
        engine = f"{name}{idx}"
    engine = str(engine).lower()
    if engine == "sec2":
        return "sec2", None
    if engine.startswith("lce") and engine[3:].isdigit():
        idx = int(engine[3:])
        if 0 <= idx < NUM_LCE:
            return "lce", idx
    raise UnknownEngine(f"unknown engine {engine!r}")


def get_kmb(key_table: KeyTable, engine: str | tuple, privilege: str) -> dict[str, bytes]:
    """Key-material bundle handed to a user- or kernel-mode client."""
    if privilege not in ("user", "kernel"):
        raise ValueError(f"privilege must be user or kernel, not {privilege!r}")
    kind, idx = parse_engine(engine)
    if kind == "sec2":
        names = [f"cpu_sec2_data_{privilege}", f"cpu_sec2_hmac_{privilege}"]
    else:
        names = [f"lce{idx}_h2d_{privilege}", f"lce{idx}_d2h_{privilege}"]
    return {n: key_table.key(n) for n in names}


@dataclass
class KeyRing:
    """Per-actor cipher states, created lazily by channel label."""

    key_table: KeyTable
    states: dict[tuple[str, str], ChannelCipherState] = field(default_factory=dict)

    def state(self, key_id: str, label: str) -> ChannelCipherState:
        k = (key_id, label)
        if k not in self.states:
            self.states[k] = ChannelCipherState.for_channel(self.key_table, key_id, label)
        return self.states[k]

"""BAR0 register-map manifests.

A manifest is a JSON list of ``{"offset_range": [start, end), "class": ...,
"role": ...}`` entries with byte offsets. Words not covered by any entry read
as zero. The real allowlist is not public, so the default manifests are
synthesized (deterministically) to hit the published per-class word counts
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError

BAR0_SIZE = 16 * 1024 * 1024
BAR0_WORDS = BAR0_SIZE // 4  # 0x400000

ZERO, VALUE, ERROR = 0, 1, 2
CLASS_NAMES = {ZERO: "zero", VALUE: "value", ERROR: "error"}
CLASS_CODES = {v: k for k, v in CLASS_NAMES.items()}



def _error_count(values: int, zero_pct: float, error_pct: float) -> int:
    """Middle of the error-count range for which both percentages round to the published ones.

    The published CC percentages do not sum to 100, so ``round(pct * total)``
    alone leaves zeros at 99.79%.
    """
    lo_zero, hi_zero = (zero_pct - 0.005) / 100 * BAR0_WORDS, (zero_pct + 0.005) / 100 * BAR0_WORDS
    lo = max(int(np.ceil((error_pct - 0.005) / 100 * BAR0_WORDS)), int(np.floor(BAR0_WORDS - values - hi_zero)) + 1)
    hi = min(int(np.floor((error_pct + 0.005) / 100 * BAR0_WORDS)), int(np.ceil(BAR0_WORDS - values - lo_zero)) - 1)
    if lo > hi:
        raise ConfigError("published fractions are inconsistent")
    return (lo + hi) // 2


# Word counts behind the published fractions (values / errors; zeros are the rest).
CC_COUNTS = {"value": 1042, "error": _error_count(1042, 99.78, 0.19)}
RAW_COUNTS = {"value": round(0.0794 * BAR0_WORDS), "error": round(0.8025 * BAR0_WORDS)}

ROLE_FAULT_PUT_REPLAYABLE = "fault_put_replayable"
ROLE_FAULT_PUT_NON_REPLAYABLE = "fault_put_nonreplayable"
ROLE_DOORBELL = "doorbell"
ROLES = (ROLE_FAULT_PUT_REPLAYABLE, ROLE_FAULT_PUT_NON_REPLAYABLE, ROLE_DOORBELL)

# Role registers always read with bit 31 set so they classify as values.
ROLE_VALID_BIT = 0x8000_0000

_GEN_SEED = 0x0B4_0000


def value_words(word_index: np.ndarray) -> np.ndarray:
    """Deterministic non-zero register contents that never carry the 0xbad prefix."""
    x = word_index.astype(np.uint64)
    x = (x * np.uint64(0x9E3779B1) + np.uint64(0x7F4A7C15)) & np.uint64(0xFFFFFFFF)
    x ^= x >> np.uint64(15)
    x = (x * np.uint64(0x2C1B3C6D)) & np.uint64(0xFFFFFFFF)
    x ^= x >> np.uint64(12)
    x |= np.uint64(1)
    bad = (x >> np.uint64(20)) == np.uint64(0xBAD)
    x[bad] ^= np.uint64(0x1000_0000)
    return x.astype(np.uint32)


def error_words(word_index: np.ndarray) -> np.ndarray:
    low = (word_index.astype(np.uint64) * np.uint64(0x45D9F3B)) & np.uint64(0xFFFFF)
    return (np.uint64(0xBAD00000) | low).astype(np.uint32)


@dataclass
class Bar0Map:
    classes: np.ndarray  # uint8 per word
    roles: dict[int, str] = field(default_factory=dict)  # byte offset -> role
    _words: np.ndarray | None = field(default=None, repr=False)

    @property
    def words(self) -> np.ndarray:
        if self._words is None:
            idx = np.arange(BAR0_WORDS, dtype=np.uint32)
            w = np.zeros(BAR0_WORDS, dtype=np.uint32)
            vm = self.classes == VALUE
            em = self.classes == ERROR
            w[vm] = value_words(idx[vm])
            w[em] = error_words(idx[em])
            for off in self.roles:
                w[off // 4] = ROLE_VALID_BIT
            w.setflags(write=False)
            self._words = w
        return self._words

    def role_offset(self, role: str) -> int:
        for off, r in self.roles.items():
            if r == role:
                return off
        raise KeyError(role)

    def counts(self) -> dict[str, int]:
        binc = np.bincount(self.classes, minlength=3)
        return {"values": int(binc[VALUE]), "zeros": int(binc[ZERO]), "errors": int(binc[ERROR])}


def _partition(rng: np.random.Generator, total: int, parts: int, align: int = 1) -> list[int]:
    """Split ``total`` into ``parts`` positive lengths, cut points aligned to ``align``."""
    slots = total // align
    cuts = np.sort(rng.choice(np.arange(1, slots), size=parts - 1, replace=False)) * align
    bounds = np.concatenate([[0], cuts, [total]])
    return [int(b - a) for a, b in zip(bounds[:-1], bounds[1:])]


def _raw_classes(rng: np.random.Generator) -> np.ndarray:
    n_val, n_err = RAW_COUNTS["value"], RAW_COUNTS["error"]
    n_zero = BAR0_WORDS - n_val - n_err
    mapped_total = n_val + n_zero
    segs = 96
    mapped = _partition(rng, mapped_total, segs, align=256)
    holes = _partition(rng, n_err, segs + 1, align=256)

    # Interleave value/zero runs over the concatenated mapped space.
    runs = 640
    vals = _partition(rng, n_val, runs, align=4)
    zeros = _partition(rng, n_zero, runs, align=4)
    mapped_space = np.empty(mapped_total, dtype=np.uint8)
    pos = 0
    for v, z in zip(vals, zeros):
        mapped_space[pos:pos + v] = VALUE
        pos += v
        mapped_space[pos:pos + z] = ZERO
        pos += z

    classes = np.empty(BAR0_WORDS, dtype=np.uint8)
    pos = mpos = 0
    for i in range(segs):
        classes[pos:pos + holes[i]] = ERROR
        pos += holes[i]
        classes[pos:pos + mapped[i]] = mapped_space[mpos:mpos + mapped[i]]
        pos += mapped[i]
        mpos += mapped[i]
    classes[pos:pos + holes[segs]] = ERROR
    assert pos + holes[segs] == BAR0_WORDS
    return classes


def _cc_classes(rng: np.random.Generator, raw: np.ndarray) -> tuple[np.ndarray, dict[int, str]]:
    classes = np.zeros(BAR0_WORDS, dtype=np.uint8)
    # Exposed registers: short clusters carved out of registers that hold values in raw mode.
    raw_val_idx = np.flatnonzero(raw == VALUE)
    cluster_sizes = _partition(rng, CC_COUNTS["value"], 48)
    starts = np.sort(rng.choice(len(raw_val_idx) // 48, size=48, replace=False))
    chosen: list[int] = []
    stride = len(raw_val_idx) // 48
    for k, (s, size) in enumerate(zip(starts, cluster_sizes)):
        base = k * stride + int(s) % max(1, stride - size)
        chosen.extend(raw_val_idx[base:base + size].tolist())
    chosen_arr = np.array(sorted(set(chosen)), dtype=np.int64)
    assert len(chosen_arr) == CC_COUNTS["value"], len(chosen_arr)
    classes[chosen_arr] = VALUE

    # Residual error words: a few stretches of the raw unmapped holes.
    raw_err_idx = np.flatnonzero(raw == ERROR)
    err_sizes = _partition(rng, CC_COUNTS["error"], 6, align=1)
    step = len(raw_err_idx) // 6
    for k, size in enumerate(err_sizes):
        classes[raw_err_idx[k * step:k * step + size]] = ERROR
    assert int((classes == ERROR).sum()) == CC_COUNTS["error"]

    roles = {
        int(chosen_arr[0]) * 4: ROLE_DOORBELL,
        int(chosen_arr[1]) * 4: ROLE_FAULT_PUT_REPLAYABLE,
        int(chosen_arr[2]) * 4: ROLE_FAULT_PUT_NON_REPLAYABLE,
    }
    return classes, roles


def _to_manifest(classes: np.ndarray, roles: dict[int, str]) -> list[dict]:
    change = np.flatnonzero(np.diff(classes.astype(np.int8))) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [BAR0_WORDS]])
    role_words = {off // 4: r for off, r in roles.items()}
    out = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        cls = CLASS_NAMES[int(classes[s])]
        if cls == "zero":
            continue
        cut = sorted(w for w in role_words if s <= w < e)
        cur = s
        for w in cut:
            if cur < w:
                out.append({"offset_range": [cur * 4, w * 4], "class": cls})
            out.append({"offset_range": [w * 4, w * 4 + 4], "class": cls, "role": role_words[w]})
            cur = w + 1
        if cur < e:
            out.append({"offset_range": [cur * 4, e * 4], "class": cls})
    return out


@lru_cache(maxsize=None)
def _default_manifests() -> tuple[str, str]:
    rng = np.random.default_rng(_GEN_SEED)
    raw = _raw_classes(rng)
    cc, roles = _cc_classes(rng, raw)
    return json.dumps(_to_manifest(raw, {})), json.dumps(_to_manifest(cc, roles))


def default_manifest(cc_mode: bool) -> list[dict]:
    raw_json, cc_json = _default_manifests()
    return json.loads(cc_json if cc_mode else raw_json)


def build_map(manifest: Iterable[dict]) -> Bar0Map:
    classes = np.zeros(BAR0_WORDS, dtype=np.uint8)
    covered = np.zeros(BAR0_WORDS, dtype=bool)
    roles: dict[int, str] = {}
    for i, entry in enumerate(manifest):
        try:
            start, end = (int(x) for x in entry["offset_range"])
            code = CLASS_CODES[entry["class"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"manifest entry {i} malformed: {exc!r}") from None
        if start % 4 or end % 4 or not 0 <= start < end <= BAR0_SIZE:
            raise ConfigError(f"manifest entry {i} has bad offset_range [{start:#x}, {end:#x})")
        ws, we = start // 4, end // 4
        if covered[ws:we].any():
            raise ConfigError(f"manifest entry {i} overlaps an earlier entry")
        covered[ws:we] = True
        classes[ws:we] = code
        role = entry.get("role")
        if role is not None:
            if role not in ROLES:
                raise ConfigError(f"manifest entry {i} has unknown role {role!r}")
            if we - ws != 1 or code != VALUE:
                raise ConfigError(f"manifest entry {i}: a role must name a single value word")
            roles[start] = role
    return Bar0Map(classes, roles)


def load_manifest(path: str | Path) -> list[dict]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"register-map manifest is not valid JSON: {exc}") from None
    if not isinstance(data, list):
        raise ConfigError("register-map manifest must be a JSON list")
    return data


@lru_cache(maxsize=2)
def default_map(cc_mode: bool) -> Bar0Map:
    return build_map(default_manifest(cc_mode))

"""Tiered storage of per-chunk KV caches.

Exactly one record exists per chunk id across all storage tiers. Records
are found through a prefix hash map; when the hash of the full preceding context
misses, earlier chunks are dropped one at a time (alternative paths) until a
shorter path hits, which always ends at ``system prompt + chunk``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

from .model import LayeredKV


class Variant(IntEnum):
    ISOLATED = 0
    FUSED = 1


class Tier(IntEnum):
    GPU = 0
    CPU = 1
    DISK = 2


class MatchKind(str, Enum):
    PREFIX = "PREFIX"
    ALT_PATH = "ALT_PATH"


class DuplicateRecordError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


class KVFormatError(ValueError):
    pass


class BadMagicError(KVFormatError):
    pass


class VersionMismatchError(KVFormatError):
    pass


class TruncatedRecordError(KVFormatError):
    pass


@dataclass
class ChunkKVRecord:
    chunk_id: str
    kv: LayeredKV
    native_start: int
    variant: Variant = Variant.ISOLATED
    heat: int = 0
    last_access: int = 0
    tier: Tier = Tier.GPU
    pins: int = 0

    @property
    def size_bytes(self) -> int:
        return self.kv.nbytes

    @property
    def n_tokens(self) -> int:
        return self.kv.n_tokens


@dataclass(frozen=True)
class TierConfig:
    """Capacities in bytes (``None`` = unbounded) and load bandwidths in bytes/second."""

    gpu_capacity: int | None = None
    cpu_capacity: int | None = None
    cpu_bandwidth: float = 16e9
    disk_bandwidth: float = 1e9

    def capacity(self, tier: Tier) -> int | None:
        if tier == Tier.GPU:
            return self.gpu_capacity
        if tier == Tier.CPU:
            return self.cpu_capacity
        return None

    def load_seconds(self, nbytes: int, tier: Tier) -> float:
        if tier == Tier.GPU:
            return 0.0
        bw = self.cpu_bandwidth if tier == Tier.CPU else self.disk_bandwidth
        return nbytes / bw


def prefix_key(system_id: str, chunk_ids) -> str:
    """128-bit chained hash over the system prompt id and an ordered chunk list."""
    h = hashlib.blake2b(system_id.encode(), digest_size=16).digest()
    for cid in chunk_ids:
        h = hashlib.blake2b(h + cid.encode(), digest_size=16).digest()
    return h.hex()


class KVStore:
    def __init__(self, system_id: str, tiers: TierConfig | None = None):
        self.system_id = system_id
        self.tiers = tiers or TierConfig()
        self.records: dict[str, ChunkKVRecord] = {}
        self.prefix_map: dict[str, str] = {}
        self.pending_promotions: set[str] = set()
        self._members = {t: set() for t in Tier}
        self._used = {t: 0 for t in Tier}
        self._tick = 0
        self._lock = threading.RLock()

    def clone(self) -> "KVStore":
        """Independent tier/heat/pin state over the same (read-only) K/V arrays."""
        with self._lock:
            out = KVStore(self.system_id, self.tiers)
            for cid, rec in self.records.items():
                out.records[cid] = replace(rec)
            out.prefix_map = dict(self.prefix_map)
            out.pending_promotions = set(self.pending_promotions)
            out._members = {t: set(m) for t, m in self._members.items()}
            out._used = dict(self._used)
            out._tick = self._tick
            return out

    def retiered(self, tiers: TierConfig, tier: Tier | None = None) -> "KVStore":
        """Copy under a new tier configuration, all records in ``tier`` or placed top-down."""
        with self._lock:
            out = KVStore(self.system_id, tiers)
            for cid in sorted(self.records):
                rec = replace(self.records[cid], pins=0, tier=Tier.GPU)
                if tier is None:
                    out.put_record(rec)
                else:
                    out.records[cid] = rec
                    out._place(rec, tier)
            out.prefix_map = dict(self.prefix_map)
            out.check_single_copy()
            return out

    # -- bookkeeping -----------------------------------------------------

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self.records

    def __len__(self) -> int:
        return len(self.records)

    def used(self, tier: Tier) -> int:
        return self._used[tier]

    def members(self, tier: Tier) -> set[str]:
        return set(self._members[tier])

    def _place(self, rec: ChunkKVRecord, tier: Tier) -> None:
        rec.tier = tier
        self._members[tier].add(rec.chunk_id)
        self._used[tier] += rec.size_bytes

    def _unplace(self, rec: ChunkKVRecord) -> None:
        self._members[rec.tier].discard(rec.chunk_id)
        self._used[rec.tier] -= rec.size_bytes

    def check_single_copy(self) -> None:
        seen: dict[str, int] = {}
        for t in Tier:
            for cid in self._members[t]:
                seen[cid] = seen.get(cid, 0) + 1
        if set(seen) != set(self.records) or any(v != 1 for v in seen.values()):
            raise AssertionError("single-copy invariant violated")
        for t in Tier:
            if sum(self.records[c].size_bytes for c in self._members[t]) != self._used[t]:
                raise AssertionError(f"usage accounting broken for {t.name}")
            cap = self.tiers.capacity(t)
            if cap is not None and self._used[t] > cap:
                raise AssertionError(f"{t.name} over capacity")

    def _coldness(self, cid: str):
        rec = self.records[cid]
        return (rec.heat, rec.last_access, cid)

    # -- placement -------------------------------------------------------

    def _can_free(self, nbytes: int, tier: Tier) -> bool:
        cap = self.tiers.capacity(tier)
        if cap is None:
            return True
        if nbytes > cap:
            return False
        movable = sum(self.records[c].size_bytes for c in self._members[tier] if self.records[c].pins == 0)
        if cap - self._used[tier] + movable < nbytes:
            return False
        return True

    def evict_to_fit(self, bytes_needed: int, tier: Tier) -> list[str]:
        """Demote the coldest unpinned records of ``tier`` to a lower tier until ``bytes_needed`` fit."""
        with self._lock:
            cap = self.tiers.capacity(tier)
            if cap is None:
                return []
            if not self._can_free(bytes_needed, tier):
                raise CapacityError(f"cannot free {bytes_needed} bytes in {tier.name}")
            demoted: list[str] = []
            while cap - self._used[tier] < bytes_needed:
                victims = [c for c in self._members[tier] if self.records[c].pins == 0]
                victim = min(victims, key=self._coldness)
                rec = self.records[victim]
                # skip tiers that cannot hold the record at all; disk is unbounded
                lower = next(t for t in Tier if t > tier and self._can_free(rec.size_bytes, t))
                demoted.extend(self.evict_to_fit(rec.size_bytes, lower))
                self._unplace(rec)
                self._place(rec, lower)
                demoted.append(victim)
            return demoted

    def put_record(self, rec: ChunkKVRecord, overwrite: bool = False) -> list[str]:
        """Insert into the highest tier that can make room; returns ids demoted to do so."""
        with self._lock:
            old = self.records.get(rec.chunk_id)
            if old is not None:
                if not overwrite:
                    raise DuplicateRecordError(f"record for {rec.chunk_id} already exists")
                if old.pins:
                    raise CapacityError(f"record {rec.chunk_id} is pinned")
                rec.heat, rec.last_access = old.heat, old.last_access
                self._unplace(old)
                del self.records[rec.chunk_id]
            rec.pins = 0
            self.records[rec.chunk_id] = rec
            demoted: list[str] = []
            for tier in Tier:
                if self._can_free(rec.size_bytes, tier):
                    demoted = self.evict_to_fit(rec.size_bytes, tier)
                    self._place(rec, tier)
                    break
            self.prefix_map[prefix_key(self.system_id, [rec.chunk_id])] = rec.chunk_id
            return demoted

    def remove(self, chunk_id: str) -> None:
        with self._lock:
            rec = self.records.pop(chunk_id)
            self._unplace(rec)
            self.prefix_map = {k: v for k, v in self.prefix_map.items() if v != chunk_id}

    # -- matching --------------------------------------------------------

    def register_path(self, context) -> None:
        """Alias every prefix of ``context`` to the (single) record of its last chunk."""
        with self._lock:
            for i, cid in enumerate(context):
                if cid in self.records:
                    self.prefix_map[prefix_key(self.system_id, context[: i + 1])] = cid

    def plain_prefix_match(self, context) -> dict[str, MatchKind]:
        out: dict[str, MatchKind] = {}
        for i, cid in enumerate(context):
            if self.prefix_map.get(prefix_key(self.system_id, context[: i + 1])) != cid:
                break
            out[cid] = MatchKind.PREFIX
        return out

    def alternative_path_match(self, context) -> dict[str, MatchKind]:
        """Match every cached chunk of ``context`` (in context order).

        Tries the full preceding path first, then drops the earliest remaining
        chunk until a hash hits.
        """
        context = list(context)
        if not context:
            raise ValueError("context must be non-empty")
        out: dict[str, MatchKind] = {}
        for i, cid in enumerate(context):
            for start in range(0, i + 1):
                if self.prefix_map.get(prefix_key(self.system_id, context[start: i + 1])) == cid:
                    out[cid] = MatchKind.PREFIX if start == 0 else MatchKind.ALT_PATH
                    break
        return out

    # -- access ----------------------------------------------------------

    def fetch(self, chunk_id: str) -> tuple[ChunkKVRecord, Tier, float]:
        """Touch a record. Returns it with its current tier and the simulated load time in seconds.

        A non-GPU record is queued for promotion; moving it is the loader's job.
        """
        with self._lock:
            rec = self.records.get(chunk_id)
            if rec is None:
                raise KeyError(f"no record for chunk {chunk_id}")
            self._tick += 1
            rec.heat += 1
            rec.last_access = self._tick
            tier = rec.tier
            if tier != Tier.GPU:
                self.pending_promotions.add(chunk_id)
            return rec, tier, self.tiers.load_seconds(rec.size_bytes, tier)

    def promote(self, chunk_id: str, tier: Tier = Tier.GPU) -> list[str]:
        with self._lock:
            rec = self.records[chunk_id]
            self.pending_promotions.discard(chunk_id)
            if rec.tier <= tier:
                return []
            self._unplace(rec)
            try:
                demoted = self.evict_to_fit(rec.size_bytes, tier)
            except CapacityError:
                self._place(rec, rec.tier)
                raise
            self._place(rec, tier)
            return demoted

    def pin(self, chunk_id: str) -> None:
        with self._lock:
            self.records[chunk_id].pins += 1

    def unpin(self, chunk_id: str) -> None:
        with self._lock:
            rec = self.records[chunk_id]
            if rec.pins <= 0:
                raise ValueError(f"record {chunk_id} is not pinned")
            rec.pins -= 1

    def stats(self) -> dict:
        return {
            "records": len(self.records),
            "prefix_keys": len(self.prefix_map),
            "bytes": {t.name: self._used[t] for t in Tier},
            "count": {t.name: len(self._members[t]) for t in Tier},
            "variants": {v.name: sum(1 for r in self.records.values() if r.variant == v) for v in Variant},
        }

    # -- persistence -----------------------------------------------------

    def save(self, directory, system_tokens=None, system_kv: LayeredKV | None = None) -> None:
        """Write every record as an FKVC file plus ``manifest.json``."""
        d = Path(directory)
        (d / "records").mkdir(parents=True, exist_ok=True)
        manifest = {"system_id": self.system_id, "records": {}}
        for cid in sorted(self.records):
            rec = self.records[cid]
            rel = f"records/{cid}.fkvc"
            (d / rel).write_bytes(serialize_record(rec))
            manifest["records"][cid] = {"path": rel, "variant": rec.variant.name, "native_start": rec.native_start}
        if system_kv is not None:
            sys_rec = ChunkKVRecord(self.system_id, system_kv, int(system_kv.positions[0]) if system_kv.n_tokens else 1)
            (d / "system.fkvc").write_bytes(serialize_record(sys_rec))
            manifest["system"] = {"path": "system.fkvc", "tokens": [int(t) for t in system_tokens]}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory, tiers: TierConfig | None = None, tier: Tier | None = None):
        """Returns ``(store, system_tokens, system_kv)``; the latter two are None if absent.

        With ``tier`` given every record starts in that tier, otherwise placement
        follows :meth:`put_record`.
        """
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        store = cls(manifest["system_id"], tiers)
        for cid, entry in sorted(manifest["records"].items()):
            rec = deserialize_record((d / entry["path"]).read_bytes())
            if rec.chunk_id != cid:
                raise KVFormatError(f"manifest entry {cid} points at record {rec.chunk_id}")
            if tier is None:
                store.put_record(rec)
            else:
                store.records[cid] = rec
                store._place(rec, tier)
                store.prefix_map[prefix_key(store.system_id, [cid])] = cid
        system_tokens = system_kv = None
        if "system" in manifest:
            system_tokens = np.asarray(manifest["system"]["tokens"], dtype=np.int64)
            system_kv = deserialize_record((d / manifest["system"]["path"]).read_bytes()).kv
        return store, system_tokens, system_kv


# -- record file format ----------------------------------------------------
#
# magic b"FKVC", u32 version, 16-byte chunk id, u8 variant, u32 native_start,
# u16 layers, u16 heads, u16 head_dim, u32 tokens, then for each layer K then V
# as little-endian float32 (tokens, heads, head_dim). Token positions are
# native_start, native_start + 1, ...

RECORD_MAGIC = b"FKVC"
RECORD_VERSION = 1
_HEADER = struct.Struct("<4sI16sBIHHHI")


def serialize_record(rec: ChunkKVRecord) -> bytes:
    kv = rec.kv
    L, T, H, D = kv.k.shape
    expected = np.arange(rec.native_start, rec.native_start + T)
    if not np.array_equal(kv.positions, expected):
        raise KVFormatError("record positions must be consecutive from native_start")
    try:
        raw_id = bytes.fromhex(rec.chunk_id)
    except ValueError:
        raw_id = b""
    if len(raw_id) != 16:
        raise KVFormatError(f"chunk id {rec.chunk_id!r} is not 32 hex digits")
    parts = [_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, raw_id, int(rec.variant),
                          rec.native_start, L, H, D, T)]
    for layer in range(L):
        parts.append(np.ascontiguousarray(kv.k[layer], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(kv.v[layer], dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_record(data: bytes) -> ChunkKVRecord:
    if len(data) < 4:
        raise TruncatedRecordError("record shorter than its magic")
    if data[:4] != RECORD_MAGIC:
        raise BadMagicError("not a KV record (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedRecordError("record header truncated")
    _, version, cid, variant, native_start, L, H, D, T = _HEADER.unpack_from(data)
    if version != RECORD_VERSION:
        raise VersionMismatchError(f"record version {version}, expected {RECORD_VERSION}")
    block = T * H * D * 4
    total = _HEADER.size + 2 * L * block
    if len(data) < total:
        raise TruncatedRecordError(f"record truncated: {len(data)} of {total} bytes")
    if len(data) > total:
        raise KVFormatError("trailing bytes after record")
    k = np.empty((L, T, H, D), np.float32)
    v = np.empty((L, T, H, D), np.float32)
    off = _HEADER.size
    for layer in range(L):
        k[layer] = np.frombuffer(data, "<f4", T * H * D, off).reshape(T, H, D)
        off += block
        v[layer] = np.frombuffer(data, "<f4", T * H * D, off).reshape(T, H, D)
        off += block
    kv = LayeredKV(k, v, np.arange(native_start, native_start + T))
    return ChunkKVRecord(cid.hex(), kv, native_start, Variant(variant))

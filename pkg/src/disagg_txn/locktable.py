"""Compute-node lock table.

Slots are 64-bit words, ``fingerprint << 8 | counter``; eight slots form a
bucket.  Counter 0 is free, 1 is a write lock, an even value ``2k`` is ``k``
readers.  A lock-state map records who holds what so that duplicate requests
are harmless and a failed CN's holds can be found and dropped.
"""

from __future__ import annotations

import struct
import threading
from array import array
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, NamedTuple, Optional

SLOTS_PER_BUCKET = 8
DEFAULT_TABLE_BYTES = 32 * 1024 * 1024
WRITE_COUNTER = 1
MAX_READ_COUNTER = 254
SHARD_BITS = 12
SHARD_MASK = (1 << SHARD_BITS) - 1
_M64 = 0xFFFFFFFFFFFFFFFF
_N_GUARDS = 64
_RELEASED_MEMORY = 1 << 16


def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


class LockMode(Enum):
    READ = "R"
    WRITE = "W"


class LockResult(IntEnum):
    OK = 0
    CONFLICT = 1
    BUCKET_FULL = 2
    OVERFLOW = 3
    SHARD_NOT_OWNED = 4
    NOT_HOLDER = 5


class ShardNotOwned(Exception):
    def __init__(self, shard: int, cn_id: int):
        super().__init__(f"shard {shard} is not served by cn{cn_id}")
        self.shard = shard
        self.cn_id = cn_id


class NotHolder(Exception):
    pass


class Hold(NamedTuple):
    key: int
    txn_id: int
    mode: LockMode
    index_bucket: bool = False


def lock_shard(key: int, index_bucket: bool = False) -> int:
    """Shard that owns a lock: the key's low 12 bits, or a hash for bucket locks."""
    if index_bucket:
        return mix64(key) & SHARD_MASK
    return key & SHARD_MASK


@dataclass
class LockStateEntry:
    key: int
    index_bucket: bool
    slot: int
    holders: dict = field(default_factory=dict)  # (txn_id, cn_id) -> LockMode


@dataclass
class LockRequest:
    acquire: bool
    key: int
    is_write: bool
    txn_id: int
    cn_id: int
    index_bucket: bool = False


# --------------------------------------------------------------------------
# wire format
#
#   request   u32 byte length | u8 version | u16 count | count x record
#   record    u8 op (0 acquire, 1 release) | u64 key | u8 flags | u64 txn | u16 cn
#   flags     bit0 write, bit1 index bucket
#   response  u8 version | u16 count | count x u8 LockResult

WIRE_VERSION = 1
_REQ_HEAD = struct.Struct("<IBH")
_REQ_REC = struct.Struct("<BQBQH")
_RESP_HEAD = struct.Struct("<BH")


class WireError(ValueError):
    pass


def encode_lock_batch(requests: Iterable[LockRequest]) -> bytes:
    recs = [
        _REQ_REC.pack(0 if r.acquire else 1, r.key,
                      (1 if r.is_write else 0) | (2 if r.index_bucket else 0), r.txn_id, r.cn_id)
        for r in requests
    ]
    body = b"".join(recs)
    return _REQ_HEAD.pack(_REQ_HEAD.size + len(body), WIRE_VERSION, len(recs)) + body


def decode_lock_batch(payload: bytes) -> list[LockRequest]:
    if len(payload) < _REQ_HEAD.size:
        raise WireError("short lock batch")
    length, version, count = _REQ_HEAD.unpack_from(payload, 0)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported lock batch version {version}")
    if length != len(payload) or length != _REQ_HEAD.size + count * _REQ_REC.size:
        raise WireError("lock batch length mismatch")
    out = []
    for i in range(count):
        op, key, flags, txn, cn = _REQ_REC.unpack_from(payload, _REQ_HEAD.size + i * _REQ_REC.size)
        if op > 1 or flags & ~3:
            raise WireError("bad lock record")
        out.append(LockRequest(op == 0, key, bool(flags & 1), txn, cn, bool(flags & 2)))
    return out


def encode_lock_results(results: Iterable[LockResult]) -> bytes:
    res = bytes(int(r) for r in results)
    return _RESP_HEAD.pack(WIRE_VERSION, len(res)) + res


def decode_lock_results(payload: bytes) -> list[LockResult]:
    version, count = _RESP_HEAD.unpack_from(payload, 0)
    if version != WIRE_VERSION or len(payload) != _RESP_HEAD.size + count:
        raise WireError("bad lock response")
    return [LockResult(b) for b in payload[_RESP_HEAD.size:]]


# --------------------------------------------------------------------------


class LockTable:
    def __init__(
        self,
        cn_id: int,
        n_slots: int = DEFAULT_TABLE_BYTES // 8,
        owned_shards: Optional[Iterable[int]] = None,
        on_remote_write: Optional[Callable[[int], None]] = None,
    ):
        if n_slots < SLOTS_PER_BUCKET:
            raise ValueError("lock table needs at least one bucket")
        self.cn_id = cn_id
        self.n_buckets = n_slots // SLOTS_PER_BUCKET
        self.slots = array("Q", bytes(8 * self.n_buckets * SLOTS_PER_BUCKET))
        self.state: dict[tuple[bool, int], LockStateEntry] = {}
        self.owned: set[int] = set(range(SHARD_MASK + 1)) if owned_shards is None else set(owned_shards)
        self.paused: set[int] = set()
        self.on_remote_write = on_remote_write
        self.on_grant: Optional[Callable[[int, int, bool], None]] = None
        self._released: OrderedDict = OrderedDict()
        self._guards = [threading.Lock() for _ in range(_N_GUARDS)]
        self.cas_failures = 0

    # ---- hashing

    def locate(self, key: int, index_bucket: bool = False) -> tuple[int, int]:
        h = mix64(key ^ (0x5BD1E995 if index_bucket else 0))
        fingerprint = (h >> 8) & 0xFFFFFFFFFFFFFF
        bucket = (h & 0xFFFFFFFF) % self.n_buckets
        return fingerprint, bucket

    def _find_match(self, bucket: int, fingerprint: int) -> Optional[int]:
        slots = self.slots
        base = bucket * SLOTS_PER_BUCKET
        free = None
        for i in range(base, base + SLOTS_PER_BUCKET):
            w = slots[i]
            if w & 0xFF:
                if w >> 8 == fingerprint:
                    return i
            elif free is None:
                free = i
        return free

    def _cas(self, slot: int, compare: int, swap: int) -> bool:
        if self.slots[slot] != compare:
            self.cas_failures += 1
            return False
        self.slots[slot] = swap
        return True

    def serves(self, shard: int) -> bool:
        return shard in self.owned and shard not in self.paused

    # ---- acquire / release

    def try_acquire(self, key: int, is_write: bool, cn_id: int, txn_id: int,
                    index_bucket: bool = False) -> LockResult:
        shard = lock_shard(key, index_bucket)
        if not self.serves(shard):
            return LockResult.SHARD_NOT_OWNED
        fingerprint, bucket = self.locate(key, index_bucket)
        with self._guards[bucket % _N_GUARDS]:
            lk = (index_bucket, key)
            holder = (txn_id, cn_id)
            entry = self.state.get(lk)
            if entry is not None and holder in entry.holders:
                held = entry.holders[holder]
                if held is LockMode.WRITE or not is_write:
                    return LockResult.OK
                return self._upgrade(entry, holder, key, cn_id, index_bucket)
            for _ in range(2):
                slot = self._find_match(bucket, fingerprint)
                if slot is None:
                    return LockResult.BUCKET_FULL
                word = self.slots[slot]
                counter = word & 0xFF
                if counter == WRITE_COUNTER or (is_write and counter):
                    return LockResult.CONFLICT
                if is_write:
                    compare, swap = 0, (fingerprint << 8) | WRITE_COUNTER
                    if cn_id != self.cn_id and not index_bucket and self.on_remote_write is not None:
                        self.on_remote_write(key)
                else:
                    if counter >= MAX_READ_COUNTER:
                        return LockResult.OVERFLOW
                    compare, swap = word, (fingerprint << 8) | (counter + 2)
                if self._cas(slot, compare, swap):
                    break
            else:
                return LockResult.CONFLICT
            if entry is None:
                entry = self.state[lk] = LockStateEntry(key, index_bucket, slot)
            entry.holders[holder] = LockMode.WRITE if is_write else LockMode.READ
            self._released.pop((lk, holder), None)
            if self.on_grant is not None:
                self.on_grant(key, shard, index_bucket)
            return LockResult.OK

    def _upgrade(self, entry: LockStateEntry, holder, key: int, cn_id: int, index_bucket: bool) -> LockResult:
        word = self.slots[entry.slot]
        if word & 0xFF != 2:
            return LockResult.CONFLICT
        if cn_id != self.cn_id and not index_bucket and self.on_remote_write is not None:
            self.on_remote_write(key)
        if not self._cas(entry.slot, word, (word >> 8 << 8) | WRITE_COUNTER):
            return LockResult.CONFLICT
        entry.holders[holder] = LockMode.WRITE
        return LockResult.OK

    def acquire(self, key: int, is_write: bool, cn_id: int, txn_id: int, index_bucket: bool = False) -> bool:
        """Returns whether the lock is held; raises ShardNotOwned when misrouted."""
        res = self.try_acquire(key, is_write, cn_id, txn_id, index_bucket)
        if res is LockResult.SHARD_NOT_OWNED:
            raise ShardNotOwned(lock_shard(key, index_bucket), self.cn_id)
        return res is LockResult.OK

    def lock_index_bucket(self, bucket_key: int, cn_id: int, txn_id: int) -> bool:
        return self.acquire(bucket_key, True, cn_id, txn_id, index_bucket=True)

    def release(self, key: int, is_write: bool, cn_id: int, txn_id: int, index_bucket: bool = False) -> bool:
        lk = (index_bucket, key)
        holder = (txn_id, cn_id)
        fingerprint, bucket = self.locate(key, index_bucket)
        with self._guards[bucket % _N_GUARDS]:
            entry = self.state.get(lk)
            mode = LockMode.WRITE if is_write else LockMode.READ
            if entry is None or entry.holders.get(holder) is not mode:
                if (lk, holder) in self._released:
                    return True
                raise NotHolder(f"txn {txn_id}@cn{cn_id} does not hold {mode.value} lock on {key:#x}")
            self._drop(lk, entry, holder)
            return True

    def _drop(self, lk, entry: LockStateEntry, holder) -> None:
        mode = entry.holders.pop(holder)
        slot = entry.slot
        word = self.slots[slot]
        if mode is LockMode.WRITE:
            self.slots[slot] = 0
        else:
            counter = (word & 0xFF) - 2
            self.slots[slot] = 0 if counter <= 0 else (word >> 8 << 8) | counter
        if not entry.holders:
            del self.state[lk]
        self._released[(lk, holder)] = True
        if len(self._released) > _RELEASED_MEMORY:
            self._released.popitem(last=False)

    def try_release(self, key: int, is_write: bool, cn_id: int, txn_id: int,
                    index_bucket: bool = False) -> LockResult:
        try:
            self.release(key, is_write, cn_id, txn_id, index_bucket)
        except NotHolder:
            return LockResult.NOT_HOLDER
        return LockResult.OK

    # ---- batched RPC

    def handle_batch(self, requests: Iterable[LockRequest]) -> list[LockResult]:
        out = []
        for r in requests:
            if r.acquire:
                out.append(self.try_acquire(r.key, r.is_write, r.cn_id, r.txn_id, r.index_bucket))
            else:
                out.append(self.try_release(r.key, r.is_write, r.cn_id, r.txn_id, r.index_bucket))
        return out

    def handle_lock_rpc(self, payload: bytes) -> bytes:
        return encode_lock_results(self.handle_batch(decode_lock_batch(payload)))

    # ---- inspection and bulk release

    def holders_of_cn(self, cn_id: int) -> list[Hold]:
        out = []
        for (ib, key), entry in self.state.items():
            for (txn, cn), mode in entry.holders.items():
                if cn == cn_id:
                    out.append(Hold(key, txn, mode, ib))
        return out

    def holders_in_shard(self, shard: int) -> list[tuple[Hold, int]]:
        out = []
        for (ib, key), entry in self.state.items():
            if lock_shard(key, ib) != shard:
                continue
            for (txn, cn), mode in entry.holders.items():
                out.append((Hold(key, txn, mode, ib), cn))
        return out

    def release_all(self, cn_id: int) -> int:
        n = 0
        for (ib, key), entry in list(self.state.items()):
            for holder in [h for h in entry.holders if h[1] == cn_id]:
                self._drop((ib, key), entry, holder)
                n += 1
        return n

    def force_release(self, key: int, txn_id: int, cn_id: int, index_bucket: bool = False) -> bool:
        lk = (index_bucket, key)
        entry = self.state.get(lk)
        if entry is None or (txn_id, cn_id) not in entry.holders:
            return False
        self._drop(lk, entry, (txn_id, cn_id))
        return True

    def drop_shard(self, shard: int) -> None:
        """Forget metadata of a shard handed to another CN (must hold no locks)."""
        for lk in [lk for lk in self.state if lock_shard(lk[1], lk[0]) == shard]:
            raise RuntimeError(f"shard {shard} still has holders on {lk}")
        self.owned.discard(shard)
        self.paused.discard(shard)
        for k in [k for k in self._released if lock_shard(k[0][1], k[0][0]) == shard]:
            del self._released[k]

    def clear(self) -> None:
        """Start over from an empty table."""
        self.slots = array("Q", bytes(8 * len(self.slots)))
        self.state.clear()
        self._released.clear()

    def slot_counter(self, key: int, index_bucket: bool = False) -> int:
        entry = self.state.get((index_bucket, key))
        if entry is not None:
            return self.slots[entry.slot] & 0xFF
        fingerprint, bucket = self.locate(key, index_bucket)
        slot = self._find_match(bucket, fingerprint)
        if slot is None or self.slots[slot] >> 8 != fingerprint:
            return 0
        return self.slots[slot] & 0xFF

    def check_invariants(self) -> None:
        """Raise AssertionError if slot counters and the lock-state map disagree."""
        per_slot: dict[int, list] = {}
        for lk, entry in self.state.items():
            assert entry.holders, f"empty lock-state entry {lk}"
            per_slot.setdefault(entry.slot, []).extend(entry.holders.values())
        for slot, modes in per_slot.items():
            counter = self.slots[slot] & 0xFF
            writers = sum(m is LockMode.WRITE for m in modes)
            if writers:
                assert writers == 1 and len(modes) == 1 and counter == WRITE_COUNTER, (slot, modes, counter)
            else:
                assert counter == 2 * len(modes), (slot, modes, counter)
        for i, w in enumerate(self.slots):
            if w & 0xFF:
                assert i in per_slot, f"slot {i} busy without a lock-state entry"

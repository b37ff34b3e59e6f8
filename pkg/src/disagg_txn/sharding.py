"""Key construction, shard ownership, routing and hot-shard transfer."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

from .locktable import SHARD_BITS, SHARD_MASK, mix64

N_SHARDS = 1 << SHARD_BITS
HIGH_BITS = 64 - SHARD_BITS
TRANSFER_CHANNEL = 0xFFFF


class FieldOutOfDomain(ValueError):
    pass


class TransferTimeout(Exception):
    pass


@dataclass(frozen=True)
class TableKeySpec:
    """How a table's primary key becomes a 64-bit key.

    ``fields`` is an ordered list of ``(name, bit_width)``; they are packed,
    first field lowest, into the 52 high bits.  The low 12 bits are the
    critical field mod 4096, or a seeded hash of the packed value when no
    critical field is given.
    """

    table_id: int
    fields: tuple[tuple[str, int], ...]
    critical: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if sum(w for _, w in self.fields) > HIGH_BITS:
            raise ValueError(f"packing of table {self.table_id} exceeds {HIGH_BITS} bits")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("duplicate field names")
        if self.critical is not None and self.critical not in names:
            raise ValueError(f"critical field {self.critical!r} is not a key field")


def make_key(spec: TableKeySpec, primary_key: Union[Mapping[str, int], Sequence[int]]) -> int:
    if not isinstance(primary_key, Mapping):
        if len(primary_key) != len(spec.fields):
            raise FieldOutOfDomain("wrong number of key fields")
        primary_key = {n: v for (n, _), v in zip(spec.fields, primary_key)}
    packed = 0
    shift = 0
    for name, width in spec.fields:
        v = primary_key[name]
        if not 0 <= v < 1 << width:
            raise FieldOutOfDomain(f"{name}={v} outside [0, 2^{width})")
        packed |= v << shift
        shift += width
    if spec.critical is None:
        shard = mix64(packed ^ spec.seed ^ (spec.table_id << 48)) & SHARD_MASK
    else:
        shard = primary_key[spec.critical] & SHARD_MASK
    return (packed << SHARD_BITS) | shard


def shard_of(key: int) -> int:
    return key & SHARD_MASK


def lock_key(table_id: int, key: int) -> int:
    """Lock-table key of a record; keeps the shard bits, separates tables."""
    return key ^ (table_id << 52)


class ShardMap:
    """shard -> owner CN, with a version bumped on every transfer."""

    def __init__(self, owners: Sequence[int], version: int = 0):
        if len(owners) != N_SHARDS:
            raise ValueError("a shard map covers all 4096 shards")
        self.owners = list(owners)
        self.version = version

    @classmethod
    def even(cls, n_cns: int) -> "ShardMap":
        return cls([s * n_cns // N_SHARDS for s in range(N_SHARDS)])

    def owner(self, shard: int) -> int:
        return self.owners[shard]

    def shards_of(self, cn: int) -> list[int]:
        return [s for s, o in enumerate(self.owners) if o == cn]

    def transfer(self, shard: int, to_cn: int) -> None:
        self.owners[shard] = to_cn
        self.version += 1

    def copy(self) -> "ShardMap":
        return ShardMap(self.owners, self.version)


@dataclass
class TxnDescriptor:
    read_only: bool
    first_key: Optional[int] = None


class RoutingLayer:
    """The shared, authoritative shard map plus hybrid routing."""

    def __init__(self, n_cns: int, seed: int = 0, policy: str = "hybrid"):
        self.map = ShardMap.even(n_cns)
        self.n_cns = n_cns
        self.rng = random.Random(seed ^ 0x5EED)
        self.policy = policy
        self.available: list[int] = list(range(n_cns))

    def route_txn(self, desc: TxnDescriptor) -> int:
        if desc.read_only or self.policy == "random" or desc.first_key is None:
            pool = self.available or list(range(self.n_cns))
            return pool[self.rng.randrange(len(pool))]
        return self.map.owner(shard_of(desc.first_key))

    def snapshot(self) -> ShardMap:
        return self.map.copy()

    def update(self, shard: int, new_owner: int) -> int:
        self.map.transfer(shard, new_owner)
        return self.map.version

    def set_available(self, cn: int, up: bool) -> None:
        if up and cn not in self.available:
            self.available.append(cn)
            self.available.sort()
        elif not up and cn in self.available:
            self.available.remove(cn)


# --------------------------------------------------------------------------
# load metrics and overload detection

# per-CN metrics record, 32 bytes: cn u16 | pad u16 | interval u32 |
# avg latency ns f64 | committed u64 | hottest shard u16 | pad 6
METRICS_RECORD = struct.Struct("<HxxIdQH6x")
# transfer message: version u8 | shard u16 | sender u16 | receiver u16 | map version u32
TRANSFER_MSG = struct.Struct("<BHHHI")


def encode_metrics(cn: int, interval: int, avg_latency_ns: float, committed: int, hottest: int) -> bytes:
    return METRICS_RECORD.pack(cn, interval, avg_latency_ns, committed, hottest)


def decode_metrics(buf: bytes) -> tuple[int, int, float, int, int]:
    return METRICS_RECORD.unpack(buf)


def encode_transfer(shard: int, sender: int, receiver: int, map_version: int) -> bytes:
    return TRANSFER_MSG.pack(1, shard, sender, receiver, map_version)


def decode_transfer(buf: bytes) -> tuple[int, int, int, int]:
    version, shard, sender, receiver, mv = TRANSFER_MSG.unpack(buf)
    if version != 1:
        raise ValueError("bad transfer message")
    return shard, sender, receiver, mv


@dataclass
class LoadMetrics:
    """Latency history per CN (one value per interval) and per-shard request counts."""

    interval_ns: float = 100e6
    latency: dict[int, list[float]] = field(default_factory=dict)
    shard_requests: dict[int, dict[int, int]] = field(default_factory=dict)

    def publish(self, cn: int, avg_latency: float) -> None:
        hist = self.latency.setdefault(cn, [])
        hist.append(avg_latency)
        del hist[:-8]


def detect_overload(latency: Mapping[int, Sequence[float]], factor: float = 1.5,
                    intervals: int = 3) -> Optional[int]:
    """CN whose latency exceeded ``factor`` x cluster average in each of the last ``intervals``."""
    cns = [cn for cn, h in latency.items() if len(h) >= intervals]
    if len(cns) < 2:
        return None
    worst = None
    worst_ratio = 0.0
    for cn in sorted(cns):
        ratio = float("inf")
        for k in range(1, intervals + 1):
            avg = sum(latency[c][-k] for c in cns) / len(cns)
            if avg <= 0:
                ratio = 0.0
                break
            ratio = min(ratio, latency[cn][-k] / avg)
        if ratio > factor and ratio > worst_ratio:
            worst, worst_ratio = cn, ratio
    return worst


def hottest_shard(requests: Mapping[int, int], owned) -> Optional[int]:
    best = None
    best_n = 0
    for shard, n in sorted(requests.items()):
        if shard in owned and n > best_n:
            best, best_n = shard, n
    return best


@dataclass
class TransferRecord:
    shard: int
    sender: int
    receiver: int
    started_at: float
    served_at: float = 0.0
    aborted_holders: int = 0
    map_version: int = 0
    ok: bool = False
    error: Optional[Exception] = None

    @property
    def interruption_ns(self) -> float:
        return self.served_at - self.started_at


class Resharder:
    """Pass-by-range shard transfer between two CNs.

    Works against duck-typed compute nodes exposing ``index``, ``node``,
    ``lock_table`` and ``vtcache``.  One transfer at a time cluster-wide.
    """

    def __init__(self, cluster, wait_ns: float = 10e6, poll_ns: float = 5_000.0):
        self.cluster = cluster
        self.wait_ns = wait_ns
        self.poll_ns = poll_ns
        self.in_flight = False
        self.history: list[TransferRecord] = []

    def handle_transfer(self, receiver, payload: bytes) -> bytes:
        shard, sender, to, _ = decode_transfer(payload)
        if to != receiver.index:
            return b"\x00"
        receiver.lock_table.owned.add(shard)
        receiver.lock_table.paused.discard(shard)
        return b"\x01"

    def reshard(self, shard: int, sender, receiver):
        """Generator; returns the TransferRecord (``ok`` False when rolled back)."""
        if self.in_flight:
            return None
        self.in_flight = True
        sim = self.cluster.sim
        fabric = self.cluster.fabric
        rec = TransferRecord(shard, sender.index, receiver.index, sim.now)
        self.history.append(rec)
        table = sender.lock_table
        table.paused.add(shard)
        deadline = sim.now + self.wait_ns
        while table.holders_in_shard(shard):
            if sim.now >= deadline:
                for hold, cn in table.holders_in_shard(shard):
                    if self.cluster.proactive_abort(hold.txn_id, cn):
                        table.force_release(hold.key, hold.txn_id, cn, hold.index_bucket)
                        rec.aborted_holders += 1
                if not table.holders_in_shard(shard):
                    break
            yield sim.now + self.poll_ns
        table.drop_shard(shard)
        sender.vtcache.clear_shard(shard)
        msg = encode_transfer(shard, sender.index, receiver.index, self.cluster.routing.map.version)
        op = fabric.rpc(receiver.node, msg, src=sender.node, channel=TRANSFER_CHANNEL)
        yield op.done_at
        if op.error is not None or op.result != b"\x01":
            rec.error = TransferTimeout(f"cn{receiver.index} did not take shard {shard}: {op.error}")
            table.owned.add(shard)
            table.paused.discard(shard)
            rec.served_at = sim.now
            self.in_flight = False
            return rec
        # measured at the acknowledgement, so it bounds the gap from above
        rec.served_at = sim.now
        rec.map_version = self.cluster.routing.update(shard, receiver.index)
        rec.ok = True
        self.in_flight = False
        return rec

"""Small cluster builders shared by the test modules."""

from __future__ import annotations

from disagg_txn.cluster import Cluster, ClusterConfig
from disagg_txn.memstore import TableSchema
from disagg_txn.txn import IsolationLevel, ProtocolConfig

KV = 1
VALUE_LEN = 40


def kv_key(i: int, shard: int | None = None) -> int:
    """Key whose shard is ``i mod 4096`` unless ``shard`` is given."""
    return (i << 12) | ((i if shard is None else shard) & 0xFFF)


def val(n: int, length: int = VALUE_LEN) -> bytes:
    return n.to_bytes(8, "little", signed=True) + bytes(length - 8)


def num(payload: bytes) -> int:
    return int.from_bytes(payload[:8], "little", signed=True)


def small_cluster(n_keys: int = 64, *, isolation=IsolationLevel.SR, mode: str = "lotus",
                  n_cns: int = 3, coordinators: int = 2, n_cells: int = 2, lock_slots: int = 1 << 10,
                  keys=None, **extra) -> Cluster:
    proto_keys = {k: extra.pop(k) for k in list(extra) if k in ProtocolConfig.__dataclass_fields__}
    cfg = ClusterConfig(n_cns=n_cns, coordinators=coordinators, n_cells=n_cells, lock_slots=lock_slots,
                        protocol=ProtocolConfig(isolation=isolation, mode=mode, **proto_keys), **extra)
    c = Cluster(cfg)
    c.create_table(TableSchema(KV, "kv", VALUE_LEN, max(n_keys, 16), n_cells))
    for k in (keys if keys is not None else [kv_key(i) for i in range(n_keys)]):
        c.load(KV, k, val(0))
    c.finish_load()
    return c


def latest(c: Cluster, key: int, table: int = KV):
    got = c.pool.peek_latest(table, key)
    return None if got is None else (got[0], num(got[1]))


def update(coord, key: int, delta: int = 1, table: int = KV):
    """Body: read-modify-write one key; returns the context."""
    ctx = yield from coord.begin()
    coord.add_rw(ctx, table, key)
    if (yield from coord.execute(ctx)):
        ctx.put(table, key, val(num(ctx.get(table, key)) + delta))
        yield from coord.commit(ctx)
    return ctx


def read_only(coord, keys, table: int = KV):
    ctx = yield from coord.begin(read_only=True)
    for k in keys:
        coord.add_ro(ctx, table, k)
    yield from coord.run_read_only(ctx)
    return ctx

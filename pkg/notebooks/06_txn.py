# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Transactions
#
# A coordinator runs each read-write transaction in two phases. Execute
# takes the locks and reads the data. Commit writes a log record and the new
# data as invisible cells, fetches a commit timestamp and flips the cells
# visible, then releases the locks. Coordinators are generators that run
# inside the simulator.

from disagg_txn.cluster import Cluster, ClusterConfig
from disagg_txn.memstore import TableSchema
from disagg_txn.txn import IsolationLevel, ProtocolConfig

KV = 1


def key(i):
    return (i << 12) | (i & 0xFFF)


def val(n):
    return n.to_bytes(8, "little", signed=True)


def num(b):
    return int.from_bytes(b[:8], "little", signed=True)


def cluster(isolation=IsolationLevel.SR):
    c = Cluster(ClusterConfig(n_cns=3, coordinators=2, lock_slots=1024,
                              protocol=ProtocolConfig(isolation=isolation)))
    c.create_table(TableSchema(KV, "kv", 8, 64, 2))
    for i in range(16):
        c.load(KV, key(i), val(100))
    c.finish_load()
    return c


# ## A transfer between two keys

# +
c = cluster()
co = c.coordinator(0, 0)


def transfer(co, src, dst, amount):
    ctx = yield from co.begin()
    co.add_rw(ctx, KV, src)
    co.add_rw(ctx, KV, dst)
    if (yield from co.execute(ctx)):
        ctx.put(KV, src, val(num(ctx.get(KV, src)) - amount))
        ctx.put(KV, dst, val(num(ctx.get(KV, dst)) + amount))
        yield from co.commit(ctx)
    return ctx


ctx = c.run(transfer(co, key(1), key(2), 30))
print(ctx.status.name, "lock RPCs:", ctx.lock_rpcs, "local locks:", ctx.local_locks)
print("balances:", num(c.pool.peek_latest(KV, key(1))[1]), num(c.pool.peek_latest(KV, key(2))[1]))
# -

# ## SR versus SI
#
# Under SR a key in the read set is read-locked, so a concurrent writer is
# refused. Under SI only writes are locked and the writer goes ahead.

# +
def reader_then_writer(isolation):
    c = cluster(isolation)
    a_co, b_co = c.coordinator(0, 0), c.coordinator(1, 0)

    def body():
        a = yield from a_co.begin()
        a_co.add_ro(a, KV, key(5))
        a_co.add_rw(a, KV, key(6))
        yield from a_co.execute(a)
        b = yield from b_co.begin()
        b_co.add_rw(b, KV, key(5))
        if (yield from b_co.execute(b)):
            b.put(KV, key(5), val(1))
            yield from b_co.commit(b)
        yield from a_co.commit(a)
        return b

    return c.run(body())


for iso in (IsolationLevel.SR, IsolationLevel.SI):
    b = reader_then_writer(iso)
    print(iso.name, "writer:", b.status.name, b.abort_reason.name if b.abort_reason else "")
# -

# ## Read-only transactions
#
# These take no locks. They read the newest version older than their start
# timestamp and validate it with the consistency versions.

# +
def snapshot(co, keys):
    ctx = yield from co.begin(read_only=True)
    for k in keys:
        co.add_ro(ctx, KV, k)
    yield from co.run_read_only(ctx)
    return ctx


ro = c.run(snapshot(c.coordinator(2, 0), [key(1), key(2)]))
print(ro.status.name, [num(ro.get(KV, k)) for k in (key(1), key(2))])

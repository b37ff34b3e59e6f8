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

# # Failure detection and recovery
#
# Compute nodes hold leases in the memory pool. When a lease lapses, the
# survivors release every lock the dead CN held. They also replay its commit
# logs: a transaction whose new data had already become visible somewhere
# is finished, and anything earlier is rolled back. The failed CN restarts
# with empty tables and rejoins once recovery is done.

from disagg_txn.bench import BenchConfig, run_benchmark

# ## Three compute nodes fail at once

r = run_benchmark(BenchConfig(workload="kvs", cns=6, coordinators=2, txns=None, duration_ms=40,
                              scale=20000, lock_slots=1 << 16, timeline_ms=2.0,
                              crash=[(3, 10.0), (4, 10.0), (5, 10.0)]))
for rec in r.metrics.recoveries:
    print(rec)

# Commits per 2 ms bucket show the outage and the return to full rate.

# +
tl = r.metrics.timeline
peak = max(tl)
for i, n in enumerate(tl[:20]):
    print(f"{i * 2:3d} ms {n:5d} " + "#" * int(40 * n / peak))
print("checker:", "ok" if r.verdict.ok else r.verdict.violations[:3])
# -

# ## Crashing at a chosen protocol step
#
# The cluster calls ``crash_point(coordinator, step, ctx)`` at each step of
# the commit protocol. Returning True parks the coordinator there, which is
# how the crash sweep in the test suite reaches every step.

# +
from disagg_txn.cluster import Cluster, ClusterConfig
from disagg_txn.memstore import TableSchema

c = Cluster(ClusterConfig(n_cns=3, coordinators=2, lock_slots=1024, failure_detection=True))
c.create_table(TableSchema(1, "kv", 8, 16, 2))
ka, kb = (1 << 12) | c.routing.map.shards_of(1)[0], (2 << 12) | c.routing.map.shards_of(0)[0]
for k in (ka, kb):
    c.load(1, k, bytes(8))
c.finish_load()
c.start()
victim = c.coordinator(1, 0)


def hook(coord, step, ctx):
    if coord is victim and step == "commit.visible":
        c.crash_cn(1)
        return True
    return False


def write_both(co):
    ctx = yield from co.begin()
    co.add_rw(ctx, 1, ka)
    co.add_rw(ctx, 1, kb)
    if (yield from co.execute(ctx)):
        ctx.put(1, ka, (5).to_bytes(8, "little"))
        ctx.put(1, kb, (5).to_bytes(8, "little"))
        yield from co.commit(ctx)
    return ctx


c.crash_point = hook
c.sim.process(write_both(victim))
c.sim.run(until=60e6)
task = c.recovery.tasks[0]
print("phase", task.phase.name, "continued", len(task.continued))
print("values", [int.from_bytes(c.pool.peek_latest(1, k)[1], "little") for k in (ka, kb)])

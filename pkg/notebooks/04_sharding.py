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

# # Sharding, routing and resharding
#
# Keys embed a shard id in their low 12 bits, taken from the table's
# critical field. Each shard has one owning CN. Read-write transactions go
# to the owner of their shard so their locks are local. Read-only ones go
# anywhere.

from collections import Counter

from disagg_txn.bench import BenchConfig, run_benchmark
from disagg_txn.sharding import (
    RoutingLayer,
    TableKeySpec,
    TxnDescriptor,
    detect_overload,
    make_key,
    shard_of,
)

# ## Application-aware keys

CUSTOMER = TableKeySpec(5, (("w_id", 16), ("d_id", 8), ("c_id", 24)), critical="w_id")
for w in (3, 4099):
    key = make_key(CUSTOMER, {"w_id": w, "d_id": 2, "c_id": 77})
    print(f"warehouse {w}: key={key:#x} shard={shard_of(key)}")

# ## Hybrid routing

# +
routing = RoutingLayer(3, seed=1)
rw = Counter(routing.route_txn(TxnDescriptor(False, (9 << 12) | 5)) for _ in range(1000))
ro = Counter(routing.route_txn(TxnDescriptor(True, (9 << 12) | 5)) for _ in range(3000))
print("read-write to", dict(rw), "owner of shard 5 is", routing.map.owner(5))
print("read-only spread", dict(sorted(ro.items())))
# -

# ## Overload rule
#
# A CN is overloaded when its average latency is at least 1.5 times the
# cluster mean in each of the last three intervals.

print(detect_overload({0: [9.0, 9.5, 9.2], 1: [4.0] * 3, 2: [4.1] * 3}))
print(detect_overload({0: [9.0, 4.0, 9.2], 1: [4.0] * 3, 2: [4.1] * 3}))

# ## A hotspot in a running cluster
#
# Sending every read-write transaction to shard 7 makes its owner the
# slowest CN. The monitor then hands the shard's locks to the least loaded
# CN. Only lock ownership moves, the data stays in the memory pool.

# +
r = run_benchmark(BenchConfig(workload="kvs", txns=None, duration_ms=20, rw_ratio=0.85, scale=20000,
                              lock_slots=1 << 16, hotspot_shard=7, reshard=True, metrics_interval_ms=2.0))
for e in r.metrics.reshard_events:
    print(f"t={e['started_ms']:.1f}ms shard {e['shard']}: cn{e['sender']} -> cn{e['receiver']}, "
          f"interruption {e['interruption_ms'] * 1e3:.1f}us")
print("checker:", "ok" if r.verdict.ok else r.verdict.violations[:3])

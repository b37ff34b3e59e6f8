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

# # Lock table on the compute nodes
#
# Locks live in per-CN tables instead of memory-node lock words. A slot
# holds a reader counter that grows by two per reader, or 1 for a writer.
# Each CN serves the shards it owns. Requests for other shards are refused.

from disagg_txn.locktable import LockRequest, LockResult, LockTable, lock_shard

table = LockTable(cn_id=0, n_slots=1024, owned_shards=[1, 2, 3])
A = (10 << 12) | 1
B = (11 << 12) | 2

# ## Readers and writers

# +
print("reader t1:", table.try_acquire(A, False, 0, 1))
print("reader t2:", table.try_acquire(A, False, 1, 2))
print("slot counter:", table.slot_counter(A))
print("writer t3:", table.try_acquire(A, True, 2, 3))

table.try_release(A, False, 0, 1)
table.try_release(A, False, 1, 2)
print("writer t3 after readers left:", table.try_acquire(A, True, 2, 3))
print("slot counter:", table.slot_counter(A))
table.check_invariants()
# -

# ## Batched requests
#
# A coordinator sends every lock it needs from one CN as one message. The
# table answers each request in order.

batch = [LockRequest(True, B, True, 7, 1), LockRequest(True, A, False, 7, 1),
         LockRequest(True, (12 << 12) | 9, True, 7, 1)]
for req, res in zip(batch, table.handle_batch(batch)):
    print(f"shard {lock_shard(req.key)}: {res.name}")

# The third key hashes to shard 9, which this CN does not serve, so the
# coordinator learns it needs a fresh shard map.

assert table.handle_batch(batch[2:])[0] is LockResult.SHARD_NOT_OWNED

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

# # Version-table cache
#
# A CN caches CVTs only for keys whose locks it owns. While the lock is held
# locally no other CN can change the CVT, so a hit skips a fabric read. A
# remote write lock on the key invalidates the entry first.

from disagg_txn.bench import BenchConfig, run_benchmark
from disagg_txn.memstore import decode_cvt
from disagg_txn.vtcache import LruCache, VtCache

# ## The cache structure
#
# The cache is split into one LRU per coordinator so lookups do not contend.

# +
cvt = decode_cvt(bytes(32 + 2 * 32), 2)
cache = VtCache(capacity=8, n_sub=2)
for key in range(20):
    cache.vt_update_local(key, 0x1000 + key, cvt)
print("entries:", len(cache), "capacity:", cache.capacity)
print("hit 19:", cache.vt_lookup(19) is not None, "hit 0:", cache.vt_lookup(0) is not None)
cache.vt_invalidate(19)
print("after invalidate:", cache.vt_lookup(19))

lru = LruCache(2)
lru.put("a", 1)
lru.put("b", 2)
lru.get("a")
lru.put("c", 3)
print("lru keeps", lru.keys())
# -

# ## Freshness under load
#
# With shadow checking on, every hit is compared with the CVT in memory.
# A stale hit would be counted.

m = run_benchmark(BenchConfig(workload="smallbank", txns=5000, zipf=0.5, scale=5000, lock_slots=1 << 14,
                              shadow_check=True, check=False)).metrics
print(f"hit rate {m.vt_hit_rate:.2f}, hits {m.vt_hits}, stale hits {m.stale_vt_hits}")

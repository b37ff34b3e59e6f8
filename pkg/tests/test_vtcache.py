from hypothesis import given, settings
from hypothesis import strategies as st

from disagg_txn.memstore import CvtHeader, decode_cvt
from disagg_txn.sharding import lock_key
from disagg_txn.txn import AbortReason, TxnStatus
from disagg_txn.vtcache import AddrCache, LruCache, VtCache
from helpers import KV, kv_key, latest, read_only, small_cluster, update


def _owner_of(c, key):
    return c.routing.map.owner(key & 0xFFF)


def _mn_cvt(c, key):
    addr, cvt = c.pool.peek_cvt(KV, key)
    return addr, cvt


def test_local_commit_refreshes_entry():
    c = small_cluster()
    key = kv_key(5)
    home = _owner_of(c, key)
    c.run(update(c.coordinator(home, 0), key, 3))
    hit = c.cns[home].vtcache.vt_lookup(lock_key(KV, key))
    assert hit is not None
    addr, cvt = _mn_cvt(c, key)
    assert hit[0] == addr
    assert hit[1].cells == cvt.cells
    assert latest(c, key)[1] == 3


def test_remote_write_lock_invalidates():
    c = small_cluster()
    key = kv_key(5)
    home = _owner_of(c, key)
    other = (home + 1) % 3
    c.run(update(c.coordinator(home, 0), key))
    cache = c.cns[home].vtcache
    assert lock_key(KV, key) in cache
    c.run(update(c.coordinator(other, 0), key))
    assert lock_key(KV, key) not in cache
    # the next local transaction refetches and sees the remote write
    ctx = c.run(update(c.coordinator(home, 0), key))
    assert ctx.status is TxnStatus.COMMITTED
    assert latest(c, key)[1] == 3


def test_remote_write_that_aborts_leaves_entry_invalidated():
    c = small_cluster()
    key = kv_key(5)
    home = _owner_of(c, key)
    other = c.coordinator((home + 1) % 3, 0)
    c.run(update(c.coordinator(home, 0), key))
    cache = c.cns[home].vtcache

    def remote_then_abort():
        ctx = yield from other.begin()
        other.add_rw(ctx, KV, key)
        assert (yield from other.execute(ctx))
        yield from other.abort(ctx)
        return ctx

    ctx = c.run(remote_then_abort())
    assert ctx.abort_reason is AbortReason.USER
    assert lock_key(KV, key) not in cache
    before = cache.misses
    c.run(update(c.coordinator(home, 0), key))
    assert cache.misses == before + 1
    assert latest(c, key)[1] == 2


def test_transferred_shard_is_cleared():
    c = small_cluster()
    key = kv_key(5)
    home = _owner_of(c, key)
    c.run(update(c.coordinator(home, 0), key))
    cache = c.cns[home].vtcache
    c.run(c.resharder.reshard(5, c.cns[home], c.cns[(home + 1) % 3]))
    assert cache.vt_lookup(lock_key(KV, key)) is None


def test_invalidate_absent_and_then_lookup():
    v = VtCache(64, 4)
    v.vt_invalidate(123)
    assert v.vt_lookup(123) is None
    _, cvt = _mn_cvt(small_cluster(), kv_key(1))
    v.vt_update_local(123, 0x40, cvt)
    v.vt_invalidate(123)
    assert v.vt_lookup(123) is None


def test_lookup_returns_a_private_copy():
    _, cvt = _mn_cvt(small_cluster(), kv_key(1))
    v = VtCache(64, 4)
    v.vt_update_local(1, 0x40, cvt)
    _, got = v.vt_lookup(1)
    got.cells[0].version = 999
    assert v.vt_lookup(1)[1].cells[0].version != 999


def test_lru_evicts_least_recent():
    lru = LruCache(3)
    for k in "abc":
        lru.put(k, k)
    lru.get("a")
    lru.put("d", "d")
    assert lru.keys() == ["c", "a", "d"] and lru.evictions == 1


def test_capacity_bound_per_sub_cache():
    _, cvt = _mn_cvt(small_cluster(), kv_key(1))
    v = VtCache(capacity=16, n_sub=4)
    for k in range(1000):
        v.vt_update_local(k, 0, cvt)
        assert len(v) <= v.capacity
    assert all(len(s) == s.capacity for s in v.subs)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("uil"), st.integers(0, 63)), max_size=200))
def test_capacity_never_exceeded(ops):
    cvt = decode_cvt(bytes(32 + 2 * 32), 2)
    v = VtCache(capacity=8, n_sub=2)
    for kind, k in ops:
        if kind == "u":
            v.vt_update_local(k, k, cvt)
        elif kind == "i":
            v.vt_invalidate(k)
        else:
            v.vt_lookup(k)
        assert all(len(s) <= s.capacity for s in v.subs)


def test_sub_caches_partition_keys():
    v = VtCache(capacity=1 << 12, n_sub=8)
    cvt = decode_cvt(bytes(32 + 2 * 32), 2)
    for k in range(500):
        v.vt_update_local(k, 0, cvt)
    owners = {}
    for i, s in enumerate(v.subs):
        for k in s.keys():
            assert k not in owners
            owners[k] = i
    assert len(owners) == 500 and len({*owners.values()}) == 8


def test_clear_shard_only_that_shard():
    v = VtCache(1024, 4)
    cvt = decode_cvt(bytes(32 + 2 * 32), 2)
    for i in range(40):
        v.vt_update_local(kv_key(i, shard=i % 4), 0, cvt)
    assert v.clear_shard(2) == 10
    assert all(k & 0xFFF != 2 for s in v.subs for k in s.keys())
    assert len(v) == 30


def test_addr_validate_flags():
    a = AddrCache()
    assert a.addr_validate(CvtHeader(7, 1, 40), 7, 1)
    assert not a.addr_validate(CvtHeader(8, 1, 40), 7, 1)
    assert not a.addr_validate(CvtHeader(7, 2, 40), 7, 1)
    assert a.stale == 2


def test_miss_reads_bucket_then_inserts_address():
    c = small_cluster()
    key = kv_key(9)
    reader = c.cns[(_owner_of(c, key) + 1) % 3]
    lk = lock_key(KV, key)
    assert reader.addr_cache.addr_lookup(lk) is None
    c.run(read_only(c.coordinator(reader.index, 0), [key]))
    addr, _ = _mn_cvt(c, key)
    assert reader.addr_cache.addr_lookup(lk) == addr


def test_reused_address_detected_and_repaired():
    c = small_cluster()
    key, other = kv_key(9), kv_key(10)
    c.run(update(c.coordinator(0, 0), key, 5))
    reader = c.cns[1]
    wrong, _ = _mn_cvt(c, other)
    # as if key's slot had been freed and reused by another key
    reader.addr_cache.addr_insert(lock_key(KV, key), wrong)
    ctx = c.run(read_only(c.coordinator(1, 0), [key]))
    assert ctx.status is TxnStatus.COMMITTED
    assert ctx.reads[0][3] == 5
    assert reader.addr_cache.stale == 1
    assert reader.addr_cache.addr_lookup(lock_key(KV, key)) == _mn_cvt(c, key)[0]


def test_hits_under_lock_match_memory_under_contention():
    c = small_cluster(n_keys=16, coordinators=4, shadow_check=True)
    sim = c.sim

    def worker(cn, j):
        co = c.coordinator(cn, j)
        for i in range(80):
            yield from update(co, kv_key((i + j) % 16))

    for cn in range(3):
        for j in range(4):
            sim.process(worker(cn, j))
    sim.run()
    stats = [co.stats for cn in c.cns for co in cn.coordinators]
    assert sum(s.vt_hits for s in stats) > 40
    assert sum(cn.vtcache.invalidations for cn in c.cns) > 40
    assert sum(s.stale_hits for s in stats) == 0

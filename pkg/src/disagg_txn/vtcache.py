"""Per-CN caches of version tables and of version-table addresses.

The version-table cache only holds CVTs of keys whose locks this CN owns.  A
local writer refreshes the entry as it commits, and a remote writer's lock
request invalidates it, so a hit taken under a lock is always current.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

from .locktable import SHARD_MASK, mix64
from .memstore import Cvt, CvtHeader


class LruCache:
    def __init__(self, capacity: int):
        self.capacity = max(1, capacity)
        self._d: OrderedDict = OrderedDict()
        self.evictions = 0

    def get(self, key):
        v = self._d.get(key)
        if v is not None:
            self._d.move_to_end(key)
        return v

    def put(self, key, value) -> None:
        d = self._d
        if key in d:
            d.move_to_end(key)
        d[key] = value
        if len(d) > self.capacity:
            d.popitem(last=False)
            self.evictions += 1

    def pop(self, key) -> None:
        self._d.pop(key, None)

    def keys(self):
        return list(self._d)

    def clear(self) -> None:
        self._d.clear()

    def __len__(self) -> int:
        return len(self._d)

    def __contains__(self, key) -> bool:
        return key in self._d


class VtCache:
    """Hash-partitioned LRU sub-caches of ``lock key -> (CVT address, Cvt)``."""

    def __init__(self, capacity: int = 65536, n_sub: int = 8):
        self.n_sub = max(1, n_sub)
        per = max(1, capacity // self.n_sub)
        self.subs = [LruCache(per) for _ in range(self.n_sub)]
        self.hits = 0
        self.misses = 0
        self.invalidations = 0

    def sub_of(self, key: int) -> int:
        return mix64(key) % self.n_sub

    def vt_lookup(self, key: int) -> Optional[tuple[int, Cvt]]:
        v = self.subs[self.sub_of(key)].get(key)
        if v is None:
            self.misses += 1
            return None
        self.hits += 1
        return v[0], v[1].copy()

    def vt_update_local(self, key: int, addr: int, cvt: Cvt) -> None:
        self.subs[self.sub_of(key)].put(key, (addr, cvt.copy()))

    def vt_invalidate(self, key: int) -> None:
        self.invalidations += 1
        self.subs[self.sub_of(key)].pop(key)

    def clear_shard(self, shard: int) -> int:
        n = 0
        for sub in self.subs:
            for k in sub.keys():
                if k & SHARD_MASK == shard:
                    sub.pop(k)
                    n += 1
        return n

    def clear(self) -> None:
        for sub in self.subs:
            sub.clear()

    @property
    def capacity(self) -> int:
        return sum(s.capacity for s in self.subs)

    def __len__(self) -> int:
        return sum(len(s) for s in self.subs)

    def __contains__(self, key: int) -> bool:
        return key in self.subs[self.sub_of(key)]

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class AddrCache:
    """Unbounded ``lock key -> CVT address``; staleness is caught on read."""

    def __init__(self):
        self._d: dict[int, int] = {}
        self.hits = 0
        self.misses = 0
        self.stale = 0

    def addr_lookup(self, key: int) -> Optional[int]:
        a = self._d.get(key)
        if a is None:
            self.misses += 1
        else:
            self.hits += 1
        return a

    def addr_insert(self, key: int, address: int) -> None:
        self._d[key] = address

    def addr_remove(self, key: int) -> None:
        self._d.pop(key, None)

    def addr_validate(self, header: CvtHeader, key: int, table_id: int) -> bool:
        ok = header.occupied and header.key == key and header.table_id == table_id
        if not ok:
            self.stale += 1
        return ok

    def clear(self) -> None:
        self._d.clear()

    def __len__(self) -> int:
        return len(self._d)

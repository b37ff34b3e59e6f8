"""Benchmark workloads: a 40-byte key-value store and SmallBank."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..memstore import TableSchema
from ..sharding import TableKeySpec, TxnDescriptor, make_key, shard_of
from ..txn import AbortReason

KVS_TABLE = 1
SAVINGS = 1
CHECKING = 2


class ZipfGenerator:
    """Scrambled Zipfian ranks over ``[0, n)``; ``theta == 0`` is uniform.

    The CDF is built once; each draw is one bisect.  Ranks are permuted with a
    seeded shuffle so that hot items do not cluster in one shard.
    """

    def __init__(self, n: int, theta: float, seed: int = 0):
        if n < 1:
            raise ValueError("n must be positive")
        if theta < 0:
            raise ValueError("theta must be >= 0")
        self.n = n
        self.theta = theta
        if theta == 0:
            self.cdf = None
        else:
            w = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), theta)
            cdf = np.cumsum(w)
            self.cdf = (cdf / cdf[-1]).tolist()
        self.perm = np.random.default_rng(seed).permutation(n).tolist()

    def rank(self, rng: random.Random) -> int:
        if self.cdf is None:
            return rng.randrange(self.n)
        return min(bisect.bisect_left(self.cdf, rng.random()), self.n - 1)

    def draw(self, rng: random.Random) -> int:
        return self.perm[self.rank(rng)]


@dataclass
class TxnSpec:
    label: str
    descriptor: TxnDescriptor
    body: Callable
    single_shard: bool = False
    logical: bool = True


def _i64(payload: Optional[bytes]) -> int:
    return int.from_bytes(payload[:8], "little", signed=True)


def _pack(value: int, length: int) -> bytes:
    return value.to_bytes(8, "little", signed=True) + bytes(length - 8)


class KvsWorkload:
    """UpdateOne / ReadOne over 40-byte values."""

    name = "kvs"
    value_len = 40

    def __init__(self, n_keys: int = 100_000, rw_ratio: float = 0.5, zipf: float = 0.99,
                 seed: int = 0, hotspot_shard: Optional[int] = None):
        if not 0 <= rw_ratio <= 1:
            raise ValueError("rw_ratio must be in [0, 1]")
        self.n_keys = n_keys
        self.rw_ratio = rw_ratio
        self.spec = TableKeySpec(KVS_TABLE, (("id", 40),), critical="id")
        self.zipf = ZipfGenerator(n_keys, zipf, seed)
        self.hotspot_shard = hotspot_shard
        self._hot_ids = None
        if hotspot_shard is not None:
            self._hot_ids = list(range(hotspot_shard, n_keys, 4096))
            if not self._hot_ids:
                raise ValueError("hotspot shard has no keys at this scale")

    def key(self, i: int) -> int:
        return make_key(self.spec, (i,))

    def setup(self, cluster) -> None:
        cluster.create_table(TableSchema(KVS_TABLE, "kvs", self.value_len, self.n_keys, cluster.cfg.n_cells))
        for i in range(self.n_keys):
            cluster.load(KVS_TABLE, self.key(i), _pack(0, self.value_len))
        cluster.finish_load()

    def next_txn(self, rng: random.Random) -> TxnSpec:
        rw = rng.random() < self.rw_ratio
        if rw and self._hot_ids is not None:
            i = self._hot_ids[rng.randrange(len(self._hot_ids))]
        else:
            i = self.zipf.draw(rng)
        key = self.key(i)
        if rw:
            return TxnSpec("update_one", TxnDescriptor(False, key), self._update(key), True)
        return TxnSpec("read_one", TxnDescriptor(True, key), self._read(key), True)

    def _update(self, key: int):
        vlen = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="update_one")
            coord.add_rw(ctx, KVS_TABLE, key)
            if (yield from coord.execute(ctx)):
                ctx.put(KVS_TABLE, key, _pack(_i64(ctx.get(KVS_TABLE, key)) + 1, vlen))
                yield from coord.commit(ctx)
            return ctx
        return body

    def _read(self, key: int):
        def body(coord):
            ctx = yield from coord.begin(read_only=True, label="read_one")
            coord.add_ro(ctx, KVS_TABLE, key)
            yield from coord.run_read_only(ctx)
            return ctx
        return body


class SmallBankWorkload:
    """Savings and checking accounts; six transaction types, 85% read-write."""

    name = "smallbank"
    value_len = 16
    mix = (
        ("amalgamate", 15),
        ("balance", 15),
        ("deposit_checking", 15),
        ("send_payment", 25),
        ("transact_savings", 15),
        ("write_check", 15),
    )
    initial_balance = 10_000

    def __init__(self, n_accounts: int = 200_000, zipf: float = 0.99, seed: int = 0,
                 rw_ratio: Optional[float] = None):
        self.n_accounts = n_accounts
        self.zipf = ZipfGenerator(n_accounts, zipf, seed)
        self.specs = {
            SAVINGS: TableKeySpec(SAVINGS, (("acct", 40),), critical="acct"),
            CHECKING: TableKeySpec(CHECKING, (("acct", 40),), critical="acct"),
        }
        mix = list(self.mix)
        if rw_ratio is not None:
            # rescale: "balance" is the only read-only type
            rw_total = sum(w for n, w in mix if n != "balance")
            mix = [(n, (1 - rw_ratio) * 100 if n == "balance" else w * rw_ratio * 100 / rw_total)
                   for n, w in mix]
        total = sum(w for _, w in mix)
        acc = 0.0
        self._cum = []
        for n, w in mix:
            acc += w / total
            self._cum.append((acc, n))

    def key(self, table: int, acct: int) -> int:
        return make_key(self.specs[table], (acct,))

    def setup(self, cluster) -> None:
        for t, name in ((SAVINGS, "savings"), (CHECKING, "checking")):
            cluster.create_table(TableSchema(t, name, self.value_len, self.n_accounts, cluster.cfg.n_cells))
        for a in range(self.n_accounts):
            for t in (SAVINGS, CHECKING):
                cluster.load(t, self.key(t, a), _pack(self.initial_balance, self.value_len))
        cluster.finish_load()

    def initial_total(self) -> int:
        return 2 * self.n_accounts * self.initial_balance

    def total_balance(self, cluster) -> int:
        total = 0
        for a in range(self.n_accounts):
            for t in (SAVINGS, CHECKING):
                found = cluster.pool.peek_latest(t, self.key(t, a))
                total += _i64(found[1]) if found else 0
        return total

    def next_txn(self, rng: random.Random) -> TxnSpec:
        u = rng.random()
        kind = self._cum[-1][1]
        for c, n in self._cum:
            if u < c:
                kind = n
                break
        a = self.zipf.draw(rng)
        b = self.zipf.draw(rng)
        if b == a:
            b = (a + 1) % self.n_accounts
        amount = rng.randrange(1, 100)
        ka = self.key(CHECKING, a)
        single = kind not in ("amalgamate", "send_payment") or shard_of(ka) == shard_of(self.key(CHECKING, b))
        body = getattr(self, "_" + kind)(a, b, amount)
        return TxnSpec(kind, TxnDescriptor(kind == "balance", ka), body, single)

    # ---- transaction bodies; each returns the finished context

    def _balance(self, a, b, amount):
        ks, kc = self.key(SAVINGS, a), self.key(CHECKING, a)

        def body(coord):
            ctx = yield from coord.begin(read_only=True, label="balance")
            coord.add_ro(ctx, SAVINGS, ks)
            coord.add_ro(ctx, CHECKING, kc)
            yield from coord.run_read_only(ctx)
            return ctx
        return body

    def _deposit_checking(self, a, b, amount):
        kc = self.key(CHECKING, a)
        n = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="deposit_checking")
            coord.add_rw(ctx, CHECKING, kc)
            if (yield from coord.execute(ctx)):
                ctx.put(CHECKING, kc, _pack(_i64(ctx.get(CHECKING, kc)) + amount, n))
                ctx.delta = amount
                yield from coord.commit(ctx)
            return ctx
        return body

    def _transact_savings(self, a, b, amount):
        ks = self.key(SAVINGS, a)
        n = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="transact_savings")
            coord.add_rw(ctx, SAVINGS, ks)
            if (yield from coord.execute(ctx)):
                ctx.put(SAVINGS, ks, _pack(_i64(ctx.get(SAVINGS, ks)) + amount, n))
                ctx.delta = amount
                yield from coord.commit(ctx)
            return ctx
        return body

    def _amalgamate(self, a, b, amount):
        sa, ca, cb = self.key(SAVINGS, a), self.key(CHECKING, a), self.key(CHECKING, b)
        n = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="amalgamate")
            coord.add_rw(ctx, SAVINGS, sa)
            coord.add_rw(ctx, CHECKING, ca)
            coord.add_rw(ctx, CHECKING, cb)
            if (yield from coord.execute(ctx)):
                moved = _i64(ctx.get(SAVINGS, sa)) + _i64(ctx.get(CHECKING, ca))
                ctx.put(SAVINGS, sa, _pack(0, n))
                ctx.put(CHECKING, ca, _pack(0, n))
                ctx.put(CHECKING, cb, _pack(_i64(ctx.get(CHECKING, cb)) + moved, n))
                yield from coord.commit(ctx)
            return ctx
        return body

    def _write_check(self, a, b, amount):
        sa, ca = self.key(SAVINGS, a), self.key(CHECKING, a)
        n = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="write_check")
            coord.add_ro(ctx, SAVINGS, sa)
            coord.add_rw(ctx, CHECKING, ca)
            if (yield from coord.execute(ctx)):
                total = _i64(ctx.get(SAVINGS, sa)) + _i64(ctx.get(CHECKING, ca))
                charge = amount + 1 if total < amount else amount
                ctx.put(CHECKING, ca, _pack(_i64(ctx.get(CHECKING, ca)) - charge, n))
                ctx.delta = -charge
                yield from coord.commit(ctx)
            return ctx
        return body

    def _send_payment(self, a, b, amount):
        ca, cb = self.key(CHECKING, a), self.key(CHECKING, b)
        n = self.value_len

        def body(coord):
            ctx = yield from coord.begin(label="send_payment")
            coord.add_rw(ctx, CHECKING, ca)
            coord.add_rw(ctx, CHECKING, cb)
            if (yield from coord.execute(ctx)):
                bal = _i64(ctx.get(CHECKING, ca))
                if bal < amount:
                    yield from coord.abort(ctx, AbortReason.USER)
                    return ctx
                ctx.put(CHECKING, ca, _pack(bal - amount, n))
                ctx.put(CHECKING, cb, _pack(_i64(ctx.get(CHECKING, cb)) + amount, n))
                yield from coord.commit(ctx)
            return ctx
        return body


def make_workload(name: str, scale: int, rw_ratio: Optional[float], zipf: float, seed: int,
                  hotspot_shard: Optional[int] = None):
    if name == "kvs":
        return KvsWorkload(scale, 0.5 if rw_ratio is None else rw_ratio, zipf, seed, hotspot_shard)
    if name == "smallbank":
        return SmallBankWorkload(scale, zipf, seed, rw_ratio)
    raise ValueError(f"unknown workload {name!r}")

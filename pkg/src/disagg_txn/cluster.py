"""Compute nodes and whole-cluster assembly on top of the simulated fabric."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .fabric import Fabric, NicCostModel, NodeId, Simulator, Store
from .locktable import LockTable, decode_lock_batch, encode_lock_results, lock_shard
from .memstore import MemoryPool, TableSchema
from .recovery import READY_CHANNEL, MembershipView, RecoveryManager
from .sharding import (
    TRANSFER_CHANNEL,
    Resharder,
    RoutingLayer,
    TxnDescriptor,
    detect_overload,
    encode_metrics,
    hottest_shard,
)
from .txn import (
    LOCK_CHANNEL,
    AbortReason,
    CommitLogRecord,
    Coordinator,
    ProtocolConfig,
    TimestampService,
    TxnContext,
    TxnStatus,
)
from .vtcache import AddrCache, VtCache

LOAD_VERSION = 1


@dataclass
class ClusterConfig:
    n_cns: int = 3
    n_mns: int = 3
    replicas: int = 3
    coordinators: int = 8
    n_cells: int = 2
    lock_slots: int = 1 << 22
    cache_entries: int = 65536
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    cost: NicCostModel = field(default_factory=NicCostModel)
    seed: int = 0
    tear_writes: bool = True
    lease_ns: float = 10e6
    renew_ns: float = 3e6
    restart_delay_ns: float = 2e6
    failure_detection: bool = False
    reshard: bool = False
    metrics_interval_ns: float = 100e6
    overload_factor: float = 1.5
    overload_intervals: int = 3
    reshard_wait_ns: float = 10e6
    routing_policy: str = "hybrid"

    def __post_init__(self):
        if self.n_cns < 1 or self.n_mns < 1 or self.coordinators < 1:
            raise ValueError("need at least one CN, one MN and one coordinator")


@dataclass(eq=False)
class TxnRequest:
    body: Callable
    done: object
    descriptor: TxnDescriptor
    submitted_at: float = 0.0
    cn: int = -1
    first_at: Optional[float] = None  # first attempt of the logical transaction


class ComputeNode:
    def __init__(self, cluster: "Cluster", index: int):
        self.cluster = cluster
        self.index = index
        self.node = NodeId.cn(index)
        self.alive = True
        self.coordinators: list[Coordinator] = []
        self.workers: list = []
        self.renewer = None
        self.inflight: dict[int, TxnRequest] = {}
        self.queue = Store(cluster.sim)
        self.shard_requests: Counter = Counter()
        self.lat_sum = 0.0
        self.lat_n = 0
        self.incarnation = 0
        self._build_state()

    def _build_state(self) -> None:
        cfg = self.cluster.cfg
        routing = self.cluster.routing
        self.vtcache = VtCache(cfg.cache_entries, cfg.coordinators)
        self.addr_cache = AddrCache()
        self.lock_table = LockTable(self.index, cfg.lock_slots, routing.map.shards_of(self.index),
                                    on_remote_write=self.vtcache.vt_invalidate)
        self.shard_view = routing.snapshot()

    def register(self) -> None:
        f = self.cluster.fabric
        f.register_rpc(self.node, LOCK_CHANNEL, self._lock_rpc)
        f.register_rpc(self.node, TRANSFER_CHANNEL,
                       lambda p: self.cluster.resharder.handle_transfer(self, p))
        f.register_rpc(self.node, READY_CHANNEL, self.cluster.recovery.handle_ready)

    def _lock_rpc(self, payload: bytes) -> bytes:
        reqs = decode_lock_batch(payload)
        for r in reqs:
            if r.acquire:
                self.shard_requests[lock_shard(r.key, r.index_bucket)] += 1
        return encode_lock_results(self.lock_table.handle_batch(reqs))

    def note_lock_request(self, shard: int) -> None:
        self.shard_requests[shard] += 1

    def refresh_shard_view(self) -> None:
        self.shard_view = self.cluster.routing.snapshot()

    # ---- workers

    def start_workers(self) -> None:
        sim = self.cluster.sim
        self.workers = [sim.process(self._worker(c), f"cn{self.index}.c{c.index}") for c in self.coordinators]
        if self.cluster.cfg.failure_detection:
            self.renewer = sim.process(self.cluster.recovery.renew_loop(self), f"lease-cn{self.index}")

    def _worker(self, coord: Coordinator):
        while True:
            req = yield self.queue.get()
            self.inflight[coord.index] = req
            ctx = yield from req.body(coord)
            self.inflight.pop(coord.index, None)
            if ctx is not None and ctx.status is TxnStatus.COMMITTED and self.alive:
                # queueing counts: an overloaded CN shows it as waiting time
                start = req.submitted_at if req.first_at is None else req.first_at
                self.lat_sum += self.cluster.sim.now - start
                self.lat_n += 1
            req.done.succeed(ctx)

    # ---- fail-stop and restart

    def crash(self) -> list[TxnContext]:
        """Kill every process of this CN; returns the transactions caught mid-flight."""
        sim = self.cluster.sim
        self.alive = False
        for p in self.workers:
            sim.kill(p)
        if self.renewer is not None:
            sim.kill(self.renewer)
        self.workers = []
        self.renewer = None
        self.cluster.fabric.set_down(self.node, True)
        self.cluster.fabric.unregister_rpc(self.node)
        caught = [c.current for c in self.coordinators if c.current is not None and c.current.active]
        pending = list(self.inflight.values()) + self.queue.drain()
        self.inflight.clear()
        self.queue = Store(sim)
        for req in pending:
            req.done.succeed(None)
        return caught

    def restart(self) -> None:
        """Come back with empty lock table and caches; not serving until ready."""
        self.incarnation += 1
        self._build_state()
        self.shard_requests.clear()
        self.lat_sum, self.lat_n = 0.0, 0
        for c in self.coordinators:
            c.current = None
        self.cluster.fabric.set_down(self.node, False)
        self.register()

    def restart_workers(self) -> None:
        self.alive = True
        self.refresh_shard_view()
        self.start_workers()


class Cluster:
    """Memory pool, compute nodes, routing, membership and resharding."""

    def __init__(self, cfg: Optional[ClusterConfig] = None):
        self.cfg = cfg = cfg or ClusterConfig()
        self.sim = Simulator()
        self.fabric = Fabric(cfg.cost, self.sim, seed=cfg.seed, tear_writes=cfg.tear_writes)
        self.pool = MemoryPool(self.fabric, cfg.n_mns, cfg.replicas)
        self.ts = TimestampService()
        self.routing = RoutingLayer(cfg.n_cns, cfg.seed, cfg.routing_policy)
        self.membership = MembershipView(cfg.n_cns, cfg.lease_ns)
        self.recovery = RecoveryManager(self, cfg.lease_ns, cfg.renew_ns, cfg.restart_delay_ns)
        self.resharder = Resharder(self, cfg.reshard_wait_ns)
        self.crash_point: Optional[Callable] = None
        self.observers: list = []
        self.active: dict[int, tuple[Coordinator, TxnContext]] = {}
        self.crashed: dict[int, list[TxnContext]] = {}
        self.crash_log: list[tuple[int, float]] = []
        self._ids = itertools.count(1)
        self.cns = [ComputeNode(self, i) for i in range(cfg.n_cns)]
        self.recovery.setup()
        log_size = CommitLogRecord.size(cfg.protocol.max_log_entries)
        log_size = (log_size + 63) // 64 * 64
        for cn in self.cns:
            mn = self.pool.mns[cn.index % cfg.n_mns]
            base = self.pool.alloc_region([mn], log_size * cfg.coordinators)
            cn.coordinators = [Coordinator(cn, j, mn, base + j * log_size, cfg.protocol)
                               for j in range(cfg.coordinators)]
            cn.register()
        self.metrics_addr = self.pool.alloc_region([self.pool.mns[0]], 32 * cfg.n_cns)
        self.latency_history: dict[int, list[float]] = {}
        self.started = False

    # ---- setup

    def create_table(self, schema: TableSchema):
        return self.pool.create_table(schema)

    def load(self, table_id: int, key: int, payload: bytes) -> int:
        return self.pool.load(table_id, key, payload, LOAD_VERSION)

    def finish_load(self) -> None:
        self.pool.finish_load()

    def start(self) -> None:
        """Start coordinator workers and background services."""
        if self.started:
            return
        self.started = True
        for cn in self.cns:
            cn.start_workers()
        if self.cfg.failure_detection:
            self.sim.process(self.recovery.monitor_loop(), "membership")
        if self.cfg.reshard:
            self.sim.process(self.load_monitor(), "load-monitor")

    def next_txn_id(self) -> int:
        return next(self._ids)

    def coordinator(self, cn: int = 0, index: int = 0) -> Coordinator:
        return self.cns[cn].coordinators[index]

    # ---- transaction bookkeeping hooks (called by coordinators)

    def txn_started(self, coord: Coordinator, ctx: TxnContext) -> None:
        self.active[ctx.txn_id] = (coord, ctx)

    def txn_finished(self, coord: Coordinator, ctx: TxnContext) -> None:
        self.active.pop(ctx.txn_id, None)
        for obs in self.observers:
            obs.txn_finished(coord, ctx)

    def proactive_abort(self, txn_id: int, cn: int) -> bool:
        """Ask a lock holder to abort; False if it is already committing."""
        found = self.active.get(txn_id)
        if found is None:
            return True
        ctx = found[1]
        if ctx.in_commit:
            return False
        if ctx.abort_requested is None:
            ctx.abort_requested = AbortReason.RESHARD
        return True

    # ---- routing / submission

    def submit(self, body: Callable, descriptor: TxnDescriptor, first_at: Optional[float] = None):
        """Route a transaction body to a CN queue; returns the completion event.

        first_at is when the client first tried this transaction, so retries
        count toward the committing CN's latency.
        """
        target = self.routing.route_txn(descriptor)
        if not self.cns[target].alive or self.membership.is_failed(target):
            live = self.routing.available or [c.index for c in self.cns if c.alive]
            target = live[self.routing.rng.randrange(len(live))]
        ev = self.sim.event()
        req = TxnRequest(body, ev, descriptor, self.sim.now, target, first_at)
        cn = self.cns[target]
        if not cn.alive:
            self.sim.schedule(self.sim.now + self.cfg.cost.rpc_timeout_ns, ev.succeed, None)
            return ev, target
        cn.queue.put(req)
        return ev, target

    # ---- failures

    def crash_cn(self, index: int) -> None:
        cn = self.cns[index]
        if not cn.alive:
            return
        self.crash_log.append((index, self.sim.now))
        self.crashed[index] = cn.crash()

    def schedule_crash(self, index: int, at_ns: float) -> None:
        self.sim.schedule(at_ns, self.crash_cn, index)

    def stop_dependents(self, failed: int) -> list[TxnContext]:
        """Abort survivors' transactions holding locks on ``failed`` unless committing."""
        out = []
        for coord, ctx in list(self.active.values()):
            if coord.cn.index == failed or not ctx.active:
                continue
            if any(h.owner == failed for h in ctx.locks):
                if not ctx.in_commit and ctx.abort_requested is None:
                    ctx.abort_requested = AbortReason.PEER_FAILED
                out.append(ctx)
        return out

    def settle_crashed_txns(self, failed: int, continued: set[int]) -> None:
        """Give the dead CN's in-flight transactions their final outcome."""
        for ctx in self.crashed.pop(failed, []):
            coord, _ = self.active.get(ctx.txn_id, (None, None))
            if coord is None:
                continue
            if ctx.txn_id in continued:
                coord._finish(ctx, TxnStatus.COMMITTED)
            else:
                coord._finish(ctx, TxnStatus.ABORTED, AbortReason.CN_FAILED)

    # ---- load monitoring and resharding

    def load_monitor(self):
        sim = self.sim
        interval = 0
        while True:
            yield sim.now + self.cfg.metrics_interval_ns
            interval += 1
            live = [cn for cn in self.cns if cn.alive and not self.membership.is_failed(cn.index)]
            ops = []
            for cn in live:
                avg = cn.lat_sum / cn.lat_n if cn.lat_n else 0.0
                hot = hottest_shard(cn.shard_requests, cn.lock_table.owned)
                rec = encode_metrics(cn.index, interval, avg, cn.lat_n, 0xFFFF if hot is None else hot)
                ops.append(self.fabric.write(self.pool.mns[0], self.metrics_addr + 32 * cn.index, rec, cn.node))
                hist = self.latency_history.setdefault(cn.index, [])
                hist.append(avg)
                del hist[:-8]
            if ops:
                yield max(op.done_at for op in ops)
            for cn in live:
                self.fabric.read(self.pool.mns[0], self.metrics_addr, 32 * len(self.cns), cn.node)
            flagged = detect_overload(self.latency_history, self.cfg.overload_factor,
                                      self.cfg.overload_intervals)
            requests = {cn.index: dict(cn.shard_requests) for cn in live}
            for cn in live:
                cn.shard_requests.clear()
                cn.lat_sum, cn.lat_n = 0.0, 0
            if flagged is None or self.resharder.in_flight:
                continue
            sender = self.cns[flagged]
            shard = hottest_shard(requests.get(flagged, {}), sender.lock_table.owned)
            others = [cn for cn in live if cn.index != flagged]
            if shard is None or not others:
                continue
            receiver = min(others, key=lambda c: (self.latency_history.get(c.index, [0.0])[-1], c.index))
            self.latency_history.clear()
            sim.process(self.resharder.reshard(shard, sender, receiver), f"reshard-{shard}")

    # ---- convenience for tests and notebooks

    def run(self, gen, name: str = "call"):
        return self.sim.call(gen, name)

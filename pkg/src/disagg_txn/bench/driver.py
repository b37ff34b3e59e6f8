"""Closed-loop benchmark driver and run metrics."""

from __future__ import annotations

import csv
import io
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..cluster import LOAD_VERSION, Cluster, ClusterConfig
from ..fabric import NicCostModel
from ..txn import AbortReason, IsolationLevel, ProtocolConfig, TxnStatus
from .checker import Verdict, check_history
from .config import BenchConfig
from .history import History, HistoryRecorder, save_history
from .workloads import SmallBankWorkload, make_workload

RETRY_BASE_NS = 2_000.0
RETRY_CAP_NS = 200_000.0


@dataclass
class RunMetrics:
    committed: int = 0
    aborted: int = 0
    user_aborted: int = 0
    logical_txns: int = 0
    elapsed_ms: float = 0.0
    throughput: float = 0.0
    p50_us: float = 0.0
    p99_us: float = 0.0
    abort_reasons: dict = field(default_factory=dict)
    nic: dict = field(default_factory=dict)
    mn_reads: int = 0
    mn_writes: int = 0
    mn_atomics: int = 0
    cn_rpcs: int = 0
    lock_cas_acquire: int = 0
    lock_cas_release: int = 0
    lock_rpc_msgs: int = 0
    local_locks: int = 0
    remote_locks: int = 0
    vt_hit_rate: float = 0.0
    vt_hits: int = 0
    vt_misses: int = 0
    stale_vt_hits: int = 0
    addr_hit_rate: float = 0.0
    single_shard_rw: int = 0
    single_shard_rw_local: int = 0
    reshard_events: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)
    timeline: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def attempted(self) -> int:
        return self.committed + self.aborted

    @property
    def locality(self) -> float:
        return self.single_shard_rw_local / self.single_shard_rw if self.single_shard_rw else 1.0

    def summary(self) -> dict:
        d = asdict(self)
        d["attempted"] = self.attempted
        d["locality"] = self.locality
        d.pop("timeline")
        d.pop("nic")
        return d


@dataclass
class RunResult:
    metrics: RunMetrics
    history: History
    cluster: Cluster
    verdict: Optional[Verdict]
    workload: object


class _Counts:
    """Attempt-level outcome counter hooked into the cluster."""

    def __init__(self, timeline_ns: float):
        self.committed = 0
        self.aborted = 0
        self.user = 0
        self.reasons: Counter = Counter()
        self.timeline_ns = timeline_ns
        self.buckets: Counter = Counter()

    def txn_finished(self, coord, ctx) -> None:
        if ctx.status is TxnStatus.COMMITTED:
            self.committed += 1
            self.buckets[int(ctx.finished_at // self.timeline_ns)] += 1
        else:
            self.aborted += 1
            self.reasons[ctx.abort_reason.value] += 1
            if ctx.abort_reason is AbortReason.USER:
                self.user += 1


def build_cluster(cfg: BenchConfig) -> Cluster:
    proto = ProtocolConfig(
        isolation=IsolationLevel(cfg.isolation),
        mode=cfg.mode,
        shadow_check=cfg.shadow_check,
    )
    ccfg = ClusterConfig(
        n_cns=cfg.cns,
        n_mns=cfg.mns,
        replicas=min(3, cfg.mns),
        coordinators=cfg.coordinators,
        n_cells=cfg.versions,
        lock_slots=cfg.lock_slots,
        cache_entries=cfg.cache_entries,
        protocol=proto,
        cost=NicCostModel(drop_probability=cfg.drop_probability),
        seed=cfg.seed,
        failure_detection=bool(cfg.crash),
        reshard=cfg.reshard,
        metrics_interval_ns=cfg.metrics_interval_ms * 1e6,
        routing_policy="hybrid" if cfg.mode == "lotus" else "random",
    )
    return Cluster(ccfg)


def run_benchmark(cfg: BenchConfig, cluster: Optional[Cluster] = None) -> RunResult:
    """Build the cluster, load data, drive closed-loop clients, collect metrics."""
    cfg.validate()
    cluster = cluster or build_cluster(cfg)
    sim = cluster.sim
    workload = make_workload(cfg.workload, cfg.effective_scale, cfg.rw_ratio, cfg.zipf, cfg.seed,
                             cfg.hotspot_shard)
    workload.setup(cluster)
    recorder = HistoryRecorder(IsolationLevel(cfg.isolation), LOAD_VERSION)
    counts = _Counts(cfg.timeline_ms * 1e6)
    cluster.observers += [recorder, counts]
    for cn, at_ms in cfg.crash:
        cluster.schedule_crash(cn, at_ms * 1e6)

    m = RunMetrics()
    latencies: list[float] = []
    budget = [cfg.txns if cfg.txns is not None else -1]
    end_ns = cfg.duration_ms * 1e6 if cfg.duration_ms is not None else None
    n_clients = cfg.cns * cfg.coordinators
    all_done = sim.event()
    running = [n_clients]

    def take() -> bool:
        if end_ns is not None and sim.now >= end_ns:
            return False
        if budget[0] == 0:
            return False
        if budget[0] > 0:
            budget[0] -= 1
        return True

    def client(i: int):
        rng = random.Random((cfg.seed << 20) ^ (i * 0x9E3779B1))
        while take():
            spec = workload.next_txn(rng)
            first = sim.now
            m.logical_txns += 1
            fails = 0
            while True:
                ev, _ = cluster.submit(spec.body, spec.descriptor, first)
                ctx = yield ev
                if ctx is not None and spec.single_shard and not spec.descriptor.read_only:
                    m.single_shard_rw += 1
                    if ctx.lock_rpcs == 0:
                        m.single_shard_rw_local += 1
                if ctx is not None and ctx.status is TxnStatus.COMMITTED:
                    latencies.append(sim.now - first)
                    break
                if ctx is not None and ctx.abort_reason is AbortReason.USER:
                    break
                if end_ns is not None and sim.now >= end_ns:
                    break
                fails += 1
                if ctx is None or fails >= 3:
                    wait = min(RETRY_CAP_NS, RETRY_BASE_NS * (1 << min(max(fails - 3, 0), 10)))
                    yield sim.now + wait * (0.5 + rng.random())
        running[0] -= 1
        if running[0] == 0:
            all_done.succeed()

    cluster.start()
    for i in range(n_clients):
        sim.process(client(i), f"client{i}")
    sim.run_until(all_done)
    # let fire-and-forget unlocks and any recovery settle
    sim.run(until=sim.now + 1e6)
    for _ in range(50):
        if not cluster.active:
            break
        sim.run(until=sim.now + 1e6)

    _collect(cluster, m, counts, latencies)
    verdict = None
    if cfg.check:
        if isinstance(workload, SmallBankWorkload):
            verdict = check_history(recorder.history, IsolationLevel(cfg.isolation),
                                    workload.initial_total(), workload.total_balance(cluster))
        else:
            verdict = check_history(recorder.history, IsolationLevel(cfg.isolation))
        m.violations = verdict.violations[:20]
    if cfg.history:
        save_history(recorder.history, cfg.history)
    return RunResult(m, recorder.history, cluster, verdict, workload)


def _collect(cluster: Cluster, m: RunMetrics, counts: _Counts, latencies: list[float]) -> None:
    sim = cluster.sim
    m.committed = counts.committed
    m.aborted = counts.aborted
    m.user_aborted = counts.user
    m.abort_reasons = dict(sorted(counts.reasons.items()))
    m.elapsed_ms = sim.now / 1e6
    if latencies:
        arr = np.asarray(latencies)
        m.p50_us = float(np.percentile(arr, 50)) / 1e3
        m.p99_us = float(np.percentile(arr, 99)) / 1e3
        span = max(1.0, sim.now)
        m.throughput = len(latencies) / (span / 1e9)
    m.nic = cluster.fabric.counters()
    for node, acct in cluster.fabric.nics.items():
        if node.is_memory:
            m.mn_reads += acct.reads
            m.mn_writes += acct.writes
            m.mn_atomics += acct.atomics
        else:
            m.cn_rpcs += acct.rpcs
    addr_h = addr_m = 0
    for cn in cluster.cns:
        addr_h += cn.addr_cache.hits
        addr_m += cn.addr_cache.misses
        for c in cn.coordinators:
            s = c.stats
            m.lock_cas_acquire += s.lock_cas_acquire
            m.lock_cas_release += s.lock_cas_release
            m.lock_rpc_msgs += s.lock_rpc_msgs
            m.local_locks += s.local_locks
            m.remote_locks += s.remote_locks
            m.vt_hits += s.vt_hits
            m.vt_misses += s.vt_misses
            m.stale_vt_hits += s.stale_hits
    total = m.vt_hits + m.vt_misses
    m.vt_hit_rate = m.vt_hits / total if total else 0.0
    m.addr_hit_rate = addr_h / (addr_h + addr_m) if addr_h + addr_m else 0.0
    m.reshard_events = [
        {"shard": r.shard, "sender": r.sender, "receiver": r.receiver, "ok": r.ok,
         "started_ms": r.started_at / 1e6, "interruption_ms": r.interruption_ns / 1e6,
         "aborted_holders": r.aborted_holders, "map_version": r.map_version}
        for r in cluster.resharder.history
    ]
    m.recoveries = [
        {"cn": t.failed_cn, "detected_ms": t.detected_at / 1e6, "ready_ms": t.ready_at / 1e6,
         "continued": len(t.continued), "aborted": len(t.aborted),
         "released_locks": t.released_locks, "phase": t.phase.value}
        for t in cluster.recovery.tasks
    ]
    if counts.buckets:
        last = max(counts.buckets)
        m.timeline = [counts.buckets.get(i, 0) for i in range(last + 1)]


def format_metrics(m: RunMetrics, fmt: str) -> str:
    s = m.summary()
    if fmt == "json":
        lines = [json.dumps({"record": "summary", **{k: v for k, v in s.items()
                                                     if not isinstance(v, (list, dict))}}, sort_keys=True)]
        lines.append(json.dumps({"record": "abort_reasons", **m.abort_reasons}, sort_keys=True))
        for node, d in m.nic.items():
            lines.append(json.dumps({"record": "nic", **d}, sort_keys=True))
        for ev in m.reshard_events:
            lines.append(json.dumps({"record": "reshard", **ev}, sort_keys=True))
        for ev in m.recoveries:
            lines.append(json.dumps({"record": "recovery", **ev}, sort_keys=True))
        for v in m.violations:
            lines.append(json.dumps({"record": "violation", "detail": v}))
        return "\n".join(lines)
    flat = {k: v for k, v in s.items() if not isinstance(v, (list, dict))}
    for k, v in m.abort_reasons.items():
        flat[f"abort.{k}"] = v
    for node, d in m.nic.items():
        for kk in ("reads", "writes", "atomics", "rpcs"):
            flat[f"nic.{node}.{kk}"] = d[kk]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in flat.items():
            w.writerow([k, v])
        return buf.getvalue().rstrip("\n")
    width = max(len(k) for k in flat)
    out = []
    for k, v in flat.items():
        vs = f"{v:.4g}" if isinstance(v, float) else str(v)
        out.append(f"{k.ljust(width)}  {vs}")
    for v in m.violations:
        out.append(f"VIOLATION  {v}")
    return "\n".join(out)

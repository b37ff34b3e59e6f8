"""CN failure detection and lock-rebuild-free recovery.

Lock tables are ephemeral.  When a CN dies its table is simply gone: the
survivors finish or roll back the dead CN's in-flight commits from its
redo logs, drop every lock it held in their own tables, abort their own
transactions that held locks on it (unless already committing), and the
restarted CN comes back with an empty table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .fabric import NodeId, done_time
from .memstore import (
    CELL_SIZE,
    HEADER_SIZE,
    INVISIBLE,
    CvtCell,
    MalformedBytes,
    decode_cell,
    encode_cell,
)
from .txn import CommitLogRecord

READY_CHANNEL = 0xFFFE
LEASE_RECORD = struct.Struct("<BHId")  # kind u8 | cn u16 | epoch u32 | time ns f64
LEASE_RENEW = 1
LEASE_READY = 2


def encode_lease(kind: int, cn: int, epoch: int, now: float) -> bytes:
    return LEASE_RECORD.pack(kind, cn, epoch, now)


def decode_lease(buf: bytes) -> tuple[int, int, int, float]:
    kind, cn, epoch, t = LEASE_RECORD.unpack(buf)
    if kind not in (LEASE_RENEW, LEASE_READY):
        raise ValueError(f"bad lease record kind {kind}")
    return kind, cn, epoch, t


class MembershipView:
    """Per-CN lease expiry plus the set of detected-but-not-ready CNs."""

    def __init__(self, n_cns: int, lease_ns: float = 10e6):
        self.lease_ns = lease_ns
        self.expiry = {cn: lease_ns for cn in range(n_cns)}
        self.failed: set[int] = set()
        self.epoch = 0

    def renew(self, cn: int, now: float) -> None:
        if cn not in self.failed:
            self.expiry[cn] = now + self.lease_ns

    def is_failed(self, cn: int) -> bool:
        return cn in self.failed

    def mark_ready(self, cn: int, now: float) -> None:
        self.failed.discard(cn)
        self.expiry[cn] = now + self.lease_ns
        self.epoch += 1


def detect_failure(view: MembershipView, now: float) -> set[int]:
    """CNs whose lease just expired; each failure is reported once per epoch."""
    out = {cn for cn, t in view.expiry.items() if t < now and cn not in view.failed}
    if out:
        view.failed |= out
        view.epoch += 1
    return out


class RecoveryPhase(Enum):
    SCAN_LOGS = "scan_logs"
    RELEASE_LOCKS = "release_locks"
    AWAIT_RESTART = "await_restart"
    DONE = "done"


@dataclass
class RecoveryTask:
    failed_cn: int
    survivors: list[int]
    detected_at: float
    phase: RecoveryPhase = RecoveryPhase.SCAN_LOGS
    continued: list[int] = field(default_factory=list)
    aborted: list[int] = field(default_factory=list)
    released_locks: int = 0
    stopped_txns: int = 0
    restarted_at: float = 0.0
    ready_at: float = 0.0


def _cell_addr(entry) -> int:
    return entry.cvt_addr + HEADER_SIZE + entry.cell_index * CELL_SIZE


def _matches(cell: CvtCell, logged: CvtCell, rec_addr: int) -> bool:
    return (cell.valid and cell.address == rec_addr and cell.head_cv == logged.head_cv
            and cell.tail_cv == logged.tail_cv)


def recover_transactions(fabric, pool, logs: list[tuple[NodeId, int, NodeId]], max_entries: int = 64):
    """Generator over the failed CN's log regions ``(mn, addr, reader)``.

    Returns ``(continued, aborted)`` txn ids.  A cell is only touched if it
    still carries exactly the logged image (same record address and CV), so
    logs of long-finished transactions and re-scans are harmless.
    """
    size = CommitLogRecord.size(max_entries)
    ops = [(node, addr, reader, fabric.read(node, addr, size, reader)) for node, addr, reader in logs]
    if not ops:
        return [], []
    yield done_time((o[3] for o in ops), fabric.sim.now)
    continued: list[int] = []
    aborted: list[int] = []
    for node, addr, reader, op in ops:
        rec = CommitLogRecord.decode(op.result)
        if rec is None or not rec.entries:
            continue
        # read the logged cell on every replica
        reads = []
        for e in rec.entries:
            meta = pool.meta(e.table_id)
            for n in meta.replicas(e.key):
                reads.append((e, meta, n, fabric.read(n, _cell_addr(e), CELL_SIZE, reader)))
        yield done_time((r[3] for r in reads), fabric.sim.now)
        t_commit: Optional[int] = None
        pending = []
        touched = False
        for e, meta, n, r in reads:
            try:
                cell = decode_cell(r.result)
            except MalformedBytes:
                continue
            if not _matches(cell, e.cell, e.record_addr):
                continue
            touched = True
            if cell.version == INVISIBLE:
                pending.append((e, meta, n, cell))
            elif cell.version != e.cell.version:
                t_commit = cell.version
        if not touched:
            continue  # every cell moved on: a finished transaction
        writes = []
        if rec.complete and t_commit is not None:
            vbytes = struct.pack("<Q", t_commit)
            for e, meta, n, cell in pending:
                writes.append(fabric.write(n, _cell_addr(e) + 16, vbytes, reader))
            continued.append(rec.txn_id)
        else:
            freed = set()
            for e, meta, n, cell in pending:
                dead = CvtCell(cell.head_cv, False, cell.address, cell.version, cell.tail_cv)
                writes.append(fabric.write(n, _cell_addr(e), encode_cell(dead), reader))
                if (e.table_id, cell.address) not in freed:
                    freed.add((e.table_id, cell.address))
                    pool.heap_for(e.table_id, e.key).free(cell.address, fabric.sim.now)
            aborted.append(rec.txn_id)
        if writes:
            yield done_time(writes, fabric.sim.now)
    return continued, aborted


def release_failed_cn_locks(lock_tables, failed_cn: int) -> int:
    """Drop every hold of ``failed_cn`` from the survivors' lock tables."""
    return sum(t.release_all(failed_cn) for t in lock_tables)


class RecoveryManager:
    """Runs failure detection and per-failure recovery tasks for a cluster."""

    def __init__(self, cluster, lease_ns: float = 10e6, renew_ns: float = 3e6,
                 restart_delay_ns: float = 2e6):
        self.cluster = cluster
        self.lease_ns = lease_ns
        self.renew_ns = renew_ns
        self.restart_delay_ns = restart_delay_ns
        self.tasks: list[RecoveryTask] = []
        self.lease_addr = 0

    def setup(self) -> None:
        c = self.cluster
        n = len(c.cns)
        self.lease_addr = c.pool.alloc_region([c.pool.mns[0]], 64 * max(1, n))

    # ---- leases

    def renew_loop(self, cn):
        c = self.cluster
        while True:
            rec = encode_lease(LEASE_RENEW, cn.index, c.membership.epoch, c.sim.now)
            op = c.fabric.write(c.pool.mns[0], self.lease_addr + 64 * cn.index, rec, cn.node)
            yield op.done_at
            c.membership.renew(cn.index, c.sim.now)
            yield c.sim.now + self.renew_ns

    def monitor_loop(self, interval_ns: Optional[float] = None):
        c = self.cluster
        step = interval_ns or self.renew_ns / 3
        while True:
            yield c.sim.now + step
            for failed in sorted(detect_failure(c.membership, c.sim.now)):
                c.sim.process(self.recover(failed), f"recover-cn{failed}")

    # ---- per-failure task

    def recover(self, failed: int):
        c = self.cluster
        sim = c.sim
        survivors = [cn.index for cn in c.cns if cn.alive and cn.index != failed
                     and not c.membership.is_failed(cn.index)]
        task = RecoveryTask(failed, survivors, sim.now)
        self.tasks.append(task)
        c.routing.set_available(failed, False)
        # Survivors stop their transactions that hold locks on the failed CN.
        waiting = c.stop_dependents(failed)
        task.stopped_txns = len(waiting)
        restart = sim.process(self._restart_after(failed, self.restart_delay_ns), f"restart-cn{failed}")

        task.phase = RecoveryPhase.SCAN_LOGS
        dead = c.cns[failed]
        logs = []
        for i, coord in enumerate(dead.coordinators):
            reader = survivors[i % len(survivors)] if survivors else failed
            logs.append((coord.log_node, coord.log_addr, NodeId.cn(reader)))
        continued, aborted = yield from recover_transactions(
            c.fabric, c.pool, logs, c.cfg.protocol.max_log_entries)
        task.continued, task.aborted = continued, aborted
        c.settle_crashed_txns(failed, set(continued))

        task.phase = RecoveryPhase.RELEASE_LOCKS
        task.released_locks = release_failed_cn_locks(
            [c.cns[s].lock_table for s in survivors], failed)

        task.phase = RecoveryPhase.AWAIT_RESTART
        yield restart.done
        while any(ctx.active for ctx in waiting):
            yield sim.now + 10_000.0
        dead.restart_workers()
        ops = []
        for s in survivors:
            msg = encode_lease(LEASE_READY, failed, c.membership.epoch, sim.now)
            ops.append(c.fabric.rpc(NodeId.cn(s), msg, src=dead.node, channel=READY_CHANNEL))
        if ops:
            yield done_time(ops, sim.now)
        c.membership.mark_ready(failed, sim.now)
        c.routing.set_available(failed, True)
        task.ready_at = sim.now
        task.phase = RecoveryPhase.DONE
        return task

    def _restart_after(self, failed: int, delay: float):
        c = self.cluster
        yield c.sim.now + delay
        c.cns[failed].restart()
        for t in self.tasks:
            if t.failed_cn == failed and t.restarted_at == 0.0:
                t.restarted_at = c.sim.now

    def handle_ready(self, payload: bytes) -> bytes:
        decode_lease(payload)
        return b"\x01"

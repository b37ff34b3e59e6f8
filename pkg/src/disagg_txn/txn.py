"""Lock-first transaction coordinator.

A transaction locks everything it touches up front (on the CN that owns each
key's shard), then reads version tables and records with one-sided reads.
Commit writes new versions as INVISIBLE to every replica together with a
redo log, takes a commit timestamp, flips the version fields to that
timestamp, and finally unlocks.  Read-only transactions take no locks and
rely on the cacheline-version guards instead.

The coordinator is written as generator methods that run as simulator
processes: every ``yield`` hands the simulator an absolute time (or an
event) to resume at.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .fabric import NodeId, done_time
from .locktable import (
    LockRequest,
    LockResult,
    decode_lock_results,
    encode_lock_batch,
    lock_shard,
)
from .memstore import (
    CELL_SIZE,
    CELL_VERSION_OFFSET,
    HEADER_LOCK_OFFSET,
    HEADER_SIZE,
    INVISIBLE,
    Cvt,
    CvtCell,
    CvtHeader,
    MalformedBytes,
    cv_check,
    decode_cvt,
    encode_cell,
    encode_header,
    expired_cells,
    find_in_bucket,
    free_slot,
    parse_bucket,
    pick_version,
    record_payload,
    select_cell_for_write,
    stamp_record,
)
from .sharding import lock_key, shard_of

TS_SHIFT = 20
LOCK_CHANNEL = 0
_U64 = struct.Struct("<Q")


class IsolationLevel(Enum):
    SR = "sr"
    SI = "si"


class TxnStatus(Enum):
    RUNNING = "running"
    COMMITTING = "committing"
    COMMITTED = "committed"
    ABORTED = "aborted"


class AbortReason(Enum):
    LOCK_CONFLICT = "lock_conflict"
    FUTURE_VERSION = "future_version"
    KEY_NOT_FOUND = "key_not_found"
    VERSION_NOT_FOUND = "version_not_found"
    KEY_EXISTS = "key_exists"
    BUCKET_FULL = "bucket_full"
    STALE_SHARD = "stale_shard"
    INCONSISTENT_READ = "inconsistent_read"
    INVISIBLE_PENDING = "invisible_pending"
    PEER_FAILED = "peer_failed"
    CN_FAILED = "cn_failed"
    RESHARD = "reshard"
    USER = "user"


class WriteIntent(Enum):
    UPDATE = "update"
    INSERT = "insert"
    DELETE = "delete"


class TxnUsageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# timestamps


class TimestampService:
    """Monotonic counter with the simulated clock in the high bits."""

    def __init__(self, shift: int = TS_SHIFT):
        self.shift = shift
        self.last = 0
        self.issued = 0

    def next_timestamp(self, now_ns: float) -> int:
        ts = int(now_ns) << self.shift
        if ts <= self.last:
            ts = self.last + 1
        if ts >= INVISIBLE:
            raise OverflowError("timestamp space exhausted")
        self.last = ts
        self.issued += 1
        return ts

    def clock(self, now_ns: float) -> int:
        """Local clock in timestamp units (no sequence part)."""
        return int(now_ns) << self.shift

    def physical_ns(self, ts: int) -> int:
        return ts >> self.shift


# --------------------------------------------------------------------------
# commit log
#
#   header   txn_id u64 | count u16 | pad 6
#   entry    table u16 | cell u8 | pad 5 | key u64 | cvt addr u64 | record addr u64 | cell image 32 B
#   trailer  magic u64 | txn_id u64        (the completeness marker)

LOG_HEADER = struct.Struct("<QH6x")
LOG_ENTRY = struct.Struct("<HB5xQQQ")
LOG_ENTRY_SIZE = LOG_ENTRY.size + CELL_SIZE
LOG_TRAILER = struct.Struct("<QQ")
LOG_MAGIC = 0x4C4F47434F4D5054


@dataclass
class LogEntry:
    table_id: int
    key: int
    cvt_addr: int
    record_addr: int
    cell_index: int
    cell: CvtCell


@dataclass
class CommitLogRecord:
    txn_id: int
    entries: list[LogEntry] = field(default_factory=list)
    complete: bool = True

    def encode(self) -> bytes:
        parts = [LOG_HEADER.pack(self.txn_id, len(self.entries))]
        for e in self.entries:
            parts.append(LOG_ENTRY.pack(e.table_id, e.cell_index, e.key, e.cvt_addr, e.record_addr))
            parts.append(encode_cell(e.cell))
        parts.append(LOG_TRAILER.pack(LOG_MAGIC, self.txn_id))
        return b"".join(parts)

    @staticmethod
    def size(n_entries: int) -> int:
        return LOG_HEADER.size + n_entries * LOG_ENTRY_SIZE + LOG_TRAILER.size

    @classmethod
    def decode(cls, buf: bytes) -> Optional["CommitLogRecord"]:
        """Parse a log region; None if it holds no record at all."""
        from .memstore import decode_cell

        if len(buf) < LOG_HEADER.size:
            return None
        txn_id, n = LOG_HEADER.unpack_from(buf, 0)
        if txn_id == 0:
            return None
        end = cls.size(n)
        if end > len(buf):
            return cls(txn_id, [], False)
        entries = []
        off = LOG_HEADER.size
        try:
            for _ in range(n):
                table, idx, key, cvt_addr, rec = LOG_ENTRY.unpack_from(buf, off)
                cell = decode_cell(buf, off + LOG_ENTRY.size)
                entries.append(LogEntry(table, key, cvt_addr, rec, idx, cell))
                off += LOG_ENTRY_SIZE
        except MalformedBytes:
            return cls(txn_id, entries, False)
        magic, tail_txn = LOG_TRAILER.unpack_from(buf, off)
        return cls(txn_id, entries, magic == LOG_MAGIC and tail_txn == txn_id)


# --------------------------------------------------------------------------
# transaction state


@dataclass(eq=False)
class Access:
    table_id: int
    key: int
    lock_key: int
    write: bool = False
    intent: Optional[WriteIntent] = None
    executed: bool = False
    cvt: Optional[Cvt] = None
    cvt_addr: int = 0
    cell: Optional[int] = None
    version: int = 0
    payload: Optional[bytes] = None
    new_payload: Optional[bytes] = None
    read_locked: bool = False
    write_locked: bool = False
    bucket_locked: bool = False
    inserted: bool = False


@dataclass(eq=False)
class HeldLock:
    key: int
    write: bool
    owner: int
    index_bucket: bool = False
    address: int = 0  # lock word address in mn-lock mode
    node: Optional[NodeId] = None


@dataclass(eq=False)
class TxnContext:
    txn_id: int
    cn_id: int
    t_start: int
    isolation: IsolationLevel
    read_only: bool = False
    t_commit: Optional[int] = None
    entries: dict = field(default_factory=dict)  # (table, key) -> Access
    locks: list = field(default_factory=list)  # HeldLock
    status: TxnStatus = TxnStatus.RUNNING
    abort_reason: Optional[AbortReason] = None
    abort_requested: Optional[AbortReason] = None
    in_commit: bool = False
    lock_rpcs: int = 0
    local_locks: int = 0
    remote_locks: int = 0
    label: str = ""
    delta: int = 0
    single_shard: bool = False
    started_at: float = 0.0
    finished_at: float = 0.0
    reads: list = field(default_factory=list)  # (table, key, version, digest)
    writes: list = field(default_factory=list)  # (table, key, digest, tombstone)

    @property
    def read_only_set(self) -> list[Access]:
        return [a for a in self.entries.values() if not a.write]

    @property
    def read_write_set(self) -> list[Access]:
        return [a for a in self.entries.values() if a.write]

    @property
    def active(self) -> bool:
        return self.status in (TxnStatus.RUNNING, TxnStatus.COMMITTING)

    def get(self, table_id: int, key: int) -> Optional[bytes]:
        a = self.entries.get((table_id, key))
        if a is None:
            raise KeyError((table_id, key))
        return a.new_payload if a.new_payload is not None else a.payload

    def put(self, table_id: int, key: int, payload: bytes) -> None:
        a = self.entries.get((table_id, key))
        if a is None or not a.write:
            raise TxnUsageError("put() on a key not in the read-write set")
        a.new_payload = bytes(payload)


def value_digest(payload: Optional[bytes]) -> int:
    if not payload:
        return 0
    return int.from_bytes(payload[:8].ljust(8, b"\0"), "little", signed=True)


@dataclass
class ProtocolConfig:
    isolation: IsolationLevel = IsolationLevel.SR
    mode: str = "lotus"
    gc_threshold_ns: float = 500e6
    ts_rtt_ns: float = 2_000.0
    local_lock_ns: float = 100.0
    invisible_retry_ns: float = 3_000.0
    invisible_retries: int = 8
    shard_retries: int = 2
    read_lock_guesses: int = 3
    use_vtcache: bool = True
    shadow_check: bool = False
    max_log_entries: int = 64

    def __post_init__(self):
        if isinstance(self.isolation, str):
            self.isolation = IsolationLevel(self.isolation.lower())
        if self.mode not in ("lotus", "mn-lock"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class CoordinatorStats:
    committed: int = 0
    aborted: int = 0
    lock_rpc_msgs: int = 0
    local_locks: int = 0
    remote_locks: int = 0
    lock_cas: int = 0
    lock_cas_acquire: int = 0
    lock_cas_release: int = 0
    vt_hits: int = 0
    vt_misses: int = 0
    stale_hits: int = 0
    invisible_waits: int = 0
    abort_reasons: dict = field(default_factory=dict)


class _Abort(Exception):
    def __init__(self, reason: AbortReason):
        super().__init__(reason.value)
        self.reason = reason


class Coordinator:
    """One logical coordinator (thread x coroutine slot) of a compute node.

    ``cn`` is the owning compute node; it provides ``index``, ``node``,
    ``lock_table``, ``vtcache``, ``addr_cache``, ``shard_view``, ``cluster``.
    The cluster provides ``sim``, ``fabric``, ``pool``, ``ts``, ``routing``,
    ``membership`` and the ``txn_finished`` / ``crash_point`` hooks.
    """

    def __init__(self, cn, index: int, log_node: NodeId, log_addr: int, cfg: ProtocolConfig):
        self.cn = cn
        self.index = index
        self.log_node = log_node
        self.log_addr = log_addr
        self.cfg = cfg
        self.stats = CoordinatorStats()
        self.current: Optional[TxnContext] = None
        c = cn.cluster
        self.sim = c.sim
        self.fabric = c.fabric
        self.pool = c.pool
        self.ts = c.ts

    # ------------------------------------------------------------------ API

    def begin(self, read_only: bool = False, label: str = ""):
        txn_id = self.cn.cluster.next_txn_id()
        yield self.sim.now + self.cfg.ts_rtt_ns
        t_start = self.ts.next_timestamp(self.sim.now)
        ctx = TxnContext(txn_id, self.cn.index, t_start, self.cfg.isolation, read_only, label=label)
        ctx.started_at = self.sim.now
        self.current = ctx
        self.cn.cluster.txn_started(self, ctx)
        return ctx

    def add_ro(self, ctx: TxnContext, table_id: int, key: int) -> Access:
        self._check_running(ctx)
        k = (table_id, key)
        a = ctx.entries.get(k)
        if a is None:
            self.pool.meta(table_id)
            a = ctx.entries[k] = Access(table_id, key, lock_key(table_id, key))
        return a

    def add_rw(self, ctx: TxnContext, table_id: int, key: int,
               intent: WriteIntent = WriteIntent.UPDATE) -> Access:
        self._check_running(ctx)
        if ctx.read_only:
            raise TxnUsageError("read-write access in a read-only transaction")
        if isinstance(intent, str):
            intent = WriteIntent(intent)
        k = (table_id, key)
        a = ctx.entries.get(k)
        if a is None:
            self.pool.meta(table_id)
            a = ctx.entries[k] = Access(table_id, key, lock_key(table_id, key), True, intent)
        elif not a.write:
            a.write = True
            a.intent = intent
            a.executed = False
        return a

    def abort(self, ctx: TxnContext, reason: AbortReason = AbortReason.USER):
        self._check_running(ctx)
        yield from self._abort(ctx, reason)
        return False

    def execute(self, ctx: TxnContext):
        """Generator; returns True if every staged access was locked and read."""
        self._check_running(ctx)
        if ctx.read_only:
            return (yield from self._execute_unlocked(ctx))
        try:
            self._check_requested(ctx)
            todo = [a for a in ctx.entries.values() if not a.executed]
            if not todo:
                return True
            todo.sort(key=lambda a: (a.table_id, a.key))
            yield from self._point("execute.begin", ctx)
            if self.cfg.mode == "lotus":
                yield from self._lock_lotus(ctx, todo)
                self._check_requested(ctx)
                yield from self._point("execute.locked", ctx)
                yield from self._read_cvts(ctx, todo, locked=True)
            else:
                yield from self._lock_and_read_mn(ctx, todo)
            self._check_requested(ctx)
            yield from self._read_records(ctx, todo)
            self._check_requested(ctx)
            yield from self._point("execute.read", ctx)
        except _Abort as e:
            yield from self._abort(ctx, e.reason)
            return False
        for a in todo:
            a.executed = True
        return True

    def commit(self, ctx: TxnContext):
        """Generator; returns True once the transaction is committed."""
        self._check_running(ctx)
        if ctx.read_only:
            if any(not a.executed for a in ctx.entries.values()):
                ok = yield from self._execute_unlocked(ctx)
                if not ok:
                    return False
            self._finish(ctx, TxnStatus.COMMITTED)
            return True
        if any(not a.executed for a in ctx.entries.values()):
            ok = yield from self.execute(ctx)
            if not ok:
                return False
        if ctx.abort_requested is not None:
            yield from self._abort(ctx, ctx.abort_requested)
            return False
        writes = [a for a in ctx.entries.values() if a.write and a.new_payload is not None
                  or a.write and a.intent is WriteIntent.DELETE]
        if not writes:
            yield from self._release_all(ctx, wait=False)
            self._record_reads(ctx)
            self._finish(ctx, TxnStatus.COMMITTED)
            return True
        ctx.status = TxnStatus.COMMITTING
        yield from self._point("commit.begin", ctx)
        yield from self._commit_writes(ctx, writes)
        yield from self._release_all(ctx, wait=False)
        self._finish(ctx, TxnStatus.COMMITTED)
        yield from self._point("commit.unlocked", ctx)
        return True

    def run_read_only(self, ctx: TxnContext):
        """Lock-free read-only path; returns True when committed."""
        self._check_running(ctx)
        if ctx.read_write_set:
            raise TxnUsageError("run_read_only needs a read-only set only")
        ctx.read_only = True
        ok = yield from self._execute_unlocked(ctx)
        if ok:
            self._finish(ctx, TxnStatus.COMMITTED)
        return ok

    # ----------------------------------------------------------- helpers

    def _check_running(self, ctx: TxnContext) -> None:
        if ctx.status is not TxnStatus.RUNNING:
            raise TxnUsageError(f"transaction {ctx.txn_id} is {ctx.status.value}")

    def _check_requested(self, ctx: TxnContext) -> None:
        if ctx.abort_requested is not None and not ctx.in_commit:
            raise _Abort(ctx.abort_requested)

    def _point(self, name: str, ctx: TxnContext):
        """Crash-injection hook between protocol steps."""
        hook = self.cn.cluster.crash_point
        if hook is not None and hook(self, name, ctx):
            yield self.sim.event()  # never fires; the crash kills this process

    def _finish(self, ctx: TxnContext, status: TxnStatus, reason: Optional[AbortReason] = None) -> None:
        ctx.status = status
        ctx.abort_reason = reason
        ctx.finished_at = self.sim.now
        if status is TxnStatus.COMMITTED:
            self.stats.committed += 1
        else:
            self.stats.aborted += 1
            self.stats.abort_reasons[reason.value] = self.stats.abort_reasons.get(reason.value, 0) + 1
        if self.current is ctx:
            self.current = None
        self.cn.cluster.txn_finished(self, ctx)

    def _abort(self, ctx: TxnContext, reason: AbortReason):
        ctx.status = TxnStatus.ABORTED
        yield from self._release_all(ctx, wait=True)
        self._finish(ctx, TxnStatus.ABORTED, reason)

    def _record_reads(self, ctx: TxnContext) -> None:
        for a in ctx.entries.values():
            if a.cell is not None and not a.inserted:
                ctx.reads.append((a.table_id, a.key, a.version, value_digest(a.payload)))

    # ------------------------------------------------------- lotus locking

    def _owner(self, key: int, index_bucket: bool) -> int:
        return self.cn.shard_view.owner(lock_shard(key, index_bucket))

    def _lock_lotus(self, ctx: TxnContext, todo: list[Access]):
        reqs = []
        sr = ctx.isolation is IsolationLevel.SR
        for a in todo:
            if a.write:
                if a.intent is WriteIntent.INSERT and not a.bucket_locked:
                    meta = self.pool.meta(a.table_id)
                    reqs.append((a, meta.bucket_address(meta.bucket_of(a.key)), True, True))
                if not a.write_locked:
                    reqs.append((a, a.lock_key, True, False))
            elif sr and not a.read_locked:
                reqs.append((a, a.lock_key, False, False))
        attempts = 0
        membership = self.cn.cluster.membership
        while reqs:
            by_owner: dict[int, list] = {}
            for r in reqs:
                by_owner.setdefault(self._owner(r[1], r[3]), []).append(r)
            retry = []
            failure: Optional[AbortReason] = None
            ops = []
            me = self.cn.index
            for owner in sorted(by_owner):
                batch = sorted(by_owner[owner], key=lambda r: (r[1], r[3]))
                if owner == me:
                    continue
                if membership.is_failed(owner):
                    failure = failure or AbortReason.PEER_FAILED
                    continue
                payload = encode_lock_batch(
                    LockRequest(True, r[1], r[2], ctx.txn_id, me, r[3]) for r in batch)
                op = self.fabric.rpc(NodeId.cn(owner), payload, src=self.cn.node, channel=LOCK_CHANNEL)
                ctx.lock_rpcs += 1
                self.stats.lock_rpc_msgs += 1
                ops.append((owner, batch, op))
            local = by_owner.get(me, [])
            local.sort(key=lambda r: (r[1], r[3]))
            table = self.cn.lock_table
            for r in local:
                res = table.try_acquire(r[1], r[2], me, ctx.txn_id, r[3])
                self.cn.note_lock_request(lock_shard(r[1], r[3]))
                failure = self._apply_result(ctx, r, me, res, retry, failure)
                ctx.local_locks += 1
                self.stats.local_locks += 1
            t = done_time((o[2] for o in ops), self.sim.now + len(local) * self.cfg.local_lock_ns)
            yield t
            for owner, batch, op in ops:
                if op.error is not None:
                    # grants may have happened; remember them so release is attempted
                    for r in batch:
                        self._note_lock(ctx, r, owner)
                    failure = failure or AbortReason.PEER_FAILED
                    continue
                for r, res in zip(batch, decode_lock_results(op.result)):
                    failure = self._apply_result(ctx, r, owner, res, retry, failure)
                    ctx.remote_locks += 1
                    self.stats.remote_locks += 1
            if failure is not None:
                raise _Abort(failure)
            if retry:
                attempts += 1
                if attempts > self.cfg.shard_retries:
                    raise _Abort(AbortReason.STALE_SHARD)
                self.cn.refresh_shard_view()
            reqs = retry

    def _apply_result(self, ctx, r, owner, res, retry, failure):
        if res is LockResult.OK:
            self._note_lock(ctx, r, owner)
            return failure
        if res is LockResult.SHARD_NOT_OWNED:
            retry.append(r)
            return failure
        return failure or (AbortReason.BUCKET_FULL if res is LockResult.BUCKET_FULL
                           else AbortReason.LOCK_CONFLICT)

    def _note_lock(self, ctx: TxnContext, r, owner: int) -> None:
        a, key, write, ib = r
        for h in ctx.locks:
            if h.key == key and h.index_bucket == ib and h.owner == owner:
                h.write = h.write or write
                break
        else:
            ctx.locks.append(HeldLock(key, write, owner, ib))
        if ib:
            a.bucket_locked = True
        elif write:
            a.write_locked = True
        else:
            a.read_locked = True

    def _release_all(self, ctx: TxnContext, wait: bool):
        """Release every lock; remote releases are awaited only if ``wait``."""
        if not ctx.locks:
            return
        locks, ctx.locks = ctx.locks, []
        if self.cfg.mode == "mn-lock":
            yield from self._release_mn(ctx, locks, wait)
            return
        me = self.cn.index
        membership = self.cn.cluster.membership
        by_owner: dict[int, list] = {}
        for h in locks:
            by_owner.setdefault(h.owner, []).append(h)
        n_local = 0
        ops = []
        for owner in sorted(by_owner):
            hs = by_owner[owner]
            if owner == me:
                for h in hs:
                    self.cn.lock_table.try_release(h.key, h.write, me, ctx.txn_id, h.index_bucket)
                    n_local += 1
                continue
            if membership.is_failed(owner):
                continue
            payload = encode_lock_batch(
                LockRequest(False, h.key, h.write, ctx.txn_id, me, h.index_bucket) for h in hs)
            op = self.fabric.rpc(NodeId.cn(owner), payload, src=self.cn.node, channel=LOCK_CHANNEL)
            ctx.lock_rpcs += 1
            self.stats.lock_rpc_msgs += 1
            ops.append(op)
        t = self.sim.now + n_local * self.cfg.local_lock_ns
        if wait:
            t = done_time(ops, t)
        if t > self.sim.now:
            yield t

    # ------------------------------------------------------ mn-lock baseline

    def _lock_and_read_mn(self, ctx: TxnContext, todo: list[Access]):
        """Baseline: lock words next to the data, taken with CAS.

        The CVT address must be known first (address cache or bucket read).
        Each lock CAS then goes out doorbell-batched with the CVT read, so a
        first-try grant costs one round trip for lock and read together.
        """
        sr = ctx.isolation is IsolationLevel.SR
        yield from self._resolve_addresses(ctx, todo)
        pending = []
        for a in todo:
            meta = self.pool.meta(a.table_id)
            node = meta.replicas(a.key)[0]
            if a.write:
                if a.intent is WriteIntent.INSERT and not a.bucket_locked:
                    addr = meta.bucket_address(meta.bucket_of(a.key))
                    pending.append([a, addr, node, True, True, 0])
                if a.cvt_addr and not a.write_locked:
                    pending.append([a, a.cvt_addr + HEADER_LOCK_OFFSET, node, True, False, 0])
            elif sr and not a.read_locked:
                pending.append([a, a.cvt_addr + HEADER_LOCK_OFFSET, node, False, False, 0])
        # CVT reads batched behind the first lock round
        batched = {}
        for a in todo:
            if a.cvt_addr and not a.inserted:
                batched[id(a)] = None
        guesses = 0
        failure = None
        first = True
        late: set[int] = set()
        while pending or first:
            ops = []
            for p in pending:
                a, addr, node, write, ib, guess = p
                swap = 1 if write else guess + 2
                op = self.fabric.cas(node, addr, guess, swap, src=self.cn.node)
                self.stats.lock_cas += 1
                self.stats.lock_cas_acquire += 1
                ops.append(op)
            reads = []
            if first:
                for a in todo:
                    if id(a) in batched:
                        meta = self.pool.meta(a.table_id)
                        op = self.fabric.read(meta.replicas(a.key)[0], a.cvt_addr, meta.cvt_bytes, self.cn.node)
                        batched[id(a)] = op
                        reads.append(op)
                first = False
            yield done_time(ops + reads, self.sim.now)
            retry = []
            for p, op in zip(pending, ops):
                a, addr, node, write, ib, guess = p
                old = op.result
                if old == guess:
                    ctx.locks.append(HeldLock(addr, write, -1, ib, addr, node))
                    if ib:
                        a.bucket_locked = True
                    elif write:
                        a.write_locked = True
                    else:
                        a.read_locked = True
                    if guesses:
                        late.add(id(a))
                elif not write and old != 1 and old % 2 == 0 and old < 254:
                    p[5] = old
                    retry.append(p)
                else:
                    failure = AbortReason.LOCK_CONFLICT
            guesses += 1
            if failure is not None:
                raise _Abort(failure)
            if retry and guesses >= self.cfg.read_lock_guesses:
                raise _Abort(AbortReason.LOCK_CONFLICT)
            pending = retry
        refetch = []
        for a in todo:
            op = batched.get(id(a))
            if op is None or id(a) in late:
                refetch.append(a)
                continue
            meta = self.pool.meta(a.table_id)
            try:
                cvt = decode_cvt(op.result, meta.n_cells)
            except MalformedBytes:
                raise _Abort(AbortReason.INCONSISTENT_READ) from None
            if self.cn.addr_cache.addr_validate(cvt.header, a.key, a.table_id):
                a.cvt = cvt
            else:
                # the lock went to whatever now lives at the stale address
                self.cn.addr_cache.addr_remove(a.lock_key)
                raise _Abort(AbortReason.INCONSISTENT_READ)
        if refetch:
            locked_at = {id(a): a.cvt_addr for a in refetch}
            yield from self._read_cvts(ctx, refetch, locked=True)
            for a in refetch:
                if locked_at[id(a)] and a.cvt_addr != locked_at[id(a)]:
                    raise _Abort(AbortReason.INCONSISTENT_READ)

    def _resolve_addresses(self, ctx: TxnContext, todo: list[Access]):
        need = []
        for a in todo:
            if a.cvt_addr:
                continue
            cached = self.cn.addr_cache.addr_lookup(a.lock_key)
            if cached is not None:
                a.cvt_addr = cached
            else:
                need.append(a)
        if not need:
            return
        ops = []
        for a in need:
            meta = self.pool.meta(a.table_id)
            node, baddr = meta.locate_bucket(a.key)
            ops.append(self.fabric.read(node, baddr, meta.bucket_bytes, src=self.cn.node))
        yield done_time(ops, self.sim.now)
        for a, op in zip(need, ops):
            meta = self.pool.meta(a.table_id)
            cvts = parse_bucket(meta, op.result)
            slot = find_in_bucket(meta, cvts, a.key)
            if slot is not None:
                b = meta.bucket_of(a.key)
                a.cvt_addr = meta.cvt_address(b, slot)
                self.cn.addr_cache.addr_insert(a.lock_key, a.cvt_addr)
            elif not (a.write and a.intent is WriteIntent.INSERT):
                raise _Abort(AbortReason.KEY_NOT_FOUND)

    def _release_mn(self, ctx: TxnContext, locks: list[HeldLock], wait: bool):
        ops = []
        readers = []
        for h in locks:
            if h.write:
                op = self.fabric.cas(h.node, h.address, 1, 0, src=self.cn.node)
                self.stats.lock_cas += 1
                self.stats.lock_cas_release += 1
                ops.append(op)
            else:
                readers.append(h)
        guess = {id(h): 2 for h in readers}
        while readers:
            rops = []
            for h in readers:
                g = guess[id(h)]
                rops.append(self.fabric.cas(h.node, h.address, g, g - 2, src=self.cn.node))
                self.stats.lock_cas += 1
                self.stats.lock_cas_release += 1
            yield done_time(rops, self.sim.now)
            left = []
            for h, op in zip(readers, rops):
                if op.result != guess[id(h)]:
                    if op.result < 2 or op.result % 2:
                        continue  # nothing left to release
                    guess[id(h)] = op.result
                    left.append(h)
            readers = left
        if wait and ops:
            yield done_time(ops, self.sim.now)

    # --------------------------------------------------------- reading

    def _read_cvts(self, ctx: TxnContext, todo: list[Access], locked: bool):
        """Fetch each access's CVT: cache hit, cached address, or bucket scan."""
        cache = self.cn.vtcache
        addr_cache = self.cn.addr_cache
        me = self.cn.index
        use_vt = locked and self.cfg.mode == "lotus" and self.cfg.use_vtcache
        direct = []
        scans = []
        for a in todo:
            if a.write and a.intent is WriteIntent.INSERT:
                scans.append(a)
                continue
            if use_vt and self._owner(a.lock_key, False) == me and (a.write_locked or a.read_locked):
                hit = cache.vt_lookup(a.lock_key)
                if hit is not None:
                    self.stats.vt_hits += 1
                    a.cvt_addr, a.cvt = hit
                    if self.cfg.shadow_check:
                        self._shadow_compare(a)
                    continue
                self.stats.vt_misses += 1
            addr = a.cvt_addr or addr_cache.addr_lookup(a.lock_key)
            if addr:
                a.cvt_addr = addr
                direct.append(a)
            else:
                scans.append(a)
        yield from self._fetch(ctx, direct, scans)
        if use_vt:
            for a in todo:
                if a.cvt is not None and self._owner(a.lock_key, False) == me and a.lock_key not in cache \
                        and (a.write_locked or a.read_locked) and not a.inserted:
                    cache.vt_update_local(a.lock_key, a.cvt_addr, a.cvt)

    def _fetch(self, ctx: TxnContext, direct: list[Access], scans: list[Access]):
        src = self.cn.node
        ops = []
        for a in direct:
            meta = self.pool.meta(a.table_id)
            ops.append((a, False, self.fabric.read(meta.replicas(a.key)[0], a.cvt_addr, meta.cvt_bytes, src)))
        for a in scans:
            meta = self.pool.meta(a.table_id)
            node, baddr = meta.locate_bucket(a.key)
            ops.append((a, True, self.fabric.read(node, baddr, meta.bucket_bytes, src)))
        if not ops:
            return
        yield done_time((o[2] for o in ops), self.sim.now)
        rescan = []
        for a, whole, op in ops:
            meta = self.pool.meta(a.table_id)
            try:
                if not whole:
                    cvt = decode_cvt(op.result, meta.n_cells)
                    if self.cn.addr_cache.addr_validate(cvt.header, a.key, a.table_id):
                        a.cvt = cvt
                    else:
                        self.cn.addr_cache.addr_remove(a.lock_key)
                        a.cvt_addr = 0
                        rescan.append(a)
                    continue
                cvts = parse_bucket(meta, op.result)
            except MalformedBytes:
                raise _Abort(AbortReason.INCONSISTENT_READ) from None
            b = meta.bucket_of(a.key)
            slot = find_in_bucket(meta, cvts, a.key)
            if slot is None:
                if not (a.write and a.intent is WriteIntent.INSERT):
                    raise _Abort(AbortReason.KEY_NOT_FOUND)
                slot = free_slot(cvts)
                if slot is None:
                    raise _Abort(AbortReason.BUCKET_FULL)
                a.inserted = True
                a.cvt_addr = meta.cvt_address(b, slot)
                a.cvt = Cvt(CvtHeader(a.key, a.table_id, meta.schema.record_len),
                            [CvtCell() for _ in range(meta.n_cells)])
                continue
            a.cvt_addr = meta.cvt_address(b, slot)
            a.cvt = cvts[slot]
            self.cn.addr_cache.addr_insert(a.lock_key, a.cvt_addr)
        if rescan:
            yield from self._fetch(ctx, [], rescan)

    def _shadow_compare(self, a: Access) -> None:
        meta = self.pool.meta(a.table_id)
        raw = self.fabric.peek(meta.replicas(a.key)[0], a.cvt_addr, meta.cvt_bytes)
        mem = decode_cvt(raw, meta.n_cells)
        mem.header.lock_word = a.cvt.header.lock_word
        if mem != a.cvt:
            self.stats.stale_hits += 1

    def _read_records(self, ctx: TxnContext, todo: list[Access]):
        sr = ctx.isolation is IsolationLevel.SR
        ops = []
        for a in todo:
            cvt = a.cvt
            if a.inserted:
                a.cell = None
                a.payload = None
                continue
            best, newer, _pending = pick_version(cvt, ctx.t_start)
            locked = a.write or sr
            if locked and newer:
                raise _Abort(AbortReason.FUTURE_VERSION)
            if a.write and a.intent is WriteIntent.INSERT:
                if best is not None and not cvt.cells[best].tombstone:
                    raise _Abort(AbortReason.KEY_EXISTS)
                a.cell = best
                a.version = cvt.cells[best].version if best is not None else 0
                a.payload = None
                continue
            if best is None:
                if any(c.visible for c in cvt.cells):
                    raise _Abort(AbortReason.VERSION_NOT_FOUND)
                raise _Abort(AbortReason.KEY_NOT_FOUND)
            cell = cvt.cells[best]
            if cell.tombstone:
                raise _Abort(AbortReason.KEY_NOT_FOUND)
            a.cell = best
            a.version = cell.version
            meta = self.pool.meta(a.table_id)
            ops.append((a, meta, self.fabric.read(meta.replicas(a.key)[0], cell.address,
                                                  meta.record_bytes, self.cn.node)))
        if ops:
            yield done_time((o[2] for o in ops), self.sim.now)
        for a, meta, op in ops:
            if not cv_check(op.result, a.cvt.cells[a.cell]):
                raise _Abort(AbortReason.INCONSISTENT_READ)
            a.payload = record_payload(op.result, meta.schema.record_len)

    def _execute_unlocked(self, ctx: TxnContext):
        """Read-only path: no locks; wait out in-flight writers, guard with CVs."""
        todo = [a for a in ctx.entries.values() if not a.executed]
        try:
            yield from self._point("readonly.begin", ctx)
            for attempt in range(self.cfg.invisible_retries + 1):
                for a in todo:
                    a.cvt = None
                yield from self._read_cvts(ctx, todo, locked=False)
                if not any(pick_version(a.cvt, ctx.t_start)[2] for a in todo):
                    break
                self.stats.invisible_waits += 1
                yield self.sim.now + self.cfg.invisible_retry_ns * (1 << min(attempt, 4))
            else:
                raise _Abort(AbortReason.INVISIBLE_PENDING)
            yield from self._read_records_unlocked(ctx, todo)
        except _Abort as e:
            yield from self._abort(ctx, e.reason)
            return False
        for a in todo:
            a.executed = True
        self._record_reads(ctx)
        return True

    def _read_records_unlocked(self, ctx: TxnContext, todo: list[Access]):
        ops = []
        for a in todo:
            best, _newer, _ = pick_version(a.cvt, ctx.t_start)
            if best is None:
                if any(c.visible for c in a.cvt.cells):
                    raise _Abort(AbortReason.VERSION_NOT_FOUND)
                raise _Abort(AbortReason.KEY_NOT_FOUND)
            cell = a.cvt.cells[best]
            if cell.tombstone:
                raise _Abort(AbortReason.KEY_NOT_FOUND)
            a.cell = best
            a.version = cell.version
            meta = self.pool.meta(a.table_id)
            ops.append((a, meta, self.fabric.read(meta.replicas(a.key)[0], cell.address,
                                                  meta.record_bytes, self.cn.node)))
        if ops:
            yield done_time((o[2] for o in ops), self.sim.now)
        for a, meta, op in ops:
            if not cv_check(op.result, a.cvt.cells[a.cell]):
                raise _Abort(AbortReason.INCONSISTENT_READ)
            a.payload = record_payload(op.result, meta.schema.record_len)

    # --------------------------------------------------------- commit

    def _commit_writes(self, ctx: TxnContext, writes: list[Access]):
        sim = self.sim
        src = self.cn.node
        now = sim.now
        clock = self.ts.clock(now)
        threshold = int(self.cfg.gc_threshold_ns) << self.ts.shift
        plans = []
        log = CommitLogRecord(ctx.txn_id)
        for a in writes:
            meta = self.pool.meta(a.table_id)
            heap = self.pool.heap_for(a.table_id, a.key)
            original = a.cvt
            cvt = original.copy()
            idx = select_cell_for_write(cvt, clock, threshold)
            prev = original.cells[idx]
            freed = []
            if prev.valid and prev.address:
                rec_addr = prev.address
            else:
                rec_addr = heap.alloc(now)
            new_cv = (prev.head_cv + 1) & 0xFF
            tomb = a.intent is WriteIntent.DELETE
            payload = bytes(meta.schema.record_len) if tomb else a.new_payload
            if len(payload) != meta.schema.record_len:
                raise TxnUsageError(f"payload for table {a.table_id} must be {meta.schema.record_len} bytes")
            record = stamp_record(payload, new_cv, meta.record_bytes)
            cell = CvtCell(new_cv, True, rec_addr, INVISIBLE, new_cv, tomb)
            cvt.cells[idx] = cell
            for j in expired_cells(cvt, clock, threshold, idx):
                old = cvt.cells[j]
                freed.append(old.address)
                cvt.cells[j] = CvtCell(old.head_cv, False, old.address, old.version, old.tail_cv)
            plans.append((a, meta, idx, cvt, record, freed))
            log.entries.append(LogEntry(a.table_id, a.key, a.cvt_addr, rec_addr, idx, cell))
            ctx.writes.append((a.table_id, a.key, value_digest(payload), tomb))
        if len(log.entries) > self.cfg.max_log_entries:
            raise TxnUsageError("too many writes for the commit log region")
        self._record_reads(ctx)

        # Step 1: log, then records and INVISIBLE cells on every replica.
        ctx.in_commit = True
        ops = [self.fabric.write(self.log_node, self.log_addr, log.encode(), src)]
        yield from self._point("commit.log", ctx)
        for a, meta, idx, cvt, record, freed in plans:
            cells = b"".join(encode_cell(c) for c in cvt.cells)
            head = encode_header(cvt.header)[:HEADER_LOCK_OFFSET] if a.inserted else None
            for node in meta.replicas(a.key):
                ops.append(self.fabric.write(node, cvt.cells[idx].address, record, src))
                ops.append(self.fabric.write(node, a.cvt_addr + HEADER_SIZE, cells, src))
                if head is not None:
                    ops.append(self.fabric.write(node, a.cvt_addr, head, src))
        yield from self._point("commit.data", ctx)
        yield done_time(ops, sim.now)
        yield from self._point("commit.written", ctx)

        # Step 2: commit timestamp.
        yield sim.now + self.cfg.ts_rtt_ns
        t_commit = self.ts.next_timestamp(sim.now)
        ctx.t_commit = t_commit
        yield from self._point("commit.timestamp", ctx)

        # Step 3: flip versions to T_commit everywhere.
        vbytes = _U64.pack(t_commit)
        ops = []
        for i, (a, meta, idx, cvt, record, freed) in enumerate(plans):
            addr = a.cvt_addr + HEADER_SIZE + idx * CELL_SIZE + CELL_VERSION_OFFSET
            for node in meta.replicas(a.key):
                ops.append(self.fabric.write(node, addr, vbytes, src))
            if i + 1 < len(plans):
                yield from self._point(f"commit.visible.{i}", ctx)
        yield from self._point("commit.visible", ctx)
        yield done_time(ops, sim.now)

        # Bookkeeping after the writes are durable and visible.
        me = self.cn.index
        cache = self.cn.vtcache
        for a, meta, idx, cvt, record, freed in plans:
            cvt.cells[idx].version = t_commit
            heap = self.pool.heap_for(a.table_id, a.key)
            for addr in freed:
                heap.free(addr, sim.now)
            if a.inserted:
                self.pool.note_insert(a.table_id, a.key)
                self.cn.addr_cache.addr_insert(a.lock_key, a.cvt_addr)
            a.cvt = cvt
            if self.cfg.mode == "lotus" and self.cfg.use_vtcache and self._owner(a.lock_key, False) == me:
                cache.vt_update_local(a.lock_key, a.cvt_addr, cvt)
        yield from self._point("commit.done", ctx)

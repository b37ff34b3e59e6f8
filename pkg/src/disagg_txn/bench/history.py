"""Transaction history: in-memory records, binary file format, text dump.

File layout (little endian)::

    header   magic "DTXH" | version u16 | isolation u8 (0 sr, 1 si) | pad u8 | load version u64
    record   body length u32 | body
    body     seq u64 | txn u64 | outcome u8 | reason u8 | kind length u8 | kind utf-8 |
             t_start u64 | t_commit u64 | delta i64 | n_ops u32 | n_ops x op
    op       kind u8 (0 read, 1 write, 2 delete) | table u16 | key u64 | version u64 | value i64

``reason`` indexes :class:`AbortReason` in declaration order, 255 if none.
A write's version is the writer's commit timestamp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional

from ..txn import AbortReason, IsolationLevel, TxnContext, TxnStatus

MAGIC = b"DTXH"
FILE_VERSION = 1
_HEAD = struct.Struct("<4sHBxQ")
_LEN = struct.Struct("<I")
_BODY_A = struct.Struct("<QQBBB")
_BODY_B = struct.Struct("<QQqI")
_OP = struct.Struct("<BHQQq")

OP_READ = 0
OP_WRITE = 1
OP_DELETE = 2
_REASONS = list(AbortReason)


class MalformedHistory(ValueError):
    pass


@dataclass
class HistOp:
    op: int
    table: int
    key: int
    version: int
    value: int = 0


@dataclass
class HistoryRecord:
    seq: int
    txn_id: int
    kind: str
    committed: bool
    reason: Optional[AbortReason]
    t_start: int
    t_commit: int
    delta: int = 0
    ops: list[HistOp] = field(default_factory=list)

    @property
    def reads(self) -> list[HistOp]:
        return [o for o in self.ops if o.op == OP_READ]

    @property
    def writes(self) -> list[HistOp]:
        return [o for o in self.ops if o.op != OP_READ]


@dataclass
class History:
    isolation: IsolationLevel
    load_version: int
    records: list[HistoryRecord] = field(default_factory=list)

    @property
    def committed(self) -> list[HistoryRecord]:
        return [r for r in self.records if r.committed]


class HistoryRecorder:
    """Cluster observer that turns finished transactions into records.

    Runs outside the simulated cost model: it reads coordinator state
    directly and never touches the fabric.
    """

    def __init__(self, isolation: IsolationLevel, load_version: int):
        self.history = History(isolation, load_version)
        self._seq = 0

    def txn_finished(self, coord, ctx: TxnContext) -> None:
        committed = ctx.status is TxnStatus.COMMITTED
        ops = []
        if committed:
            for table, key, version, value in ctx.reads:
                ops.append(HistOp(OP_READ, table, key, version, value))
            for table, key, value, tomb in ctx.writes:
                ops.append(HistOp(OP_DELETE if tomb else OP_WRITE, table, key, ctx.t_commit, value))
        self._seq += 1
        self.history.records.append(HistoryRecord(
            self._seq, ctx.txn_id, ctx.label, committed, ctx.abort_reason, ctx.t_start,
            ctx.t_commit or 0, ctx.delta if committed else 0, ops))


# --------------------------------------------------------------------------
# binary format


def encode_record(r: HistoryRecord) -> bytes:
    kind = r.kind.encode()[:255]
    reason = 255 if r.reason is None else _REASONS.index(r.reason)
    parts = [
        _BODY_A.pack(r.seq, r.txn_id, 0 if r.committed else 1, reason, len(kind)),
        kind,
        _BODY_B.pack(r.t_start, r.t_commit, r.delta, len(r.ops)),
    ]
    parts.extend(_OP.pack(o.op, o.table, o.key, o.version, o.value) for o in r.ops)
    body = b"".join(parts)
    return _LEN.pack(len(body)) + body


def write_history(h: History, f: BinaryIO) -> None:
    iso = 0 if h.isolation is IsolationLevel.SR else 1
    f.write(_HEAD.pack(MAGIC, FILE_VERSION, iso, h.load_version))
    for r in h.records:
        f.write(encode_record(r))


def save_history(h: History, path: str) -> None:
    with open(path, "wb") as f:
        write_history(h, f)


def history_bytes(h: History) -> bytes:
    import io

    buf = io.BytesIO()
    write_history(h, buf)
    return buf.getvalue()


def parse_history(data: bytes) -> History:
    if len(data) < _HEAD.size:
        raise MalformedHistory("file shorter than header")
    magic, version, iso, load_version = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedHistory("bad magic")
    if version != FILE_VERSION:
        raise MalformedHistory(f"unsupported version {version}")
    if iso > 1:
        raise MalformedHistory("bad isolation code")
    h = History(IsolationLevel.SR if iso == 0 else IsolationLevel.SI, load_version)
    off = _HEAD.size
    last_seq = 0
    while off < len(data):
        if off + _LEN.size > len(data):
            raise MalformedHistory("truncated record length")
        (n,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        end = off + n
        if end > len(data):
            raise MalformedHistory("truncated record")
        try:
            seq, txn, outcome, reason, klen = _BODY_A.unpack_from(data, off)
            p = off + _BODY_A.size
            kind = data[p:p + klen].decode()
            p += klen
            t_start, t_commit, delta, n_ops = _BODY_B.unpack_from(data, p)
            p += _BODY_B.size
            ops = []
            for _ in range(n_ops):
                ops.append(HistOp(*_OP.unpack_from(data, p)))
                p += _OP.size
        except (struct.error, UnicodeDecodeError) as e:
            raise MalformedHistory(str(e)) from None
        if p != end or outcome > 1 or (reason != 255 and reason >= len(_REASONS)):
            raise MalformedHistory(f"inconsistent record at offset {off}")
        if seq <= last_seq:
            raise MalformedHistory("sequence numbers not increasing")
        last_seq = seq
        h.records.append(HistoryRecord(seq, txn, kind, outcome == 0,
                                       None if reason == 255 else _REASONS[reason],
                                       t_start, t_commit, delta, ops))
        off = end
    return h


def load_history(path: str) -> History:
    with open(path, "rb") as f:
        return parse_history(f.read())


def dump_text(h: History) -> Iterable[str]:
    yield f"# isolation={h.isolation.value} load_version={h.load_version} records={len(h.records)}"
    names = {OP_READ: "R", OP_WRITE: "W", OP_DELETE: "D"}
    for r in h.records:
        outcome = "commit" if r.committed else f"abort:{r.reason.value if r.reason else '?'}"
        ops = " ".join(f"{names[o.op]}({o.table}:{o.key:#x}@{o.version}={o.value})" for o in r.ops)
        yield f"{r.seq} txn={r.txn_id} {r.kind} {outcome} ts={r.t_start}..{r.t_commit} delta={r.delta} {ops}".rstrip()

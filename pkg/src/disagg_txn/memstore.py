"""Memory-node data layout and the CN-side codecs for it.

Every record owns a consecutive version table (CVT): a header followed by
``n_cells`` version cells.  CVTs live in fixed-size hash-index buckets; the
records themselves live in a per-replica-group heap.  A table's buckets are
striped over replica groups, and every replica of a group uses the same
addresses, so a coordinator writes one address to primary and backups alike.

Byte layouts (little endian)::

    header (24 B)   key:u64 table:u16 length:u16 flags:u8 pad:3 lock:u64
    cell   (32 B)   head_cv:u8 state:u8 pad:6 address:u64 version:u64 pad:7 tail_cv:u8
    bucket          lock:u64 then CVTS_PER_BUCKET CVTs
    record          1 B cacheline version at the head of every 64 B line,
                    63 payload bytes after it

``lock`` words are only used by the lock-at-memory-node baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

from .fabric import CACHELINE, Fabric, NodeId

INVISIBLE = 0xFFFFFFFFFFFFFFFF

HEADER = struct.Struct("<QHHB3xQ")
CELL = struct.Struct("<BB6xQQ7xB")
HEADER_SIZE = HEADER.size
CELL_SIZE = CELL.size
CELL_VERSION_OFFSET = 16
HEADER_LOCK_OFFSET = 16
BUCKET_LOCK_SIZE = 8
CVTS_PER_BUCKET = 4
LINE_PAYLOAD = CACHELINE - 1

OCCUPIED = 0x01
CELL_VALID = 0x01
CELL_TOMBSTONE = 0x02


class MalformedBytes(ValueError):
    pass


class UnknownTable(KeyError):
    pass


class BucketFull(Exception):
    pass


# --------------------------------------------------------------------------
# CVT codec


@dataclass
class CvtHeader:
    key: int
    table_id: int
    length: int
    occupied: bool = True
    lock_word: int = 0


@dataclass
class CvtCell:
    head_cv: int = 0
    valid: bool = False
    address: int = 0
    version: int = 0
    tail_cv: int = 0
    tombstone: bool = False

    @property
    def torn(self) -> bool:
        return self.head_cv != self.tail_cv

    @property
    def cv(self) -> int:
        return self.head_cv

    @property
    def visible(self) -> bool:
        return self.valid and self.version != INVISIBLE and self.head_cv == self.tail_cv


@dataclass
class Cvt:
    header: CvtHeader
    cells: list[CvtCell] = field(default_factory=list)

    def copy(self) -> "Cvt":
        return Cvt(replace(self.header), [replace(c) for c in self.cells])


def cvt_size(n_cells: int) -> int:
    return HEADER_SIZE + n_cells * CELL_SIZE


def encode_cell(cell: CvtCell) -> bytes:
    state = (CELL_VALID if cell.valid else 0) | (CELL_TOMBSTONE if cell.tombstone else 0)
    return CELL.pack(cell.head_cv, state, cell.address, cell.version, cell.tail_cv)


def decode_cell(buf, offset: int = 0) -> CvtCell:
    head, state, addr, version, tail = CELL.unpack_from(buf, offset)
    if state & ~(CELL_VALID | CELL_TOMBSTONE) or (state & CELL_TOMBSTONE and not state & CELL_VALID):
        raise MalformedBytes(f"impossible cell state {state:#x}")
    return CvtCell(head, bool(state & CELL_VALID), addr, version, tail, bool(state & CELL_TOMBSTONE))


def encode_header(h: CvtHeader) -> bytes:
    return HEADER.pack(h.key, h.table_id, h.length, OCCUPIED if h.occupied else 0, h.lock_word)


def encode_cvt(cvt: Cvt) -> bytes:
    return encode_header(cvt.header) + b"".join(encode_cell(c) for c in cvt.cells)


def decode_cvt(buf, n_cells: int, offset: int = 0) -> Cvt:
    if len(buf) - offset < cvt_size(n_cells):
        raise MalformedBytes("short CVT")
    key, table_id, length, flags, lock = HEADER.unpack_from(buf, offset)
    if flags & ~OCCUPIED:
        raise MalformedBytes(f"impossible header flags {flags:#x}")
    header = CvtHeader(key, table_id, length, bool(flags & OCCUPIED), lock)
    cells = [decode_cell(buf, offset + HEADER_SIZE + i * CELL_SIZE) for i in range(n_cells)]
    return Cvt(header, cells)


def empty_cvt_bytes(n_cells: int) -> bytes:
    return bytes(cvt_size(n_cells))


# --------------------------------------------------------------------------
# records and cacheline versions


def record_size(payload_len: int) -> int:
    lines = max(1, -(-payload_len // LINE_PAYLOAD))
    return lines * CACHELINE


def stamp_record(payload: bytes, cv: int, size: Optional[int] = None) -> bytes:
    size = size or record_size(len(payload))
    out = bytearray(size)
    cvb = cv & 0xFF
    pos = 0
    for line in range(size // CACHELINE):
        base = line * CACHELINE
        out[base] = cvb
        chunk = payload[pos:pos + LINE_PAYLOAD]
        out[base + 1:base + 1 + len(chunk)] = chunk
        pos += LINE_PAYLOAD
    return bytes(out)


def record_payload(record: bytes, length: int) -> bytes:
    if len(record) <= CACHELINE:
        return record[1:1 + length]
    parts = []
    for base in range(0, len(record), CACHELINE):
        parts.append(record[base + 1:base + CACHELINE])
    return b"".join(parts)[:length]


def cv_stamp(payload: bytes, cell: CvtCell, new_cv: int) -> tuple[bytes, CvtCell]:
    """Stamp ``payload`` and ``cell`` with ``new_cv``; returns both."""
    new_cv &= 0xFF
    return stamp_record(payload, new_cv), replace(cell, head_cv=new_cv, tail_cv=new_cv)


def cv_check(record: bytes, cell: CvtCell) -> bool:
    if cell.head_cv != cell.tail_cv:
        return False
    cv = cell.head_cv
    for base in range(0, len(record), CACHELINE):
        if record[base] != cv:
            return False
    return True


# --------------------------------------------------------------------------
# cell selection and GC


def select_cell_for_write(cvt: Cvt, local_clock: int, threshold: int) -> int:
    """Pick the cell a new version goes into.

    Free cell first.  Otherwise the oldest cell whose version is older than
    ``local_clock - threshold`` is cleared (``valid`` drops) and returned.
    Otherwise the oldest valid cell is returned for in-place overwrite.
    Clock and threshold are in timestamp units.
    """
    cells = cvt.cells
    for i, c in enumerate(cells):
        if not c.valid:
            return i
    horizon = local_clock - threshold
    live = [(c.version, i) for i, c in enumerate(cells) if c.version != INVISIBLE]
    if not live:
        return 0
    live.sort()
    oldest_version, oldest = live[0]
    if oldest_version < horizon and len(live) > 1:
        cells[oldest] = replace(cells[oldest], valid=False, tombstone=False)
        return oldest
    return oldest


def expired_cells(cvt: Cvt, local_clock: int, threshold: int, exclude: int) -> list[int]:
    """Other cells GC may clear: expired and not the newest visible version."""
    horizon = local_clock - threshold
    visible = [(c.version, i) for i, c in enumerate(cvt.cells) if c.visible]
    newest = max(visible)[1] if visible else None
    return [
        i for i, c in enumerate(cvt.cells)
        if i != exclude and i != newest and c.valid and c.version != INVISIBLE and c.version < horizon
    ]


def pick_version(cvt: Cvt, t_start: int) -> tuple[Optional[int], bool, bool]:
    """Return (cell index of largest visible version < t_start, newer_exists, pending).

    ``pending`` reports an INVISIBLE or torn cell, i.e. a writer in flight.
    """
    best = None
    best_v = -1
    newer = False
    pending = False
    for i, c in enumerate(cvt.cells):
        if not c.valid:
            if c.torn:
                pending = True
            continue
        if c.version == INVISIBLE or c.torn:
            pending = True
            continue
        if c.version < t_start:
            if c.version > best_v:
                best_v = c.version
                best = i
        else:
            newer = True
    return best, newer, pending


# --------------------------------------------------------------------------
# memory pool layout


@dataclass
class TableSchema:
    table_id: int
    name: str
    record_len: int
    expected_keys: int
    n_cells: int = 2
    fill: float = 0.5

    def __post_init__(self):
        if not 0 < self.table_id < 1 << 16:
            raise ValueError("table_id must fit in 16 bits and be nonzero")


@dataclass
class ReplicaGroup:
    index: int
    nodes: tuple[NodeId, ...]
    index_base: int
    heap_base: int
    heap_len: int

    @property
    def primary(self) -> NodeId:
        return self.nodes[0]


@dataclass
class TableMeta:
    """What a CN caches about a table: enough to compute any bucket address."""

    schema: TableSchema
    n_buckets: int
    groups: list[ReplicaGroup]

    @property
    def table_id(self) -> int:
        return self.schema.table_id

    @property
    def n_cells(self) -> int:
        return self.schema.n_cells

    @property
    def cvt_bytes(self) -> int:
        return cvt_size(self.schema.n_cells)

    @property
    def bucket_bytes(self) -> int:
        return BUCKET_LOCK_SIZE + CVTS_PER_BUCKET * self.cvt_bytes

    @property
    def record_bytes(self) -> int:
        return record_size(self.schema.record_len)

    def bucket_of(self, key: int) -> int:
        return (key >> 12) % self.n_buckets

    def group_of_bucket(self, bucket: int) -> ReplicaGroup:
        return self.groups[bucket % len(self.groups)]

    def bucket_address(self, bucket: int) -> int:
        g = self.group_of_bucket(bucket)
        return g.index_base + (bucket // len(self.groups)) * self.bucket_bytes

    def cvt_address(self, bucket: int, slot: int) -> int:
        return self.bucket_address(bucket) + BUCKET_LOCK_SIZE + slot * self.cvt_bytes

    def slot_of_address(self, addr: int) -> int:
        return ((addr - BUCKET_LOCK_SIZE) % self.bucket_bytes) // self.cvt_bytes

    def locate_bucket(self, key: int) -> tuple[NodeId, int]:
        b = self.bucket_of(key)
        return self.group_of_bucket(b).primary, self.bucket_address(b)

    def replicas(self, key: int) -> tuple[NodeId, ...]:
        return self.group_of_bucket(self.bucket_of(key)).nodes

    def group_of_address(self, addr: int) -> ReplicaGroup:
        for g in self.groups:
            if g.index_base <= addr < g.heap_base + g.heap_len:
                return g
        raise KeyError(addr)


def parse_bucket(meta: TableMeta, buf: bytes) -> list[Cvt]:
    size = meta.cvt_bytes
    return [decode_cvt(buf, meta.n_cells, BUCKET_LOCK_SIZE + i * size) for i in range(CVTS_PER_BUCKET)]


def find_in_bucket(meta: TableMeta, cvts: list[Cvt], key: int) -> Optional[int]:
    for i, c in enumerate(cvts):
        h = c.header
        if h.occupied and h.key == key and h.table_id == meta.table_id:
            return i
    return None


def free_slot(cvts: list[Cvt]) -> Optional[int]:
    for i, c in enumerate(cvts):
        if not c.header.occupied:
            return i
    return None


class RecordHeap:
    """Bump allocator with a quarantined free list.

    Freed records only become reusable ``quarantine_ns`` later so that a
    reader holding a stale cell address still sees a mismatching CV rather
    than another key's freshly stamped record.
    """

    def __init__(self, base: int, length: int, record_bytes: int, quarantine_ns: float = 1_000_000.0):
        self.base = base
        self.length = length
        self.record_bytes = record_bytes
        self.quarantine_ns = quarantine_ns
        self._next = base
        self._free: list[tuple[float, int]] = []
        self.allocated = 0
        self.freed = 0

    def alloc(self, now: float = 0.0) -> int:
        if self._free and self._free[0][0] <= now:
            _, addr = self._free.pop(0)
        else:
            if self._next + self.record_bytes > self.base + self.length:
                raise MemoryError("record heap exhausted")
            addr = self._next
            self._next += self.record_bytes
        self.allocated += 1
        return addr

    def free(self, addr: int, now: float = 0.0) -> None:
        self._free.append((now + self.quarantine_ns, addr))
        self.freed += 1

    @property
    def live(self) -> int:
        return self.allocated - self.freed

    @property
    def high_water(self) -> int:
        return (self._next - self.base) // self.record_bytes


class MemoryPool:
    """Allocates and registers every MN region and keeps the table metadata.

    ``load``/``finish_load`` are the init-phase path: they poke bytes straight
    into primary memory and copy primaries to backups, without fabric cost.
    """

    def __init__(self, fabric: Fabric, n_mns: int, replicas: int = 3, quarantine_ns: float = 1_000_000.0):
        if n_mns < 1:
            raise ValueError("need at least one memory node")
        self.fabric = fabric
        self.mns = [NodeId.mn(i) for i in range(n_mns)]
        self.replicas = max(1, min(replicas, n_mns))
        self.quarantine_ns = quarantine_ns
        self.tables: dict[int, TableMeta] = {}
        self.heaps: dict[tuple[int, int], RecordHeap] = {}
        self._next_addr = 0x10000
        self._used: dict[int, list[int]] = {}
        self._loaded: set[tuple[int, int]] = set()

    def _reserve(self, length: int) -> int:
        base = self._next_addr
        self._next_addr += (length + 4095) // 4096 * 4096 + 4096
        return base

    def alloc_region(self, nodes, length: int) -> int:
        base = self._reserve(length)
        for n in nodes:
            self.fabric.register_region(n, base, length)
        return base

    def group_nodes(self, g: int) -> tuple[NodeId, ...]:
        n = len(self.mns)
        return tuple(self.mns[(g + r) % n] for r in range(self.replicas))

    def create_table(self, schema: TableSchema) -> TableMeta:
        if schema.table_id in self.tables:
            raise ValueError(f"table {schema.table_id} exists")
        n_groups = len(self.mns)
        per_bucket = CVTS_PER_BUCKET * schema.fill
        n_buckets = max(n_groups, -(-schema.expected_keys // max(1, int(per_bucket))))
        meta = TableMeta(schema, n_buckets, [])
        local_buckets = -(-n_buckets // n_groups)
        rec = record_size(schema.record_len)
        keys_per_group = -(-schema.expected_keys // n_groups) + 16
        heap_len = rec * (keys_per_group * (schema.n_cells + 1) + 64)
        for g in range(n_groups):
            nodes = self.group_nodes(g)
            idx_len = local_buckets * meta.bucket_bytes
            index_base = self._reserve(idx_len + heap_len)
            heap_base = index_base + (idx_len + 63) // 64 * 64
            for n in nodes:
                self.fabric.register_region(n, index_base, heap_base - index_base + heap_len)
            meta.groups.append(ReplicaGroup(g, nodes, index_base, heap_base, heap_len))
            self.heaps[(schema.table_id, g)] = RecordHeap(heap_base, heap_len, rec, self.quarantine_ns)
        self.tables[schema.table_id] = meta
        self._used[schema.table_id] = [0] * n_buckets
        return meta

    def meta(self, table_id: int) -> TableMeta:
        try:
            return self.tables[table_id]
        except KeyError:
            raise UnknownTable(table_id) from None

    def heap_for(self, table_id: int, key: int) -> RecordHeap:
        meta = self.meta(table_id)
        return self.heaps[(table_id, meta.bucket_of(key) % len(meta.groups))]

    def heap_for_address(self, table_id: int, addr: int) -> RecordHeap:
        meta = self.meta(table_id)
        return self.heaps[(table_id, meta.group_of_address(addr).index)]

    def load(self, table_id: int, key: int, payload: bytes, version: int) -> int:
        """Place a record at init time; returns the CVT address."""
        meta = self.meta(table_id)
        if len(payload) != meta.schema.record_len:
            raise ValueError("payload length does not match the table schema")
        b = meta.bucket_of(key)
        used = self._used[table_id]
        if used[b] >= CVTS_PER_BUCKET:
            raise BucketFull(f"bucket {b} of table {table_id} is full")
        slot = used[b]
        used[b] += 1
        group = meta.group_of_bucket(b)
        heap = self.heaps[(table_id, group.index)]
        rec_addr = heap.alloc()
        cells = [CvtCell() for _ in range(meta.n_cells)]
        cells[0] = CvtCell(1, True, rec_addr, version, 1)
        cvt = Cvt(CvtHeader(key, table_id, meta.schema.record_len), cells)
        addr = meta.cvt_address(b, slot)
        prim = group.primary
        self.fabric.poke(prim, addr, encode_cvt(cvt))
        self.fabric.poke(prim, rec_addr, stamp_record(payload, 1, meta.record_bytes))
        self._loaded.add((table_id, group.index))
        return addr

    def finish_load(self) -> None:
        """Copy loaded primary regions to their backups."""
        for table_id, g in sorted(self._loaded):
            group = self.tables[table_id].groups[g]
            prim = group.primary
            start = group.index_base
            length = group.heap_base + group.heap_len - start
            data = self.fabric.peek(prim, start, length)
            for n in group.nodes[1:]:
                self.fabric.poke(n, start, data)
        self._loaded.clear()

    def note_insert(self, table_id: int, key: int) -> None:
        meta = self.meta(table_id)
        b = meta.bucket_of(key)
        self._used[table_id][b] = min(CVTS_PER_BUCKET, self._used[table_id][b] + 1)

    # ---- audit helpers (no fabric cost)

    def peek_cvt(self, table_id: int, key: int, node: Optional[NodeId] = None) -> Optional[tuple[int, Cvt]]:
        meta = self.meta(table_id)
        b = meta.bucket_of(key)
        group = meta.group_of_bucket(b)
        node = node or group.primary
        buf = self.fabric.peek(node, meta.bucket_address(b), meta.bucket_bytes)
        cvts = parse_bucket(meta, buf)
        slot = find_in_bucket(meta, cvts, key)
        if slot is None:
            return None
        return meta.cvt_address(b, slot), cvts[slot]

    def peek_latest(self, table_id: int, key: int, node: Optional[NodeId] = None) -> Optional[tuple[int, bytes]]:
        """Latest visible (version, payload) straight from memory."""
        found = self.peek_cvt(table_id, key, node)
        if found is None:
            return None
        _, cvt = found
        best, _, _ = pick_version(cvt, INVISIBLE)
        if best is None:
            return None
        cell = cvt.cells[best]
        if cell.tombstone:
            return None
        meta = self.meta(table_id)
        node = node or meta.replicas(key)[0]
        rec = self.fabric.peek(node, cell.address, meta.record_bytes)
        return cell.version, record_payload(rec, meta.schema.record_len)

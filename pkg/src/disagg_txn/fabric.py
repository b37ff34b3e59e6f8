"""Simulated disaggregated fabric.

Memory nodes expose registered byte regions that compute nodes reach with
one-sided READ / WRITE / CAS.  Compute nodes talk to each other with
two-sided RPCs.  Every operation is charged against the NIC of the node that
serves it, so an atomic-heavy workload saturates a memory-node NIC long
before a read/write-heavy one does.

Time is simulated (float nanoseconds) and advanced by a small discrete-event
scheduler, :class:`Simulator`.  Protocol code runs as generator processes that
``yield`` the absolute time at which they want to be resumed, or an
:class:`Event` to wait on.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import random
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Generator, Iterable, Optional

CACHELINE = 64
_U64 = struct.Struct("<Q")


class FabricError(Exception):
    pass


class OutOfRegion(FabricError):
    """Address range is not inside a single registered region."""


class Misaligned(FabricError):
    pass


class RpcTimeout(FabricError):
    """No response after the retry budget was exhausted."""


class NoHandler(FabricError):
    pass


# --------------------------------------------------------------------------
# discrete-event scheduler


class Event:
    """One-shot event a process can wait on."""

    __slots__ = ("sim", "triggered", "value", "_waiters")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.triggered = False
        self.value = None
        self._waiters: list[Process] = []

    def succeed(self, value=None) -> None:
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for proc in waiters:
            self.sim._schedule_resume(self.sim.now, proc, value)


class Process:
    __slots__ = ("gen", "name", "alive", "done")

    def __init__(self, gen: Generator, name: str, done: Event):
        self.gen = gen
        self.name = name
        self.alive = True
        self.done = done

    def __repr__(self) -> str:
        return f"<Process {self.name} alive={self.alive}>"


class Store:
    """FIFO queue whose ``get`` returns an event."""

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.items: list = []
        self._getters: list[Event] = []

    def put(self, item) -> None:
        while self._getters:
            ev = self._getters.pop(0)
            if not ev.triggered:
                ev.succeed(item)
                return
        self.items.append(item)

    def get(self) -> Event:
        ev = Event(self.sim)
        if self.items:
            ev.succeed(self.items.pop(0))
        else:
            self._getters.append(ev)
        return ev

    def drain(self) -> list:
        items, self.items = self.items, []
        return items

    def __len__(self) -> int:
        return len(self.items)


class Simulator:
    """Seeded single-threaded discrete-event loop.

    Ties at equal timestamps are broken by insertion order, which makes every
    run with the same inputs replay identically.
    """

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()

    def event(self) -> Event:
        return Event(self)

    def schedule(self, at: float, callback: Callable, *args) -> None:
        heapq.heappush(self._heap, (max(at, self.now), next(self._seq), callback, args))

    def _schedule_resume(self, at: float, proc: Process, value) -> None:
        heapq.heappush(self._heap, (max(at, self.now), next(self._seq), self._resume, (proc, value)))

    def process(self, gen: Generator, name: str = "proc") -> Process:
        proc = Process(gen, name, Event(self))
        self._schedule_resume(self.now, proc, None)
        return proc

    def kill(self, proc: Process) -> None:
        if proc.alive:
            proc.alive = False
            proc.gen.close()

    def _resume(self, proc: Process, value) -> None:
        if not proc.alive:
            return
        try:
            y = proc.gen.send(value)
        except StopIteration as stop:
            proc.alive = False
            proc.done.succeed(stop.value)
            return
        if y is None:
            self._schedule_resume(self.now, proc, None)
        elif isinstance(y, Event):
            if y.triggered:
                self._schedule_resume(self.now, proc, y.value)
            else:
                y._waiters.append(proc)
        else:
            self._schedule_resume(y, proc, None)

    def step(self) -> bool:
        if not self._heap:
            return False
        at, _, callback, args = heapq.heappop(self._heap)
        self.now = at
        callback(*args)
        return True

    def run(self, until: Optional[float] = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                self.now = max(self.now, until)
                return
            self.step()
        if until is not None:
            self.now = max(self.now, until)

    def run_until(self, ev: Event, limit: Optional[float] = None) -> None:
        while not ev.triggered and self._heap:
            if limit is not None and self._heap[0][0] > limit:
                break
            self.step()

    def call(self, gen: Generator, name: str = "call"):
        """Run ``gen`` as a process until it finishes and return its value."""
        proc = self.process(gen, name)
        self.run_until(proc.done)
        if not proc.done.triggered:
            raise RuntimeError(f"process {name} did not finish (deadlock or killed)")
        return proc.done.value

    @property
    def pending(self) -> int:
        return len(self._heap)


# --------------------------------------------------------------------------
# nodes, regions, costs


class NodeKind(Enum):
    COMPUTE = "cn"
    MEMORY = "mn"


@dataclass(frozen=True)
class NodeId:
    kind: NodeKind
    index: int

    @classmethod
    def cn(cls, index: int) -> "NodeId":
        return cls(NodeKind.COMPUTE, index)

    @classmethod
    def mn(cls, index: int) -> "NodeId":
        return cls(NodeKind.MEMORY, index)

    @property
    def is_memory(self) -> bool:
        return self.kind is NodeKind.MEMORY

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"

    def sort_key(self) -> tuple[str, int]:
        return self.kind.value, self.index


@dataclass
class MemoryRegion:
    owner: NodeId
    base: int
    length: int
    backing: bytearray = field(repr=False)

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass
class NicCostModel:
    """Cost units are "one 8-byte WRITE"; capacity is units per simulated ms.

    The defaults encode 35 Mops for 8 B WRITE against 2.5 Mops for 8 B CAS on
    one NIC, i.e. a CAS costs 14 units.
    """

    write_cost: float = 1.0
    atomic_cost: float = 14.0
    rpc_cost: float = 2.0
    per_nic_capacity: float = 35_000.0
    surcharge_bytes: int = 256
    one_way_latency_ns: float = 1_000.0
    rpc_timeout_ns: float = 20_000.0
    rpc_retries: int = 3
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.atomic_cost <= self.write_cost:
            raise ValueError("atomic_cost must exceed write_cost")
        if self.per_nic_capacity <= 0:
            raise ValueError("per_nic_capacity must be positive")

    @property
    def unit_ns(self) -> float:
        return 1e6 / self.per_nic_capacity

    def op_cost(self, kind: "OpKind", nbytes: int = 0) -> float:
        if kind is OpKind.CAS:
            base = self.atomic_cost
        elif kind is OpKind.RPC:
            base = self.rpc_cost
        else:
            base = self.write_cost
        return base + nbytes // self.surcharge_bytes


@dataclass
class NicAccount:
    node: NodeId
    reads: int = 0
    writes: int = 0
    atomics: int = 0
    rpcs: int = 0
    busy_until: float = 0.0
    busy_time: float = 0.0

    @property
    def total(self) -> int:
        return self.reads + self.writes + self.atomics + self.rpcs

    def as_dict(self) -> dict:
        return {
            "node": str(self.node),
            "reads": self.reads,
            "writes": self.writes,
            "atomics": self.atomics,
            "rpcs": self.rpcs,
        }


class OpKind(Enum):
    READ = "read"
    WRITE = "write"
    CAS = "cas"
    RPC = "rpc"


@dataclass(slots=True)
class FabricOp:
    kind: OpKind
    target: NodeId
    addr: int = 0
    length: int = 0
    src: Optional[NodeId] = None
    issued_at: float = 0.0
    done_at: float = 0.0
    cost: float = 0.0
    result: object = None
    error: Optional[Exception] = None
    attempts: int = 1


def done_time(ops: Iterable[FabricOp], now: float) -> float:
    """Completion time of a batch of ops issued in parallel."""
    t = now
    for op in ops:
        if op.done_at > t:
            t = op.done_at
    return t


# --------------------------------------------------------------------------


class Fabric:
    """Shared network object.

    ``read``/``write``/``cas``/``rpc`` apply their effect immediately (the
    linearization point is the issue instant) and return a :class:`FabricOp`
    carrying the simulated completion time.  ``rdma_read`` and friends are
    thin value-returning wrappers for synchronous callers.
    """

    def __init__(
        self,
        cost: Optional[NicCostModel] = None,
        sim: Optional[Simulator] = None,
        seed: int = 0,
        tear_writes: bool = True,
    ):
        self.cost = cost or NicCostModel()
        self.sim = sim or Simulator()
        self.tear_writes = tear_writes
        self._rng = random.Random(seed)
        self._bases: dict[NodeId, list[int]] = {}
        self._regions: dict[NodeId, list[MemoryRegion]] = {}
        self._nics: dict[NodeId, NicAccount] = {}
        self._handlers: dict[tuple[NodeId, int], Callable[[bytes], bytes]] = {}
        self._down: set[NodeId] = set()
        self._lock = threading.RLock()
        self.ops_issued = 0

    # ---- setup

    def now(self) -> float:
        return self.sim.now

    def nic(self, node: NodeId) -> NicAccount:
        acct = self._nics.get(node)
        if acct is None:
            acct = self._nics[node] = NicAccount(node)
        return acct

    @property
    def nics(self) -> dict[NodeId, NicAccount]:
        return self._nics

    def register_region(self, owner: NodeId, base: int, length: int) -> MemoryRegion:
        if not owner.is_memory:
            raise ValueError("regions live on memory nodes")
        with self._lock:
            bases = self._bases.setdefault(owner, [])
            regions = self._regions.setdefault(owner, [])
            i = bisect.bisect_left(bases, base)
            if i > 0 and regions[i - 1].end > base:
                raise ValueError("overlapping region")
            if i < len(bases) and base + length > bases[i]:
                raise ValueError("overlapping region")
            region = MemoryRegion(owner, base, length, bytearray(length))
            bases.insert(i, base)
            regions.insert(i, region)
            self.nic(owner)
            return region

    def regions(self, owner: NodeId) -> list[MemoryRegion]:
        return list(self._regions.get(owner, ()))

    def register_rpc(self, node: NodeId, channel: int, handler: Callable[[bytes], bytes]) -> None:
        self._handlers[(node, channel)] = handler
        self.nic(node)

    def unregister_rpc(self, node: NodeId) -> None:
        for k in [k for k in self._handlers if k[0] == node]:
            del self._handlers[k]

    def set_down(self, node: NodeId, down: bool = True) -> None:
        if down:
            self._down.add(node)
        else:
            self._down.discard(node)

    def is_down(self, node: NodeId) -> bool:
        return node in self._down

    def _locate(self, target: NodeId, addr: int, length: int) -> tuple[MemoryRegion, int]:
        bases = self._bases.get(target)
        if not bases:
            raise OutOfRegion(f"{target} has no registered memory")
        i = bisect.bisect_right(bases, addr) - 1
        if i < 0:
            raise OutOfRegion(f"{addr:#x} below first region of {target}")
        region = self._regions[target][i]
        if addr + length > region.end:
            raise OutOfRegion(f"[{addr:#x}, {addr + length:#x}) escapes region at {region.base:#x}")
        return region, addr - region.base

    def _charge(self, node: NodeId, units: float, arrive: float) -> float:
        acct = self.nic(node)
        start = arrive if arrive > acct.busy_until else acct.busy_until
        service = units * self.cost.unit_ns
        acct.busy_until = start + service
        acct.busy_time += service
        return acct.busy_until

    # ---- one-sided verbs

    def read(self, target: NodeId, addr: int, length: int, src: Optional[NodeId] = None) -> FabricOp:
        with self._lock:
            region, off = self._locate(target, addr, length)
            now = self.sim.now
            lat = self.cost.one_way_latency_ns
            units = self.cost.op_cost(OpKind.READ, length)
            end = self._charge(target, units, now + lat)
            self._nics[target].reads += 1
            self.ops_issued += 1
            return FabricOp(OpKind.READ, target, addr, length, src, now, end + lat, units,
                            bytes(region.backing[off:off + length]))

    def write(self, target: NodeId, addr: int, payload: bytes, src: Optional[NodeId] = None) -> FabricOp:
        with self._lock:
            length = len(payload)
            region, off = self._locate(target, addr, length)
            now = self.sim.now
            lat = self.cost.one_way_latency_ns
            units = self.cost.op_cost(OpKind.WRITE, length)
            end = self._charge(target, units, now + lat)
            self._nics[target].writes += 1
            self.ops_issued += 1
            done = end + lat
            if length:
                self._apply_write(region, off, addr, bytes(payload), now, done)
            return FabricOp(OpKind.WRITE, target, addr, length, src, now, done, units, None)

    def _apply_write(self, region: MemoryRegion, off: int, addr: int, payload: bytes,
                     now: float, done: float) -> None:
        length = len(payload)
        first_line = addr // CACHELINE
        last_line = (addr + length - 1) // CACHELINE
        if not self.tear_writes or first_line == last_line:
            region.backing[off:off + length] = payload
            return
        # Lines land one by one between issue and completion.
        pieces = []
        pos = 0
        a = addr
        while pos < length:
            n = min(CACHELINE - (a % CACHELINE), length - pos)
            pieces.append((pos, n))
            pos += n
            a += n
        k = len(pieces)
        p0, n0 = pieces[0]
        region.backing[off + p0:off + p0 + n0] = payload[p0:p0 + n0]
        span = max(done - now, 0.0)
        for i in range(1, k):
            p, n = pieces[i]
            self.sim.schedule(now + span * i / k, _store, region.backing, off + p, payload[p:p + n])

    def cas(self, target: NodeId, addr: int, compare: int, swap: int, src: Optional[NodeId] = None) -> FabricOp:
        if addr % 8:
            raise Misaligned(f"CAS address {addr:#x} not 8-byte aligned")
        with self._lock:
            region, off = self._locate(target, addr, 8)
            now = self.sim.now
            lat = self.cost.one_way_latency_ns
            units = self.cost.op_cost(OpKind.CAS, 8)
            end = self._charge(target, units, now + lat)
            self._nics[target].atomics += 1
            self.ops_issued += 1
            (old,) = _U64.unpack_from(region.backing, off)
            if old == compare:
                _U64.pack_into(region.backing, off, swap & 0xFFFFFFFFFFFFFFFF)
            return FabricOp(OpKind.CAS, target, addr, 8, src, now, end + lat, units, old)

    # ---- two-sided

    def rpc(self, target: NodeId, payload: bytes, src: Optional[NodeId] = None, channel: int = 0) -> FabricOp:
        """Send ``payload`` to the handler on ``target``.

        Each attempt may lose the request or the response with
        ``drop_probability``; a lost response means the handler ran and the
        retry delivers a duplicate.  After ``rpc_retries`` retries with a
        doubling timeout the op carries :class:`RpcTimeout` in ``error``.
        """
        with self._lock:
            cost = self.cost
            handler = self._handlers.get((target, channel))
            if handler is None and target not in self._down:
                raise NoHandler(f"no RPC handler on {target} channel {channel}")
            now = self.sim.now
            t = now
            lat = cost.one_way_latency_ns
            units = cost.op_cost(OpKind.RPC, len(payload))
            timeout = cost.rpc_timeout_ns
            p = cost.drop_probability
            attempts = 0
            for _ in range(cost.rpc_retries + 1):
                attempts += 1
                self.ops_issued += 1
                self.nic(target).rpcs += 1
                sent = self._charge(src, units, t) if src is not None else t
                if target in self._down or (p > 0 and self._rng.random() < p):
                    t += timeout
                    timeout *= 2
                    continue
                response = handler(payload)
                end = self._charge(target, units + len(response) // cost.surcharge_bytes, sent + lat)
                if p > 0 and self._rng.random() < p:
                    t += timeout
                    timeout *= 2
                    continue
                return FabricOp(OpKind.RPC, target, 0, len(payload), src, now, end + lat, units,
                                response, None, attempts)
            return FabricOp(OpKind.RPC, target, 0, len(payload), src, now, t, units, None,
                            RpcTimeout(f"rpc to {target} timed out after {attempts} attempts"), attempts)

    # ---- value-returning wrappers

    def rdma_read(self, target: NodeId, addr: int, length: int, src: Optional[NodeId] = None) -> bytes:
        return self.read(target, addr, length, src).result

    def rdma_write(self, target: NodeId, addr: int, payload: bytes, src: Optional[NodeId] = None) -> bool:
        self.write(target, addr, payload, src)
        return True

    def rdma_cas(self, target: NodeId, addr: int, compare: int, swap: int, src: Optional[NodeId] = None) -> int:
        return self.cas(target, addr, compare, swap, src).result

    def rpc_call(self, target: NodeId, payload: bytes, src: Optional[NodeId] = None, channel: int = 0) -> bytes:
        op = self.rpc(target, payload, src, channel)
        if op.error is not None:
            raise op.error
        return op.result

    # ---- init-phase access (no cost, no counters)

    def poke(self, target: NodeId, addr: int, payload: bytes) -> None:
        region, off = self._locate(target, addr, len(payload))
        region.backing[off:off + len(payload)] = payload

    def peek(self, target: NodeId, addr: int, length: int) -> bytes:
        region, off = self._locate(target, addr, length)
        return bytes(region.backing[off:off + length])

    def counters(self) -> dict[str, dict]:
        return {str(n): self._nics[n].as_dict() for n in sorted(self._nics, key=NodeId.sort_key)}


def _store(buf: bytearray, off: int, data: bytes) -> None:
    buf[off:off + len(data)] = data

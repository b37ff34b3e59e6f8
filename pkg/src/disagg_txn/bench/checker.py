"""Offline history checker: serializability, snapshot isolation, conservation."""

from __future__ import annotations

import graphlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from ..txn import IsolationLevel
from .history import History, HistoryRecord

T0 = 0  # the loader pseudo-transaction


@dataclass
class Verdict:
    ok: bool
    violations: list[str] = field(default_factory=list)
    checked: int = 0

    def __bool__(self) -> bool:
        return self.ok


def _version_index(committed: list[HistoryRecord], load_version: int):
    """Per key: sorted [(version, txn_id, value)] including the load version."""
    versions: dict = defaultdict(list)
    for r in committed:
        for w in r.writes:
            versions[(w.table, w.key)].append((w.version, r.txn_id, w.value))
    for k in versions:
        versions[k].sort()
    return versions


def _dup_versions(versions) -> list[str]:
    out = []
    for k, vs in versions.items():
        for a, b in zip(vs, vs[1:]):
            if a[0] == b[0]:
                out.append(f"two writers share version {a[0]} of {k}: txn {a[1]} and {b[1]}")
    return out


def dependency_graph(h: History) -> tuple[dict[int, set[int]], list[str]]:
    """Direct serialization graph (WW, WR, RW edges) over committed transactions."""
    committed = h.committed
    versions = _version_index(committed, h.load_version)
    problems = _dup_versions(versions)
    succ: dict[int, set[int]] = defaultdict(set)
    for r in committed:
        succ[r.txn_id]
    for k, vs in versions.items():
        prev = T0
        for v, txn, _ in vs:
            if prev != txn:
                succ[prev].add(txn)  # WW
            prev = txn
    for r in committed:
        for rd in r.reads:
            vs = versions.get((rd.table, rd.key), [])
            if rd.version == h.load_version:
                writer, nxt = T0, (vs[0][1] if vs else None)
            else:
                i = _find(vs, rd.version)
                if i is None:
                    problems.append(f"txn {r.txn_id} read uncommitted or unknown version "
                                    f"{rd.version} of {(rd.table, rd.key)}")
                    continue
                writer = vs[i][1]
                if vs[i][2] != rd.value:
                    problems.append(f"txn {r.txn_id} read value {rd.value} of version {rd.version} "
                                    f"but the writer stored {vs[i][2]}")
                nxt = vs[i + 1][1] if i + 1 < len(vs) else None
            if writer != r.txn_id:
                succ[writer].add(r.txn_id)  # WR
            if nxt is not None and nxt != r.txn_id:
                succ[r.txn_id].add(nxt)  # RW
    return succ, problems


def _find(vs, version) -> Optional[int]:
    lo, hi = 0, len(vs)
    while lo < hi:
        mid = (lo + hi) // 2
        if vs[mid][0] < version:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(vs) and vs[lo][0] == version:
        return lo
    return None


def check_sr(h: History) -> Verdict:
    succ, problems = dependency_graph(h)
    ts = graphlib.TopologicalSorter({n: set() for n in succ})
    for a, bs in succ.items():
        for b in bs:
            ts.add(b, a)
    try:
        ts.prepare()
    except graphlib.CycleError as e:
        cycle = e.args[1]
        problems.append("dependency cycle: " + " -> ".join(str(t) for t in cycle))
    return Verdict(not problems, problems, len(h.committed))


def check_si(h: History) -> Verdict:
    committed = h.committed
    versions = _version_index(committed, h.load_version)
    problems = _dup_versions(versions)
    by_txn = {r.txn_id: r for r in committed}
    # no lost updates: writers of one key never have overlapping windows
    for k, vs in versions.items():
        for (v1, t1, _), (v2, t2, _) in zip(vs, vs[1:]):
            if t1 == t2:
                continue
            if by_txn[t2].t_start < v1:
                problems.append(f"lost update on {k}: txn {t2} started at {by_txn[t2].t_start} "
                                f"before txn {t1} committed at {v1}")
    # snapshot reads
    for r in committed:
        for rd in r.reads:
            vs = versions.get((rd.table, rd.key), [])
            expect = h.load_version
            expect_value = None
            for v, txn, val in vs:
                if v < r.t_start and txn != r.txn_id:
                    expect, expect_value = v, val
                elif v >= r.t_start:
                    break
            if rd.version != expect:
                problems.append(f"txn {r.txn_id} read version {rd.version} of {(rd.table, rd.key)}, "
                                f"snapshot at {r.t_start} holds {expect}")
            elif expect_value is not None and rd.value != expect_value:
                problems.append(f"txn {r.txn_id} read a value its snapshot does not hold")
    return Verdict(not problems, problems, len(committed))


def check_conservation(h: History, initial_total: int, final_total: int) -> Verdict:
    deltas = sum(r.delta for r in h.committed)
    if final_total - initial_total == deltas:
        return Verdict(True, [], len(h.committed))
    return Verdict(False, [f"balance drift: final-initial={final_total - initial_total}, "
                           f"committed deltas={deltas}"], len(h.committed))


def check_history(h: History, isolation: Optional[IsolationLevel] = None,
                  initial_total: Optional[int] = None, final_total: Optional[int] = None) -> Verdict:
    iso = isolation or h.isolation
    if isinstance(iso, str):
        iso = IsolationLevel(iso)
    v = check_sr(h) if iso is IsolationLevel.SR else check_si(h)
    if initial_total is not None and final_total is not None:
        c = check_conservation(h, initial_total, final_total)
        v = Verdict(v.ok and c.ok, v.violations + c.violations, v.checked)
    return v

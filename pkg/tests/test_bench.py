import json
import random

import pytest

from disagg_txn.bench import (
    BenchConfig,
    ConfigError,
    History,
    MalformedHistory,
    check_history,
    load_config,
    load_history,
    run_benchmark,
    save_history,
)
from disagg_txn.bench.checker import check_si, check_sr
from disagg_txn.bench.cli import main
from disagg_txn.bench.config import parse_crash
from disagg_txn.bench.history import (
    OP_READ,
    OP_WRITE,
    HistOp,
    HistoryRecord,
    dump_text,
    history_bytes,
    parse_history,
)
from disagg_txn.bench.workloads import CHECKING, SAVINGS, SmallBankWorkload, ZipfGenerator
from disagg_txn.txn import AbortReason, IsolationLevel

LOAD = 1
X, Y = (1, 0x1001), (1, 0x2002)


def rec(txn, t_start, t_commit, reads=(), writes=(), seq=None, committed=True, delta=0):
    ops = [HistOp(OP_READ, k[0], k[1], v, val) for k, v, val in reads]
    ops += [HistOp(OP_WRITE, k[0], k[1], t_commit, val) for k, val in writes]
    return HistoryRecord(seq or txn, txn, "t", committed, None if committed else AbortReason.USER,
                         t_start, t_commit if committed else 0, delta, ops)


def hist(*records, iso=IsolationLevel.SR):
    return History(iso, LOAD, list(records))


# ---- checker soundness


def test_serial_history_passes_both():
    h = hist(
        rec(1, 10, 20, reads=[(X, LOAD, 0)], writes=[(X, 5)]),
        rec(2, 30, 40, reads=[(X, 20, 5), (Y, LOAD, 0)], writes=[(Y, 5)]),
        rec(3, 50, 60, reads=[(X, 20, 5), (Y, 40, 5)]),
    )
    assert check_sr(h) and check_si(h)


def test_write_skew_passes_si_fails_sr():
    # both read x and y from the snapshot, each writes the other key
    h = hist(
        rec(1, 10, 30, reads=[(X, LOAD, 0), (Y, LOAD, 0)], writes=[(X, -1)]),
        rec(2, 11, 31, reads=[(X, LOAD, 0), (Y, LOAD, 0)], writes=[(Y, -1)]),
    )
    assert check_si(h).ok
    v = check_sr(h)
    assert not v.ok and "cycle" in v.violations[0]


def test_lost_update_rejected():
    h = hist(
        rec(1, 10, 30, reads=[(X, LOAD, 0)], writes=[(X, 1)]),
        rec(2, 11, 31, reads=[(X, LOAD, 0)], writes=[(X, 1)]),
    )
    assert not check_si(h).ok
    assert not check_sr(h).ok


def test_dirty_read_rejected():
    h = hist(
        rec(1, 10, 0, writes=[(X, 9)], committed=False),
        rec(2, 20, 30, reads=[(X, 15, 9)], writes=[(Y, 9)]),
    )
    assert not check_sr(h).ok
    assert not check_si(h).ok


def test_wrong_value_for_version_rejected():
    h = hist(
        rec(1, 10, 20, writes=[(X, 5)]),
        rec(2, 30, 40, reads=[(X, 20, 6)]),
    )
    assert not check_sr(h).ok and not check_si(h).ok


def test_stale_snapshot_read_rejected_by_si():
    h = hist(
        rec(1, 10, 20, writes=[(X, 5)]),
        rec(2, 30, 40, reads=[(X, LOAD, 0)], writes=[(Y, 1)]),
    )
    assert not check_si(h).ok


def test_conservation_check():
    h = hist(rec(1, 10, 20, writes=[(X, 5)], delta=5), rec(2, 30, 0, committed=False, delta=0))
    assert check_history(h, initial_total=100, final_total=105).ok
    v = check_history(h, initial_total=100, final_total=104)
    assert not v.ok and "drift" in v.violations[0]


# ---- history file


def _sample():
    return hist(
        rec(1, 10, 20, reads=[(X, LOAD, 0)], writes=[(X, -7)], delta=3),
        rec(2, 11, 0, committed=False),
        rec(3, 30, 40, reads=[(X, 20, -7)]),
        iso=IsolationLevel.SI,
    )


def test_history_round_trip(tmp_path):
    h = _sample()
    p = tmp_path / "h.bin"
    save_history(h, str(p))
    back = load_history(str(p))
    assert back == h
    assert history_bytes(back) == p.read_bytes()
    lines = list(dump_text(back))
    assert lines[0].startswith("# isolation=si") and "abort:user" in lines[2]


def test_malformed_histories():
    good = history_bytes(_sample())
    with pytest.raises(MalformedHistory):
        parse_history(b"XXXX" + good[4:])
    with pytest.raises(MalformedHistory):
        parse_history(good[:-3])
    with pytest.raises(MalformedHistory):
        parse_history(good[:5])
    bad_version = bytearray(good)
    bad_version[4] = 9
    with pytest.raises(MalformedHistory):
        parse_history(bytes(bad_version))
    h = _sample()
    h.records[2].seq = 1
    with pytest.raises(MalformedHistory):
        parse_history(history_bytes(h))


# ---- config


def test_config_field_diagnostics():
    with pytest.raises(ConfigError) as e:
        BenchConfig(workload="tpcc", rw_ratio=1.5, zipf=-1, versions=1).validate()
    assert set(e.value.errors) == {"workload", "rw_ratio", "zipf", "versions"}
    with pytest.raises(ConfigError) as e:
        BenchConfig(mode="mn-lock", crash=[(1, 5.0)]).validate()
    assert "crash" in e.value.errors


def test_parse_crash():
    assert parse_crash("cn:1@20, cn:2@20.5") == [(1, 20.0), (2, 20.5)]
    with pytest.raises(ConfigError):
        parse_crash("mn:1@3")


def test_ini_config(tmp_path):
    p = tmp_path / "b.ini"
    p.write_text("[bench]\nworkload = smallbank\nrw-ratio = 0.85\nreshard = on\n"
                 "duration = 5\ncrash = cn:1@2\ntxns = none\n")
    cfg = load_config(str(p)).validate()
    assert (cfg.workload, cfg.rw_ratio, cfg.reshard, cfg.duration_ms, cfg.txns) == \
        ("smallbank", 0.85, True, 5.0, None)
    assert cfg.crash == [(1, 2.0)]
    p.write_text("[bench]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(str(p))


# ---- workloads


def test_zipf_skew_and_range():
    z = ZipfGenerator(1000, 0.99, seed=1)
    rng = random.Random(2)
    draws = [z.rank(rng) for _ in range(20000)]
    assert 0 <= min(draws) and max(draws) < 1000
    top = sum(1 for d in draws if d < 10) / len(draws)
    assert top > 0.2  # heavy head
    u = ZipfGenerator(1000, 0.0, seed=1)
    assert sum(1 for _ in range(20000) if u.rank(rng) < 10) / 20000 < 0.03


def test_smallbank_mix_is_85_percent_read_write():
    wl = SmallBankWorkload(n_accounts=1000, seed=3)
    rng = random.Random(4)
    specs = [wl.next_txn(rng) for _ in range(20000)]
    rw = sum(1 for s in specs if not s.descriptor.read_only) / len(specs)
    assert abs(rw - 0.85) < 0.01


# ---- runs


def _cfg(**kw):
    base = dict(txns=1500, scale=2000, lock_slots=1 << 14, coordinators=4)
    base.update(kw)
    return BenchConfig(**base)


def test_read_only_kvs_has_no_aborts_or_atomics():
    m = run_benchmark(_cfg(rw_ratio=0.0, zipf=0.0)).metrics
    assert m.aborted == 0 and m.mn_atomics == 0 and m.committed == m.logical_txns == 1500


def test_smallbank_sr_conserves_balance_at_64_concurrent():
    r = run_benchmark(_cfg(workload="smallbank", cns=4, coordinators=16, txns=3000))
    assert r.verdict.ok, r.verdict.violations[:3]
    assert r.cluster is not None
    assert r.workload.total_balance(r.cluster) - r.workload.initial_total() == \
        sum(x.delta for x in r.history.committed)


def test_metrics_conservation_and_nic_accounting():
    r = run_benchmark(_cfg(workload="smallbank", mode="mn-lock", zipf=0.99, scale=300))
    m = r.metrics
    assert m.attempted == m.committed + m.aborted
    assert sum(m.abort_reasons.values()) == m.aborted
    f = r.cluster.fabric
    assert sum(a.total for a in f.nics.values()) == f.ops_issued
    assert m.mn_atomics == m.lock_cas_acquire + m.lock_cas_release
    # conflicts happened and the partially acquired locks were given back
    assert m.abort_reasons.get("lock_conflict", 0) > 0 and m.lock_cas_release > 0


def test_mn_lock_write_txns_use_atomics():
    m = run_benchmark(_cfg(mode="mn-lock", rw_ratio=1.0, txns=200)).metrics
    assert m.mn_atomics >= 2 * m.committed


def test_modes_reach_same_state_with_one_client():
    states = []
    for mode in ("lotus", "mn-lock"):
        r = run_benchmark(_cfg(workload="smallbank", mode=mode, cns=1, coordinators=1, txns=400,
                               scale=200))
        wl = r.workload
        states.append([r.cluster.pool.peek_latest(t, wl.key(t, a))[1]
                       for a in range(wl.n_accounts) for t in (SAVINGS, CHECKING)])
    assert states[0] == states[1]


# ---- CLI


def test_cli_json_and_history(tmp_path, capsys):
    hp = tmp_path / "h.bin"
    rc = main(["--workload", "kvs", "--txns", "300", "--scale", "500", "--coordinators", "2",
               "--lock-slots", "4096", "--out", "json", "--history", str(hp)])
    assert rc == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    summary = next(x for x in lines if x["record"] == "summary")
    assert summary["committed"] >= 300
    assert main(["--check-history", str(hp)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["--dump-history", str(hp)]) == 0
    assert capsys.readouterr().out.startswith("# isolation=sr")


def test_cli_errors(tmp_path, capsys):
    assert main(["--mode", "mn-lock", "--crash", "cn:1@5"]) == 2
    assert "crash" in capsys.readouterr().err
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    assert main(["--check-history", str(bad)]) == 2


def test_cli_reports_violation_exit_code(tmp_path, capsys):
    p = tmp_path / "skew.bin"
    save_history(hist(
        rec(1, 10, 30, reads=[(X, LOAD, 0), (Y, LOAD, 0)], writes=[(X, -1)]),
        rec(2, 11, 31, reads=[(X, LOAD, 0), (Y, LOAD, 0)], writes=[(Y, -1)]),
    ), str(p))
    assert main(["--check-history", str(p)]) == 1
    assert main(["--check-history", str(p), "--isolation", "si"]) == 0

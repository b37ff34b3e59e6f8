"""Command-line entry point for the benchmark harness.

Precedence: built-in defaults, then ``--config`` file, then explicit flags.
Exit status is 0 on success, 1 on any checker violation, 2 on bad config.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Optional, Sequence

from ..txn import IsolationLevel
from .checker import check_history
from .config import BenchConfig, ConfigError, load_config, parse_crash
from .driver import format_metrics, run_benchmark
from .history import MalformedHistory, dump_text, load_history


def _on_off(s: str) -> bool:
    low = s.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on|off")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="disagg-txn-bench",
        description="Simulated transactions on disaggregated memory: compute-side locks vs memory-side CAS locks.",
    )
    p.add_argument("--config", help="INI file with a [bench] section; keys mirror the flags")
    p.add_argument("--workload", choices=["kvs", "smallbank"])
    p.add_argument("--mode", choices=["lotus", "mn-lock"],
                   help="lotus: locks on compute nodes; mn-lock: CAS lock words at memory nodes")
    p.add_argument("--cns", type=int)
    p.add_argument("--mns", type=int)
    p.add_argument("--coordinators", type=int, help="coordinators (concurrent clients) per compute node")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--txns", type=int, help="logical transaction budget")
    g.add_argument("--duration", type=float, dest="duration_ms", help="simulated run length in ms")
    p.add_argument("--rw-ratio", type=float)
    p.add_argument("--zipf", type=float, help="Zipf theta; 0 means uniform")
    p.add_argument("--isolation", choices=["sr", "si"])
    p.add_argument("--versions", type=int, help="version cells per record")
    p.add_argument("--cache-entries", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--crash", help='crash schedule, e.g. "cn:1@20,cn:2@20" (ms)')
    p.add_argument("--reshard", type=_on_off, metavar="{on,off}")
    p.add_argument("--history", help="write the binary history file here")
    p.add_argument("--out", choices=["json", "csv", "table"])
    p.add_argument("--scale", type=int, help="keys (kvs) or accounts (smallbank)")
    p.add_argument("--lock-slots", type=int)
    p.add_argument("--hotspot-shard", type=int, help="send all read-write traffic to one shard")
    p.add_argument("--shadow-check", type=_on_off, metavar="{on,off}",
                   help="compare every cache hit against memory")
    p.add_argument("--no-check", dest="check", action="store_false", default=None,
                   help="skip the offline history checker")
    p.add_argument("--check-history", metavar="PATH",
                   help="only check an existing history file and exit")
    p.add_argument("--dump-history", metavar="PATH",
                   help="only print an existing history file as text and exit")
    return p


def resolve_config(args: argparse.Namespace) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    names = {f.name for f in dataclasses.fields(BenchConfig)}
    for name, val in vars(args).items():
        if name not in names or val is None:
            continue
        if name == "crash":
            val = parse_crash(val)
        setattr(cfg, name, val)
    if args.duration_ms is not None:
        cfg.txns = None
    elif args.txns is not None:
        cfg.duration_ms = None
    return cfg.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.dump_history or args.check_history:
        path = args.dump_history or args.check_history
        try:
            h = load_history(path)
        except (OSError, MalformedHistory) as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            return 2
        if args.dump_history:
            for line in dump_text(h):
                print(line)
            return 0
        iso = IsolationLevel(args.isolation) if args.isolation else None
        v = check_history(h, iso)
        for msg in v.violations:
            print(f"VIOLATION {msg}")
        print(f"{'PASS' if v.ok else 'FAIL'} checked={v.checked} violations={len(v.violations)}")
        return 0 if v.ok else 1
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        for field, msg in e.errors.items():
            print(f"config error: {field}: {msg}", file=sys.stderr)
        return 2
    result = run_benchmark(cfg)
    print(format_metrics(result.metrics, cfg.out))
    if result.verdict is not None and not result.verdict.ok:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

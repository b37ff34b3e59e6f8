# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Quickstart
#
# Build a simulated cluster, run SmallBank in both locking modes and check
# the resulting history. Everything runs in simulated time, so results are
# the same on every machine for a given seed.

from disagg_txn.bench import BenchConfig, run_benchmark

# +
results = {}
for mode in ("lotus", "mn-lock"):
    cfg = BenchConfig(workload="smallbank", mode=mode, txns=3000, scale=5000,
                      lock_slots=1 << 14, coordinators=8)
    results[mode] = run_benchmark(cfg)

for mode, r in results.items():
    m = r.metrics
    print(f"{mode:8s} tput={m.throughput:,.0f}/s p50={m.p50_us:.1f}us "
          f"aborts={m.aborted} mn_atomics={m.mn_atomics} checker={'ok' if r.verdict.ok else 'FAIL'}")
# -

# Lotus keeps locks in compute-node tables, so the memory-node NICs see no
# atomic verbs at all. The mn-lock baseline pays one CAS per acquire and one
# per release.

ratio = results["lotus"].metrics.throughput / results["mn-lock"].metrics.throughput
print(f"throughput ratio lotus / mn-lock: {ratio:.2f}")

# The same run is available from the command line:
#
# ```
# disagg-txn-bench --workload smallbank --mode lotus --txns 3000 --scale 5000 --out table
# ```

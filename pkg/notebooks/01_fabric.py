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

# # Fabric: one-sided verbs, RPCs and the NIC cost model
#
# The fabric models remote memory as registered regions on memory nodes.
# Reads, writes and CAS are one-sided. Each operation charges cost units to
# the target NIC, and a busy NIC queues later operations.

import struct

from disagg_txn.fabric import Fabric, NicCostModel, NodeId, OutOfRegion

MN, CN0, CN1 = NodeId.mn(0), NodeId.cn(0), NodeId.cn(1)
U64 = struct.Struct("<Q")

fabric = Fabric(NicCostModel())
fabric.register_region(MN, 0x1000, 4096)

# ## Read, write and CAS

# +
fabric.rdma_write(MN, 0x1000, U64.pack(41), src=CN0)
print("read back:", U64.unpack(fabric.rdma_read(MN, 0x1000, 8, src=CN0))[0])

old = fabric.rdma_cas(MN, 0x1008, 0, 7, src=CN0)  # succeeds, word was 0
again = fabric.rdma_cas(MN, 0x1008, 0, 9, src=CN1)  # fails, word is now 7
print("cas results:", old, again, "word:", U64.unpack(fabric.peek(MN, 0x1008, 8))[0])
# -

try:
    fabric.rdma_read(MN, 0x0, 8)
except OutOfRegion as e:
    print("outside any region:", e)

# ## Cost accounting
#
# A CAS costs 14 write units by default, which mirrors the gap between NIC
# write and atomic throughput. The per-NIC counters separate the verbs.

print(fabric.nic(MN).as_dict())

# Issuing many operations at once shows queueing: completion times grow with
# the total cost units already charged to the NIC.

# +
def finish_time(kind, n=100):
    f = Fabric(NicCostModel())
    f.register_region(MN, 0x1000, 4096)
    ops = [f.write(MN, 0x1000, b"x" * 8) if kind == "write" else f.cas(MN, 0x1000, 0, 0)
           for _ in range(n)]
    return max(op.done_at for op in ops)

print(f"100 writes done at {finish_time('write') / 1e3:.1f} us")
print(f"100 CAS done at    {finish_time('cas') / 1e3:.1f} us")
# -

# ## RPCs between compute nodes

fabric.register_rpc(CN1, 0, lambda payload: payload.upper())
print(fabric.rpc_call(CN1, b"lock please", src=CN0))

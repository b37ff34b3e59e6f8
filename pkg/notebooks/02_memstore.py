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

# # Memory store: CVTs, cells and consistency versions
#
# Each key has a compact version table (CVT) in a hash bucket on the memory
# pool. A CVT holds a few cells, and each cell points at one version of the
# record. Records and cells carry a consistency version so readers can tell
# a torn write from a complete one.

from disagg_txn.fabric import Fabric
from disagg_txn.memstore import (
    INVISIBLE,
    CvtCell,
    MemoryPool,
    TableSchema,
    cv_check,
    cv_stamp,
    decode_cell,
    encode_cell,
    pick_version,
)

fabric = Fabric()
pool = MemoryPool(fabric, n_mns=3, replicas=3)
meta = pool.create_table(TableSchema(1, "accounts", record_len=16, expected_keys=100, n_cells=3))
keys = [(i << 12) | i for i in range(10)]  # shard i in the low bits
for i, key in enumerate(keys):
    pool.load(1, key, i.to_bytes(16, "little"), version=1)
pool.finish_load()

# ## Where a key lives

addr, cvt = pool.peek_cvt(1, keys[4])
print("bucket", meta.bucket_of(keys[4]), "replicas", [str(n) for n in meta.replicas(keys[4])])
print(cvt.header)
for cell in cvt.cells:
    print(cell)

# ## Choosing a version
#
# A reader with start timestamp t picks the largest visible version below t.
# An INVISIBLE cell marks a writer in flight and is never chosen.

# +
cvt.cells[1] = CvtCell(head_cv=1, valid=True, address=0x9000, version=50, tail_cv=1)
cvt.cells[2] = CvtCell(head_cv=2, valid=True, address=0x9100, version=INVISIBLE, tail_cv=2)

for t in (10, 60):
    idx, newer, pending = pick_version(cvt, t)
    print(f"t_start={t}: cell {idx}, newer exists={newer}, writer pending={pending}")
# -

# ## Torn writes
#
# The cell stores the CV at both ends, and the record is stamped with the
# cell's CV. A mismatch on either side means the bytes were caught mid-write.

# +
record, cell = cv_stamp(b"balance=100".ljust(16, b"\0"), cvt.cells[1], new_cv=3)
print("record matches cell:", cv_check(record, cell))
cell.tail_cv = 4
print("cell torn after decode:", decode_cell(encode_cell(cell)).torn)

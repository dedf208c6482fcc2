"""
Continuous Data Protection index, as an ADO plugin.

Each volume is a key whose value holds a VolumeRoot. The root anchors a
doubly-linked list of time quanta (oldest = tail, newest = head). A quantum
is a header plus a contiguous array of 64-byte mapping records; the newest
quantum is OPEN and takes appends, older ones are SEALED and then
SUMMARIZED once a secondary worker has materialized the block map as of
their last record.

Record append is crash-consistent without a transaction:
    1. write the record with valid=0, persist
    2. atomically set valid=1, persist
    3. atomically bump the quantum count, persist
Recovery repairs the count from the valid words. Sealing, summarizing and
trimming are undo-logged transactions. All quantum and summary memory comes
from a plugin-local heap carved out of pool memory in large chunks.
"""

import bisect
import hashlib
import logging
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

from active_store import config
from active_store.ado import AdoFlags, AdoPlugin, register_plugin
from active_store.errors import (
    CdpError,
    HistoryTrimmed,
    NotFound,
    OrderingViolation,
    OutOfMemory,
    ParameterError,
    PluginError,
    VolumeNotFound,
)
from active_store.pmem import align_up

logger = logging.getLogger(__name__)

# =============================================================================
# LAYOUTS
# =============================================================================

RECORD_DTYPE = np.dtype([
    ("virtual_offset", "<u8"),
    ("length", "<u4"),
    ("reserved", "<u4"),
    ("managed_offset", "<u8"),
    ("timestamp", "<u8"),
    ("sequence", "<u8"),
    ("valid", "<u8"),
    ("padding", "V16"),
])
RECORD_SIZE = 64
RECORD = struct.Struct("<QIIQQQQ16x")
TIMESTAMP_FIELD = 24
VALID_FIELD = 40

SUMMARY_DTYPE = np.dtype([("virtual_offset", "<u8"), ("length", "<u8"), ("managed_offset", "<u8")])

if RECORD_DTYPE.itemsize != RECORD_SIZE or RECORD.size != RECORD_SIZE:
    raise RuntimeError("mapping record layout must be exactly 64 bytes")


def records_for(mib: int) -> int:
    """Records in a quantum of `mib` MiB."""
    return mib * 1024 * 1024 // RECORD_SIZE


if records_for(4) != 65536 or records_for(16) != 262144:
    raise RuntimeError("quantum capacity constants are inconsistent")

DEFAULT_CAPACITY = records_for(4)
DEFAULT_RETENTION = 10
MAX_CAPACITY = records_for(256)

VOLUME_MAGIC = 0x31304C4F56504443  # "CDPVOL01"
VOLUME_ROOT_SIZE = 128
ROOT = struct.Struct("<16Q")
# VolumeRoot field offsets
R_MAGIC = 0
R_HEAD = 8
R_TAIL = 16
R_CURRENT = 24
R_NEXT_SEQUENCE = 32
R_CAPACITY = 40
R_RETENTION = 48
R_RETENTION_AGE = 56
R_BASE_SUMMARY = 64
R_BASE_COUNT = 72
R_BASE_AS_OF = 80
R_LAST_TIMESTAMP = 88
R_TRIMMED = 96
R_NEXT_ORDINAL = 104
R_QUANTUM_COUNT = 112
R_FLAGS = 120

VOLUME_INLINE_MAINTENANCE = 1  # summarize and trim on the update path (deterministic)

QUANTUM_HEADER_SIZE = 128
QUANTUM = struct.Struct("<16Q")
Q_STATE = 0
Q_CAPACITY = 8
Q_COUNT = 16
Q_RECORDS = 24
Q_SUMMARY = 32
Q_SUMMARY_COUNT = 40
Q_PREV = 48
Q_NEXT = 56
Q_ORDINAL = 64
Q_FIRST_SEQUENCE = 72


class QuantumState(IntEnum):
    OPEN = 1
    SEALED = 2
    SUMMARIZED = 3


HEAP_KEY = b"__cdp.heap"
HEAP_TABLE_SIZE = 4096  # {count u64, (offset u64, size u64) * MAX_CHUNKS}
MAX_CHUNKS = (HEAP_TABLE_SIZE - 8) // 16


# =============================================================================
# REQUEST ENCODING (opaque to the store)
# =============================================================================

class CdpOp(IntEnum):
    UPDATE = 1
    QUERY = 2
    TRIM = 3
    CONFIGURE = 4
    SUMMARIZE = 5
    INFO = 6


class CdpStatus(IntEnum):
    OK = 0
    ORDERING_VIOLATION = 1
    VOLUME_NOT_FOUND = 2
    HISTORY_TRIMMED = 3
    BAD_REQUEST = 4
    OUT_OF_MEMORY = 5


QUERY_FULL = 1

UPDATE_REQ = struct.Struct("<BQIQQ")  # tag, virtual_offset, length, managed_offset, timestamp
QUERY_REQ = struct.Struct("<BQBQQ")  # tag, t, flags, virtual_offset, length
CONFIGURE_REQ = struct.Struct("<BQQQQ")  # tag, capacity, retention_count, retention_age_ns, flags
INFO_RESP = struct.Struct("<IQQQQIIQ16s")

_STATUS_ERRORS = {
    CdpStatus.ORDERING_VIOLATION: OrderingViolation,
    CdpStatus.VOLUME_NOT_FOUND: VolumeNotFound,
    CdpStatus.HISTORY_TRIMMED: HistoryTrimmed,
    CdpStatus.BAD_REQUEST: ParameterError,
    CdpStatus.OUT_OF_MEMORY: OutOfMemory,
}


def _status_of(error: Exception) -> CdpStatus:
    for status, cls in _STATUS_ERRORS.items():
        if isinstance(error, cls):
            return status
    raise error


def encode_update(virtual_offset: int, length: int, managed_offset: int, timestamp: int) -> bytes:
    return UPDATE_REQ.pack(CdpOp.UPDATE, virtual_offset, length, managed_offset, timestamp)


def encode_query(t: int, virtual_offset: Optional[int] = None, length: Optional[int] = None) -> bytes:
    if virtual_offset is None:
        return QUERY_REQ.pack(CdpOp.QUERY, t, QUERY_FULL, 0, 0)
    return QUERY_REQ.pack(CdpOp.QUERY, t, 0, virtual_offset, length)


def encode_configure(capacity: int = DEFAULT_CAPACITY, retention: int = DEFAULT_RETENTION,
                     retention_age_ns: int = 0, flags: int = 0) -> bytes:
    return CONFIGURE_REQ.pack(CdpOp.CONFIGURE, capacity, retention, retention_age_ns, flags)


def decode_response(data: bytes) -> bytes:
    """Strip the status byte, raising the mapped error for non-OK statuses."""
    if not data:
        raise PluginError("empty CDP response")
    status = data[0]
    if status != CdpStatus.OK:
        cls = _STATUS_ERRORS.get(status, CdpError)
        raise cls(data[1:].decode("utf-8", "replace"))
    return data[1:]


def decode_mapping(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<I", payload)
    return np.frombuffer(payload, dtype=SUMMARY_DTYPE, count=count, offset=4).copy()


@dataclass
class VolumeInfo:
    list_length: int
    open_count: int
    total_records: int
    trimmed: int
    base_as_of: int
    sealed: int
    summarized: int
    next_sequence: int
    digest: str

    @classmethod
    def unpack(cls, payload: bytes) -> "VolumeInfo":
        fields = INFO_RESP.unpack(payload)
        return cls(*fields[:-1], fields[-1].hex())

    def pack(self) -> bytes:
        return INFO_RESP.pack(self.list_length, self.open_count, self.total_records, self.trimmed,
                              self.base_as_of, self.sealed, self.summarized, self.next_sequence,
                              bytes.fromhex(self.digest))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# =============================================================================
# MERGE KERNEL
# =============================================================================

class IntervalMap:
    """
    Sorted, non-overlapping virtual -> managed runs. Adjacent runs that
    continue each other linearly are always coalesced, so two maps describing
    the same block function compare equal.
    """

    __slots__ = ("starts", "lengths", "managed")

    def __init__(self, starts=None, lengths=None, managed=None):
        self.starts: list[int] = starts or []
        self.lengths: list[int] = lengths or []
        self.managed: list[int] = managed or []

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "IntervalMap":
        return cls(arr["virtual_offset"].tolist(), arr["length"].tolist(), arr["managed_offset"].tolist())

    def to_array(self) -> np.ndarray:
        arr = np.empty(len(self.starts), dtype=SUMMARY_DTYPE)
        arr["virtual_offset"] = self.starts
        arr["length"] = self.lengths
        arr["managed_offset"] = self.managed
        return arr

    def copy(self) -> "IntervalMap":
        return IntervalMap(list(self.starts), list(self.lengths), list(self.managed))

    def __len__(self):
        return len(self.starts)

    def entries(self) -> list[tuple[int, int, int]]:
        return list(zip(self.starts, self.lengths, self.managed))

    def _joins(self, i: int) -> bool:
        """Does run i continue run i-1?"""
        return (i > 0 and self.starts[i - 1] + self.lengths[i - 1] == self.starts[i]
                and self.managed[i - 1] + self.lengths[i - 1] == self.managed[i])

    def merge(self, virtual_offset: int, length: int, managed_offset: int):
        starts, lengths, managed = self.starts, self.lengths, self.managed
        end = virtual_offset + length
        first = bisect.bisect_right(starts, virtual_offset) - 1
        if first < 0 or starts[first] + lengths[first] <= virtual_offset:
            first += 1
        last = bisect.bisect_left(starts, end)  # runs [first, last) overlap the record

        new_s, new_l, new_m = [], [], []
        if first < last and starts[first] < virtual_offset:
            new_s.append(starts[first])
            new_l.append(virtual_offset - starts[first])
            new_m.append(managed[first])
        new_s.append(virtual_offset)
        new_l.append(length)
        new_m.append(managed_offset)
        if first < last and starts[last - 1] + lengths[last - 1] > end:
            cut = end - starts[last - 1]
            new_s.append(end)
            new_l.append(lengths[last - 1] - cut)
            new_m.append(managed[last - 1] + cut)
        starts[first:last] = new_s
        lengths[first:last] = new_l
        managed[first:last] = new_m

        # Only the new run can now continue a neighbour, or be continued by one
        i = first + (1 if new_s[0] != virtual_offset else 0)
        if i + 1 < len(starts) and self._joins(i + 1):
            lengths[i] += lengths[i + 1]
            del starts[i + 1], lengths[i + 1], managed[i + 1]
        if self._joins(i):
            lengths[i - 1] += lengths[i]
            del starts[i], lengths[i], managed[i]

    def merge_records(self, records: np.ndarray):
        for v, n, m in zip(records["virtual_offset"].tolist(), records["length"].tolist(),
                           records["managed_offset"].tolist()):
            self.merge(v, n, m)

    def restrict(self, start: int, end: int) -> "IntervalMap":
        """Runs overlapping [start, end), unclipped."""
        arr = self.to_array()
        mask = (arr["virtual_offset"] < end) & (arr["virtual_offset"] + arr["length"] > start)
        return IntervalMap.from_array(arr[mask])

    def clip(self, start: Optional[int] = None, end: Optional[int] = None) -> np.ndarray:
        return clip_mapping(self.to_array(), start, end)


def merge_into(imap: IntervalMap, record) -> None:
    """Merge one record (anything with virtual_offset/length/managed_offset) into the map."""
    imap.merge(int(record["virtual_offset"]), int(record["length"]), int(record["managed_offset"]))


def _coalesce(arr: np.ndarray) -> np.ndarray:
    if len(arr) < 2:
        return arr
    v = arr["virtual_offset"].astype(np.int64)
    n = arr["length"].astype(np.int64)
    m = arr["managed_offset"].astype(np.int64)
    joins = (v[:-1] + n[:-1] == v[1:]) & (m[:-1] + n[:-1] == m[1:])
    if not joins.any():
        return arr
    heads = np.concatenate(([True], ~joins))
    group = np.cumsum(heads) - 1
    out = arr[heads].copy()
    out["length"] = np.bincount(group, weights=n).astype(np.uint64)
    return out


def clip_mapping(arr: np.ndarray, start: Optional[int] = None, end: Optional[int] = None) -> np.ndarray:
    """Restrict a mapping to [start, end), cutting partially covered runs."""
    if start is None:
        return _coalesce(arr.copy())
    v = arr["virtual_offset"]
    stop = v + arr["length"]
    sel = arr[(v < end) & (stop > start)].copy()
    if not len(sel):
        return sel
    lo = np.maximum(sel["virtual_offset"], np.uint64(start))
    hi = np.minimum(sel["virtual_offset"] + sel["length"], np.uint64(end))
    sel["managed_offset"] += lo - sel["virtual_offset"]
    sel["virtual_offset"] = lo
    sel["length"] = hi - lo
    return _coalesce(sel)


def oracle_query(records: np.ndarray, t: int, start: Optional[int] = None, end: Optional[int] = None,
                 base: Optional[np.ndarray] = None) -> np.ndarray:
    """Brute force: replay every record with timestamp <= t block by block."""
    blocks: dict[int, int] = {}
    if base is not None:
        for v, n, m in base.tolist():
            for i in range(n):
                blocks[v + i] = m + i
    for rec in records[records["timestamp"] <= t]:
        v, n, m = int(rec["virtual_offset"]), int(rec["length"]), int(rec["managed_offset"])
        for i in range(n):
            blocks[v + i] = m + i
    runs = []
    for v in sorted(blocks):
        if start is not None and not start <= v < end:
            continue
        m = blocks[v]
        if runs and runs[-1][0] + runs[-1][1] == v and runs[-1][2] + runs[-1][1] == m:
            runs[-1][1] += 1
        else:
            runs.append([v, 1, m])
    out = np.empty(len(runs), dtype=SUMMARY_DTYPE)
    for i, (v, n, m) in enumerate(runs):
        out[i] = (v, n, m)
    return out


# =============================================================================
# PLUGIN-LOCAL HEAP
# =============================================================================

class LocalHeap:
    """
    Heaps formatted over chunks obtained with AllocatePoolMemory. The chunk
    table lives in the value of the `__cdp.heap` pair so the heaps can be
    found again after a restart.
    """

    def __init__(self, memory, table_offset: int):
        self.memory = memory
        self.table = table_offset
        self.heaps = []
        self.lock = threading.Lock()

    def load(self):
        count = self.memory.read_u64(self.table)
        for i in range(count):
            offset, size = struct.unpack("<QQ", self.memory.read(self.table + 8 + 16 * i, 16))
            self.heaps.append(self.memory.sub_heap(offset, offset + size, fresh=False))
        if count:
            logger.info("Loaded %d plugin heap chunks", count)

    @property
    def free_bytes(self) -> int:
        return sum(h.free_bytes for h in self.heaps)

    @property
    def capacity(self) -> int:
        return sum(h.end - h.start for h in self.heaps)

    def _ensure(self, ctx, size: int, force: bool):
        with self.lock:
            if not force and any(h.free_bytes >= size for h in self.heaps):
                return
        chunk = align_up(max(config.CDP_CHUNK_SIZE, size + 4096), 4096)
        offset = ctx.allocate_pool_memory(chunk, 4096)
        with self.lock, self.memory.transaction():
            count = self.memory.read_u64(self.table)
            if count >= MAX_CHUNKS:
                raise OutOfMemory("plugin heap chunk table is full")
            heap = self.memory.sub_heap(offset, offset + chunk, fresh=True)
            entry = self.table + 8 + 16 * count
            self.memory.tx_log(entry, 16)
            self.memory.write(entry, struct.pack("<QQ", offset, chunk))
            self.memory.tx_log(self.table, 8)
            self.memory.write_u64(self.table, count + 1)
            self.heaps.append(heap)
        logger.info("Plugin heap grew by %d bytes (chunk %d)", chunk, count + 1)

    def run(self, ctx, size: int, fn: Callable):
        """Run fn under the heap lock once `size` bytes are likely available."""
        force = False
        for _ in range(3):
            self._ensure(ctx, size, force)
            with self.lock:
                try:
                    return fn()
                except OutOfMemory:
                    force = True
        raise OutOfMemory(f"plugin heap cannot satisfy {size} bytes")

    def alloc(self, size: int, alignment: int = 64) -> int:
        for heap in self.heaps:
            if heap.free_bytes >= size:
                try:
                    return heap.alloc(size, alignment)
                except OutOfMemory:
                    continue
        raise OutOfMemory(f"no plugin heap chunk fits {size} bytes")

    def free(self, offset: int):
        for heap in self.heaps:
            if heap.start <= offset < heap.end:
                heap.free(offset)
                return
        raise ParameterError(f"offset {offset} is not in the plugin heap")


class TierSink:
    """Receives a quantum's records before age-out discards them. Default: drop."""

    def retire(self, volume: bytes, records: np.ndarray):
        pass


# =============================================================================
# READ-ONLY WALKERS (plugin, sweep and tests share them)
# =============================================================================

def quantum_fields(reader, q: int) -> tuple:
    return QUANTUM.unpack(reader.read(q, QUANTUM_HEADER_SIZE))


def root_fields(reader, root: int) -> tuple:
    return ROOT.unpack(reader.read(root, VOLUME_ROOT_SIZE))


def quantum_records(reader, q: int) -> np.ndarray:
    fields = quantum_fields(reader, q)
    count, records = fields[Q_COUNT // 8], fields[Q_RECORDS // 8]
    if not count:
        return np.empty(0, dtype=RECORD_DTYPE)
    return reader.read_array(records, RECORD_DTYPE, count)


def quantum_list(reader, root: int) -> list[int]:
    """Quantum offsets oldest first."""
    out = []
    q = reader.read_u64(root + R_TAIL)
    while q:
        out.append(q)
        q = reader.read_u64(q + Q_NEXT)
    return out


def read_summary(reader, offset: int, count: int) -> np.ndarray:
    if not offset or not count:
        return np.empty(0, dtype=SUMMARY_DTYPE)
    return reader.read_array(offset, SUMMARY_DTYPE, count)


def retained_history(reader, root: int) -> tuple[np.ndarray, int, np.ndarray]:
    """(base summary, base_as_of, every retained committed record oldest first)."""
    fields = root_fields(reader, root)
    base = read_summary(reader, fields[R_BASE_SUMMARY // 8], fields[R_BASE_COUNT // 8])
    parts = [quantum_records(reader, q) for q in quantum_list(reader, root)]
    records = np.concatenate(parts) if parts else np.empty(0, dtype=RECORD_DTYPE)
    return base, fields[R_BASE_AS_OF // 8], records


def verify_volume(reader, root: int) -> list[str]:
    """Structural sweep: list shape, state order, record integrity, summary shape."""
    problems = []
    fields = root_fields(reader, root)
    if fields[0] != VOLUME_MAGIC:
        return [f"bad volume magic at {root}"]
    head, tail, current = fields[R_HEAD // 8], fields[R_TAIL // 8], fields[R_CURRENT // 8]
    if head != current:
        problems.append("head is not the current quantum")
    order = quantum_list(reader, root)
    if not order or order[-1] != head:
        problems.append("list walk from tail does not end at head")
    if order and order[0] != tail:
        problems.append("tail mismatch")
    if len(order) != fields[R_QUANTUM_COUNT // 8]:
        problems.append(f"quantum_count {fields[R_QUANTUM_COUNT // 8]} but {len(order)} linked")
    prev = 0
    last_state = QuantumState.SUMMARIZED
    last_key = (0, 0)
    for i, q in enumerate(order):
        qf = quantum_fields(reader, q)
        state = qf[Q_STATE // 8]
        if qf[Q_PREV // 8] != prev:
            problems.append(f"quantum {q} prev pointer broken")
        prev = q
        if state not in (1, 2, 3):
            problems.append(f"quantum {q} has bad state {state}")
            continue
        if (state == QuantumState.OPEN) != (i == len(order) - 1):
            problems.append(f"quantum {q} state {QuantumState(state).name} at position {i}")
        if state > last_state:
            problems.append(f"quantum {q} summarized after an unsummarized predecessor")
        last_state = QuantumState(state)
        capacity, count = qf[Q_CAPACITY // 8], qf[Q_COUNT // 8]
        if count > capacity:
            problems.append(f"quantum {q} count {count} exceeds capacity {capacity}")
            continue
        slots = reader.read_array(qf[Q_RECORDS // 8], RECORD_DTYPE, capacity)
        committed = slots[:count]
        if (committed["valid"] != 1).any():
            problems.append(f"quantum {q} has uncommitted slots below its count")
        if count < capacity and slots["valid"][count] == 1:
            problems.append(f"quantum {q} count lags a committed record")
        if (committed["length"] == 0).any() or (committed["reserved"] != 0).any():
            problems.append(f"quantum {q} has torn records")
        for rec in committed.tolist():
            key = (rec[4], rec[5])
            if key <= last_key:
                problems.append(f"quantum {q} records out of (timestamp, sequence) order")
                break
            last_key = key
        if state == QuantumState.SUMMARIZED:
            summary = read_summary(reader, qf[Q_SUMMARY // 8], qf[Q_SUMMARY_COUNT // 8])
            ends = summary["virtual_offset"] + summary["length"]
            if len(summary) > 1 and (ends[:-1] > summary["virtual_offset"][1:]).any():
                problems.append(f"quantum {q} summary overlaps")
    return problems


# =============================================================================
# PLUGIN
# =============================================================================

@dataclass
class _Volume:
    tag: bytes
    root: int
    lock: threading.Lock
    cache: Optional[tuple[int, IntervalMap]] = None  # last summary built or read


@register_plugin
class CdpPlugin(AdoPlugin):
    plugin_id = "cdp"

    def __init__(self):
        self.memory = None
        self.heap: Optional[LocalHeap] = None
        self.tier_sink = TierSink()
        self._ctx = None
        self._volumes: dict[bytes, _Volume] = {}
        self._volumes_lock = threading.Lock()

    # --- attach / recovery --------------------------------------------------

    def on_attach(self, ctx):
        self.memory = ctx.memory
        self._ctx = ctx
        try:
            ref = ctx.open_key(HEAP_KEY)
        except NotFound:
            ref = ctx.create_key(HEAP_KEY, HEAP_TABLE_SIZE)
        self.heap = LocalHeap(ctx.memory, ref.offset)
        self.heap.load()

        recovered = []
        for key, ref in ctx.get_ref_vector():
            if key.startswith(b"__cdp.") or ref.length < VOLUME_ROOT_SIZE:
                continue
            if self.memory.read_u64(ref.offset) != VOLUME_MAGIC:
                continue
            vol = self._register(key, ref.offset)
            self._recover_volume(vol)
            recovered.append(vol)
        for vol in recovered:
            self._after_seal(ctx, vol)
        if recovered:
            logger.info("CDP attached to pool %s with %d volumes", ctx.pool_name, len(recovered))

    def _register(self, tag: bytes, root: int) -> _Volume:
        with self._volumes_lock:
            vol = self._volumes.get(tag)
            if vol is None or vol.root != root:
                vol = _Volume(tag, root, threading.Lock())
                self._volumes[tag] = vol
            return vol

    def _recover_volume(self, vol: _Volume):
        m = self.memory
        q = m.read_u64(vol.root + R_CURRENT)
        count = m.read_u64(q + Q_COUNT)
        capacity = m.read_u64(q + Q_CAPACITY)
        slots = m.read_array(m.read_u64(q + Q_RECORDS), RECORD_DTYPE, capacity)
        gaps = np.flatnonzero(slots["valid"][count:] != 1)
        repaired = count + (int(gaps[0]) if len(gaps) else capacity - count)
        if repaired != count:
            m.atomic_store_64(q + Q_COUNT, repaired)
            m.persist(q + Q_COUNT, 8)
            logger.info("Repaired record count of volume %r: %d -> %d", vol.tag, count, repaired)
        if repaired:
            last = slots[repaired - 1]
            m.atomic_store_64(vol.root + R_NEXT_SEQUENCE, int(last["sequence"]) + 1)
            m.atomic_store_64(vol.root + R_LAST_TIMESTAMP, int(last["timestamp"]))
            m.persist(vol.root + R_NEXT_SEQUENCE, 8)
            m.persist(vol.root + R_LAST_TIMESTAMP, 8)

    # --- dispatch -----------------------------------------------------------

    def do_work(self, work, ctx):
        if not work.request:
            raise PluginError("empty CDP request")
        tag = work.request[0]
        try:
            op = CdpOp(tag)
        except ValueError:
            raise PluginError(f"unknown CDP operation {tag}")
        if self.heap is None:
            raise PluginError("CDP plugin heap is unavailable")
        try:
            vol = self._volume(work, ctx, create=op in (CdpOp.UPDATE, CdpOp.CONFIGURE),
                               configure=work.request if op == CdpOp.CONFIGURE else None)
            match op:
                case CdpOp.UPDATE:
                    _, v, n, m, ts = UPDATE_REQ.unpack(work.request)
                    payload = struct.pack("<Q", self.update(ctx, vol, v, n, m, ts))
                case CdpOp.QUERY:
                    _, t, flags, v, n = QUERY_REQ.unpack(work.request)
                    if flags & QUERY_FULL:
                        mapping = self.query(vol, t)
                    else:
                        mapping = self.query(vol, t, v, v + n)
                    payload = struct.pack("<I", len(mapping)) + mapping.tobytes()
                case CdpOp.TRIM:
                    payload = struct.pack("<I", self.trim(ctx, vol))
                case CdpOp.CONFIGURE:
                    self.configure(ctx, vol, *CONFIGURE_REQ.unpack(work.request)[1:])
                    payload = b""
                case CdpOp.SUMMARIZE:
                    payload = struct.pack("<I", self.summarize_all(ctx, vol))
                case CdpOp.INFO:
                    payload = self.info(vol).pack()
        except (CdpError, OutOfMemory, ParameterError) as e:
            return [bytes([_status_of(e)]) + str(e).encode()]
        except struct.error as e:
            return [bytes([CdpStatus.BAD_REQUEST]) + f"malformed CDP request: {e}".encode()]
        return [bytes([CdpStatus.OK]) + payload]

    def _volume(self, work, ctx, create: bool, configure: Optional[bytes] = None) -> _Volume:
        if not work.key or not work.value_space:
            raise ParameterError("CDP requests address a volume key")
        ref = work.value_space[0]
        if ref.length < VOLUME_ROOT_SIZE:
            raise VolumeNotFound(f"{work.key!r} is not a CDP volume")
        vol = self._register(work.key, ref.offset)
        magic = self.memory.read_u64(vol.root)
        if magic == VOLUME_MAGIC:
            return vol
        if magic or not create:
            raise VolumeNotFound(f"no CDP volume {work.key!r}")
        capacity = DEFAULT_CAPACITY
        if configure is not None:
            capacity = CONFIGURE_REQ.unpack(configure)[1]
        self._init_volume(ctx, vol, capacity)
        return vol

    # --- quanta -------------------------------------------------------------

    @staticmethod
    def _quantum_bytes(capacity: int) -> int:
        return capacity * RECORD_SIZE + QUANTUM_HEADER_SIZE + 512

    def _new_quantum(self, capacity: int, prev: int, ordinal: int, first_sequence: int) -> int:
        """Allocate and format an OPEN quantum. Caller holds the heap lock inside a transaction."""
        header = self.heap.alloc(QUANTUM_HEADER_SIZE, 64)
        records = self.heap.alloc(capacity * RECORD_SIZE, 64)
        self.memory.write(records, bytes(capacity * RECORD_SIZE))
        self.memory.write(header, QUANTUM.pack(QuantumState.OPEN, capacity, 0, records, 0, 0, prev, 0,
                                               ordinal, first_sequence, 0, 0, 0, 0, 0, 0))
        return header

    @staticmethod
    def _check_capacity(capacity: int):
        if not 1 <= capacity <= MAX_CAPACITY:
            raise ParameterError(f"quantum capacity must be 1..{MAX_CAPACITY}: {capacity}")

    def _init_volume(self, ctx, vol: _Volume, capacity: int):
        self._check_capacity(capacity)

        def init():
            with vol.lock, self.memory.transaction():
                if self.memory.read_u64(vol.root) == VOLUME_MAGIC:
                    return
                q = self._new_quantum(capacity, 0, 0, 1)
                self.memory.tx_log_range(vol.root, VOLUME_ROOT_SIZE)
                self.memory.write(vol.root, ROOT.pack(VOLUME_MAGIC, q, q, q, 1, capacity, DEFAULT_RETENTION, 0,
                                                      0, 0, 0, 0, 0, 1, 1, 0))

        self.heap.run(ctx, self._quantum_bytes(capacity), init)
        logger.info("Created CDP volume %r (quantum capacity %d)", vol.tag, capacity)

    def _seal_and_link(self, ctx, vol: _Volume, capacity: int) -> int:
        """Seal the OPEN quantum and link a fresh one, in one transaction. Returns the sealed quantum."""
        m = self.memory

        def seal():
            with vol.lock, m.transaction():
                old = m.read_u64(vol.root + R_CURRENT)
                ordinal = m.read_u64(vol.root + R_NEXT_ORDINAL)
                new = self._new_quantum(capacity, old, ordinal, m.read_u64(vol.root + R_NEXT_SEQUENCE))
                m.tx_log(old + Q_STATE, 8)
                m.atomic_store_64(old + Q_STATE, QuantumState.SEALED)
                m.tx_log(old + Q_NEXT, 8)
                m.write_u64(old + Q_NEXT, new)
                m.tx_log(vol.root + R_HEAD, 8)
                m.write_u64(vol.root + R_HEAD, new)
                m.tx_log(vol.root + R_CURRENT, 8)
                m.write_u64(vol.root + R_CURRENT, new)
                m.tx_log(vol.root + R_NEXT_ORDINAL, 8)
                m.write_u64(vol.root + R_NEXT_ORDINAL, ordinal + 1)
                m.tx_log(vol.root + R_QUANTUM_COUNT, 8)
                m.write_u64(vol.root + R_QUANTUM_COUNT, m.read_u64(vol.root + R_QUANTUM_COUNT) + 1)
                return old

        return self.heap.run(ctx, self._quantum_bytes(capacity), seal)

    def _after_seal(self, ctx, vol: _Volume):
        if self.memory.read_u64(vol.root + R_FLAGS) & VOLUME_INLINE_MAINTENANCE:
            self._maintain(ctx, vol)
        else:
            ctx.submit_background(self._maintain, self._ctx, vol)

    def _maintain(self, ctx, vol: _Volume):
        current = self.memory.read_u64(vol.root + R_CURRENT)
        prev = self.memory.read_u64(current + Q_PREV)
        if prev:
            self.ensure_summarized(ctx, vol, prev)
        self.trim(ctx, vol)

    # --- update -------------------------------------------------------------

    def update(self, ctx, vol: _Volume, virtual_offset: int, length: int, managed_offset: int,
               timestamp: int) -> int:
        """Append one mapping record; returns its sequence number."""
        if length < 1 or length > 0xFFFFFFFF:
            raise ParameterError(f"record length must be >= 1: {length}")
        m = self.memory
        with vol.lock:
            last = m.read_u64(vol.root + R_LAST_TIMESTAMP)
            if timestamp < last:
                raise OrderingViolation(f"timestamp {timestamp} precedes {last} on volume {vol.tag!r}")
            q = m.read_u64(vol.root + R_CURRENT)
            full = m.read_u64(q + Q_COUNT) >= m.read_u64(q + Q_CAPACITY)
            capacity = m.read_u64(vol.root + R_CAPACITY)
        if full:
            self._seal_and_link(ctx, vol, capacity)

        with vol.lock:
            q = m.read_u64(vol.root + R_CURRENT)
            count = m.read_u64(q + Q_COUNT)
            sequence = m.read_u64(vol.root + R_NEXT_SEQUENCE)
            slot = m.read_u64(q + Q_RECORDS) + count * RECORD_SIZE
            m.write(slot, RECORD.pack(virtual_offset, length, 0, managed_offset, timestamp, sequence, 0))
            m.persist(slot, RECORD_SIZE)
            m.atomic_store_64(slot + VALID_FIELD, 1)
            m.persist(slot + VALID_FIELD, 8)
            m.atomic_store_64(q + Q_COUNT, count + 1)
            m.persist(q + Q_COUNT, 8)
            m.atomic_store_64(vol.root + R_NEXT_SEQUENCE, sequence + 1)
            m.atomic_store_64(vol.root + R_LAST_TIMESTAMP, timestamp)
            m.persist(vol.root + R_NEXT_SEQUENCE, 8)
            m.persist(vol.root + R_LAST_TIMESTAMP, 8)

        if full:
            self._after_seal(ctx, vol)
        return sequence

    # --- summaries ----------------------------------------------------------

    def _summary_of(self, vol: _Volume, q: int) -> IntervalMap:
        """Summary of a SUMMARIZED quantum, or the volume base summary for q == 0. Caller holds vol.lock."""
        if vol.cache is not None and vol.cache[0] == q:
            return vol.cache[1].copy()
        m = self.memory
        if q:
            arr = read_summary(m, m.read_u64(q + Q_SUMMARY), m.read_u64(q + Q_SUMMARY_COUNT))
        else:
            arr = read_summary(m, m.read_u64(vol.root + R_BASE_SUMMARY), m.read_u64(vol.root + R_BASE_COUNT))
        return IntervalMap.from_array(arr)

    def _in_list(self, vol: _Volume, q: int) -> bool:
        return q in quantum_list(self.memory, vol.root)

    def ensure_summarized(self, ctx, vol: _Volume, target: int) -> int:
        """Summarize `target` and any unsummarized predecessors, oldest first. Returns how many."""
        m = self.memory
        with vol.lock:
            if not self._in_list(vol, target):
                return 0
            chain = []
            q = target
            while q:
                state = m.read_u64(q + Q_STATE)
                if state == QuantumState.SUMMARIZED:
                    break
                if state == QuantumState.SEALED:
                    chain.append(q)
                q = m.read_u64(q + Q_PREV)
            if not chain:
                return 0
            base = self._summary_of(vol, q)
            batches = [(c, quantum_records(m, c)) for c in reversed(chain)]

        done = 0
        for quantum, records in batches:
            base = base.copy()
            base.merge_records(records)
            if self._store_summary(ctx, vol, quantum, base):
                done += 1
        return done

    def _store_summary(self, ctx, vol: _Volume, q: int, imap: IntervalMap) -> bool:
        m = self.memory
        arr = imap.to_array()
        nbytes = max(arr.nbytes, 64)

        def store():
            with vol.lock, m.transaction():
                if not self._in_list(vol, q) or m.read_u64(q + Q_STATE) != QuantumState.SEALED:
                    return False
                offset = self.heap.alloc(nbytes, 64)
                m.write(offset, arr.tobytes())
                m.tx_log(q + Q_SUMMARY, 16)
                m.write(q + Q_SUMMARY, struct.pack("<QQ", offset, len(arr)))
                m.tx_log(q + Q_STATE, 8)
                m.atomic_store_64(q + Q_STATE, QuantumState.SUMMARIZED)
                vol.cache = (q, imap)
                return True

        return self.heap.run(ctx, nbytes + 256, store)

    def summarize_all(self, ctx, vol: _Volume) -> int:
        current = self.memory.read_u64(vol.root + R_CURRENT)
        prev = self.memory.read_u64(current + Q_PREV)
        return self.ensure_summarized(ctx, vol, prev) if prev else 0

    # --- query --------------------------------------------------------------

    def query(self, vol: _Volume, t: int, start: Optional[int] = None, end: Optional[int] = None) -> np.ndarray:
        """Block mapping as of time t, optionally restricted to [start, end)."""
        if start is not None and end <= start:
            return np.empty(0, dtype=SUMMARY_DTYPE)
        m = self.memory
        with vol.lock:
            base_as_of = m.read_u64(vol.root + R_BASE_AS_OF)
            if base_as_of and t < base_as_of:
                raise HistoryTrimmed(f"t={t} predates retained history (from {base_as_of})")

            # 1. newest-first scan for the quantum holding time t
            qt = m.read_u64(vol.root + R_HEAD)
            while qt:
                count = m.read_u64(qt + Q_COUNT)
                if count:
                    first = m.read_u64(m.read_u64(qt + Q_RECORDS) + TIMESTAMP_FIELD)
                    if first <= t:
                        break
                qt = m.read_u64(qt + Q_PREV)
            if not qt:
                return self._clip(self._summary_of(vol, 0), start, end)

            records = quantum_records(m, qt)
            if m.read_u64(qt + Q_STATE) == QuantumState.SUMMARIZED and t >= int(records["timestamp"][-1]):
                return self._clip(self._summary_of(vol, qt), start, end)

            # 2. back to the nearest summarized quantum
            between = []
            qs = m.read_u64(qt + Q_PREV)
            while qs and m.read_u64(qs + Q_STATE) != QuantumState.SUMMARIZED:
                between.append(qs)
                qs = m.read_u64(qs + Q_PREV)

            # 3. its summary plus every later quantum before Q_t
            imap = self._summary_of(vol, qs)
            if start is not None:
                imap = imap.restrict(start, end)
            for q in reversed(between):
                imap.merge_records(self._in_range(quantum_records(m, q), start, end))

            # 4. Q_t's records up to t
            upto = int(np.searchsorted(records["timestamp"], np.uint64(t), side="right"))
            imap.merge_records(self._in_range(records[:upto], start, end))
        return self._clip(imap, start, end)

    @staticmethod
    def _in_range(records: np.ndarray, start: Optional[int], end: Optional[int]) -> np.ndarray:
        if start is None:
            return records
        v = records["virtual_offset"]
        return records[(v < end) & (v + records["length"] > start)]

    @staticmethod
    def _clip(imap: IntervalMap, start, end) -> np.ndarray:
        return imap.clip(start, end)

    # --- trim ---------------------------------------------------------------

    def _trim_candidate(self, vol: _Volume) -> int:
        m = self.memory
        tail = m.read_u64(vol.root + R_TAIL)
        if tail == m.read_u64(vol.root + R_CURRENT):
            return 0
        retention = m.read_u64(vol.root + R_RETENTION)
        if retention and m.read_u64(vol.root + R_QUANTUM_COUNT) > retention + 1:
            return tail
        max_age = m.read_u64(vol.root + R_RETENTION_AGE)
        if max_age:
            count = m.read_u64(tail + Q_COUNT)
            if not count:
                return tail
            tail_end = m.read_u64(m.read_u64(tail + Q_RECORDS) + (count - 1) * RECORD_SIZE + TIMESTAMP_FIELD)
            if m.read_u64(vol.root + R_LAST_TIMESTAMP) - tail_end > max_age:
                return tail
        return 0

    def trim(self, ctx, vol: _Volume) -> int:
        """Age out tail quanta past the retention policy. Never trims the OPEN quantum."""
        m = self.memory
        trimmed = 0
        while True:
            with vol.lock:
                tail = self._trim_candidate(vol)
            if not tail:
                return trimmed
            self.ensure_summarized(ctx, vol, tail)
            with self.heap.lock, vol.lock:
                if self._trim_candidate(vol) != tail or m.read_u64(tail + Q_STATE) != QuantumState.SUMMARIZED:
                    continue
                records = quantum_records(m, tail)
                self.tier_sink.retire(vol.tag, records)
                qf = quantum_fields(m, tail)
                old_base = m.read_u64(vol.root + R_BASE_SUMMARY)
                with m.transaction():
                    nxt = qf[Q_NEXT // 8]
                    m.tx_log(nxt + Q_PREV, 8)
                    m.write_u64(nxt + Q_PREV, 0)
                    m.tx_log_range(vol.root + R_TAIL, 8)
                    m.write_u64(vol.root + R_TAIL, nxt)
                    m.tx_log_range(vol.root + R_BASE_SUMMARY, 24)
                    as_of = int(records["timestamp"][-1]) if len(records) else m.read_u64(vol.root + R_BASE_AS_OF)
                    m.write(vol.root + R_BASE_SUMMARY,
                            struct.pack("<QQQ", qf[Q_SUMMARY // 8], qf[Q_SUMMARY_COUNT // 8], as_of))
                    m.tx_log(vol.root + R_TRIMMED, 8)
                    m.write_u64(vol.root + R_TRIMMED, m.read_u64(vol.root + R_TRIMMED) + 1)
                    m.tx_log(vol.root + R_QUANTUM_COUNT, 8)
                    m.write_u64(vol.root + R_QUANTUM_COUNT, m.read_u64(vol.root + R_QUANTUM_COUNT) - 1)
                    self.heap.free(qf[Q_RECORDS // 8])
                    self.heap.free(tail)
                    if old_base:
                        self.heap.free(old_base)
                if vol.cache is not None and vol.cache[0] == tail:
                    vol.cache = None
            trimmed += 1

    # --- configure / info ---------------------------------------------------

    def configure(self, ctx, vol: _Volume, capacity: int, retention: int, retention_age_ns: int, flags: int):
        self._check_capacity(capacity)
        m = self.memory
        with vol.lock, m.transaction():
            m.tx_log_range(vol.root + R_CAPACITY, 24)
            m.write(vol.root + R_CAPACITY, struct.pack("<QQQ", capacity, retention, retention_age_ns))
            m.tx_log(vol.root + R_FLAGS, 8)
            m.write_u64(vol.root + R_FLAGS, flags)
            q = m.read_u64(vol.root + R_CURRENT)
            reshape = m.read_u64(q + Q_CAPACITY) != capacity
        if reshape:
            self._seal_and_link(ctx, vol, capacity)
            self._after_seal(ctx, vol)
        else:
            self.trim(ctx, vol)

    def info(self, vol: _Volume) -> VolumeInfo:
        m = self.memory
        with vol.lock:
            fields = root_fields(m, vol.root)
            h = hashlib.blake2b(digest_size=16)
            h.update(struct.pack("<QQ", fields[R_BASE_AS_OF // 8], fields[R_TRIMMED // 8]))
            h.update(read_summary(m, fields[R_BASE_SUMMARY // 8], fields[R_BASE_COUNT // 8]).tobytes())
            states = {s: 0 for s in QuantumState}
            total = 0
            order = quantum_list(m, vol.root)
            for q in order:
                states[QuantumState(m.read_u64(q + Q_STATE))] += 1
                records = quantum_records(m, q)
                total += len(records)
                h.update(struct.pack("<QQ", m.read_u64(q + Q_ORDINAL), len(records)))
                h.update(records.tobytes())
            current = fields[R_CURRENT // 8]
            return VolumeInfo(
                list_length=len(order),
                open_count=m.read_u64(current + Q_COUNT),
                total_records=total,
                trimmed=fields[R_TRIMMED // 8],
                base_as_of=fields[R_BASE_AS_OF // 8],
                sealed=states[QuantumState.SEALED],
                summarized=states[QuantumState.SUMMARIZED],
                next_sequence=fields[R_NEXT_SEQUENCE // 8],
                digest=h.hexdigest(),
            )


# =============================================================================
# CLIENT
# =============================================================================

class CdpClient:
    """
    Builds CDP request bodies and decodes responses over any invoker with the
    shape invoke(key, request, flags, value_size) -> list[bytes]. Keeps a
    cache of the latest mapping of every volume it writes.
    """

    def __init__(self, invoke: Callable[[bytes, bytes, int, int], list[bytes]]):
        self._invoke = invoke
        self._latest: dict[bytes, IntervalMap] = {}

    @classmethod
    def over_connection(cls, client, handle: int) -> "CdpClient":
        return cls(lambda key, req, flags, size: client.invoke_ado(handle, key, req, flags, size))

    @classmethod
    def over_shard(cls, shard, handle: int, timeout: Optional[float] = None) -> "CdpClient":
        return cls(lambda key, req, flags, size: shard.invoke_ado(handle, key, req, flags, size).result(timeout))

    @classmethod
    def over_replicas(cls, replica_set) -> "CdpClient":
        from active_store.proto import AdoInvocation

        def invoke(key, req, flags, size):
            return replica_set.invoke(AdoInvocation(key, req, flags, size))[0]
        return cls(invoke)

    def _call(self, volume: bytes, request: bytes, create: bool = False) -> bytes:
        flags = AdoFlags.CREATE_IF_MISSING if create else AdoFlags.NONE
        try:
            responses = self._invoke(volume, request, int(flags), VOLUME_ROOT_SIZE if create else 0)
        except NotFound:
            raise VolumeNotFound(f"no CDP volume {volume!r}")
        if len(responses) != 1:
            raise PluginError(f"expected one CDP response, got {len(responses)}")
        return decode_response(responses[0])

    def update(self, volume: bytes, virtual_offset: int, length: int, managed_offset: int, timestamp: int) -> int:
        payload = self._call(volume, encode_update(virtual_offset, length, managed_offset, timestamp), create=True)
        latest = self._latest.get(volume)
        if latest is not None:
            latest.merge(virtual_offset, length, managed_offset)
        return struct.unpack("<Q", payload)[0]

    def query(self, volume: bytes, t: int, virtual_offset: Optional[int] = None,
              length: Optional[int] = None) -> np.ndarray:
        return decode_mapping(self._call(volume, encode_query(t, virtual_offset, length)))

    def latest(self, volume: bytes, virtual_offset: Optional[int] = None, length: Optional[int] = None) -> np.ndarray:
        """Current mapping from the client cache, seeded by one full query."""
        if volume not in self._latest:
            self._latest[volume] = IntervalMap.from_array(self.query(volume, 2 ** 64 - 1))
        end = None if virtual_offset is None else virtual_offset + length
        return self._latest[volume].clip(virtual_offset, end)

    def trim(self, volume: bytes) -> int:
        return struct.unpack("<I", self._call(volume, bytes([CdpOp.TRIM])))[0]

    def configure(self, volume: bytes, capacity: int = DEFAULT_CAPACITY, retention: int = DEFAULT_RETENTION,
                  retention_age_ns: int = 0, inline_maintenance: bool = False):
        flags = VOLUME_INLINE_MAINTENANCE if inline_maintenance else 0
        self._call(volume, encode_configure(capacity, retention, retention_age_ns, flags), create=True)

    def summarize(self, volume: bytes) -> int:
        return struct.unpack("<I", self._call(volume, bytes([CdpOp.SUMMARIZE])))[0]

    def info(self, volume: bytes) -> VolumeInfo:
        return VolumeInfo.unpack(self._call(volume, bytes([CdpOp.INFO])))

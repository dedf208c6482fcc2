"""
Emulated persistent memory.

A PersistentRegion is a pool's persistent memory: a primary region file plus
any number of extension region files appended as the pool grows. Offsets are
packed 64-bit values, (region index << REGION_SHIFT) | offset within that
file, so primary-file offsets are plain file offsets. The primary file carries
a fixed 4 KiB header page with the region table, an undo log that makes
multi-word updates crash-atomic across every region file, and a boundary-tag
heap. Each extension file carries its own heap; all free lists are volatile
and rebuilt on every open.

Two backing modes:
  - file: the files are mmap'ed; persist() is an msync of the touched pages.
  - emulated: writes land in a volatile cache image and only reach the
    durable image on persist(). A CrashEmulator can stop the world at any
    persistence event and write out a post-crash image in which unpersisted
    8-byte words are randomly kept or dropped.
"""

import bisect
import logging
import mmap
import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from active_store import config
from active_store.errors import (
    AlignmentError,
    AlreadyExists,
    BoundsError,
    CapacityError,
    FormatError,
    HeapCorruption,
    LogFull,
    OutOfMemory,
    ParameterError,
    SimulatedCrash,
    StateError,
)

logger = logging.getLogger(__name__)

# Header page layout (all integers little-endian)
MAGIC = b"MCASADO1"
FORMAT_VERSION = 1
HEADER_SIZE = 4096
OFF_MAGIC = 0
OFF_VERSION = 8
OFF_ROOT = 16
OFF_HEAP_META = 24
OFF_UNDO_LOG = 32
OFF_CAPACITY = 40
OFF_REGION_COUNT = 48  # extension region files in use
HEAP_META = 64  # {heap_start u64, heap_end u64}
REGION_TABLE = 128  # u64 capacity of extension region 1, 2, ...
NIL = 0

# Packed offsets
REGION_SHIFT = 48
REGION_MASK = (1 << REGION_SHIFT) - 1
MAX_REGIONS = (HEADER_SIZE - REGION_TABLE) // 8 + 1

# Extension region file: {magic, index u64, capacity u64}, heap from EXTENSION_HEADER on
EXTENSION_MAGIC = b"MCASEXT1"
EXTENSION_HEADER = 4096

# Undo log layout
LOG_IDLE = 0
LOG_ACTIVE = 1
LOG_COMMITTED = 2
LOG_HEADER_SIZE = 32  # {state, count, capacity, reserved}
LOG_ENTRY_SIZE = 80  # {offset u64, length u64, old_bytes[64]}
LOG_PAYLOAD_MAX = 64

# Heap block tags
BLOCK_HEADER = 16  # {length u64, tag u64}
GRANULE = 16
MIN_BLOCK = BLOCK_HEADER + GRANULE
FREE_TAG = 0x4B434F4C42454552  # "REEBLOCK"
ALLOC_TAG = 0x4B434F4C434F4C41  # "ALOCLOCK"
MIN_HEAP = 4096

_U64 = struct.Struct("<Q")
_BLOCK = struct.Struct("<QQ")
_LOG_ENTRY_HEAD = struct.Struct("<QQ")
_EXTENT = struct.Struct("<QQ")


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) & ~(alignment - 1)


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


def log_area_size(entries: int) -> int:
    return LOG_HEADER_SIZE + entries * LOG_ENTRY_SIZE


def minimum_capacity(log_entries: int) -> int:
    return align_up(HEADER_SIZE + log_area_size(log_entries), 64) + MIN_HEAP


def pack_offset(index: int, offset: int) -> int:
    return (index << REGION_SHIFT) | offset


def region_index(offset: int) -> int:
    return offset >> REGION_SHIFT


def extension_path(path, index: int) -> Path:
    """`<primary>.<index>` for extension region `index` (1-based)."""
    path = Path(path)
    return path.with_name(f"{path.name}.{index}")


def region_files(path) -> list[Path]:
    """The primary file and every extension file found next to it, in index order."""
    path = Path(path)
    extensions = [p for p in path.parent.glob(f"{path.name}.*") if p.suffix[1:].isdigit()]
    return [path] + sorted(extensions, key=lambda p: int(p.suffix[1:]))


class CrashEmulator:
    """
    Counts persistence events (writes and persists) across the regions
    registered with it and simulates power loss at event `crash_at`.

    On firing, each live region writes its durable image to its backing file,
    with every unpersisted 8-byte word independently kept with probability
    `evict_probability`. Aligned 8-byte stores are therefore never torn.
    After firing, every further event raises SimulatedCrash.
    """

    def __init__(self, crash_at: Optional[int] = None, seed: int = 0, evict_probability: float = 0.5):
        self.crash_at = crash_at
        self.evict_probability = evict_probability
        self.events = 0
        self.crashed = False
        self._rng = np.random.default_rng(seed)
        self._regions: list["PersistentRegion"] = []
        self._lock = threading.Lock()

    def register(self, region: "PersistentRegion"):
        self._regions.append(region)

    def tick(self):
        with self._lock:
            if self.crashed:
                raise SimulatedCrash("region frozen after crash")
            self.events += 1
            if self.crash_at is not None and self.events >= self.crash_at:
                self._fire()
                raise SimulatedCrash(f"crash point {self.crash_at} reached")

    def crash_now(self):
        """Simulate power loss immediately (idle crash)."""
        with self._lock:
            if not self.crashed:
                self._fire()

    def _fire(self):
        self.crashed = True
        logger.warning("Crash emulator firing after %d events", self.events)
        for region in self._regions:
            if not region.closed:
                region._write_crash_image(self._rng, self.evict_probability)


class Heap:
    """
    Boundary-tag heap over [start, end) of a region.

    The persistent state is the walkable sequence of 16-byte block headers.
    The size-class free lists and the allocation map are volatile and are
    rebuilt by walking the tags. Every mutation runs inside a region
    transaction, which also serializes access to the volatile state.
    """

    def __init__(self, region: "PersistentRegion", start: int, end: int):
        if start % GRANULE or end % GRANULE or end - start < MIN_BLOCK:
            raise ParameterError(f"bad heap extent [{start}, {end})")
        self.region = region
        self.start = start
        self.end = end
        self._free: dict[int, int] = {}
        self._free_sorted: list[int] = []
        self._classes: list[set] = [set() for _ in range(64)]
        self._allocated: dict[int, int] = {}
        self._free_bytes = 0

    # --- formatting / rebuild ---------------------------------------------

    @classmethod
    def format(cls, region: "PersistentRegion", start: int, end: int) -> "Heap":
        """Lay down a single free block spanning the extent (fresh memory, unlogged)."""
        heap = cls(region, start, end)
        region.write(start, _BLOCK.pack(end - start, FREE_TAG))
        heap._add_free(start, end - start)
        return heap

    def rebuild(self):
        """Discard volatile state and rebuild it from the persistent block tags."""
        self._free.clear()
        self._free_sorted.clear()
        for cls_set in self._classes:
            cls_set.clear()
        self._allocated.clear()
        self._free_bytes = 0

        blocks = self._walk()
        merges = []
        run_start = None
        run_length = 0
        for h, length, tag in blocks:
            if tag == FREE_TAG:
                if run_start is None:
                    run_start, run_length = h, length
                else:
                    run_length += length
                    merges.append((run_start, run_length))
            else:
                if run_start is not None:
                    self._add_free(run_start, run_length)
                    run_start = None
                self._allocated[h] = length
        if run_start is not None:
            self._add_free(run_start, run_length)

        if merges:
            # Adjacent free blocks left behind by a crash: fold them persistently
            # so volatile extents and persistent blocks stay one-to-one.
            final = {}
            for h, length in merges:
                final[h] = length
            with self.region.transaction():
                for h, length in final.items():
                    self.region.tx_log(h, BLOCK_HEADER)
                    self.region.write(h, _BLOCK.pack(length, FREE_TAG))
            logger.info("Heap rebuild merged %d adjacent free blocks", len(final))

    def _walk(self) -> list[tuple[int, int, int]]:
        blocks = []
        h = self.start
        while h < self.end:
            length, tag = self.region.unpack_from(_BLOCK, h)
            if tag not in (FREE_TAG, ALLOC_TAG) or length < MIN_BLOCK or length % GRANULE or h + length > self.end:
                raise HeapCorruption(f"bad block tag at offset {h} (length={length}, tag={tag:#x})")
            blocks.append((h, length, tag))
            h += length
        return blocks

    def check(self) -> list[str]:
        """Walk the tags and compare with the volatile allocator. Returns a list of problems."""
        problems = []
        try:
            blocks = self._walk()
        except HeapCorruption as e:
            return [str(e)]
        free = {h: length for h, length, tag in blocks if tag == FREE_TAG}
        allocated = {h: length for h, length, tag in blocks if tag == ALLOC_TAG}
        if free != self._free:
            problems.append("volatile free map disagrees with block tags")
        if allocated != self._allocated:
            problems.append("volatile allocation map disagrees with block tags")
        for (h1, l1, t1), (h2, _, t2) in zip(blocks, blocks[1:]):
            if t1 == FREE_TAG and t2 == FREE_TAG:
                problems.append(f"adjacent free blocks at {h1} and {h2}")
        if sum(length for _, length, _ in blocks) != self.end - self.start:
            problems.append("blocks do not tile the heap")
        return problems

    # --- volatile bookkeeping -----------------------------------------------

    @staticmethod
    def _class_of(length: int) -> int:
        return length.bit_length() - 1

    def _add_free(self, h: int, length: int):
        self._free[h] = length
        bisect.insort(self._free_sorted, h)
        self._classes[self._class_of(length)].add(h)
        self._free_bytes += length

    def _remove_free(self, h: int):
        length = self._free.pop(h)
        idx = bisect.bisect_left(self._free_sorted, h)
        del self._free_sorted[idx]
        self._classes[self._class_of(length)].discard(h)
        self._free_bytes -= length

    # --- allocation ---------------------------------------------------------

    @staticmethod
    def _fit(e: int, length: int, need: int, alignment: int) -> Optional[tuple[int, int]]:
        p = align_up(e + BLOCK_HEADER, alignment)
        lead = p - BLOCK_HEADER - e
        if 0 < lead < MIN_BLOCK:
            p = align_up(e + MIN_BLOCK + BLOCK_HEADER, alignment)
        if p + need > e + length:
            return None
        return p - BLOCK_HEADER, p

    def alloc(self, size: int, alignment: int = GRANULE) -> int:
        """Allocate `size` bytes aligned to `alignment`; returns the payload offset."""
        if size <= 0:
            raise ParameterError(f"allocation size must be positive: {size}")
        if not _is_power_of_two(alignment):
            raise ParameterError(f"alignment must be a power of two: {alignment}")
        alignment = max(alignment, GRANULE)
        need = align_up(size, GRANULE)
        with self.region.transaction():
            first_class = self._class_of(need + BLOCK_HEADER)
            for cls_set in self._classes[first_class:]:
                for e in sorted(cls_set):
                    placement = self._fit(e, self._free[e], need, alignment)
                    if placement is not None:
                        return self._carve(e, placement[0], placement[1], need)
        raise OutOfMemory(f"no free extent for {size} bytes (align {alignment}, free {self._free_bytes})")

    def _carve(self, e: int, h: int, p: int, need: int) -> int:
        end = e + self._free[e]
        block_end = p + need
        remainder = end - block_end
        if remainder < MIN_BLOCK:
            block_end = end
            remainder = 0
        region = self.region
        region.tx_log(e, BLOCK_HEADER)
        if h > e:
            region.write(e, _BLOCK.pack(h - e, FREE_TAG))
        region.write(h, _BLOCK.pack(block_end - h, ALLOC_TAG))
        if remainder:
            region.write(block_end, _BLOCK.pack(remainder, FREE_TAG))

        self._remove_free(e)
        if h > e:
            self._add_free(e, h - e)
        if remainder:
            self._add_free(block_end, remainder)
        self._allocated[h] = block_end - h
        return p

    def free(self, offset: int):
        h = offset - BLOCK_HEADER
        with self.region.transaction():
            if h not in self._allocated:
                raise HeapCorruption(f"free of unallocated offset {offset} (double free?)")
            length, tag = self.region.unpack_from(_BLOCK, h)
            if tag != ALLOC_TAG or length != self._allocated[h]:
                raise HeapCorruption(f"boundary tag mismatch at offset {offset}")
            start, total = h, length
            nxt = h + length
            merge_next = nxt in self._free
            if merge_next:
                total += self._free[nxt]
            idx = bisect.bisect_left(self._free_sorted, h) - 1
            prev = self._free_sorted[idx] if idx >= 0 else None
            merge_prev = prev is not None and prev + self._free[prev] == h
            if merge_prev:
                start = prev
                total += self._free[prev]
            self.region.tx_log(start, BLOCK_HEADER)
            self.region.write(start, _BLOCK.pack(total, FREE_TAG))

            del self._allocated[h]
            if merge_next:
                self._remove_free(nxt)
            if merge_prev:
                self._remove_free(prev)
            self._add_free(start, total)

    # --- accounting ---------------------------------------------------------

    @property
    def free_bytes(self) -> int:
        return self._free_bytes

    @property
    def used_bytes(self) -> int:
        return (self.end - self.start) - self._free_bytes

    def allocations(self) -> dict[int, int]:
        """Payload offset -> usable payload length for every live allocation."""
        return {h + BLOCK_HEADER: length - BLOCK_HEADER for h, length in self._allocated.items()}

    def is_allocated(self, offset: int) -> bool:
        return offset - BLOCK_HEADER in self._allocated


@dataclass
class _Mapping:
    """One region file: its buffer and, when emulated, the durable image and dirty words."""
    path: Path
    buf: object  # mmap.mmap, or bytearray when emulated
    capacity: int
    file: object = None
    media: Optional[bytearray] = None
    dirty: Optional[bytearray] = None


class PersistentRegion:
    """A pool's persistent memory. Use region_create() / region_open()."""

    def __init__(self, path: Path, emulator: Optional[CrashEmulator] = None, lock=None):
        self.path = Path(path)
        self.closed = False
        self._maps: list[_Mapping] = []
        self._emulator = emulator
        if emulator is not None:
            emulator.register(self)
        self._lock = lock or threading.RLock()
        self._attached = False
        self._depth = 0
        self._owner = None
        self._tx_writes: list[tuple[int, int]] = []
        self._log = 0
        self._log_capacity = 0
        self._log_count = 0
        self.heap: Optional[Heap] = None  # primary region heap
        self._arenas: list[Heap] = []  # one heap per region file, in index order
        self._heaps: list[Heap] = []

    # --- lifecycle ----------------------------------------------------------

    @classmethod
    def create(cls, path, capacity: int, log_entries: int = config.UNDO_LOG_ENTRIES,
               emulator: Optional[CrashEmulator] = None) -> "PersistentRegion":
        path = Path(path)
        capacity = align_up(capacity, 4096)
        if log_entries < 1:
            raise ParameterError("undo log needs at least one entry")
        if capacity < minimum_capacity(log_entries):
            raise CapacityError(f"capacity {capacity} below minimum {minimum_capacity(log_entries)}")
        try:
            fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o644)
        except FileExistsError:
            raise AlreadyExists(f"region already exists: {path}")
        with os.fdopen(fd, "r+b") as f:
            f.truncate(capacity)
        region = cls(path, emulator)
        region._maps.append(region._map(path, capacity))
        region._initialize(log_entries)
        return region

    @classmethod
    def open(cls, path, emulator: Optional[CrashEmulator] = None) -> "PersistentRegion":
        path = Path(path)
        capacity = _primary_capacity(path)
        region = cls(path, emulator)
        try:
            region._maps.append(region._map(path, capacity))
            region._map_extensions()
            region._recover()
        except Exception:
            region._release()
            raise
        return region

    @classmethod
    def attach(cls, path, lock) -> "PersistentRegion":
        """
        Map a region that another process has open, without recovery.

        Transactions serialize with the owner through `lock`. The attached view
        has no pool heap: it allocates only from sub-heaps it formats itself.
        Extension files appended later are mapped on first access.
        """
        path = Path(path)
        region = cls(path, None, lock)
        region._attached = True
        try:
            region._maps.append(region._map(path, _primary_capacity(path)))
            region._map_extensions()
            region._log = region.read_u64(OFF_UNDO_LOG)
            region._log_capacity = region.read_u64(region._log + 16)
        except Exception:
            region._release()
            raise
        return region

    def _map(self, path: Path, capacity: int) -> _Mapping:
        if self._emulator is not None:
            with open(path, "rb") as f:
                data = bytearray(f.read(capacity))
            if len(data) < capacity:
                raise FormatError(f"truncated region file {path}")
            return _Mapping(path, data, capacity, media=bytearray(data), dirty=bytearray(capacity // 8))
        fileobj = open(path, "r+b")
        try:
            return _Mapping(path, mmap.mmap(fileobj.fileno(), capacity), capacity, fileobj)
        except Exception:
            fileobj.close()
            raise

    def _map_extensions(self):
        """Map every extension file the region table lists that is not mapped yet."""
        count = self.read_u64(OFF_REGION_COUNT)
        if count >= MAX_REGIONS:
            raise FormatError(f"region table of {self.path} lists {count} extensions")
        for index in range(len(self._maps), count + 1):
            capacity = self.read_u64(REGION_TABLE + 8 * (index - 1))
            path = extension_path(self.path, index)
            try:
                size = path.stat().st_size
            except FileNotFoundError:
                raise FormatError(f"missing region file {path}")
            if size < capacity or capacity < EXTENSION_HEADER + MIN_HEAP:
                raise FormatError(f"region file {path} is {size} bytes, table says {capacity}")
            mapping = self._map(path, capacity)
            self._maps.append(mapping)
            head = self.read(pack_offset(index, 0), 24)
            if head[:8] != EXTENSION_MAGIC or struct.unpack_from("<QQ", head, 8) != (index, capacity):
                raise FormatError(f"bad extension header in {path}")

    def _initialize(self, log_entries: int):
        capacity = self._maps[0].capacity
        log = HEADER_SIZE
        heap_start = align_up(log + log_area_size(log_entries), 64)
        header = bytearray(HEADER_SIZE)
        header[OFF_MAGIC:OFF_MAGIC + 8] = MAGIC
        struct.pack_into("<II", header, OFF_VERSION, FORMAT_VERSION, 0)
        struct.pack_into("<QQQQQ", header, OFF_ROOT, NIL, HEAP_META, log, capacity, 0)
        _EXTENT.pack_into(header, HEAP_META, heap_start, capacity)
        self.write(0, bytes(header))
        self.write(log, struct.pack("<QQQQ", LOG_IDLE, 0, log_entries, 0))
        self._log = log
        self._log_capacity = log_entries
        self.heap = Heap.format(self, heap_start, capacity)
        self._arenas = [self.heap]
        self._heaps = [self.heap]
        self.persist_all()

    def _recover(self):
        log = self.read_u64(OFF_UNDO_LOG)
        heap_meta = self.read_u64(OFF_HEAP_META)
        if log < HEADER_SIZE or heap_meta >= HEADER_SIZE:
            raise FormatError(f"corrupt header offsets in {self.path}")
        self._log = log
        self._log_capacity = self.read_u64(log + 16)
        if log + log_area_size(self._log_capacity) > self._maps[0].capacity:
            raise FormatError(f"undo log overruns region {self.path}")

        state = self.read_u64(log)
        if state == LOG_ACTIVE:
            count = self.read_u64(log + 8)
            if count > self._log_capacity:
                raise FormatError(f"undo log count {count} exceeds capacity")
            for i in reversed(range(count)):
                entry = log + LOG_HEADER_SIZE + i * LOG_ENTRY_SIZE
                offset, length = self.unpack_from(_LOG_ENTRY_HEAD, entry)
                if length > LOG_PAYLOAD_MAX:
                    raise FormatError(f"corrupt undo entry {i}")
                try:
                    self._check_range(offset, length)
                except BoundsError:
                    raise FormatError(f"undo entry {i} points outside the pool")
                old = self.read(entry + 16, length)
                self._store(offset, old)
                self.persist(offset, length)
            logger.info("Rolled back interrupted transaction (%d undo entries) in %s", count, self.path)
        if state != LOG_IDLE:
            self._store(log + 8, _U64.pack(0))
            self.persist(log + 8, 8)
            self.atomic_store_64(log, LOG_IDLE)
            self.persist(log, 8)

        # An interrupted expansion leaves its file mapped but out of the table
        in_use = self.read_u64(OFF_REGION_COUNT) + 1
        while len(self._maps) > in_use:
            self._unmap(self._maps.pop())

        heap_start, heap_end = self.unpack_from(_EXTENT, heap_meta)
        if heap_end > self._maps[0].capacity or heap_start >= heap_end:
            raise FormatError(f"corrupt heap metadata in {self.path}")
        self.heap = Heap(self, heap_start, heap_end)
        self._arenas = [self.heap] + [
            Heap(self, pack_offset(i, EXTENSION_HEADER), pack_offset(i, m.capacity))
            for i, m in enumerate(self._maps) if i
        ]
        self._heaps = list(self._arenas)
        for heap in self._arenas:
            heap.rebuild()

    def close(self):
        """Clean close: everything written becomes durable."""
        if self.closed:
            return
        for m in self._maps:
            if self._emulator is None:
                m.buf.flush()
            elif not self._emulator.crashed:
                m.media[:] = m.buf
                with open(m.path, "r+b") as f:
                    f.truncate(len(m.media))
                    f.write(m.media)
        self._release()

    def _release(self):
        self.closed = True
        for m in self._maps:
            self._unmap(m)

    def _unmap(self, m: _Mapping):
        if self._emulator is None:
            m.buf.close()
            m.file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _write_crash_image(self, rng: np.random.Generator, evict_probability: float):
        for m in self._maps:
            image = bytearray(m.media)
            flags = np.frombuffer(m.dirty, dtype=np.uint8)
            dirty = np.flatnonzero(flags)
            if len(dirty):
                keep = dirty[rng.random(len(dirty)) < evict_probability]
                words = np.frombuffer(image, dtype=np.uint64)
                words[keep] = np.frombuffer(m.buf, dtype=np.uint64)[keep]
                del words
            del flags
            with open(m.path, "r+b") as f:
                f.truncate(len(image))
                f.write(image)

    # --- raw access ---------------------------------------------------------

    @property
    def capacity(self) -> int:
        """Total bytes across every region file."""
        return sum(m.capacity for m in self._maps)

    @property
    def region_count(self) -> int:
        return len(self._maps)

    def region_capacities(self) -> list[int]:
        return [m.capacity for m in self._maps]

    @property
    def lock(self):
        """The region lock; held for the whole of every transaction."""
        return self._lock

    @property
    def emulated(self) -> bool:
        return self._emulator is not None

    def _locate(self, offset: int) -> tuple[_Mapping, int]:
        index = offset >> REGION_SHIFT
        if index >= len(self._maps) and self._attached:
            self._map_extensions()
        if index >= len(self._maps):
            raise BoundsError(f"offset {offset:#x} names region {index}, pool has {len(self._maps)}")
        return self._maps[index], offset & REGION_MASK

    def _check_range(self, offset: int, length: int) -> tuple[_Mapping, int]:
        if offset < 0 or length < 0:
            raise BoundsError(f"range [{offset}, {offset + length}) is negative")
        m, local = self._locate(offset)
        if local + length > m.capacity:
            raise BoundsError(f"range [{offset:#x}, +{length}) outside region file of {m.capacity} bytes")
        return m, local

    def contains(self, offset: int, length: int) -> bool:
        """True if [offset, offset+length) lies inside a heap area of one region file."""
        if offset < 0 or length < 0:
            return False
        index, local = offset >> REGION_SHIFT, offset & REGION_MASK
        if index >= len(self._maps) and self._attached:
            self._map_extensions()
        if index >= len(self._maps):
            return False
        floor = self.read_u64(HEAP_META) if index == 0 else EXTENSION_HEADER
        return floor <= local and local + length <= self._maps[index].capacity

    def read(self, offset: int, length: int) -> bytes:
        m, local = self._check_range(offset, length)
        return bytes(m.buf[local:local + length])

    def read_u64(self, offset: int) -> int:
        m, local = self._check_range(offset, 8)
        return _U64.unpack_from(m.buf, local)[0]

    def unpack_from(self, fmt: struct.Struct, offset: int) -> tuple:
        m, local = self._check_range(offset, fmt.size)
        return fmt.unpack_from(m.buf, local)

    def read_array(self, offset: int, dtype, count: int) -> np.ndarray:
        """Copy `count` items of a numpy dtype out of the region."""
        m, local = self._check_range(offset, count * np.dtype(dtype).itemsize)
        return np.frombuffer(m.buf, dtype=dtype, count=count, offset=local).copy()

    def _store(self, offset: int, data: bytes):
        if self._emulator is not None:
            self._emulator.tick()
        m, local = self._locate(offset)
        n = len(data)
        m.buf[local:local + n] = data
        if m.dirty is not None and n:
            first, last = local // 8, (local + n - 1) // 8 + 1
            m.dirty[first:last] = b"\x01" * (last - first)

    def write(self, offset: int, data: bytes):
        self._check_range(offset, len(data))
        self._store(offset, data)
        if self._depth:
            self._tx_writes.append((offset, len(data)))

    def write_u64(self, offset: int, value: int):
        self.write(offset, _U64.pack(value))

    def atomic_store_64(self, offset: int, value: int):
        """An aligned 8-byte store; the crash model never tears it."""
        if offset % 8:
            raise AlignmentError(f"atomic store at misaligned offset {offset}")
        self.write(offset, _U64.pack(value & 0xFFFFFFFFFFFFFFFF))

    def persist(self, offset: int, length: int):
        """Durability barrier for [offset, offset+length)."""
        m, local = self._check_range(offset, length)
        if length == 0:
            return
        if self._emulator is not None:
            self._emulator.tick()
            first, last = local // 8, (local + length - 1) // 8 + 1
            m.media[first * 8:last * 8] = m.buf[first * 8:last * 8]
            m.dirty[first:last] = bytes(last - first)
        elif config.FLUSH_MODE == "msync":
            start = local - local % mmap.ALLOCATIONGRANULARITY
            m.buf.flush(start, local + length - start)

    def persist_all(self):
        for index, m in enumerate(self._maps):
            if self._emulator is not None:
                self.persist(pack_offset(index, 0), m.capacity)
            elif config.FLUSH_MODE == "msync":
                m.buf.flush()

    def snapshot(self) -> bytes:
        """Copy of the current (cache-visible) contents of every region file, for shadow comparisons."""
        return b"".join(bytes(m.buf) for m in self._maps)

    # --- root ---------------------------------------------------------------

    @property
    def root(self) -> int:
        return self.read_u64(OFF_ROOT)

    def set_root(self, offset: int):
        if offset != NIL and not self.is_allocated(offset):
            raise ParameterError(f"root must be a live allocation: {offset}")
        with self.transaction():
            self.tx_log(OFF_ROOT, 8)
            self.atomic_store_64(OFF_ROOT, offset)

    # --- undo-log transactions ---------------------------------------------

    @property
    def in_transaction(self) -> bool:
        return self._depth > 0 and self._owner == threading.get_ident()

    def tx_begin(self):
        self._lock.acquire()
        if self._depth:
            self._lock.release()
            raise StateError("transaction already active")
        try:
            self._begin_locked()
        except BaseException:
            self._lock.release()
            raise

    def tx_commit(self):
        if not self.in_transaction:
            raise StateError("no active transaction")
        if self._depth != 1:
            raise StateError("nested transaction still open")
        try:
            self._commit_locked()
        finally:
            self._lock.release()

    def tx_log(self, offset: int, length: int):
        """Record the pre-image of [offset, offset+length) before it is overwritten."""
        if not self.in_transaction:
            raise StateError("tx_log outside of a transaction")
        if length <= 0 or length > LOG_PAYLOAD_MAX:
            raise ParameterError(f"undo entry length must be 1..{LOG_PAYLOAD_MAX}: {length}")
        m, local = self._check_range(offset, length)
        if self._log_count >= self._log_capacity:
            raise LogFull(f"undo log full ({self._log_capacity} entries)")
        entry = self._log + LOG_HEADER_SIZE + self._log_count * LOG_ENTRY_SIZE
        old = bytes(m.buf[local:local + length])
        self._store(entry, _LOG_ENTRY_HEAD.pack(offset, length) + old.ljust(LOG_PAYLOAD_MAX, b"\0"))
        self.persist(entry, LOG_ENTRY_SIZE)
        self._log_count += 1
        self._store(self._log + 8, _U64.pack(self._log_count))
        self.persist(self._log + 8, 8)

    def tx_log_range(self, offset: int, length: int):
        """Log an arbitrary range as a sequence of <=64-byte entries."""
        end = offset + length
        while offset < end:
            step = min(LOG_PAYLOAD_MAX, end - offset)
            self.tx_log(offset, step)
            offset += step

    @contextmanager
    def transaction(self):
        """Crash-atomic section. Nests; only the outermost level commits."""
        with self._lock:
            nested = self._depth > 0
            if nested:
                self._depth += 1
            else:
                self._begin_locked()
            try:
                yield self
            except SimulatedCrash:
                raise
            except BaseException:
                if nested:
                    self._depth -= 1
                else:
                    self._abort_locked()
                raise
            else:
                if nested:
                    self._depth -= 1
                else:
                    self._commit_locked()

    def _begin_locked(self):
        self._store(self._log + 8, _U64.pack(0))
        self.persist(self._log + 8, 8)
        self.atomic_store_64(self._log, LOG_ACTIVE)
        self.persist(self._log, 8)
        self._log_count = 0
        self._tx_writes = []
        self._depth = 1
        self._owner = threading.get_ident()

    def _commit_locked(self):
        self._depth = 0
        writes, self._tx_writes = self._tx_writes, []
        if self._emulator is not None:
            for offset, length in _coalesce(writes):
                self.persist(offset, length)
        elif config.FLUSH_MODE == "msync":
            for index in sorted({offset >> REGION_SHIFT for offset, _ in writes}):
                self._maps[index].buf.flush()
        self.atomic_store_64(self._log, LOG_IDLE)
        self.persist(self._log, 8)
        self._owner = None

    def _abort_locked(self):
        """Roll back an in-process failure using the undo log, then rebuild heaps."""
        self._depth = 0
        self._tx_writes = []
        for i in reversed(range(self._log_count)):
            entry = self._log + LOG_HEADER_SIZE + i * LOG_ENTRY_SIZE
            offset, length = self.unpack_from(_LOG_ENTRY_HEAD, entry)
            self._store(offset, self.read(entry + 16, length))
            self.persist(offset, length)
        self.atomic_store_64(self._log, LOG_IDLE)
        self.persist(self._log, 8)
        logger.warning("Aborted transaction in %s (%d undo entries restored)", self.path, self._log_count)
        self._log_count = 0
        self._owner = None
        for heap in self._heaps:
            heap.rebuild()

    def share_lock(self, lock):
        """Swap in a transaction lock shared with another process attached to this pool."""
        with self._lock:
            if self._depth:
                raise StateError("cannot swap the lock inside a transaction")
            self._lock = lock

    # --- heap ---------------------------------------------------------------

    def alloc(self, size: int, alignment: int = GRANULE) -> int:
        """Allocate from the first region file with room, primary first."""
        if not self._arenas:
            raise StateError(f"{self.path} is attached without a pool heap")
        error = None
        for heap in self._arenas:
            try:
                return heap.alloc(size, alignment)
            except OutOfMemory as e:
                error = e
        raise error

    def _arena(self, offset: int) -> Heap:
        index = offset >> REGION_SHIFT
        if index >= len(self._arenas):
            raise HeapCorruption(f"offset {offset:#x} is not in a pool heap")
        return self._arenas[index]

    def free(self, offset: int):
        self._arena(offset).free(offset)

    def is_allocated(self, offset: int) -> bool:
        index = offset >> REGION_SHIFT
        return index < len(self._arenas) and self._arenas[index].is_allocated(offset)

    @property
    def free_bytes(self) -> int:
        return sum(heap.free_bytes for heap in self._arenas)

    @property
    def used_bytes(self) -> int:
        return sum(heap.used_bytes for heap in self._arenas)

    def allocations(self) -> dict[int, int]:
        out = {}
        for heap in self._arenas:
            out.update(heap.allocations())
        return out

    def check_heaps(self) -> list[str]:
        problems = []
        for index, heap in enumerate(self._arenas):
            problems += [f"region {index}: {p}" for p in heap.check()]
        return problems

    def register_heap(self, heap: Heap):
        """Sub-heaps formatted inside allocations are rebuilt with the pool heaps on abort."""
        self._heaps.append(heap)

    def unregister_heap(self, heap: Heap):
        if heap in self._heaps:
            self._heaps.remove(heap)

    def expand(self, size: int) -> int:
        """
        Append an extension region file of at least `size` bytes and add its
        heap to the allocator. Returns the new region index.

        The file is written and persisted before the region table names it;
        a crash in between leaves an orphan file that the next expansion
        overwrites.
        """
        if self._attached:
            raise StateError("an attached view cannot expand the pool")
        capacity = align_up(max(size, EXTENSION_HEADER + MIN_HEAP), 4096)
        if capacity > REGION_MASK:
            raise CapacityError(f"region file of {capacity} bytes exceeds the packed offset range")
        with self._lock:
            if self._depth:
                raise StateError("cannot expand inside a transaction")
            index = len(self._maps)
            if index >= MAX_REGIONS:
                raise CapacityError(f"pool {self.path} already has {index} region files")
            path = extension_path(self.path, index)
            with open(path, "wb") as f:
                f.truncate(capacity)
            self._maps.append(self._map(path, capacity))
            try:
                base = pack_offset(index, 0)
                self.write(base, EXTENSION_MAGIC + struct.pack("<QQ", index, capacity))
                self.persist(base, 24)
                heap = Heap.format(self, pack_offset(index, EXTENSION_HEADER), pack_offset(index, capacity))
                self.persist(heap.start, BLOCK_HEADER)
                # the slot is unused until the count names it
                slot = REGION_TABLE + 8 * (index - 1)
                self.atomic_store_64(slot, capacity)
                self.persist(slot, 8)
                with self.transaction():
                    self.tx_log(OFF_REGION_COUNT, 8)
                    self.atomic_store_64(OFF_REGION_COUNT, index)
            except SimulatedCrash:
                raise
            except BaseException:
                self._unmap(self._maps.pop())
                raise
            self._arenas.append(heap)
            self._heaps.append(heap)
        logger.info("Expanded pool %s with region file %s (%d bytes)", self.path.name, path.name, capacity)
        return index


def _primary_capacity(path: Path) -> int:
    try:
        size = path.stat().st_size
    except FileNotFoundError:
        raise FormatError(f"no region at {path}")
    if size < HEADER_SIZE:
        raise FormatError(f"truncated region {path} ({size} bytes)")
    with open(path, "rb") as f:
        head = f.read(HEADER_SIZE)
    if head[OFF_MAGIC:OFF_MAGIC + 8] != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version = struct.unpack_from("<I", head, OFF_VERSION)[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} in {path}")
    capacity = _U64.unpack_from(head, OFF_CAPACITY)[0]
    if capacity > size or capacity < HEADER_SIZE or capacity % 8:
        raise FormatError(f"truncated region {path}: header says {capacity} bytes, file has {size}")
    return capacity


def _coalesce(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged = []
    for offset, length in sorted(ranges):
        if merged and offset <= merged[-1][0] + merged[-1][1]:
            last_off, last_len = merged[-1]
            merged[-1] = (last_off, max(last_len, offset + length - last_off))
        else:
            merged.append((offset, length))
    return merged


def region_create(path, capacity: int, log_entries: int = config.UNDO_LOG_ENTRIES,
                  emulator: Optional[CrashEmulator] = None) -> PersistentRegion:
    return PersistentRegion.create(path, capacity, log_entries, emulator)


def region_open(path, emulator: Optional[CrashEmulator] = None) -> PersistentRegion:
    return PersistentRegion.open(path, emulator)


def region_delete(path):
    """Remove the primary file and every extension file of a pool."""
    for p in region_files(path):
        p.unlink(missing_ok=True)

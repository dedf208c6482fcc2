"""
Persistent hopscotch hash table.

Everything lives in the region: a 64-byte table header, a bucket array of
{hop_bitmap u64, entry_offset u64} pairs and one heap allocation per entry
holding {key_off, key_len, value_off, value_len, lock_word} followed by the
key bytes. Bit i of a bucket's hop bitmap is set iff bucket (home + i) mod
bucket_count holds an entry whose home is this bucket.

All mutations run inside region transactions. Bucket words are logged the
first time an operation touches them.
"""

import bisect
import hashlib
import logging
import re
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from active_store.errors import FormatError, NotFound, ParameterError
from active_store.pmem import NIL, PersistentRegion

logger = logging.getLogger(__name__)

TABLE_MAGIC = 0x314C4254534F4848  # "HHOSTBL1"
TABLE_HEADER_SIZE = 64
BUCKET_SIZE = 16
ENTRY_SIZE = 40
DEFAULT_NEIGHBORHOOD = 32
DEFAULT_BUCKETS = 1024

# Header field offsets
H_MAGIC = 0
H_BUCKET_COUNT = 8
H_NEIGHBORHOOD = 16
H_SEED = 24
H_BUCKETS = 32
H_COUNT = 40

# Entry field offsets
E_KEY_OFF = 0
E_KEY_LEN = 8
E_VALUE = 16  # {value_off, value_len}
E_LOCK = 32

_ENTRY = struct.Struct("<QQQQQ")
_VALUE_REF = struct.Struct("<QQ")
_KEY_REF = struct.Struct("<QQ")


@dataclass(frozen=True)
class ValueRef:
    offset: int
    length: int


@dataclass(frozen=True)
class Inserted:
    pass


@dataclass(frozen=True)
class Replaced:
    old: ValueRef


@dataclass(frozen=True)
class Erased:
    old: ValueRef


@dataclass(frozen=True)
class Entry:
    offset: int
    key: bytes
    value: ValueRef
    lock_word: int


def key_hash(key: bytes, seed: int) -> int:
    """Seeded 64-bit hash over key bytes."""
    digest = hashlib.blake2b(key, digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(digest.digest(), "little")


class _RegionBuckets:
    """Bucket accessor over the live array; logs each touched bucket once."""

    def __init__(self, region: PersistentRegion, base: int):
        self.region = region
        self.base = base
        self._logged: set[int] = set()

    def hop(self, b: int) -> int:
        return self.region.read_u64(self.base + b * BUCKET_SIZE)

    def entry(self, b: int) -> int:
        return self.region.read_u64(self.base + b * BUCKET_SIZE + 8)

    def _log(self, b: int):
        if b not in self._logged:
            self.region.tx_log(self.base + b * BUCKET_SIZE, BUCKET_SIZE)
            self._logged.add(b)

    def set_hop(self, b: int, value: int):
        self._log(b)
        self.region.write_u64(self.base + b * BUCKET_SIZE, value)

    def set_entry(self, b: int, value: int):
        self._log(b)
        self.region.write_u64(self.base + b * BUCKET_SIZE + 8, value)


class _ArrayBuckets:
    """Bucket accessor over a volatile (n, 2) array, used to lay out a resized table."""

    def __init__(self, array: np.ndarray):
        self.array = array

    def hop(self, b: int) -> int:
        return int(self.array[b, 0])

    def entry(self, b: int) -> int:
        return int(self.array[b, 1])

    def set_hop(self, b: int, value: int):
        self.array[b, 0] = value

    def set_entry(self, b: int, value: int):
        self.array[b, 1] = value


def _hopscotch_insert(buckets, n: int, neighborhood: int, home: int, entry: int) -> bool:
    """
    Place `entry` within `neighborhood` slots of `home`, displacing entries
    toward the free slot as needed. Returns False when no displacement
    sequence can bring a free slot into range (the table must grow).
    """
    for dist in range(n):
        free = (home + dist) % n
        if buckets.entry(free) == NIL:
            break
    else:
        return False

    while dist >= neighborhood:
        for back in range(neighborhood - 1, 0, -1):
            base = (free - back) % n
            hop = buckets.hop(base)
            movable = hop & ((1 << back) - 1)
            if movable:
                j = (movable & -movable).bit_length() - 1
                src = (base + j) % n
                buckets.set_entry(free, buckets.entry(src))
                buckets.set_entry(src, NIL)
                buckets.set_hop(base, (hop & ~(1 << j)) | (1 << back))
                dist -= back - j
                free = src
                break
        else:
            return False

    buckets.set_entry(free, entry)
    buckets.set_hop(home, buckets.hop(home) | (1 << dist))
    return True


class HopscotchTable:
    """Key -> ValueRef index stored in a PersistentRegion."""

    def __init__(self, region: PersistentRegion, offset: int):
        self.region = region
        self.offset = offset
        self.resize_count = 0
        self.load_at_last_resize: Optional[float] = None
        self._digest: Optional[list[bytes]] = None

    # --- lifecycle ----------------------------------------------------------

    @classmethod
    def create(cls, region: PersistentRegion, initial_buckets: int = DEFAULT_BUCKETS,
               neighborhood: int = DEFAULT_NEIGHBORHOOD, seed: int = 0x5EED) -> "HopscotchTable":
        if not 1 <= neighborhood <= 64:
            raise ParameterError(f"neighborhood must be 1..64: {neighborhood}")
        if initial_buckets < 2 * neighborhood or initial_buckets & (initial_buckets - 1):
            raise ParameterError(f"initial_buckets must be a power of two >= {2 * neighborhood}: {initial_buckets}")
        with region.transaction():
            header = region.alloc(TABLE_HEADER_SIZE, 64)
            buckets = region.alloc(initial_buckets * BUCKET_SIZE, 64)
            region.write(buckets, bytes(initial_buckets * BUCKET_SIZE))
            region.write(header, struct.pack("<QQQQQQQQ", TABLE_MAGIC, initial_buckets, neighborhood,
                                             seed, buckets, 0, 0, 0))
        return cls(region, header)

    @classmethod
    def open(cls, region: PersistentRegion, offset: int) -> "HopscotchTable":
        if region.read_u64(offset + H_MAGIC) != TABLE_MAGIC:
            raise FormatError(f"no hopscotch table at offset {offset}")
        return cls(region, offset)

    # --- header -------------------------------------------------------------

    @property
    def bucket_count(self) -> int:
        return self.region.read_u64(self.offset + H_BUCKET_COUNT)

    @property
    def neighborhood(self) -> int:
        return self.region.read_u64(self.offset + H_NEIGHBORHOOD)

    @property
    def seed(self) -> int:
        return self.region.read_u64(self.offset + H_SEED)

    @property
    def buckets_offset(self) -> int:
        return self.region.read_u64(self.offset + H_BUCKETS)

    def __len__(self) -> int:
        return self.region.read_u64(self.offset + H_COUNT)

    @property
    def load_factor(self) -> float:
        return len(self) / self.bucket_count

    def _set_count(self, value: int):
        self.region.tx_log(self.offset + H_COUNT, 8)
        self.region.write_u64(self.offset + H_COUNT, value)

    # --- entries ------------------------------------------------------------

    def _read_entry(self, entry: int) -> Entry:
        key_off, key_len, value_off, value_len, lock = self.region.unpack_from(_ENTRY, entry)
        return Entry(entry, self.region.read(key_off, key_len), ValueRef(value_off, value_len), lock)

    def _key_matches(self, entry: int, key: bytes) -> bool:
        key_off, key_len = self.region.unpack_from(_KEY_REF, entry)
        return key_len == len(key) and self.region.read(key_off, key_len) == key

    def _find(self, key: bytes) -> Optional[tuple[int, int, int]]:
        """Returns (home, slot, entry_offset) or None."""
        n = self.bucket_count
        base = self.buckets_offset
        home = key_hash(key, self.seed) % n
        hop = self.region.read_u64(base + home * BUCKET_SIZE)
        while hop:
            j = (hop & -hop).bit_length() - 1
            slot = (home + j) % n
            entry = self.region.read_u64(base + slot * BUCKET_SIZE + 8)
            if entry != NIL and self._key_matches(entry, key):
                return home, slot, entry
            hop &= hop - 1
        return None

    @staticmethod
    def _check_key(key: bytes):
        if not key:
            raise ParameterError("key must be non-empty")

    # --- operations ---------------------------------------------------------

    def get(self, key: bytes) -> ValueRef:
        return self.get_entry(key).value

    def get_entry(self, key: bytes) -> Entry:
        self._check_key(key)
        with self.region.lock:
            found = self._find(key)
            if found is None:
                raise NotFound(f"key not found: {key!r}")
            return self._read_entry(found[2])

    def __contains__(self, key: bytes) -> bool:
        with self.region.lock:
            return bool(key) and self._find(key) is not None

    def put(self, key: bytes, value_ref: ValueRef):
        """Insert or replace. Returns Inserted() or Replaced(old_ref)."""
        self._check_key(key)
        region = self.region
        with region.transaction():
            found = self._find(key)
            if found is not None:
                entry = found[2]
                old = ValueRef(*region.unpack_from(_VALUE_REF, entry + E_VALUE))
                region.tx_log(entry + E_VALUE, 16)
                region.write(entry + E_VALUE, _VALUE_REF.pack(value_ref.offset, value_ref.length))
                return Replaced(old)

            self._digest = None
            entry = region.alloc(ENTRY_SIZE + len(key), 8)
            region.write(entry, _ENTRY.pack(entry + ENTRY_SIZE, len(key), value_ref.offset,
                                            value_ref.length, 0) + key)
            n = self.bucket_count
            home = key_hash(key, self.seed) % n
            buckets = _RegionBuckets(region, self.buckets_offset)
            if not _hopscotch_insert(buckets, n, self.neighborhood, home, entry):
                self._resize(pending=(entry, key))
            self._set_count(len(self) + 1)
            return Inserted()

    def set_value(self, entry: int, value_ref: ValueRef):
        """Point an existing entry at a new value (used by resize)."""
        with self.region.transaction():
            self.region.tx_log(entry + E_VALUE, 16)
            self.region.write(entry + E_VALUE, _VALUE_REF.pack(value_ref.offset, value_ref.length))

    def erase(self, key: bytes) -> Erased:
        self._check_key(key)
        region = self.region
        with region.transaction():
            found = self._find(key)
            if found is None:
                raise NotFound(f"key not found: {key!r}")
            home, slot, entry = found
            self._digest = None
            old = ValueRef(*region.unpack_from(_VALUE_REF, entry + E_VALUE))
            n = self.bucket_count
            buckets = _RegionBuckets(region, self.buckets_offset)
            buckets.set_entry(slot, NIL)
            buckets.set_hop(home, buckets.hop(home) & ~(1 << ((slot - home) % n)))
            region.free(entry)
            self._set_count(len(self) - 1)
            return Erased(old)

    def _bucket_array(self) -> np.ndarray:
        n = self.bucket_count
        return self.region.read_array(self.buckets_offset, "<u8", 2 * n).reshape(n, 2)

    def entry_offsets(self) -> list[int]:
        with self.region.lock:
            arr = self._bucket_array()
        return [int(e) for e in arr[:, 1] if e != NIL]

    def iterate(self) -> Iterator[Entry]:
        """Every live entry exactly once, in bucket order."""
        for entry in self.entry_offsets():
            yield self._read_entry(entry)

    def _resize(self, pending: tuple[int, bytes]):
        """Grow the bucket array (doubling) and rehash everything into it."""
        region = self.region
        old_n = self.bucket_count
        old_base = self.buckets_offset
        neighborhood = self.neighborhood
        seed = self.seed
        entries = [(e, self._read_entry(e).key) for e in self.entry_offsets()]
        entries.append(pending)

        n = old_n * 2
        while True:
            layout = np.zeros((n, 2), dtype="<u8")
            buckets = _ArrayBuckets(layout)
            if all(_hopscotch_insert(buckets, n, neighborhood, key_hash(key, seed) % n, e) for e, key in entries):
                break
            n *= 2

        self.load_at_last_resize = len(self) / old_n
        new_base = region.alloc(n * BUCKET_SIZE, 64)
        region.write(new_base, layout.tobytes())
        region.tx_log(self.offset + H_BUCKET_COUNT, 8)
        region.write_u64(self.offset + H_BUCKET_COUNT, n)
        region.tx_log(self.offset + H_BUCKETS, 8)
        region.write_u64(self.offset + H_BUCKETS, new_base)
        region.free(old_base)
        self.resize_count += 1
        logger.info("Resized hopscotch table %d -> %d buckets (load %.2f)", old_n, n, self.load_at_last_resize)

    # --- lock words ---------------------------------------------------------

    def set_lock(self, entry: int, work_id: int):
        """Lock words arbitrate shard/ADO ownership; they are not logged."""
        self.region.atomic_store_64(entry + E_LOCK, work_id)

    def lock_word(self, entry: int) -> int:
        return self.region.read_u64(entry + E_LOCK)

    def clear_locks(self) -> int:
        """Reset lock words left behind by a previous process. Returns how many were held."""
        cleared = 0
        for entry in self.entry_offsets():
            if self.lock_word(entry):
                self.region.atomic_store_64(entry + E_LOCK, 0)
                self.region.persist(entry + E_LOCK, 8)
                cleared += 1
        if cleared:
            logger.info("Cleared %d stale pair locks", cleared)
        return cleared

    # --- key digest (FindKey) ----------------------------------------------

    def sorted_keys(self) -> list[bytes]:
        if self._digest is None:
            self._digest = sorted(e.key for e in self.iterate())
        return self._digest

    def find_key(self, pattern: bytes, mode: str = "prefix", position: int = 0) -> Optional[tuple[bytes, int]]:
        """
        First key at or after `position` in key order that matches `pattern`.
        Returns (key, next_position) or None when exhausted.
        """
        keys = self.sorted_keys()
        match mode:
            case "exact":
                i = bisect.bisect_left(keys, pattern, lo=position)
                if i < len(keys) and keys[i] == pattern:
                    return keys[i], i + 1
                return None
            case "prefix":
                i = bisect.bisect_left(keys, pattern, lo=position)
                if i < len(keys) and keys[i].startswith(pattern):
                    return keys[i], i + 1
                return None
            case "regex":
                compiled = re.compile(pattern)
                for i in range(position, len(keys)):
                    if compiled.search(keys[i]):
                        return keys[i], i + 1
                return None
            case _:
                raise ParameterError(f"unknown find mode: {mode}")

    # --- verification -------------------------------------------------------

    def check(self) -> list[str]:
        """Full scan: neighborhood distances, hop bitmaps, duplicate keys, entry count."""
        problems = []
        n = self.bucket_count
        neighborhood = self.neighborhood
        seed = self.seed
        arr = self._bucket_array()
        expected_hops = [0] * n
        seen: set[bytes] = set()
        live = 0
        for slot in range(n):
            entry = int(arr[slot, 1])
            if entry == NIL:
                continue
            live += 1
            key = self._read_entry(entry).key
            if key in seen:
                problems.append(f"duplicate key {key!r}")
            seen.add(key)
            home = key_hash(key, seed) % n
            dist = (slot - home) % n
            if dist >= neighborhood:
                problems.append(f"key {key!r} is {dist} slots from home")
            else:
                expected_hops[home] |= 1 << dist
        for b in range(n):
            if int(arr[b, 0]) != expected_hops[b]:
                problems.append(f"hop bitmap mismatch at bucket {b}")
        if live != len(self):
            problems.append(f"entry count {len(self)} but {live} live entries")
        return problems

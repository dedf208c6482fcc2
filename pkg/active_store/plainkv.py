"""
Plain-KV deployment of the CDP index: the same volume/quantum/summary logic
run entirely in the client, mirrored to the store with basic key-value ops.

Stored layout per volume:
    <volume>#q<ordinal>            the quantum frame: its packed 64-byte records,
                                   rewritten by one put per update
    <volume>#q<ordinal>#s          summary entries of a sealed quantum
    <volume>#manifest              JSON: config, quantum ordinals, base summary
Queries are answered from the client's local copies alone; age-out is
explicit pair deletion.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from active_store.cdp import (
    DEFAULT_CAPACITY,
    DEFAULT_RETENTION,
    MAX_CAPACITY,
    RECORD,
    RECORD_DTYPE,
    SUMMARY_DTYPE,
    IntervalMap,
)
from active_store.errors import (
    HistoryTrimmed,
    NotFound,
    OrderingViolation,
    ParameterError,
    VolumeNotFound,
)

logger = logging.getLogger(__name__)


def frame_key(volume: bytes, ordinal: int) -> bytes:
    return volume + b"#q%d" % ordinal


def summary_key(volume: bytes, ordinal: int) -> bytes:
    return volume + b"#q%d#s" % ordinal


def manifest_key(volume: bytes) -> bytes:
    return volume + b"#manifest"


@dataclass
class KvTarget:
    """The three key-value calls Plain-KV needs, bound to one pool."""
    put: Callable[[bytes, bytes], None]
    get: Callable[[bytes], bytes]
    erase: Callable[[bytes], None]

    @classmethod
    def over_connection(cls, client, handle: int) -> "KvTarget":
        return cls(lambda k, v: client.put(handle, k, v), lambda k: client.get(handle, k),
                   lambda k: client.erase(handle, k))

    @classmethod
    def over_shard(cls, shard, handle: int) -> "KvTarget":
        return cls(lambda k, v: shard.kv_put(handle, k, v), lambda k: shard.kv_get(handle, k),
                   lambda k: shard.kv_erase(handle, k))


@dataclass
class _Quantum:
    ordinal: int
    capacity: int
    frame: bytes = b""  # packed 64-byte records
    summary: Optional[IntervalMap] = None
    sealed: bool = False

    @property
    def count(self) -> int:
        return len(self.frame) // RECORD.size

    def last_timestamp(self) -> int:
        return RECORD.unpack_from(self.frame, len(self.frame) - RECORD.size)[4]

    def array(self) -> np.ndarray:
        return np.frombuffer(self.frame, dtype=RECORD_DTYPE)


@dataclass
class _PlainVolume:
    name: bytes
    capacity: int = DEFAULT_CAPACITY
    retention: int = DEFAULT_RETENTION
    retention_age_ns: int = 0
    quanta: list = field(default_factory=list)  # oldest first, last one open
    base: IntervalMap = field(default_factory=IntervalMap)
    base_ordinal: Optional[int] = None
    base_as_of: int = 0
    next_sequence: int = 1
    last_timestamp: int = 0
    trimmed: int = 0

    @property
    def current(self) -> _Quantum:
        return self.quanta[-1]


class PlainKvCdp:
    """Client-side CDP index over plain kv_put / kv_get / kv_erase."""

    def __init__(self, kv: KvTarget):
        self.kv = kv
        self.volumes: dict[bytes, _PlainVolume] = {}
        self.puts = 0
        self.erases = 0

    # --- storage helpers -----------------------------------------------------

    def _put(self, key: bytes, value: bytes):
        self.kv.put(key, value)
        self.puts += 1

    def _erase(self, key: bytes):
        try:
            self.kv.erase(key)
        except NotFound:
            pass
        self.erases += 1

    def _write_manifest(self, vol: _PlainVolume):
        manifest = {
            "capacity": vol.capacity,
            "retention": vol.retention,
            "retention_age_ns": vol.retention_age_ns,
            "quanta": [[q.ordinal, q.capacity, q.count if q.sealed else None] for q in vol.quanta],
            "base_ordinal": vol.base_ordinal,
            "base_as_of": vol.base_as_of,
            "trimmed": vol.trimmed,
        }
        self._put(manifest_key(vol.name), json.dumps(manifest).encode())

    def _volume(self, name: bytes, create: bool = False, capacity: int = DEFAULT_CAPACITY) -> _PlainVolume:
        vol = self.volumes.get(name)
        if vol is None:
            if not create:
                raise VolumeNotFound(f"no CDP volume {name!r}")
            vol = _PlainVolume(name, capacity, quanta=[_Quantum(0, capacity)])
            self.volumes[name] = vol
            self._write_manifest(vol)
        return vol

    # --- operations ----------------------------------------------------------

    def update(self, volume: bytes, virtual_offset: int, length: int, managed_offset: int, timestamp: int) -> int:
        if length < 1:
            raise ParameterError(f"record length must be >= 1: {length}")
        vol = self._volume(volume, create=True)
        if timestamp < vol.last_timestamp:
            raise OrderingViolation(f"timestamp {timestamp} precedes {vol.last_timestamp}")
        if vol.current.count >= vol.current.capacity:
            self._seal(vol, vol.capacity)
        q = vol.current
        sequence = vol.next_sequence
        record = RECORD.pack(virtual_offset, length, 0, managed_offset, timestamp, sequence, 1)
        frame = q.frame + record
        self._put(frame_key(volume, q.ordinal), frame)
        q.frame = frame
        vol.next_sequence += 1
        vol.last_timestamp = timestamp
        return sequence

    def _seal(self, vol: _PlainVolume, capacity: int):
        q = vol.current
        q.sealed = True
        prev = vol.quanta[-2].summary if len(vol.quanta) > 1 else vol.base
        summary = prev.copy()
        summary.merge_records(q.array())
        q.summary = summary
        self._put(summary_key(vol.name, q.ordinal), summary.to_array().tobytes())
        vol.quanta.append(_Quantum(q.ordinal + 1, capacity))
        self._write_manifest(vol)
        self.trim(vol.name)

    def configure(self, volume: bytes, capacity: int = DEFAULT_CAPACITY, retention: int = DEFAULT_RETENTION,
                  retention_age_ns: int = 0):
        if not 1 <= capacity <= MAX_CAPACITY:
            raise ParameterError(f"quantum capacity must be 1..{MAX_CAPACITY}: {capacity}")
        vol = self._volume(volume, create=True, capacity=capacity)
        vol.retention, vol.retention_age_ns = retention, retention_age_ns
        if vol.capacity != capacity:
            vol.capacity = capacity
            if vol.current.count or vol.current.capacity != capacity:
                self._seal(vol, capacity)
                return
        self._write_manifest(vol)
        self.trim(volume)

    def _expired(self, vol: _PlainVolume, q: _Quantum) -> bool:
        if vol.retention and len(vol.quanta) > vol.retention + 1:
            return True
        if vol.retention_age_ns:
            if not q.count:
                return True
            return vol.last_timestamp - q.last_timestamp() > vol.retention_age_ns
        return False

    def trim(self, volume: bytes) -> int:
        vol = self._volume(volume)
        trimmed = 0
        while len(vol.quanta) > 1 and self._expired(vol, vol.quanta[0]):
            q = vol.quanta.pop(0)
            if q.count:
                self._erase(frame_key(volume, q.ordinal))
            if vol.base_ordinal is not None:
                self._erase(summary_key(volume, vol.base_ordinal))
            vol.base, vol.base_ordinal = q.summary, q.ordinal
            if q.count:
                vol.base_as_of = q.last_timestamp()
            vol.trimmed += 1
            trimmed += 1
        if trimmed:
            self._write_manifest(vol)
        return trimmed

    def query(self, volume: bytes, t: int, virtual_offset: Optional[int] = None,
              length: Optional[int] = None) -> np.ndarray:
        vol = self._volume(volume)
        if vol.base_as_of and t < vol.base_as_of:
            raise HistoryTrimmed(f"t={t} predates retained history (from {vol.base_as_of})")
        start = virtual_offset
        end = None if virtual_offset is None else virtual_offset + length
        # newest sealed quantum wholly at or before t
        imap, later = vol.base, vol.quanta
        for i in range(len(vol.quanta) - 1, -1, -1):
            q = vol.quanta[i]
            if q.sealed and q.count and q.last_timestamp() <= t:
                imap, later = q.summary, vol.quanta[i + 1:]
                break
        imap = imap.copy() if start is None else imap.restrict(start, end)
        for q in later:
            arr = q.array()
            arr = arr[arr["timestamp"] <= t]
            if start is not None:
                v = arr["virtual_offset"]
                arr = arr[(v < end) & (v + arr["length"] > start)]
            imap.merge_records(arr)
        return imap.clip(start, end)

    # --- restart ---------------------------------------------------------------

    def rebuild(self, volume: bytes) -> _PlainVolume:
        """Reconstruct a volume's client state from its stored pairs."""
        try:
            manifest = json.loads(self.kv.get(manifest_key(volume)))
        except NotFound:
            raise VolumeNotFound(f"no CDP volume {volume!r}")
        vol = _PlainVolume(volume, manifest["capacity"], manifest["retention"], manifest["retention_age_ns"],
                           base_ordinal=manifest["base_ordinal"], base_as_of=manifest["base_as_of"],
                           trimmed=manifest["trimmed"])
        if vol.base_ordinal is not None:
            vol.base = IntervalMap.from_array(
                np.frombuffer(self.kv.get(summary_key(volume, vol.base_ordinal)), dtype=SUMMARY_DTYPE))
        for ordinal, capacity, count in manifest["quanta"]:
            q = _Quantum(ordinal, capacity, sealed=count is not None)
            try:
                q.frame = self.kv.get(frame_key(volume, ordinal))
            except NotFound:
                pass
            if count is not None:
                q.frame = q.frame[:count * RECORD.size]
            if q.sealed:
                q.summary = IntervalMap.from_array(
                    np.frombuffer(self.kv.get(summary_key(volume, ordinal)), dtype=SUMMARY_DTYPE))
            vol.quanta.append(q)
        last = next((q for q in reversed(vol.quanta) if q.count), None)
        if last is not None:
            fields = RECORD.unpack_from(last.frame, len(last.frame) - RECORD.size)
            vol.last_timestamp, vol.next_sequence = fields[4], fields[5] + 1
        self.volumes[volume] = vol
        logger.info("Rebuilt Plain-KV volume %r: %d quanta", volume, len(vol.quanta))
        return vol

    def volatile_bytes(self) -> int:
        """Approximate client memory held for all volumes."""
        total = 0
        for vol in self.volumes.values():
            total += len(vol.base) * SUMMARY_DTYPE.itemsize
            for q in vol.quanta:
                total += len(q.frame)
                if q.summary is not None:
                    total += len(q.summary) * SUMMARY_DTYPE.itemsize
        return total

    def info(self, volume: bytes) -> dict:
        vol = self._volume(volume)
        return {
            "list_length": len(vol.quanta),
            "open_count": vol.current.count,
            "total_records": sum(q.count for q in vol.quanta),
            "trimmed": vol.trimmed,
            "base_as_of": vol.base_as_of,
        }
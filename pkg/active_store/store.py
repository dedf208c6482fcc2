"""
Shard engine.

A Shard owns a set of pools (a primary region file `<data_dir>/<name>.pool`
plus extension files `<name>.pool.1`, `.2`, ... appended as the pool grows)
and is the only execution context that mutates their indexes. Every public
method takes the shard mutex, so a Shard can be driven from library code
directly or from the network server loop; ADO workers reach it through
execute_callback(), which takes the same mutex.
"""

import hashlib
import itertools
import logging
import os
import re
import struct
import threading
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from active_store import ado
from active_store.ado import AdoFlags, MemoryGate, WorkRequest
from active_store.config import ShardConfig
from active_store.errors import (
    Busy,
    FormatError,
    LockedByAdo,
    NameCollision,
    NotFound,
    OutOfMemory,
    ParameterError,
    PluginError,
    SimulatedCrash,
    StoreError,
    WrongShard,
)
from active_store.index import HopscotchTable, Inserted, Replaced, ValueRef
from active_store.pmem import CrashEmulator, PersistentRegion, region_create, region_delete, region_open

logger = logging.getLogger(__name__)

POOL_MAGIC = 0x544F4F524C4F4F50  # "POOLROOT"
POOL_ROOT_SIZE = 32  # {magic, owner_shard, table_offset, reserved}
POOL_SUFFIX = ".pool"
_POOL_NAME = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.-]*$")


@dataclass
class _PendingInvoke:
    key: bytes
    request: bytes
    flags: int
    value_size: int
    put_value: Optional[bytes]
    future: Future


@dataclass
class Pool:
    """An open pool (the pool descriptor)."""
    name: str
    handle: int
    path: Path
    region: PersistentRegion
    table: HopscotchTable
    plugins: list[str]
    refcount: int = 1
    closed: bool = False
    worker: Optional[ado.AdoWorker] = None
    gate: MemoryGate = field(default_factory=MemoryGate)
    generation: int = 0  # bumped on every key-set mutation; invalidates cursors
    cursors: dict = field(default_factory=dict)
    cursor_ids: itertools.count = field(default_factory=lambda: itertools.count(1))
    waiting: dict = field(default_factory=dict)  # key -> deque of _PendingInvoke
    inflight: dict = field(default_factory=dict)  # work_id -> key


class Shard:
    def __init__(self, config: Optional[ShardConfig] = None, emulator: Optional[CrashEmulator] = None):
        self.config = config or ShardConfig()
        self.shard_id = self.config.shard_id
        self.data_dir = Path(self.config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.emulator = emulator
        self._pools: dict[str, Pool] = {}
        self._handles: dict[int, Pool] = {}
        self._next_handle = itertools.count(1)
        self._work_ids = itertools.count(1)
        self._mutex = threading.RLock()

    # =========================================================================
    # POOLS
    # =========================================================================

    def pool_path(self, name: str) -> Path:
        if not _POOL_NAME.match(name):
            raise ParameterError(f"invalid pool name: {name!r}")
        return self.data_dir / f"{name}{POOL_SUFFIX}"

    def _make_handle(self) -> int:
        return (self.shard_id << 32) | next(self._next_handle)

    def pool_create(self, name: str, size: Optional[int] = None) -> Pool:
        """Create, initialize and open a pool. The pool file appears atomically."""
        path = self.pool_path(name)
        size = size or self.config.pool_size
        with self._mutex:
            if path.exists() or name in self._pools:
                raise NameCollision(f"pool already exists: {name}")
            tmp = path.with_name(path.name + ".tmp")
            tmp.unlink(missing_ok=True)
            region_delete(path)  # extension files left by an interrupted delete
            region = region_create(tmp, size, self.config.undo_log_entries, self.emulator)
            try:
                with region.transaction():
                    root = region.alloc(POOL_ROOT_SIZE, 64)
                    table = HopscotchTable.create(region)
                    region.write(root, struct.pack("<QQQQ", POOL_MAGIC, self.shard_id, table.offset, 0))
                    region.set_root(root)
                region.close()
            except BaseException:
                if not region.closed and not (self.emulator and self.emulator.crashed):
                    region.close()
                raise
            os.replace(tmp, path)
            logger.info("Created pool %s (%d bytes) on shard %d", name, size, self.shard_id)
            return self._open_locked(name)

    def pool_open(self, name: str) -> Pool:
        with self._mutex:
            pool = self._pools.get(name)
            if pool is not None:
                pool.refcount += 1
                return pool
            return self._open_locked(name)

    def _open_locked(self, name: str) -> Pool:
        path = self.pool_path(name)
        if not path.exists():
            raise NotFound(f"no such pool: {name}")
        region = region_open(path, self.emulator)
        try:
            root = region.root
            if root == 0 or region.read_u64(root) != POOL_MAGIC:
                raise FormatError(f"pool {name} has no valid root")
            owner = region.read_u64(root + 8)
            if owner != self.shard_id:
                raise WrongShard(f"pool {name} belongs to shard {owner}, not {self.shard_id}")
            table = HopscotchTable.open(region, region.read_u64(root + 16))
            table.clear_locks()
        except BaseException:
            region.close()
            raise
        pool = Pool(name=name, handle=self._make_handle(), path=path, region=region, table=table,
                    plugins=self.config.plugins_for(name))
        self._pools[name] = pool
        self._handles[pool.handle] = pool
        if pool.plugins:
            pool.worker = ado.ado_attach(self, pool, pool.plugins)
        logger.info("Opened pool %s as handle %#x", name, pool.handle)
        return pool

    def pool(self, handle: int) -> Pool:
        """Resolve a handle; foreign handles are rejected with WrongShard."""
        if handle >> 32 != self.shard_id:
            raise WrongShard(f"handle {handle:#x} does not belong to shard {self.shard_id}")
        pool = self._handles.get(handle)
        if pool is None or pool.closed:
            raise NotFound(f"no open pool for handle {handle:#x}")
        return pool

    def pool_close(self, handle: int):
        with self._mutex:
            pool = self.pool(handle)
            pool.refcount -= 1
            if pool.refcount > 0:
                return
            pool.closed = True
            del self._pools[pool.name]
            del self._handles[pool.handle]
        # Outside the mutex: in-flight work may still need callbacks
        if pool.worker is not None:
            pool.worker.shutdown()
        with self._mutex:
            for pending in pool.waiting.values():
                for item in pending:
                    item.future.set_exception(NotFound(f"pool {pool.name} closed"))
            pool.waiting.clear()
            if not (self.emulator and self.emulator.crashed):
                pool.region.close()
        logger.info("Closed pool %s", pool.name)

    def pool_delete(self, name: str):
        path = self.pool_path(name)
        with self._mutex:
            if name in self._pools:
                raise Busy(f"pool {name} has open handles")
            if not path.exists():
                raise NotFound(f"no such pool: {name}")
            region_delete(path)
            logger.info("Deleted pool %s", name)

    def list_pools(self) -> list[str]:
        return sorted(p.name[:-len(POOL_SUFFIX)] for p in self.data_dir.glob(f"*{POOL_SUFFIX}"))

    def open_pool(self, name: str) -> Optional[Pool]:
        return self._pools.get(name)

    def pool_info(self, name: str) -> dict:
        with self._mutex:
            pool = self._pools.get(name)
            if pool is None:
                raise NotFound(f"pool {name} is not open")
            region = pool.region
            return {
                "name": pool.name,
                "handle": pool.handle,
                "shard_id": self.shard_id,
                "size": region.capacity,
                "region_files": region.region_count,
                "free_bytes": region.free_bytes,
                "used_bytes": region.used_bytes,
                "pair_count": len(pool.table),
                "plugins": pool.plugins,
                "open_refs": pool.refcount,
            }

    def pool_digest(self, handle: int) -> str:
        """blake2b over the sorted key/value pairs."""
        with self._mutex:
            pool = self.pool(handle)
            pairs = sorted((e.key, e.value) for e in pool.table.iterate())
            h = hashlib.blake2b(digest_size=16)
            for key, ref in pairs:
                value = pool.region.read(ref.offset, ref.length)
                h.update(struct.pack("<Q", len(key)) + key + struct.pack("<Q", len(value)) + value)
            return h.hexdigest()

    def close(self):
        with self._mutex:
            pools = list(self._pools.values())
        for pool in pools:
            pool.refcount = 1
            self.pool_close(pool.handle)

    # =========================================================================
    # KEY-VALUE
    # =========================================================================

    def _check_unlocked(self, pool: Pool, key: bytes):
        if not key:
            raise ParameterError("key must be non-empty")
        if key in pool.table:
            entry = pool.table.get_entry(key)
            if entry.lock_word:
                raise LockedByAdo(f"key {key!r} is locked by work item {entry.lock_word}")

    def _grow_on_oom(self, pool: Pool, op: Callable, size_hint: int = 0):
        """Run op; on OutOfMemory append one region file of the expansion chunk and retry."""
        try:
            return op()
        except OutOfMemory:
            chunk = self.config.expansion_chunk
            if not chunk:
                raise
            with pool.gate.exclusive():
                pool.region.expand(max(chunk, 2 * size_hint + 8192))
            return op()

    def _put_pair(self, pool: Pool, key: bytes, value: bytes):
        region = pool.region
        with region.transaction():
            offset = region.alloc(max(len(value), 1), 8)
            region.write(offset, value)
            result = pool.table.put(key, ValueRef(offset, len(value)))
            if isinstance(result, Replaced):
                region.free(result.old.offset)
        if isinstance(result, Inserted):
            pool.generation += 1
        return result

    def _create_zeroed(self, pool: Pool, key: bytes, size: int) -> ValueRef:
        self._grow_on_oom(pool, lambda: self._put_pair(pool, key, bytes(size)), size)
        return pool.table.get(key)

    def _erase_pair(self, pool: Pool, key: bytes):
        with pool.region.transaction():
            erased = pool.table.erase(key)
            pool.region.free(erased.old.offset)
        pool.generation += 1

    def _resize_pair(self, pool: Pool, key: bytes, new_size: int) -> ValueRef:
        if new_size < 0:
            raise ParameterError(f"negative size: {new_size}")
        region = pool.region

        def resize():
            entry = pool.table.get_entry(key)
            old = entry.value
            keep = min(old.length, new_size)
            with region.transaction():
                offset = region.alloc(max(new_size, 1), 8)
                region.write(offset, region.read(old.offset, keep) + bytes(new_size - keep))
                pool.table.set_value(entry.offset, ValueRef(offset, new_size))
                region.free(old.offset)
            return ValueRef(offset, new_size)

        ref = self._grow_on_oom(pool, resize, new_size)
        pool.generation += 1
        return ref

    def kv_put(self, handle: int, key: bytes, value: bytes):
        with self._mutex:
            pool = self.pool(handle)
            self._check_unlocked(pool, key)
            return self._grow_on_oom(pool, lambda: self._put_pair(pool, key, value), len(value))

    def kv_get(self, handle: int, key: bytes) -> bytes:
        with self._mutex:
            pool = self.pool(handle)
            self._check_unlocked(pool, key)
            ref = pool.table.get(key)
            return pool.region.read(ref.offset, ref.length)

    def kv_erase(self, handle: int, key: bytes):
        with self._mutex:
            pool = self.pool(handle)
            self._check_unlocked(pool, key)
            self._erase_pair(pool, key)

    def kv_resize(self, handle: int, key: bytes, new_size: int) -> ValueRef:
        with self._mutex:
            pool = self.pool(handle)
            self._check_unlocked(pool, key)
            return self._resize_pair(pool, key, new_size)

    # =========================================================================
    # ADO INVOCATION
    # =========================================================================

    def invoke_ado(self, handle: int, key: bytes, request: bytes, flags: int = 0,
                   value_size: int = 0) -> Future:
        """Queue work for the pool's plugin stack. The future resolves to a list of responses."""
        return self._invoke(handle, _PendingInvoke(key, request, flags, value_size, None, Future()))

    def invoke_put_ado(self, handle: int, key: bytes, value: bytes, request: bytes, flags: int = 0) -> Future:
        if not key:
            raise ParameterError("invoke_put_ado needs a key")
        return self._invoke(handle, _PendingInvoke(key, request, flags, 0, value, Future()))

    def _invoke(self, handle: int, item: _PendingInvoke) -> Future:
        with self._mutex:
            pool = self.pool(handle)
            if pool.worker is None:
                raise PluginError(f"no ADO plugins attached to pool {pool.name}")
            if item.key and item.key in pool.table and pool.table.get_entry(item.key).lock_word:
                pool.waiting.setdefault(item.key, deque()).append(item)
            else:
                self._dispatch(pool, item)
        return item.future

    def _dispatch(self, pool: Pool, item: _PendingInvoke) -> bool:
        """Lock the pair and hand the work to the worker. Returns False if it failed early."""
        work_id = next(self._work_ids)
        key = item.key
        try:
            new_root = False
            value_space = []
            if item.put_value is not None:
                value = item.put_value
                self._grow_on_oom(pool, lambda: self._put_pair(pool, key, value), len(value))
            if key:
                if key not in pool.table:
                    if item.flags & AdoFlags.CREATE_IF_MISSING and item.value_size > 0:
                        self._create_zeroed(pool, key, item.value_size)
                        new_root = True
                    else:
                        raise NotFound(f"key not found: {key!r}")
                entry = pool.table.get_entry(key)
                pool.table.set_lock(entry.offset, work_id)
                value_space = [entry.value]
            work = WorkRequest(work_id, key, value_space, item.request, new_root, pool.name)
            pool.inflight[work_id] = key
            pool.worker.submit(work, lambda responses, error: self._complete(pool, work_id, item, responses, error))
        except StoreError as e:
            pool.inflight.pop(work_id, None)
            if key and key in pool.table:
                entry = pool.table.get_entry(key)
                if entry.lock_word == work_id:
                    pool.table.set_lock(entry.offset, 0)
            item.future.set_exception(e)
            return False
        return True

    def _complete(self, pool: Pool, work_id: int, item: _PendingInvoke, responses, error):
        """Worker-side completion: release the pair lock, resolve, admit the next waiter."""
        with self._mutex:
            try:
                if not pool.closed:
                    self._unlock_work(pool, work_id)
            except SimulatedCrash as crash:
                error = error or crash
            if error is not None:
                item.future.set_exception(error)
            else:
                item.future.set_result(responses)

    def _unlock_work(self, pool: Pool, work_id: int):
        key = pool.inflight.pop(work_id, None)
        if not key:
            return
        if key in pool.table:
            entry = pool.table.get_entry(key)
            if entry.lock_word == work_id:
                pool.table.set_lock(entry.offset, 0)
        self._admit_waiting(pool, key)

    def _admit_waiting(self, pool: Pool, key: bytes):
        pending = pool.waiting.get(key)
        while pending:
            if key in pool.table and pool.table.get_entry(key).lock_word:
                return
            item = pending.popleft()
            self._dispatch(pool, item)
        pool.waiting.pop(key, None)

    def execute_callback(self, pool: Pool, work_id: int, request):
        with self._mutex:
            if pool.closed and pool.region.closed:
                raise NotFound(f"pool {pool.name} is closed")
            return ado.callback_execute(self, pool, work_id, request)

    def drain(self):
        """Wait for every attached worker to go idle (tests and benchmarks)."""
        with self._mutex:
            workers = [p.worker for p in self._pools.values() if p.worker is not None]
        for worker in workers:
            worker.drain()

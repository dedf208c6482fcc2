"""
Active Data Object runtime.

Plugins run next to the data: each attached pool gets one primary worker
thread that executes do_work items one at a time, plus a small pool of
secondary threads for background tasks (summarization, age-out). Plugins see
the pool's memory through a bounds-checked PoolMemory facade and reach
everything else (keys, pool allocations, iteration) through callbacks that
execute on the shard context.

With ShardConfig.ado_process (ACTIVE_STORE_ADO_PROCESS=true) the same worker
runs in a child process instead. The child maps the pool's region files
itself, shares the region transaction lock with the shard, and sends its
callbacks back to the shard over a pipe.

Rules every plugin follows:
  - never issue a callback while inside a region transaction
  - never issue a callback while holding a plugin-internal lock
"""

import importlib
import itertools
import logging
import multiprocessing
import queue
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import IntFlag
from typing import Callable, Optional

import numpy as np

from active_store import config
from active_store.errors import (
    AlreadyExists,
    BoundsError,
    Busy,
    LockedByAdo,
    NotFound,
    PluginError,
    PluginLoadError,
    SimulatedCrash,
    StoreError,
    UnknownCursor,
)
from active_store.index import ValueRef
from active_store.pmem import Heap, PersistentRegion

logger = logging.getLogger(__name__)


class AdoFlags(IntFlag):
    NONE = 0
    CREATE_IF_MISSING = 1
    ZERO_COPY_HINT = 2  # advisory; the runtime always hands out in-place references


@dataclass
class WorkRequest:
    work_id: int
    key: bytes
    value_space: list[ValueRef]
    request: bytes
    new_root: bool
    pool_name: str = ""


# =============================================================================
# CALLBACK REQUESTS
# =============================================================================

@dataclass(frozen=True)
class CreateKey:
    key: bytes
    size: int


@dataclass(frozen=True)
class OpenKey:
    key: bytes


@dataclass(frozen=True)
class EraseKey:
    key: bytes


@dataclass(frozen=True)
class ResizeValue:
    key: bytes
    new_size: int


@dataclass(frozen=True)
class AllocatePoolMemory:
    size: int
    alignment: int = 64


@dataclass(frozen=True)
class FreePoolMemory:
    offset: int


@dataclass(frozen=True)
class GetRefVector:
    pass


@dataclass(frozen=True)
class Iterate:
    cursor: Optional[int] = None
    batch: int = 64


@dataclass(frozen=True)
class FindKey:
    pattern: bytes
    mode: str = "prefix"
    position: int = 0


@dataclass(frozen=True)
class GetPoolInfo:
    pass


@dataclass(frozen=True)
class Unlock:
    work_id: int


@dataclass
class IterateResult:
    items: list[tuple[bytes, ValueRef]]
    cursor: Optional[int]  # None when the iteration is complete


def callback_execute(shard, pool, work_id: int, request):
    """Run one callback against `pool`. Caller holds the shard context."""
    match request:
        case CreateKey(key=key, size=size):
            if key in pool.table:
                raise AlreadyExists(f"key exists: {key!r}")
            return shard._create_zeroed(pool, key, size)
        case OpenKey(key=key):
            entry = pool.table.get_entry(key)
            _check_owner(entry.lock_word, work_id, key)
            return entry.value
        case EraseKey(key=key):
            entry = pool.table.get_entry(key)
            _check_owner(entry.lock_word, work_id, key)
            shard._erase_pair(pool, key)
            return None
        case ResizeValue(key=key, new_size=new_size):
            entry = pool.table.get_entry(key)
            _check_owner(entry.lock_word, work_id, key)
            return shard._resize_pair(pool, key, new_size)
        case AllocatePoolMemory(size=size, alignment=alignment):
            return shard._grow_on_oom(pool, lambda: pool.region.alloc(size, alignment), size)
        case FreePoolMemory(offset=offset):
            pool.region.free(offset)
            return None
        case GetRefVector():
            return [(entry.key, entry.value) for entry in pool.table.iterate()]
        case Iterate(cursor=cursor, batch=batch):
            return _iterate(pool, cursor, batch)
        case FindKey(pattern=pattern, mode=mode, position=position):
            return pool.table.find_key(pattern, mode, position)
        case GetPoolInfo():
            return shard.pool_info(pool.name)
        case Unlock(work_id=target):
            shard._unlock_work(pool, target)
            return None
        case _:
            raise PluginError(f"unknown callback {request!r}")


def _check_owner(lock_word: int, work_id: int, key: bytes):
    if lock_word and lock_word != work_id:
        raise LockedByAdo(f"key {key!r} is locked by work item {lock_word}")


def _iterate(pool, cursor: Optional[int], batch: int) -> IterateResult:
    if cursor is None:
        cursor = next(pool.cursor_ids)
        pool.cursors[cursor] = (pool.generation, 0)
    state = pool.cursors.get(cursor)
    if state is None or state[0] != pool.generation:
        pool.cursors.pop(cursor, None)
        raise UnknownCursor(f"cursor {cursor} is unknown or invalidated by a mutation")
    offsets = pool.table.entry_offsets()
    position = state[1]
    chunk = offsets[position:position + batch]
    items = [(e.key, e.value) for e in (pool.table._read_entry(o) for o in chunk)]
    position += len(chunk)
    if position >= len(offsets):
        del pool.cursors[cursor]
        return IterateResult(items, None)
    pool.cursors[cursor] = (pool.generation, position)
    return IterateResult(items, cursor)


# =============================================================================
# PLUGIN REGISTRY
# =============================================================================

class AdoPlugin:
    """Base class. One instance per attached pool."""
    plugin_id = "base"

    def on_attach(self, ctx: "AdoContext"):
        pass

    def do_work(self, work: WorkRequest, ctx: "AdoContext") -> list[bytes]:
        raise NotImplementedError

    def on_detach(self, ctx: "AdoContext"):
        pass


_REGISTRY: dict[str, type] = {}

# Plugins that live in their own module register themselves on import
_PLUGIN_MODULES = {"cdp": "active_store.cdp"}


def register_plugin(cls):
    _REGISTRY[cls.plugin_id] = cls
    return cls


def resolve_plugin(plugin_id: str) -> type:
    if plugin_id not in _REGISTRY and plugin_id in _PLUGIN_MODULES:
        importlib.import_module(_PLUGIN_MODULES[plugin_id])
    try:
        return _REGISTRY[plugin_id]
    except KeyError:
        raise PluginLoadError(f"unknown ADO plugin: {plugin_id}")


@register_plugin
class EchoPlugin(AdoPlugin):
    """Returns the request bytes unchanged."""
    plugin_id = "echo"

    def do_work(self, work, ctx):
        return [work.request]


@register_plugin
class FaultPlugin(AdoPlugin):
    """Fails every invocation; used to check fault containment."""
    plugin_id = "fault"

    def do_work(self, work, ctx):
        raise RuntimeError(f"injected fault for work item {work.work_id}")


# =============================================================================
# MEMORY ACCESS
# =============================================================================

class MemoryGate:
    """
    Shared/exclusive gate over a pool's mapping. Plugin code runs in shared
    mode; growing the backing file remaps it and needs exclusive mode.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    def _acquire_shared(self):
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1

    def _release_shared(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    @contextmanager
    def shared(self):
        self._acquire_shared()
        try:
            yield
        finally:
            self._release_shared()

    @contextmanager
    def released(self):
        """Temporarily give up a shared hold (around blocking callbacks)."""
        self._release_shared()
        try:
            yield
        finally:
            self._acquire_shared()

    @contextmanager
    def exclusive(self):
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class PoolMemory:
    """Plugin view of pool memory: bounded to the heap areas of the pool's region files."""

    def __init__(self, region: PersistentRegion, strict: Optional[bool] = None):
        self.region = region
        self.strict = config.STRICT_BOUNDS if strict is None else strict

    def _check(self, offset: int, length: int):
        if self.strict and not self.region.contains(offset, length):
            raise BoundsError(f"plugin access [{offset}, {offset + length}) outside pool memory")

    def read(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        return self.region.read(offset, length)

    def read_u64(self, offset: int) -> int:
        self._check(offset, 8)
        return self.region.read_u64(offset)

    def read_array(self, offset: int, dtype, count: int):
        self._check(offset, count * np.dtype(dtype).itemsize)
        return self.region.read_array(offset, dtype, count)

    def write(self, offset: int, data: bytes):
        self._check(offset, len(data))
        self.region.write(offset, data)

    def write_u64(self, offset: int, value: int):
        self._check(offset, 8)
        self.region.write_u64(offset, value)

    def atomic_store_64(self, offset: int, value: int):
        self._check(offset, 8)
        self.region.atomic_store_64(offset, value)

    def persist(self, offset: int, length: int):
        self._check(offset, length)
        self.region.persist(offset, length)

    def tx_log(self, offset: int, length: int):
        self._check(offset, length)
        self.region.tx_log(offset, length)

    def tx_log_range(self, offset: int, length: int):
        self._check(offset, length)
        self.region.tx_log_range(offset, length)

    def transaction(self):
        return self.region.transaction()

    def sub_heap(self, start: int, end: int, fresh: bool) -> Heap:
        """A heap over [start, end) of memory the plugin owns; formatted when fresh."""
        self._check(start, end - start)
        if fresh:
            heap = Heap.format(self.region, start, end)
        else:
            heap = Heap(self.region, start, end)
            heap.rebuild()
        self.region.register_heap(heap)
        return heap


# =============================================================================
# WORKER
# =============================================================================

class AdoContext:
    """Handed to plugins: memory access, callbacks, background submission."""

    def __init__(self, worker: "AdoWorker", work_id: int = 0):
        self._worker = worker
        self.work_id = work_id
        self.pool_name = worker.pool_name
        self.memory = worker.memory

    def bind(self, work_id: int) -> "AdoContext":
        return AdoContext(self._worker, work_id)

    def callback(self, request):
        return self._worker.execute_callback(self.work_id, request)

    def create_key(self, key: bytes, size: int) -> ValueRef:
        return self.callback(CreateKey(key, size))

    def open_key(self, key: bytes) -> ValueRef:
        return self.callback(OpenKey(key))

    def erase_key(self, key: bytes):
        return self.callback(EraseKey(key))

    def resize_value(self, key: bytes, new_size: int) -> ValueRef:
        return self.callback(ResizeValue(key, new_size))

    def allocate_pool_memory(self, size: int, alignment: int = 64) -> int:
        return self.callback(AllocatePoolMemory(size, alignment))

    def free_pool_memory(self, offset: int):
        return self.callback(FreePoolMemory(offset))

    def get_ref_vector(self) -> list[tuple[bytes, ValueRef]]:
        return self.callback(GetRefVector())

    def iterate(self, cursor: Optional[int] = None, batch: int = 64) -> IterateResult:
        return self.callback(Iterate(cursor, batch))

    def find_key(self, pattern: bytes, mode: str = "prefix", position: int = 0):
        return self.callback(FindKey(pattern, mode, position))

    def pool_info(self) -> dict:
        return self.callback(GetPoolInfo())

    def unlock(self, work_id: Optional[int] = None):
        return self.callback(Unlock(work_id or self.work_id))

    def submit_background(self, fn: Callable, *args) -> Future:
        return self._worker.run_background(fn, *args)


@dataclass
class _WorkItem:
    work: WorkRequest
    on_done: Callable
    attach: bool = False


class AdoWorker:
    """Primary worker thread plus secondary executor for one pool."""

    def __init__(self, shard, pool, plugin_ids: list[str],
                 queue_depth: int = config.WORKER_QUEUE_DEPTH,
                 secondary_workers: int = config.SECONDARY_WORKERS):
        self.shard = shard
        self.pool = pool
        self.pool_name = pool.name
        self.plugin_ids = list(plugin_ids)
        self.plugins: list[AdoPlugin] = [resolve_plugin(pid)() for pid in plugin_ids]
        self.gate: MemoryGate = pool.gate
        self.memory = PoolMemory(pool.region)
        self.context = AdoContext(self)
        self.invocations = 0
        self._queue: queue.Queue = queue.Queue(maxsize=queue_depth)
        self._thread = threading.Thread(target=self._run, name=f"ado-{pool.name}", daemon=True)
        self._secondary = ThreadPoolExecutor(max_workers=max(1, secondary_workers),
                                             thread_name_prefix=f"ado-{pool.name}-bg")
        self._background: set[Future] = set()
        self._background_lock = threading.Lock()
        self._stopped = False

    def start(self):
        self._thread.start()
        # Recovery hooks run first, on the worker, ahead of any client work
        self._queue.put(_WorkItem(WorkRequest(0, b"", [], b"", False, self.pool.name), lambda *a: None, attach=True))

    def execute_callback(self, work_id: int, request):
        with self.gate.released():
            return self.shard.execute_callback(self.pool, work_id, request)

    def submit(self, work: WorkRequest, on_done: Callable):
        """Queue a work item; on_done(responses, error) runs on the worker thread."""
        if self._stopped:
            raise Busy(f"ADO worker for pool {self.pool.name} is stopping")
        try:
            self._queue.put_nowait(_WorkItem(work, on_done))
        except queue.Full:
            raise Busy(f"ADO queue full for pool {self.pool.name}")

    def _run(self):
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                if item.attach:
                    self._attach()
                else:
                    responses, error = self.dispatch_work(item.work)
                    item.on_done(responses, error)
            except SimulatedCrash:
                logger.warning("ADO worker for %s stopped by simulated crash", self.pool.name)
            finally:
                self._queue.task_done()

    def _attach(self):
        with self.gate.shared():
            for plugin in self.plugins:
                try:
                    plugin.on_attach(self.context)
                except SimulatedCrash:
                    raise
                except Exception:
                    logger.exception("Plugin %s failed to attach to pool %s", plugin.plugin_id, self.pool.name)

    def dispatch_work(self, work: WorkRequest) -> tuple[list[bytes], Optional[Exception]]:
        """Run every layer's do_work in stack order; stop at the first failure."""
        self.invocations += 1
        ctx = self.context.bind(work.work_id)
        responses: list[bytes] = []
        with self.gate.shared():
            for plugin in self.plugins:
                try:
                    out = plugin.do_work(work, ctx)
                except SimulatedCrash as e:
                    return responses, e
                except StoreError as e:
                    return responses, e
                except Exception as e:
                    logger.exception("Plugin %s failed on work item %d", plugin.plugin_id, work.work_id)
                    return responses, PluginError(f"plugin {plugin.plugin_id} failed: {e}")
                responses.extend(out or [])
        return responses, None

    def run_background(self, fn: Callable, *args) -> Future:
        def task():
            with self.gate.shared():
                try:
                    return fn(*args)
                except SimulatedCrash:
                    raise
                except Exception:
                    logger.exception("Background task %s failed on pool %s", getattr(fn, "__name__", fn),
                                     self.pool.name)
                    raise

        with self._background_lock:
            future = self._secondary.submit(task)
            self._background.add(future)
        future.add_done_callback(self._background_done)
        return future

    def _background_done(self, future: Future):
        with self._background_lock:
            self._background.discard(future)

    def drain(self, timeout: Optional[float] = None):
        """Wait until the queue is empty and no background task is pending."""
        self._queue.join()
        while True:
            with self._background_lock:
                pending = list(self._background)
            if not pending:
                return
            for future in pending:
                try:
                    future.result(timeout)
                except Exception:
                    pass

    def shutdown(self):
        if self._stopped:
            return
        self._stopped = True
        self._queue.put(None)
        self._thread.join()
        self.drain()
        self._secondary.shutdown(wait=True)
        for plugin in self.plugins:
            try:
                plugin.on_detach(self.context)
            except Exception:
                logger.exception("Plugin %s failed to detach", plugin.plugin_id)


# =============================================================================
# PROCESS WORKER
# =============================================================================

# config values a spawned child must see as the shard does
_INHERITED_SETTINGS = ("FLUSH_MODE", "STRICT_BOUNDS", "CDP_CHUNK_SIZE", "LOG_LEVEL")


@dataclass
class _AttachedPool:
    """What a worker needs of a pool, inside the ADO child process."""
    name: str
    region: PersistentRegion
    gate: MemoryGate = field(default_factory=MemoryGate)


class _ChildWorker(AdoWorker):
    """The worker inside the child: callbacks become pipe round trips to the shard."""

    def __init__(self, conn, pool: _AttachedPool, plugin_ids: list[str], queue_depth: int,
                 secondary_workers: int):
        super().__init__(None, pool, plugin_ids, queue_depth=queue_depth, secondary_workers=secondary_workers)
        self._conn = conn
        self._send_lock = threading.Lock()
        self._calls = itertools.count(1)
        self._waiting: dict[int, Future] = {}

    def send(self, message: tuple):
        with self._send_lock:
            self._conn.send(message)

    def execute_callback(self, work_id: int, request):
        call_id = next(self._calls)
        future: Future = Future()
        self._waiting[call_id] = future
        self.send(("callback", call_id, work_id, request))
        with self.gate.released():
            return future.result()

    def serve(self):
        """Read the pipe until the shard says stop (or goes away)."""
        self.start()
        while True:
            try:
                message = self._conn.recv()
            except (EOFError, OSError):
                logger.warning("ADO process for %s lost its shard; exiting", self.pool_name)
                return
            match message:
                case ("work", work):
                    try:
                        self.submit(work, lambda responses, error, wid=work.work_id:
                                    self.send(("done", wid, responses, error)))
                    except StoreError as e:
                        self.send(("done", work.work_id, [], e))
                case ("result", call_id, value, error):
                    future = self._waiting.pop(call_id)
                    if error is not None:
                        future.set_exception(error)
                    else:
                        future.set_result(value)
                case ("drain", token):
                    threading.Thread(target=self._drain_and_reply, args=(token,), daemon=True).start()
                case ("stop",):
                    stopper = threading.Thread(target=self._stop_and_reply, daemon=True)
                    stopper.start()
                case ("exit",):
                    return

    def _drain_and_reply(self, token: int):
        self.drain()
        self.send(("drained", token))

    def _stop_and_reply(self):
        self.shutdown()
        self.send(("stopped",))


def _process_main(conn, path: str, lock, pool_name: str, plugin_classes: list, queue_depth: int,
                  secondary_workers: int, settings: dict):
    for name, value in settings.items():
        setattr(config, name, value)
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(processName)s %(name)s %(message)s")
    for cls in plugin_classes:
        register_plugin(cls)
    region = PersistentRegion.attach(path, lock)
    try:
        # one extra slot for the attach item queued ahead of client work
        worker = _ChildWorker(conn, _AttachedPool(pool_name, region), [cls.plugin_id for cls in plugin_classes],
                              queue_depth + 1, secondary_workers)
        worker.serve()
    finally:
        region.close()
        conn.close()


class AdoProcessWorker:
    """
    Shard-side handle on an ADO child process for one pool.

    Same contract as AdoWorker: submit() queues a work item and on_done runs
    when the child reports it. Callback requests from the child execute on a
    reader thread under the shard context, exactly as a thread worker's would.
    """

    def __init__(self, shard, pool, plugin_ids: list[str],
                 queue_depth: int = config.WORKER_QUEUE_DEPTH,
                 secondary_workers: int = config.SECONDARY_WORKERS):
        self.shard = shard
        self.pool = pool
        self.pool_name = pool.name
        self.plugin_ids = list(plugin_ids)
        self.plugins: list[AdoPlugin] = []  # they live in the child
        self.invocations = 0
        self.queue_depth = queue_depth
        plugin_classes = [resolve_plugin(pid) for pid in plugin_ids]
        mp = multiprocessing.get_context("spawn")
        self._lock = mp.RLock()
        self._conn, child_conn = mp.Pipe()
        settings = {name: getattr(config, name) for name in _INHERITED_SETTINGS}
        self._process = mp.Process(
            target=_process_main, name=f"ado-{pool.name}", daemon=True,
            args=(child_conn, str(pool.region.path), self._lock, pool.name, plugin_classes, queue_depth,
                  secondary_workers, settings),
        )
        self._child_conn = child_conn
        self._send_lock = threading.Lock()
        self._pending: dict[int, Callable] = {}
        self._pending_lock = threading.Lock()
        self._tokens = itertools.count(1)
        self._drains: dict[int, threading.Event] = {}
        self._stopped_event = threading.Event()
        self._reader = threading.Thread(target=self._read, name=f"ado-{pool.name}-pipe", daemon=True)
        self._stopped = False
        self._dead = False

    def start(self):
        self.pool.region.share_lock(self._lock)
        self._process.start()
        self._child_conn.close()
        self._reader.start()
        logger.info("ADO process %d serving pool %s", self._process.pid, self.pool_name)

    def _send(self, message: tuple):
        with self._send_lock:
            self._conn.send(message)

    def submit(self, work: WorkRequest, on_done: Callable):
        """Queue a work item; on_done(responses, error) runs on the pipe reader thread."""
        if self._stopped:
            raise Busy(f"ADO worker for pool {self.pool_name} is stopping")
        if self._dead:
            raise PluginError(f"ADO process for pool {self.pool_name} has exited")
        with self._pending_lock:
            if len(self._pending) >= self.queue_depth:
                raise Busy(f"ADO queue full for pool {self.pool_name}")
            self._pending[work.work_id] = on_done
        self.invocations += 1
        self._send(("work", work))

    def _read(self):
        while True:
            try:
                message = self._conn.recv()
            except (EOFError, OSError):
                self._child_gone()
                return
            match message:
                case ("callback", call_id, work_id, request):
                    self._answer(call_id, work_id, request)
                case ("done", work_id, responses, error):
                    with self._pending_lock:
                        on_done = self._pending.pop(work_id)
                    on_done(responses, error)
                case ("drained", token):
                    self._drains.pop(token).set()
                case ("stopped",):
                    self._stopped_event.set()
                    return

    def _answer(self, call_id: int, work_id: int, request):
        try:
            value, error = self.shard.execute_callback(self.pool, work_id, request), None
        except StoreError as e:
            value, error = None, e
        except Exception as e:
            logger.exception("Callback %r from the ADO process failed", request)
            value, error = None, PluginError(f"callback failed: {e}")
        try:
            self._send(("result", call_id, value, error))
        except OSError:
            pass

    def _child_gone(self):
        self._dead = True
        self._stopped_event.set()
        for event in list(self._drains.values()):
            event.set()
        with self._pending_lock:
            pending, self._pending = self._pending, {}
        if pending and not self._stopped:
            logger.error("ADO process for pool %s exited with %d items in flight", self.pool_name, len(pending))
        for on_done in pending.values():
            on_done([], PluginError(f"ADO process for pool {self.pool_name} exited"))

    def drain(self, timeout: Optional[float] = None):
        """Wait until the child's queue is empty and no background task is pending."""
        if self._dead:
            return
        token = next(self._tokens)
        event = self._drains[token] = threading.Event()
        self._send(("drain", token))
        event.wait(timeout)

    def shutdown(self):
        if self._stopped:
            return
        self._stopped = True
        if not self._dead:
            try:
                self._send(("stop",))
                self._stopped_event.wait(60)
                self._send(("exit",))
            except OSError:
                pass
        self._process.join(10)
        if self._process.is_alive():
            logger.warning("ADO process for pool %s did not exit; terminating", self.pool_name)
            self._process.terminate()
            self._process.join()
        self._reader.join(10)
        self._conn.close()


def ado_attach(shard, pool, plugin_ids: list[str]):
    """Start a worker (thread or child process) for an open pool with the given plugin stack."""
    if pool.closed:
        raise NotFound(f"pool {pool.name} is not open")
    worker_cls = AdoWorker
    if shard.config.ado_process:
        if shard.emulator is None:
            worker_cls = AdoProcessWorker
        else:
            logger.warning("Emulated pool %s has no file mapping to share; using an ADO thread", pool.name)
    worker = worker_cls(shard, pool, plugin_ids,
                        queue_depth=shard.config.worker_queue_depth,
                        secondary_workers=shard.config.secondary_workers)
    worker.start()
    logger.info("Attached ADO stack %s to pool %s", plugin_ids, pool.name)
    return worker

import os
import struct
import time
from pathlib import Path

import pytest

from active_store.ado import AdoFlags, AdoPlugin, register_plugin
from active_store.errors import (
    BoundsError,
    LockedByAdo,
    NotFound,
    PluginError,
    PluginLoadError,
    UnknownCursor,
)
from active_store.pmem import region_index
from active_store.store import Shard
from tests.conftest import make_config


@register_plugin
class GatePlugin(AdoPlugin):
    """Holds its work item until the test opens the gate. The request names a directory."""
    plugin_id = "test-gate"

    def do_work(self, work, ctx):
        gate = Path(work.request.decode())
        (gate / "entered").touch()
        _wait_for(gate / "release")
        return [work.key]


def _wait_for(path: Path, timeout: float = 10.0) -> bool:
    # files, not events: the plugin may run in another process
    deadline = time.monotonic() + timeout
    while not path.exists():
        if time.monotonic() > deadline:
            return False
        time.sleep(0.01)
    return True


@register_plugin
class CallbackPlugin(AdoPlugin):
    """Exercises one callback per request; the request names it."""
    plugin_id = "test-callbacks"

    def do_work(self, work, ctx):
        match work.request:
            case b"write":
                ref = work.value_space[0]
                ctx.memory.write(ref.offset, b"W" * ref.length)
                return []
            case b"create":
                ref = ctx.create_key(work.key + b".child", 32)
                return [struct.pack("<QQ", ref.offset, ref.length)]
            case b"open-self":
                ref = ctx.open_key(work.key)
                return [struct.pack("<Q", ref.length)]
            case b"alloc":
                offset = ctx.allocate_pool_memory(4096, 4096)
                ctx.free_pool_memory(offset)
                return [struct.pack("<Q", offset)]
            case b"refs":
                return [key for key, _ in sorted(ctx.get_ref_vector())]
            case b"iterate":
                keys = []
                result = ctx.iterate(batch=2)
                keys += [k for k, _ in result.items]
                while result.cursor is not None:
                    result = ctx.iterate(result.cursor, batch=2)
                    keys += [k for k, _ in result.items]
                return sorted(keys)
            case b"stale-cursor":
                result = ctx.iterate(batch=1)
                ctx.create_key(b"mutation", 8)
                ctx.iterate(result.cursor, batch=1)
                return []
            case b"find":
                found = ctx.find_key(b"vol-1.", "prefix")
                return [found[0]] if found else []
            case b"info":
                return [str(ctx.pool_info()["pair_count"]).encode()]
            case b"pid":
                return [str(os.getpid()).encode()]
            case b"grow":
                offset = ctx.allocate_pool_memory(12 * 1024 * 1024, 64)
                ctx.memory.write(offset, b"grown")
                return [struct.pack("<Q", offset)]
            case b"escape":
                ctx.memory.write(0, b"x")
                return []
        return [b"?"]


@pytest.fixture(params=[False, True], ids=["thread", "process"])
def ado_shard(request, data_dir):
    s = Shard(make_config(data_dir, plugins=["echo"], ado_process=request.param, pool_plugins={
        "fault*": ["fault"], "stack*": ["echo", "echo"], "gate*": ["test-gate"], "calls*": ["test-callbacks"],
        "bogus*": ["no-such-plugin"], "plain*": [],
    }))
    yield s
    s.close()


def _invoke(shard, handle, key, request, flags=0, value_size=0):
    return shard.invoke_ado(handle, key, request, flags, value_size).result(10)


def test_echo_plugin(ado_shard):
    h = ado_shard.pool_create("echo").handle
    ado_shard.kv_put(h, b"k", b"v")
    assert _invoke(ado_shard, h, b"k", b"hello") == [b"hello"]


def test_layered_stack_concatenates_responses(ado_shard):
    h = ado_shard.pool_create("stack").handle
    ado_shard.kv_put(h, b"k", b"v")
    assert _invoke(ado_shard, h, b"k", b"r") == [b"r", b"r"]


def test_missing_key_without_create_flag(ado_shard):
    h = ado_shard.pool_create("echo").handle
    with pytest.raises(NotFound):
        _invoke(ado_shard, h, b"absent", b"r")


def test_create_if_missing_makes_zeroed_value(ado_shard):
    h = ado_shard.pool_create("echo").handle
    _invoke(ado_shard, h, b"fresh", b"r", AdoFlags.CREATE_IF_MISSING, 24)
    assert ado_shard.kv_get(h, b"fresh") == bytes(24)


def test_invoke_put_stores_value_first(ado_shard):
    h = ado_shard.pool_create("echo").handle
    assert ado_shard.invoke_put_ado(h, b"k", b"payload", b"req").result(10) == [b"req"]
    assert ado_shard.kv_get(h, b"k") == b"payload"


def test_no_plugins_attached(ado_shard):
    h = ado_shard.pool_create("plain").handle
    with pytest.raises(PluginError):
        ado_shard.invoke_ado(h, b"k", b"r")


def test_unknown_plugin_fails_open(ado_shard):
    with pytest.raises(PluginLoadError):
        ado_shard.pool_create("bogus")


def test_plugin_fault_is_contained(ado_shard):
    h = ado_shard.pool_create("fault").handle
    ado_shard.kv_put(h, b"k", b"v")
    with pytest.raises(PluginError):
        _invoke(ado_shard, h, b"k", b"r")
    # the pair is unlocked and the pool keeps serving
    ado_shard.kv_put(h, b"k", b"after")
    assert ado_shard.kv_get(h, b"k") == b"after"
    with pytest.raises(PluginError):
        _invoke(ado_shard, h, b"k", b"again")


def test_pair_locked_while_work_in_flight(ado_shard, tmp_path):
    gate = str(tmp_path).encode()
    h = ado_shard.pool_create("gate").handle
    ado_shard.kv_put(h, b"k", b"v")
    first = ado_shard.invoke_ado(h, b"k", gate)
    assert _wait_for(tmp_path / "entered")
    with pytest.raises(LockedByAdo):
        ado_shard.kv_put(h, b"k", b"clobber")
    second = ado_shard.invoke_ado(h, b"k", gate)  # queued behind the lock
    assert not second.done()
    (tmp_path / "release").touch()
    assert first.result(10) == [b"k"]
    assert second.result(10) == [b"k"]
    ado_shard.kv_put(h, b"k", b"now-free")


def test_in_place_write_is_visible(ado_shard):
    h = ado_shard.pool_create("calls").handle
    ado_shard.kv_put(h, b"k", b"....")
    _invoke(ado_shard, h, b"k", b"write")
    assert ado_shard.kv_get(h, b"k") == b"WWWW"


def test_callbacks(ado_shard):
    h = ado_shard.pool_create("calls").handle
    ado_shard.kv_put(h, b"vol-1", b"a")
    ado_shard.kv_put(h, b"other", b"b")

    [packed] = _invoke(ado_shard, h, b"vol-1", b"create")
    assert struct.unpack("<QQ", packed)[1] == 32
    assert ado_shard.kv_get(h, b"vol-1.child") == bytes(32)

    assert _invoke(ado_shard, h, b"vol-1", b"open-self") == [struct.pack("<Q", 1)]
    [offset] = _invoke(ado_shard, h, b"vol-1", b"alloc")
    assert struct.unpack("<Q", offset)[0] % 4096 == 0

    expected = sorted([b"vol-1", b"other", b"vol-1.child"])
    assert _invoke(ado_shard, h, b"vol-1", b"refs") == expected
    assert _invoke(ado_shard, h, b"vol-1", b"iterate") == expected
    assert _invoke(ado_shard, h, b"other", b"find") == [b"vol-1.child"]
    assert _invoke(ado_shard, h, b"other", b"info") == [b"3"]


def test_mutation_invalidates_cursor(ado_shard):
    h = ado_shard.pool_create("calls").handle
    for i in range(3):
        ado_shard.kv_put(h, b"k%d" % i, b"v")
    with pytest.raises(UnknownCursor):
        _invoke(ado_shard, h, b"k0", b"stale-cursor")


def test_plugin_bounds_checking(ado_shard):
    h = ado_shard.pool_create("calls").handle
    ado_shard.kv_put(h, b"k", b"v")
    with pytest.raises(BoundsError):
        _invoke(ado_shard, h, b"k", b"escape")
    assert ado_shard.kv_get(h, b"k") == b"v"


def test_drain_waits_for_queued_work(ado_shard):
    h = ado_shard.pool_create("echo").handle
    ado_shard.kv_put(h, b"k", b"v")
    futures = [ado_shard.invoke_ado(h, b"k", b"%d" % i) for i in range(20)]
    ado_shard.drain()
    assert all(f.done() for f in futures)
    assert [f.result()[0] for f in futures] == [b"%d" % i for i in range(20)]


def test_worker_runs_where_configured(ado_shard):
    h = ado_shard.pool_create("calls").handle
    ado_shard.kv_put(h, b"k", b"v")
    [pid] = _invoke(ado_shard, h, b"k", b"pid")
    assert (int(pid) != os.getpid()) == ado_shard.config.ado_process


def test_plugin_writes_into_an_appended_region_file(ado_shard):
    h = ado_shard.pool_create("calls").handle
    ado_shard.kv_put(h, b"k", b"v")
    [packed] = _invoke(ado_shard, h, b"k", b"grow")
    offset = struct.unpack("<Q", packed)[0]
    region = ado_shard.pool(h).region
    assert region.region_count == 2
    assert region_index(offset) == 1
    assert region.read(offset, 5) == b"grown"


def test_pool_close_stops_the_worker(ado_shard):
    pool = ado_shard.pool_create("echo")
    ado_shard.kv_put(pool.handle, b"k", b"v")
    assert _invoke(ado_shard, pool.handle, b"k", b"x") == [b"x"]
    worker = pool.worker
    ado_shard.pool_close(pool.handle)
    assert worker._stopped
    if ado_shard.config.ado_process:
        assert not worker._process.is_alive()
    reopened = ado_shard.pool_open("echo")
    assert _invoke(ado_shard, reopened.handle, b"k", b"y") == [b"y"]

import pytest

from active_store.errors import (
    Busy,
    NameCollision,
    NotFound,
    OutOfMemory,
    ParameterError,
    WrongShard,
)
from active_store.pmem import region_index
from active_store.store import Shard
from tests.conftest import make_config


@pytest.fixture
def kv_shard(data_dir):
    s = Shard(make_config(data_dir, plugins=[]))
    yield s
    s.close()


def test_pool_lifecycle(kv_shard, data_dir):
    pool = kv_shard.pool_create("alpha")
    assert (data_dir / "alpha.pool").exists()
    assert kv_shard.list_pools() == ["alpha"]
    with pytest.raises(NameCollision):
        kv_shard.pool_create("alpha")
    with pytest.raises(Busy):
        kv_shard.pool_delete("alpha")
    kv_shard.pool_close(pool.handle)
    with pytest.raises(NotFound):
        kv_shard.kv_get(pool.handle, b"k")
    kv_shard.pool_delete("alpha")
    assert kv_shard.list_pools() == []
    with pytest.raises(NotFound):
        kv_shard.pool_open("alpha")
    with pytest.raises(NotFound):
        kv_shard.pool_delete("alpha")


def test_invalid_pool_name(kv_shard):
    with pytest.raises(ParameterError):
        kv_shard.pool_create("../escape")


def test_open_is_reference_counted(kv_shard):
    pool = kv_shard.pool_create("shared")
    again = kv_shard.pool_open("shared")
    assert again.handle == pool.handle
    kv_shard.pool_close(pool.handle)
    kv_shard.kv_put(pool.handle, b"still", b"open")
    kv_shard.pool_close(pool.handle)
    assert kv_shard.open_pool("shared") is None


def test_kv_operations(kv_shard):
    h = kv_shard.pool_create("kv").handle
    kv_shard.kv_put(h, b"a", b"1")
    kv_shard.kv_put(h, b"a", b"replaced")
    kv_shard.kv_put(h, b"empty", b"")
    assert kv_shard.kv_get(h, b"a") == b"replaced"
    assert kv_shard.kv_get(h, b"empty") == b""
    kv_shard.kv_resize(h, b"a", 4)
    assert kv_shard.kv_get(h, b"a") == b"repl"
    kv_shard.kv_resize(h, b"a", 6)
    assert kv_shard.kv_get(h, b"a") == b"repl\0\0"
    kv_shard.kv_erase(h, b"a")
    with pytest.raises(NotFound):
        kv_shard.kv_get(h, b"a")
    with pytest.raises(ParameterError):
        kv_shard.kv_put(h, b"", b"x")
    with pytest.raises(ParameterError):
        kv_shard.kv_resize(h, b"empty", -1)


def test_pairs_survive_restart(data_dir):
    s = Shard(make_config(data_dir, plugins=[]))
    h = s.pool_create("durable").handle
    for i in range(200):
        s.kv_put(h, b"k%d" % i, b"v" * i)
    digest = s.pool_digest(h)
    s.close()

    s = Shard(make_config(data_dir, plugins=[]))
    try:
        pool = s.pool_open("durable")
        assert s.kv_get(pool.handle, b"k150") == b"v" * 150
        assert s.pool_digest(pool.handle) == digest
        assert pool.table.check() == []
        assert pool.region.check_heaps() == []
    finally:
        s.close()


def test_pool_grows_into_second_region_file(data_dir):
    cfg = make_config(data_dir, plugins=[], pool_size=1024 * 1024, expansion_chunk=1024 * 1024)
    s = Shard(cfg)
    try:
        pool = s.pool_create("small")
        before = pool.region.capacity
        s.kv_put(pool.handle, b"big", b"x" * (1536 * 1024))
        for i in range(50):
            s.kv_put(pool.handle, b"k%d" % i, b"v" * 100)
        assert pool.region.region_count == 2
        assert pool.region.capacity > before
        assert (data_dir / "small.pool").stat().st_size == 1024 * 1024
        assert (data_dir / "small.pool.1").exists()
        assert region_index(pool.table.get(b"big").offset) == 1
        assert s.pool_info("small")["region_files"] == 2
        assert s.list_pools() == ["small"]
        digest = s.pool_digest(pool.handle)
    finally:
        s.close()

    s = Shard(cfg)
    try:
        pool = s.pool_open("small")
        assert pool.region.region_count == 2
        assert s.kv_get(pool.handle, b"big") == b"x" * (1536 * 1024)
        assert s.kv_get(pool.handle, b"k49") == b"v" * 100
        assert s.pool_digest(pool.handle) == digest
        assert pool.region.check_heaps() == [] and pool.table.check() == []
        s.kv_erase(pool.handle, b"big")
        s.pool_close(pool.handle)
        s.pool_delete("small")
        assert list(data_dir.iterdir()) == []
    finally:
        s.close()


def test_growth_disabled(data_dir):
    s = Shard(make_config(data_dir, plugins=[], pool_size=1024 * 1024, expansion_chunk=0))
    try:
        h = s.pool_create("fixed").handle
        with pytest.raises(OutOfMemory):
            s.kv_put(h, b"big", b"x" * (2 * 1024 * 1024))
    finally:
        s.close()


def test_foreign_shard_rejects_pool_and_handle(data_dir):
    owner = Shard(make_config(data_dir, plugins=[], shard_id=0))
    h = owner.pool_create("mine").handle
    owner.close()

    other = Shard(make_config(data_dir, plugins=[], shard_id=1))
    try:
        with pytest.raises(WrongShard):
            other.pool_open("mine")
        with pytest.raises(WrongShard):
            other.kv_get(h, b"k")
    finally:
        other.close()


def test_pool_info(kv_shard):
    pool = kv_shard.pool_create("info")
    kv_shard.kv_put(pool.handle, b"a", b"x" * 1000)
    info = kv_shard.pool_info("info")
    assert info["pair_count"] == 1
    assert info["used_bytes"] > 1000
    assert info["free_bytes"] + info["used_bytes"] <= info["size"]
    assert info["plugins"] == []
    with pytest.raises(NotFound):
        kv_shard.pool_info("closed-or-missing")


def test_digest_is_logical(kv_shard):
    a = kv_shard.pool_create("a").handle
    b = kv_shard.pool_create("b").handle
    kv_shard.kv_put(a, b"x", b"1")
    kv_shard.kv_put(a, b"y", b"2")
    kv_shard.kv_put(b, b"filler", b"z" * 5000)
    kv_shard.kv_erase(b, b"filler")
    kv_shard.kv_put(b, b"y", b"2")
    kv_shard.kv_put(b, b"x", b"1")
    assert kv_shard.pool_digest(a) == kv_shard.pool_digest(b)
    kv_shard.kv_put(b, b"x", b"3")
    assert kv_shard.pool_digest(a) != kv_shard.pool_digest(b)


def test_interrupted_create_leaves_no_pool(kv_shard, data_dir):
    (data_dir / "ghost.pool.tmp").write_bytes(b"partial")
    assert kv_shard.list_pools() == []
    kv_shard.pool_create("ghost")
    assert kv_shard.list_pools() == ["ghost"]


def test_plugins_for_globs(data_dir):
    config = make_config(data_dir, plugins=["cdp"], pool_plugins={"plain-*": [], "exact": ["echo"]})
    assert config.plugins_for("plain-1") == []
    assert config.plugins_for("exact") == ["echo"]
    assert config.plugins_for("vol") == ["cdp"]

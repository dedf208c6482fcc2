import numpy as np
import pytest

from active_store import config
from active_store.cdp import CdpClient
from active_store.config import ShardConfig
from active_store.server import ShardServer
from active_store.store import Shard

TEST_POOL_SIZE = 8 * 1024 * 1024


@pytest.fixture(autouse=True)
def fast_flush(monkeypatch):
    """msync per persist is too slow for unit tests; durability is tested on the emulator."""
    monkeypatch.setattr(config, "FLUSH_MODE", "none")
    monkeypatch.setattr(config, "CDP_CHUNK_SIZE", 256 * 1024)


@pytest.fixture
def data_dir(tmp_path):
    path = tmp_path / "data"
    path.mkdir()
    return path


def make_config(data_dir, **overrides) -> ShardConfig:
    settings = {
        "data_dir": str(data_dir),
        "port": 0,
        "pool_size": TEST_POOL_SIZE,
        "expansion_chunk": 4 * 1024 * 1024,
        "undo_log_entries": 1024,
        "plugins": ["cdp"],
    }
    settings.update(overrides)
    return ShardConfig(**settings)


@pytest.fixture
def shard_config(data_dir):
    return make_config(data_dir)


@pytest.fixture
def shard(shard_config):
    s = Shard(shard_config)
    yield s
    s.close()


@pytest.fixture
def cdp_pool(shard):
    return shard.pool_create("cdp-test")


@pytest.fixture
def cdp(shard, cdp_pool):
    return CdpClient.over_shard(shard, cdp_pool.handle, timeout=30)


@pytest.fixture
def server(shard_config):
    srv = ShardServer(shard_config).start_in_thread()
    yield srv
    srv.stop()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_updates(rng, count: int, blocks: int = 4096, max_span: int = 64, start_ts: int = 1000):
    """(virtual_offset, length, managed_offset, timestamp) tuples; some timestamps repeat."""
    spans = rng.integers(1, max_span + 1, count)
    offsets = rng.integers(0, blocks - max_span, count)
    managed = np.cumsum(spans) - spans + 1_000_000
    steps = rng.integers(0, 3, count)  # 0 repeats the previous timestamp
    stamps = start_ts + np.cumsum(steps)
    return [(int(v), int(n), int(m), int(t)) for v, n, m, t in zip(offsets, spans, managed, stamps)]


UPDATE_FIELDS = np.dtype([("virtual_offset", "<u8"), ("length", "<u8"), ("managed_offset", "<u8"),
                          ("timestamp", "<u8")])


def as_records(updates) -> np.ndarray:
    return np.array(updates, dtype=UPDATE_FIELDS)

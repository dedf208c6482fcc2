import httpx
import pytest
from fastapi.testclient import TestClient

from active_store.admin import create_app
from active_store.server import ShardServer
from tests.conftest import make_config


@pytest.fixture
def admin(shard):
    return TestClient(create_app(shard))


def test_root_and_health(admin):
    assert admin.get("/").json() == {"status": "ok", "service": "active-store shard", "shard_id": 0}
    assert admin.get("/health").json() == {"status": "healthy"}


def test_pool_listing(admin, shard):
    shard.pool_create("open-one")
    shard.pool_close(shard.pool_create("closed-one").handle)
    pools = admin.get("/api/pools").json()["pools"]
    assert pools == [{"name": "closed-one", "open": False}, {"name": "open-one", "open": True}]


def test_pool_info_and_digest(admin, shard):
    pool = shard.pool_create("inspect")
    shard.kv_put(pool.handle, b"k", b"v")
    info = admin.get("/api/pools/inspect").json()
    assert info["pair_count"] >= 1
    assert info["plugins"] == ["cdp"]
    digest = admin.get("/api/pools/inspect/digest").json()
    assert digest == {"name": "inspect", "digest": shard.pool_digest(pool.handle)}


def test_unknown_pool_is_404(admin):
    response = admin.get("/api/pools/nope")
    assert response.status_code == 404
    assert "error" in response.json()
    assert admin.get("/api/pools/nope/digest").status_code == 404


def test_admin_served_beside_the_protocol(data_dir):
    server = ShardServer(make_config(data_dir, admin_port=0)).start_in_thread()
    try:
        assert server.admin_port
        response = httpx.get(f"http://127.0.0.1:{server.admin_port}/health", timeout=10)
        assert response.json() == {"status": "healthy"}
    finally:
        server.stop()

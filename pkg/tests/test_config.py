import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from active_store.config import ServerConfig, ShardConfig, load_server_config
from active_store.errors import ConfigError

EXAMPLE = Path(__file__).resolve().parent.parent / "config" / "server.example.json"


def test_example_config_loads():
    server_config = load_server_config(EXAMPLE)
    [shard] = server_config.shards
    assert shard.plugins == ["cdp"]
    assert shard.admin_port == 8000


def test_shard_count_override():
    base = ServerConfig(shards=[ShardConfig(port=7000, admin_port=8000, data_dir="/tmp/x")])
    grown = base.with_shard_count(3)
    assert [s.shard_id for s in grown.shards] == [0, 1, 2]
    assert [s.port for s in grown.shards] == [7000, 7001, 7002]
    assert [s.admin_port for s in grown.shards] == [8000, 8001, 8002]
    assert {s.data_dir for s in grown.shards} == {"/tmp/x"}
    assert len(grown.with_shard_count(1).shards) == 1
    ephemeral = ServerConfig(shards=[ShardConfig(port=0)]).with_shard_count(2)
    assert [s.port for s in ephemeral.shards] == [0, 0]
    with pytest.raises(ConfigError):
        base.with_shard_count(0)


def test_plugins_for():
    shard = ShardConfig(plugins=["cdp"], pool_plugins={"plain-*": [], "exact": ["echo", "fault"]})
    assert shard.plugins_for("volumes") == ["cdp"]
    assert shard.plugins_for("plain-1") == []
    assert shard.plugins_for("exact") == ["echo", "fault"]


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_server_config(tmp_path / "missing.json")
    path = tmp_path / "server.json"
    path.write_text(json.dumps({"version": 2}))
    with pytest.raises(ConfigError):
        load_server_config(path)
    path.write_text(json.dumps({"shards": [{"port": 70000}]}))
    with pytest.raises(ConfigError):
        load_server_config(path)
    path.write_text("[")
    with pytest.raises(ConfigError):
        load_server_config(path)


def test_port_validation():
    with pytest.raises(ValidationError):
        ShardConfig(port=-1)

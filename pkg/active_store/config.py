"""Server configuration: environment defaults plus the declarative config file."""

import fnmatch
import json
import os
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, ValidationError, field_validator

from active_store.errors import ConfigError

# Data directory (supports a mounted volume via env var)
DATA_DIR = Path(os.environ.get("ACTIVE_STORE_DATA_DIR", "./data"))

# Pool sizing
DEFAULT_POOL_SIZE = int(os.environ.get("ACTIVE_STORE_POOL_SIZE", str(64 * 1024 * 1024)))
DEFAULT_EXPANSION_CHUNK = int(os.environ.get("ACTIVE_STORE_EXPANSION_CHUNK", str(64 * 1024 * 1024)))
UNDO_LOG_ENTRIES = int(os.environ.get("ACTIVE_STORE_UNDO_LOG_ENTRIES", "4096"))

# "msync" flushes the mapped file on persist(); "none" leaves it to the kernel
FLUSH_MODE = os.environ.get("ACTIVE_STORE_FLUSH_MODE", "msync")

# ADO runtime
WORKER_QUEUE_DEPTH = int(os.environ.get("ACTIVE_STORE_WORKER_QUEUE_DEPTH", "64"))
SECONDARY_WORKERS = int(os.environ.get("ACTIVE_STORE_SECONDARY_WORKERS", "1"))
STRICT_BOUNDS = os.environ.get("ACTIVE_STORE_STRICT_BOUNDS", "true").lower() == "true"
# Run each pool's plugin stack in its own child process instead of a thread
ADO_PROCESS = os.environ.get("ACTIVE_STORE_ADO_PROCESS", "false").lower() == "true"

# CDP plugin-local heap grows in chunks taken from the pool ("64MiB is typical")
CDP_CHUNK_SIZE = int(os.environ.get("ACTIVE_STORE_CDP_CHUNK_SIZE", str(64 * 1024 * 1024)))

# Wire protocol
MAX_FRAME_SIZE = int(os.environ.get("ACTIVE_STORE_MAX_FRAME_SIZE", str(256 * 1024 * 1024)))
REQUEST_TIMEOUT = float(os.environ.get("ACTIVE_STORE_REQUEST_TIMEOUT", "30"))

LOG_LEVEL = os.environ.get("ACTIVE_STORE_LOG_LEVEL", "INFO")

CONFIG_VERSION = 1


class ShardConfig(BaseModel):
    """One shard: a single endpoint and the pools it serves."""
    shard_id: int = 0
    host: str = "127.0.0.1"
    port: int = 11911
    admin_port: Optional[int] = None  # FastAPI admin app, disabled when unset
    data_dir: str = str(DATA_DIR)
    pool_size: int = DEFAULT_POOL_SIZE
    expansion_chunk: int = DEFAULT_EXPANSION_CHUNK  # 0 disables pool growth
    undo_log_entries: int = UNDO_LOG_ENTRIES
    plugins: list[str] = []  # default ADO stack, in layering order
    pool_plugins: dict[str, list[str]] = {}  # per-pool overrides, exact name or glob
    worker_queue_depth: int = WORKER_QUEUE_DEPTH
    secondary_workers: int = SECONDARY_WORKERS
    ado_process: bool = ADO_PROCESS
    cpu_hints: list[int] = []  # advisory only

    @field_validator("port")
    @classmethod
    def _valid_port(cls, value: int) -> int:
        if not 0 <= value <= 65535:
            raise ValueError(f"port out of range: {value}")
        return value

    def plugins_for(self, pool_name: str) -> list[str]:
        if pool_name in self.pool_plugins:
            return self.pool_plugins[pool_name]
        for pattern, plugins in self.pool_plugins.items():
            if fnmatch.fnmatchcase(pool_name, pattern):
                return plugins
        return self.plugins


class ServerConfig(BaseModel):
    version: int = CONFIG_VERSION
    shards: list[ShardConfig] = Field(default_factory=lambda: [ShardConfig()])

    @field_validator("version")
    @classmethod
    def _supported_version(cls, value: int) -> int:
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {value} (expected {CONFIG_VERSION})")
        return value

    def with_shard_count(self, count: int) -> "ServerConfig":
        """Apply the --shards override: repeat the last shard on consecutive ports."""
        if count < 1:
            raise ConfigError("shard count must be >= 1")
        shards = [s.model_copy() for s in self.shards[:count]]
        while len(shards) < count:
            last = shards[-1]
            shards.append(last.model_copy(update={
                "shard_id": last.shard_id + 1,
                "port": last.port + 1 if last.port else 0,
                "admin_port": last.admin_port + 1 if last.admin_port else None,
            }))
        return self.model_copy(update={"shards": shards})


def load_server_config(path) -> ServerConfig:
    """Load and validate a JSON server config file."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to read config {path}: {e}")
    try:
        return ServerConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}")

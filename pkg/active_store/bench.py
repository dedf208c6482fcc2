"""
Benchmark and crash-injection harness.

Experiments:
    write-scaling   update throughput vs shard count, and with replication
    query-latency   point-in-time query latency per quantum size
    query-load      one writer and one periodic querier on the same shard
    footprint       persistent/volatile bytes, ADO mode vs Plain-KV
    crash           random crash points, reopen, invariant sweep

The harness measures and reports. It asserts only directional properties
(recorded under "checks" in the report), never absolute numbers.

Usage:
    python -m active_store.bench write-scaling --spec config/bench.example.json --out results/
    python -m active_store.bench crash --spec config/bench.example.json --out results/
"""

import argparse
import csv
import json
import logging
import os
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Literal, Optional

import httpx
import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from active_store import config
from active_store.cdp import (
    VOLUME_MAGIC,
    CdpClient,
    IntervalMap,
    clip_mapping,
    oracle_query,
    records_for,
    retained_history,
    verify_volume,
)
from active_store.config import ServerConfig, ShardConfig
from active_store.errors import ConfigError, HistoryTrimmed, StoreError
from active_store.plainkv import KvTarget, PlainKvCdp
from active_store.pmem import CrashEmulator
from active_store.proto import ReplicaSet, StoreClient
from active_store.server import CRASH_EXIT_CODE
from active_store.store import Shard

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
THROUGHPUT_SAMPLE = 12_500
LATENCY_EDGES_US = np.logspace(0, 6, 61)  # 1 us .. 1 s
SYNTHETIC_EPOCH = 1_000_000_000
SYNTHETIC_STEP = 1_000
DEFAULT_WINDOW_SECONDS = 30.0
SERVER_VOLATILE_PER_PAIR = 96  # sorted-key index entry + allocator map slot, estimate

UPDATE_DTYPE = np.dtype([("volume", "<u4"), ("virtual_offset", "<u8"), ("length", "<u4"),
                         ("managed_offset", "<u8"), ("timestamp", "<u8")])


# =============================================================================
# SPEC AND REPORT
# =============================================================================

class WorkloadSpec(BaseModel):
    """Declarative workload; the same (seed, spec) always yields the same update stream."""
    volumes: int = 1  # per client thread
    blocks_per_volume: int = 1_000_000
    max_span: int = 100
    threads: int = 1  # client threads per shard
    updates: int = 100_000  # per thread; ignored when window_seconds is set
    window_seconds: Optional[float] = None
    seed: int = 0
    mode: Literal["ado", "plain_kv"] = "ado"
    replication: int = 1
    shards: list[int] = [1, 2, 4]
    quantum_mib: int = 4
    quantum_records: Optional[int] = None  # overrides quantum_mib for scaled-down runs
    sweep_quantum_mib: list[int] = [4, 8, 16]
    sweep_quantum_records: Optional[list[int]] = None
    retention: int = 10
    synthetic_clock: bool = True
    pool_mib: int = 64
    cdp_chunk_kib: Optional[int] = None
    queries: int = 50
    query_blocks: int = 100_000
    query_interval_seconds: float = 1.0
    fill_quanta: int = 3
    crash_points: int = 200
    crash_updates: int = 300
    crash_queries: int = 20
    sample_interval: int = THROUGHPUT_SAMPLE

    @field_validator("replication")
    @classmethod
    def _replicas(cls, value: int) -> int:
        if not 1 <= value <= 3:
            raise ValueError("replication must be 1, 2 or 3")
        return value

    @field_validator("max_span")
    @classmethod
    def _span(cls, value: int) -> int:
        if value < 1:
            raise ValueError("max_span must be >= 1")
        return value

    @property
    def capacity(self) -> int:
        return self.quantum_records or records_for(self.quantum_mib)

    @property
    def sweep_capacities(self) -> list[int]:
        return self.sweep_quantum_records or [records_for(m) for m in self.sweep_quantum_mib]


class Report(BaseModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    experiment: str
    spec: WorkloadSpec
    rows: list[dict] = []
    histograms: dict[str, list[int]] = {}
    bucket_edges_us: list[float] = Field(default_factory=lambda: LATENCY_EDGES_US.tolist())
    checks: dict[str, bool] = {}
    notes: dict[str, Any] = {}

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def load_spec(path) -> WorkloadSpec:
    try:
        with open(path) as f:
            return WorkloadSpec.model_validate(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to read workload spec {path}: {e}")
    except ValidationError as e:
        raise ConfigError(f"Invalid workload spec {path}: {e}")


def write_report(report: Report, out_dir) -> tuple[Path, Path]:
    """<experiment>.json (full report) and <experiment>.csv (rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{report.experiment}.json"
    csv_path = out_dir / f"{report.experiment}.csv"
    with open(json_path, "w") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
    columns = sorted({k for row in report.rows for k in row})
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["schema_version"] + columns)
        writer.writeheader()
        for row in report.rows:
            writer.writerow({"schema_version": REPORT_SCHEMA_VERSION, **row})
    return json_path, csv_path


def latency_histogram(latencies_us) -> list[int]:
    counts, _ = np.histogram(np.clip(np.asarray(latencies_us, dtype=float), 1.0, 1e6), bins=LATENCY_EDGES_US)
    return counts.tolist()


def _percentiles(values) -> dict:
    if not len(values):
        return {"p50": 0.0, "p99": 0.0, "max": 0.0}
    arr = np.asarray(values, dtype=float)
    return {"p50": float(np.percentile(arr, 50)), "p99": float(np.percentile(arr, 99)), "max": float(arr.max())}


# =============================================================================
# WORKLOAD
# =============================================================================

class UpdateStream:
    """Reproducible update generator for one client thread."""

    def __init__(self, spec: WorkloadSpec, stream_id: int):
        self.spec = spec
        self._rng = np.random.default_rng([spec.seed, stream_id])
        self._managed = 0
        self._clock = SYNTHETIC_EPOCH
        self.generated = 0

    def batch(self, n: int) -> np.ndarray:
        spec = self.spec
        out = np.empty(n, dtype=UPDATE_DTYPE)
        spans = self._rng.integers(1, spec.max_span + 1, n)
        out["volume"] = self._rng.integers(0, spec.volumes, n)
        out["length"] = spans
        out["virtual_offset"] = self._rng.integers(0, np.maximum(spec.blocks_per_volume - spans, 0) + 1)
        ends = np.cumsum(spans, dtype=np.uint64)
        out["managed_offset"] = self._managed + ends - spans.astype(np.uint64)
        self._managed += int(ends[-1]) if n else 0
        out["timestamp"] = self._clock + np.arange(n, dtype=np.uint64) * SYNTHETIC_STEP
        self._clock += n * SYNTHETIC_STEP
        self.generated += n
        return out


def volume_name(thread_id: int, volume: int) -> bytes:
    return b"vol-%d-%d" % (thread_id, volume)


class _Clock:
    """Synthetic timestamps come from the stream; real ones are monotone wall-clock ns."""

    def __init__(self, synthetic: bool):
        self.synthetic = synthetic
        self._last = 0

    def stamp(self, generated: int) -> int:
        if self.synthetic:
            return generated
        self._last = max(self._last, time.time_ns())
        return self._last


# =============================================================================
# LOCAL CLUSTER
# =============================================================================

def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LocalCluster:
    """Shard servers on loopback, one OS process per shard (python -m active_store.server)."""

    def __init__(self, shard_count: int, workdir, plugins: Optional[list[str]] = None,
                 pool_plugins: Optional[dict] = None, admin: bool = False, env: Optional[dict] = None,
                 pool_mib: int = 64, crash_point: Optional[tuple[int, int]] = None):
        self.workdir = Path(workdir)
        self.crash_point = crash_point
        shards = []
        for i in range(shard_count):
            shards.append(ShardConfig(
                shard_id=i, port=_free_port(), admin_port=_free_port() if admin else None,
                data_dir=str(self.workdir / f"shard{i}"), pool_size=pool_mib * 1024 * 1024,
                plugins=plugins if plugins is not None else ["cdp"], pool_plugins=pool_plugins or {},
            ))
        self.config = ServerConfig(shards=shards)
        self.env = {**os.environ, **(env or {})}
        self._process: Optional[subprocess.Popen] = None

    @property
    def endpoints(self) -> list[tuple[str, int]]:
        return [(s.host, s.port) for s in self.config.shards]

    def admin_url(self, shard: int = 0) -> str:
        s = self.config.shards[shard]
        return f"http://{s.host}:{s.admin_port}"

    def start(self, timeout: float = 30.0):
        self.workdir.mkdir(parents=True, exist_ok=True)
        path = self.workdir / "server.json"
        path.write_text(self.config.model_dump_json(indent=2))
        command = [sys.executable, "-m", "active_store.server", "--config", str(path)]
        if self.crash_point:
            command += ["--crash-point", "%d:%d" % self.crash_point]
        self._process = subprocess.Popen(command, env=self.env)
        deadline = time.monotonic() + timeout
        for host, port in self.endpoints:
            while True:
                try:
                    socket.create_connection((host, port), timeout=1).close()
                    break
                except OSError:
                    if self._process.poll() is not None or time.monotonic() > deadline:
                        self.stop()
                        raise ConfigError(f"shard server on port {port} did not come up")
                    time.sleep(0.05)
        for i, shard in enumerate(self.config.shards):
            if shard.admin_port is None:
                continue
            while time.monotonic() < deadline:
                try:
                    httpx.get(self.admin_url(i) + "/health", timeout=1).raise_for_status()
                    break
                except httpx.HTTPError:
                    time.sleep(0.05)

    def shard_dir(self, shard: int = 0) -> Path:
        return Path(self.config.shards[shard].data_dir)

    def wait(self, timeout: float) -> Optional[int]:
        """Exit code of the server process, or None if it is still running after `timeout`."""
        try:
            return self._process.wait(timeout)
        except subprocess.TimeoutExpired:
            return None

    def stop(self):
        if self._process is None or self._process.poll() is not None:
            return
        self._process.send_signal(signal.SIGINT)
        try:
            self._process.wait(15)
        except subprocess.TimeoutExpired:
            self._process.kill()
            self._process.wait()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


def _chunk_env(spec: WorkloadSpec) -> dict:
    return {"ACTIVE_STORE_CDP_CHUNK_SIZE": str(spec.cdp_chunk_kib * 1024)} if spec.cdp_chunk_kib else {}


# =============================================================================
# WRITERS
# =============================================================================

class _WriterResult:
    def __init__(self):
        self.updates = 0
        self.elapsed = 0.0
        self.latencies_us: list[float] = []
        self.samples: list[tuple[float, float]] = []  # (seconds since start, updates/s in the interval)
        self.round_trips = 0
        self.error: Optional[str] = None


def _run_writer(spec: WorkloadSpec, thread_id: int, endpoints: list[tuple[str, int]], mode: str,
                result: _WriterResult, stop: threading.Event, pool_name: Optional[str] = None):
    """One client thread: its own connection(s), pool and volumes."""
    stream = UpdateStream(spec, thread_id)
    clock = _Clock(spec.synthetic_clock)
    pool_name = pool_name or f"{'ado' if mode == 'ado' else 'plain'}-{thread_id}"
    size = spec.pool_mib * 1024 * 1024
    replicas = None
    client = None
    try:
        if len(endpoints) > 1:
            replicas = ReplicaSet(endpoints)
            replicas.open_pool(pool_name, create_size=size)
            cdp = CdpClient.over_replicas(replicas)
            counter = replicas
        else:
            client = StoreClient(*endpoints[0])
            handle = client.create_pool(pool_name, size)
            counter = client
            if mode == "ado":
                cdp = CdpClient.over_connection(client, handle)
            else:
                cdp = PlainKvCdp(KvTarget.over_connection(client, handle))
        for v in range(spec.volumes):
            cdp.configure(volume_name(thread_id, v), capacity=spec.capacity, retention=spec.retention)

        base_trips = counter.round_trips
        start = time.perf_counter()
        mark, mark_count = start, 0
        deadline = start + spec.window_seconds if spec.window_seconds else None
        target = None if deadline else spec.updates
        while not stop.is_set():
            if target is not None and result.updates >= target:
                break
            n = spec.sample_interval if target is None else min(spec.sample_interval, target - result.updates)
            for upd in stream.batch(n):
                ts = clock.stamp(int(upd["timestamp"]))
                t0 = time.perf_counter_ns()
                cdp.update(volume_name(thread_id, int(upd["volume"])), int(upd["virtual_offset"]),
                           int(upd["length"]), int(upd["managed_offset"]), ts)
                result.latencies_us.append((time.perf_counter_ns() - t0) / 1000)
                result.updates += 1
                if deadline and time.perf_counter() > deadline:
                    break
            now = time.perf_counter()
            result.samples.append((now - start, (result.updates - mark_count) / max(now - mark, 1e-9)))
            mark, mark_count = now, result.updates
            if deadline and now > deadline:
                break
        result.elapsed = time.perf_counter() - start
        result.round_trips = counter.round_trips - base_trips
    except (StoreError, OSError) as e:
        result.error = f"{type(e).__name__}: {e}"
        logger.warning("Writer %d failed: %s", thread_id, result.error)
    finally:
        if replicas is not None:
            replicas.close()
        if client is not None:
            client.close()


def _run_writers(spec: WorkloadSpec, endpoint_groups: list[list[tuple[str, int]]], mode: str) -> list[_WriterResult]:
    results = [_WriterResult() for _ in endpoint_groups]
    stop = threading.Event()
    threads = [threading.Thread(target=_run_writer, args=(spec, i, group, mode, results[i], stop), daemon=True)
               for i, group in enumerate(endpoint_groups)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def _summarize_writers(results: list[_WriterResult]) -> dict:
    updates = sum(r.updates for r in results)
    elapsed = max((r.elapsed for r in results), default=0.0)
    latencies = [x for r in results for x in r.latencies_us]
    return {
        "updates": updates,
        "throughput": updates / elapsed if elapsed else 0.0,
        "round_trips_per_update": sum(r.round_trips for r in results) / updates if updates else 0.0,
        "latency_us": _percentiles(latencies),
        "errors": [r.error for r in results if r.error],
        "latencies": latencies,
    }


# =============================================================================
# EXPERIMENTS
# =============================================================================

def run_write_scaling(spec: WorkloadSpec, workdir) -> Report:
    """Throughput vs shard count at fixed per-shard load, then with replication."""
    report = Report(experiment="write-scaling", spec=spec)
    throughputs = []
    for shards in spec.shards:
        with LocalCluster(shards, Path(workdir) / f"s{shards}", env=_chunk_env(spec), pool_mib=spec.pool_mib) as cluster:
            groups = [[cluster.endpoints[i % shards]] for i in range(shards * spec.threads)]
            stats = _summarize_writers(_run_writers(spec, groups, spec.mode))
        throughputs.append(stats["throughput"])
        report.histograms[f"shards={shards}"] = latency_histogram(stats.pop("latencies"))
        report.rows.append({"shards": shards, "replication": 1, "mode": spec.mode, "updates": stats["updates"],
                            "throughput": stats["throughput"], "p50_us": stats["latency_us"]["p50"],
                            "p99_us": stats["latency_us"]["p99"],
                            "round_trips_per_update": stats["round_trips_per_update"]})
        print(f"  shards={shards}: {stats['throughput']:.0f} updates/s, p99 {stats['latency_us']['p99']:.0f} us")
        if stats["errors"]:
            report.notes[f"errors_shards_{shards}"] = stats["errors"]
    report.checks["throughput_monotone_in_shards"] = all(
        b >= 0.9 * a for a, b in zip(throughputs, throughputs[1:]))
    if spec.mode == "ado":
        report.checks["one_round_trip_per_update"] = all(
            abs(row["round_trips_per_update"] - 1.0) < 1e-9 for row in report.rows)
    else:
        report.checks["plain_kv_at_least_one_round_trip"] = all(
            row["round_trips_per_update"] >= 1.0 for row in report.rows)

    if spec.replication > 1 and spec.mode == "ado":
        r = spec.replication
        with LocalCluster(r, Path(workdir) / f"r{r}", env=_chunk_env(spec), pool_mib=spec.pool_mib) as cluster:
            stats = _summarize_writers(_run_writers(spec, [cluster.endpoints] * spec.threads, "ado"))
        report.histograms[f"replication={r}"] = latency_histogram(stats.pop("latencies"))
        report.rows.append({"shards": 1, "replication": r, "mode": "ado", "updates": stats["updates"],
                            "throughput": stats["throughput"], "p50_us": stats["latency_us"]["p50"],
                            "p99_us": stats["latency_us"]["p99"],
                            "round_trips_per_update": stats["round_trips_per_update"]})
        report.notes["replication_ratio"] = stats["throughput"] / throughputs[0] if throughputs[0] else 0.0
        report.checks["replicated_not_faster"] = stats["throughput"] <= throughputs[0] * 1.1
        print(f"  replication={r}: {stats['throughput']:.0f} updates/s")
    return report


def _load_volume(cdp: CdpClient, stream: UpdateStream, volume: bytes, count: int) -> tuple[int, int]:
    """Write `count` updates to one volume; returns (first, last) timestamps."""
    first = last = 0
    done = 0
    while done < count:
        batch = stream.batch(min(THROUGHPUT_SAMPLE, count - done))
        for upd in batch:
            cdp.update(volume, int(upd["virtual_offset"]), int(upd["length"]), int(upd["managed_offset"]),
                       int(upd["timestamp"]))
        first = first or int(batch["timestamp"][0])
        last = int(batch["timestamp"][-1])
        done += len(batch)
    return first, last


def run_query_latency(spec: WorkloadSpec, workdir) -> Report:
    """
    Point-in-time query latency per quantum size. Runs the shard in-process
    so that only plugin-side query cost is measured.
    """
    report = Report(experiment="query-latency", spec=spec)
    rng = np.random.default_rng(spec.seed)
    worst = []
    for capacity in spec.sweep_capacities:
        shard = Shard(ShardConfig(data_dir=str(Path(workdir) / f"q{capacity}"), pool_size=spec.pool_mib << 20,
                                  plugins=["cdp"]))
        try:
            pool = shard.pool_create("latency")
            cdp = CdpClient.over_shard(shard, pool.handle)
            volume = b"vol-q"
            # every filled quantum stays queryable
            cdp.configure(volume, capacity=capacity, retention=max(spec.retention, spec.fill_quanta + 1))
            t0 = time.perf_counter()
            empty = cdp.query(volume, 0, 0, spec.query_blocks)
            empty_ms = (time.perf_counter() - t0) * 1000
            first, last = _load_volume(cdp, UpdateStream(spec, 0), volume, capacity * spec.fill_quanta + capacity // 2)
            shard.drain()
            span = min(spec.query_blocks, spec.blocks_per_volume)
            latencies = []
            for _ in range(spec.queries):
                t = int(rng.integers(first, last + 1))
                start = int(rng.integers(0, spec.blocks_per_volume - span + 1))
                t0 = time.perf_counter()
                cdp.query(volume, t, start, span)
                latencies.append((time.perf_counter() - t0) * 1000)
            # boundary query: the last timestamp of the first sealed quantum, answered from its summary
            boundary_t = first + (capacity - 1) * SYNTHETIC_STEP
            t0 = time.perf_counter()
            cdp.query(volume, boundary_t, 0, span)
            boundary_ms = (time.perf_counter() - t0) * 1000
        finally:
            shard.close()
        stats = _percentiles(latencies)
        worst.append(stats["max"])
        report.rows.append({"quantum_records": capacity, "queries": len(latencies), "p50_ms": stats["p50"],
                            "p99_ms": stats["p99"], "max_ms": stats["max"], "boundary_ms": boundary_ms,
                            "empty_volume_ms": empty_ms, "empty_result": len(empty) == 0})
        report.histograms[f"quantum={capacity}"] = latency_histogram(np.asarray(latencies) * 1000)
        print(f"  quantum={capacity}: p50 {stats['p50']:.2f} ms, worst {stats['max']:.2f} ms")
    report.checks["worst_case_grows_with_quantum"] = all(b > a for a, b in zip(worst, worst[1:]))
    report.checks["empty_volume_query_is_empty"] = all(row["empty_result"] for row in report.rows)
    return report


def run_query_under_load(spec: WorkloadSpec, workdir) -> Report:
    """One writing client and one querying client against the same shard."""
    report = Report(experiment="query-load", spec=spec)
    stop = threading.Event()
    queries: list[dict] = []
    with LocalCluster(1, workdir, env=_chunk_env(spec), pool_mib=spec.pool_mib) as cluster:
        result = _WriterResult()
        writer = threading.Thread(target=_run_writer, args=(spec, 0, cluster.endpoints, "ado", result, stop),
                                  daemon=True)
        writer.start()
        origin = time.perf_counter()
        with StoreClient(*cluster.endpoints[0]) as client:
            handle = None
            while writer.is_alive() and handle is None:
                try:
                    handle = client.open_pool("ado-0")
                except StoreError:
                    time.sleep(0.05)
            cdp = CdpClient.over_connection(client, handle) if handle is not None else None
            while cdp is not None and writer.is_alive():
                time.sleep(spec.query_interval_seconds)
                t0 = time.perf_counter()
                try:
                    mapping = cdp.query(volume_name(0, 0), 2 ** 64 - 1, 0, spec.query_blocks)
                except StoreError as e:
                    logger.warning("Query failed: %s", e)
                    continue
                queries.append({"at_s": t0 - origin, "latency_ms": (time.perf_counter() - t0) * 1000,
                                "entries": len(mapping)})
        writer.join()
    for at, rate in result.samples:
        report.rows.append({"kind": "throughput", "at_s": at, "updates_per_s": rate})
    for q in queries:
        report.rows.append({"kind": "query", **q})
    report.histograms["updates"] = latency_histogram(result.latencies_us)
    report.notes["queries"] = len(queries)
    report.checks["writer_completed"] = result.error is None
    return report


def run_footprint(spec: WorkloadSpec, workdir) -> Report:
    """Server persistent bytes, server volatile estimate and client volatile bytes, ADO vs Plain-KV."""
    report = Report(experiment="footprint", spec=spec)
    updates = spec.capacity * (spec.retention + 1) + spec.capacity // 2
    one = spec.model_copy(update={"updates": updates, "window_seconds": None, "volumes": 1})
    persistent = {}
    with LocalCluster(1, workdir, plugins=[], pool_plugins={"ado-*": ["cdp"]}, admin=True,
                      env=_chunk_env(spec), pool_mib=spec.pool_mib) as cluster:
        endpoint = cluster.endpoints[0]
        with StoreClient(*endpoint) as client:
            for mode, pool_name in (("ado", "ado-fp"), ("plain_kv", "plain-fp")):
                handle = client.create_pool(pool_name, spec.pool_mib << 20)
                if mode == "ado":
                    cdp = CdpClient.over_connection(client, handle)
                else:
                    cdp = PlainKvCdp(KvTarget.over_connection(client, handle))
                volume = volume_name(0, 0)
                cdp.configure(volume, capacity=spec.capacity, retention=spec.retention)
                trips = client.round_trips
                _load_volume(cdp, UpdateStream(one, 0), volume, updates)
                trips = client.round_trips - trips
                info = httpx.get(f"{cluster.admin_url()}/api/pools/{pool_name}", timeout=30).json()
                client_bytes = cdp.volatile_bytes() if mode == "plain_kv" else 0
                persistent[mode] = info["used_bytes"]
                report.rows.append({
                    "mode": mode,
                    "updates": updates,
                    "server_persistent_bytes": info["used_bytes"],
                    "server_volatile_bytes": info["pair_count"] * SERVER_VOLATILE_PER_PAIR,
                    "client_volatile_bytes": client_bytes,
                    "pairs": info["pair_count"],
                    "round_trips": trips,
                })
                print(f"  {mode}: {info['used_bytes'] / 2 ** 20:.1f} MiB persistent, {info['pair_count']} pairs")
    report.checks["plain_kv_uses_more_persistent_bytes"] = persistent["plain_kv"] > persistent["ado"]
    ado_row, plain_row = report.rows
    report.checks["ado_one_round_trip_per_update"] = ado_row["round_trips"] == updates
    report.checks["plain_kv_extra_traffic"] = plain_row["round_trips"] > updates
    return report


# =============================================================================
# CRASH CAMPAIGN
# =============================================================================

CRASH_POOL = "crash"
CRASH_VOLUME = b"vol-crash"


def _crash_traffic(cdp: CdpClient, put: Callable[[bytes, bytes], None], spec: WorkloadSpec, inline: bool,
                   issued: list):
    """Mixed update / summarize / trim / kv_put traffic. Appends each update to `issued` before sending it."""
    rng = np.random.default_rng(spec.seed)
    cdp.configure(CRASH_VOLUME, capacity=spec.capacity, retention=spec.retention, inline_maintenance=inline)
    for i, upd in enumerate(UpdateStream(spec, 0).batch(spec.crash_updates)):
        issued.append(upd)
        cdp.update(CRASH_VOLUME, int(upd["virtual_offset"]), int(upd["length"]), int(upd["managed_offset"]),
                   int(upd["timestamp"]))
        if i % 37 == 5:
            put(b"kv-%d" % (i % 7), rng.bytes(int(rng.integers(1, 200))))
        if i % 53 == 11:
            cdp.summarize(CRASH_VOLUME)
        if i % 71 == 17:
            cdp.trim(CRASH_VOLUME)


def _crash_workload(shard: Shard, spec: WorkloadSpec, inline: bool, issued: list):
    """The crash traffic against an in-process shard (dry runs and idle crashes)."""
    pool = shard.pool_create(CRASH_POOL, spec.pool_mib << 20)
    cdp = CdpClient.over_shard(shard, pool.handle, timeout=60)
    _crash_traffic(cdp, lambda key, value: shard.kv_put(pool.handle, key, value), spec, inline, issued)
    shard.drain()


def _crash_workload_remote(endpoint: tuple[str, int], spec: WorkloadSpec, inline: bool, issued: list):
    """The crash traffic over the wire; raises once the server dies at its crash point."""
    with StoreClient(*endpoint, timeout=60) as client:
        handle = client.create_pool(CRASH_POOL, spec.pool_mib << 20)
        cdp = CdpClient.over_connection(client, handle)
        _crash_traffic(cdp, lambda key, value: client.put(handle, key, value), spec, inline, issued)


def crash_sweep(shard: Shard, issued: np.ndarray, queries: int, rng: np.random.Generator) -> list[str]:
    """Reopen the crash pool and check every durable invariant plus oracle equivalence."""
    if CRASH_POOL not in shard.list_pools():
        return []
    pool = shard.pool_open(CRASH_POOL)
    shard.drain()
    problems = pool.region.check_heaps() + pool.table.check()
    if pool.worker is not None:
        for plugin in pool.worker.plugins:
            if getattr(plugin, "heap", None) is not None:
                for heap in plugin.heap.heaps:
                    problems += heap.check()
    if CRASH_VOLUME not in pool.table:
        return problems
    root = pool.table.get(CRASH_VOLUME).offset
    if pool.region.read_u64(root) != VOLUME_MAGIC:
        return problems
    problems += verify_volume(pool.region, root)
    if problems:
        return problems

    base, as_of, records = retained_history(pool.region, root)
    for rec in records:
        seq = int(rec["sequence"])
        if seq < 1 or seq > len(issued):
            problems.append(f"record with sequence {seq} was never issued")
            continue
        want = issued[seq - 1]
        if (rec["virtual_offset"], rec["length"], rec["managed_offset"], rec["timestamp"]) != \
                (want["virtual_offset"], want["length"], want["managed_offset"], want["timestamp"]):
            problems.append(f"record {seq} does not match the issued update")
    if len(records):
        first_seq = int(records["sequence"][0])
        trimmed = issued[:first_seq - 1]
        expected_base = IntervalMap()
        expected_base.merge_records(trimmed)
        if not np.array_equal(clip_mapping(base), expected_base.clip()):
            problems.append("base summary differs from the replay of trimmed records")
    if problems or not len(records):
        return problems

    cdp = CdpClient.over_shard(shard, pool.handle, timeout=60)
    lo = max(as_of, int(records["timestamp"][0]) - SYNTHETIC_STEP)
    hi = int(records["timestamp"][-1]) + SYNTHETIC_STEP
    blocks = int(issued["virtual_offset"].max() + issued["length"].max())
    for _ in range(queries):
        t = int(rng.integers(lo, hi + 1))
        if rng.random() < 0.3:
            start = end = None
        else:
            start = int(rng.integers(0, blocks))
            end = start + int(rng.integers(1, blocks + 1))
        try:
            got = cdp.query(CRASH_VOLUME, t, start, None if start is None else end - start)
        except HistoryTrimmed:
            problems.append(f"query at t={t} rejected although t >= {as_of}")
            continue
        want = oracle_query(records, t, start, end, base)
        if not np.array_equal(got, want):
            problems.append(f"query t={t} range=({start},{end}) differs from oracle")
    return problems


def _sweep_dir(data_dir: Path, issued: list, queries: int, rng: np.random.Generator) -> list[str]:
    reopened = Shard(ShardConfig(data_dir=str(data_dir), plugins=["cdp"]))
    try:
        issued_arr = np.array(issued, dtype=UPDATE_DTYPE) if issued else np.empty(0, dtype=UPDATE_DTYPE)
        return crash_sweep(reopened, issued_arr, queries, rng)
    except (StoreError, ValueError) as e:
        return [f"reopen failed: {type(e).__name__}: {e}"]
    finally:
        reopened.close()


def run_crash_point(spec: WorkloadSpec, workdir, crash_at: int, seed: int, inline: bool,
                    rng: np.random.Generator) -> dict:
    """
    Start a shard server with --crash-point crash_at:seed, drive the crash
    traffic at it until it dies, wait for the crash exit code, then reopen
    its data directory in-process and sweep.
    """
    issued: list = []
    cluster = LocalCluster(1, workdir, plugins=["cdp"], env=_chunk_env(spec), pool_mib=spec.pool_mib,
                           crash_point=(crash_at, seed))
    cluster.start()
    interrupted = False
    try:
        _crash_workload_remote(cluster.endpoints[0], spec, inline, issued)
    except (OSError, StoreError):
        interrupted = True
    # background maintenance may still reach the crash point after the last reply
    exit_code = cluster.wait(30 if interrupted else 2)
    if exit_code is None:
        cluster.stop()
    problems = _sweep_dir(cluster.shard_dir(0), issued, spec.crash_queries, rng)
    return {"crash_at": crash_at, "inline": inline, "exit_code": exit_code,
            "fired": exit_code == CRASH_EXIT_CODE, "interrupted": interrupted, "issued": len(issued),
            "violations": len(problems), "first_violation": problems[0] if problems else ""}


def run_crash_campaign(spec: WorkloadSpec, workdir) -> Report:
    """
    Crash shard servers at random persistence events, reopen and sweep.
    Event counts come from in-process dry runs over the same CrashEmulator
    the server's --crash-point flag installs.
    """
    report = Report(experiment="crash", spec=spec)
    rng = np.random.default_rng(spec.seed)
    saved_chunk = config.CDP_CHUNK_SIZE
    if spec.cdp_chunk_kib:
        config.CDP_CHUNK_SIZE = spec.cdp_chunk_kib * 1024
    workdir = Path(workdir)
    try:
        events = {}
        digests = {}
        for inline in (True, False):
            emulator = CrashEmulator()
            shard = Shard(ShardConfig(data_dir=str(workdir / f"dry-{inline}"), plugins=["cdp"]), emulator)
            _crash_workload(shard, spec, inline, [])
            events[inline] = emulator.events
            if inline:
                digests["dry"] = shard.pool_digest(shard.open_pool(CRASH_POOL).handle)
            shard.close()
        report.notes["events"] = {str(k): v for k, v in events.items()}

        points = [(1, True)] + [(int(rng.integers(1, events[i % 2 == 0] + 1)), i % 2 == 0)
                                for i in range(max(spec.crash_points - 1, 0))]
        violations = 0
        for n, (crash_at, inline) in enumerate(points):
            row = run_crash_point(spec, workdir / f"point-{n}", crash_at, int(rng.integers(2 ** 32)), inline, rng)
            violations += bool(row["violations"])
            report.rows.append({"point": n, **row})
            if row["violations"]:
                logger.warning("Crash point %d (event %d): %s", n, crash_at, row["first_violation"])

        # crash while idle: durable state equals a clean shutdown
        idle_dir = workdir / "idle"
        emulator = CrashEmulator()
        shard = Shard(ShardConfig(data_dir=str(idle_dir), plugins=["cdp"]), emulator)
        _crash_workload(shard, spec, True, [])
        emulator.crash_now()
        shard.close()
        reopened = Shard(ShardConfig(data_dir=str(idle_dir), plugins=["cdp"]))
        try:
            pool = reopened.pool_open(CRASH_POOL)
            reopened.drain()
            digests["idle"] = reopened.pool_digest(pool.handle)
        finally:
            reopened.close()
        report.checks["idle_crash_preserves_state"] = digests["idle"] == digests["dry"]
    finally:
        config.CDP_CHUNK_SIZE = saved_chunk
    report.notes["violating_points"] = violations
    report.notes["fired_points"] = sum(row["fired"] for row in report.rows)
    report.checks["no_invariant_violations"] = violations == 0
    report.checks["crashed_servers_exit_with_crash_code"] = all(
        row["fired"] for row in report.rows if row["interrupted"])
    print(f"  {len(points)} crash points, {report.notes['fired_points']} fired, {violations} with violations")
    return report


EXPERIMENTS = {
    "write-scaling": run_write_scaling,
    "query-latency": run_query_latency,
    "query-load": run_query_under_load,
    "footprint": run_footprint,
    "crash": run_crash_campaign,
}


# =============================================================================
# CLI
# =============================================================================

@contextmanager
def _workdir(path: Optional[str]):
    if path:
        Path(path).mkdir(parents=True, exist_ok=True)
        yield Path(path)
    else:
        with tempfile.TemporaryDirectory(prefix="active-store-bench-") as tmp:
            yield Path(tmp)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Active store benchmarks and crash campaign")
    parser.add_argument("experiment", choices=sorted(EXPERIMENTS))
    parser.add_argument("--spec", help="Workload spec JSON (defaults when omitted)")
    parser.add_argument("--out", default="results", help="Output directory for CSV + JSON")
    parser.add_argument("--workdir", help="Where pools are created (temporary directory by default)")
    parser.add_argument("--window-seconds", type=float,
                        help="Measurement window for throughput experiments in seconds "
                             f"(default {DEFAULT_WINDOW_SECONDS:g}, 600 for the long window)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(name)s %(message)s")
    try:
        spec = load_spec(args.spec) if args.spec else WorkloadSpec()
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    window = args.window_seconds or spec.window_seconds or DEFAULT_WINDOW_SECONDS
    spec = spec.model_copy(update={"window_seconds": window})

    print(f"Running {args.experiment} (seed {spec.seed}, mode {spec.mode})")
    with _workdir(args.workdir) as workdir:
        report = EXPERIMENTS[args.experiment](spec, workdir)
    json_path, csv_path = write_report(report, args.out)
    print(f"Wrote {json_path} and {csv_path}")
    for name, ok in report.checks.items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())

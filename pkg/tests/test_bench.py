import csv
import json

import numpy as np
import pytest

from active_store.bench import (
    LATENCY_EDGES_US,
    REPORT_SCHEMA_VERSION,
    SYNTHETIC_STEP,
    Report,
    UpdateStream,
    WorkloadSpec,
    latency_histogram,
    load_spec,
    main,
    run_footprint,
    run_query_latency,
    run_query_under_load,
    run_write_scaling,
    volume_name,
    write_report,
)
from active_store.errors import ConfigError

SMALL = {
    "blocks_per_volume": 4096,
    "max_span": 32,
    "updates": 300,
    "quantum_records": 64,
    "sweep_quantum_records": [16, 64, 256],
    "retention": 2,
    "pool_mib": 8,
    "cdp_chunk_kib": 64,
    "queries": 20,
    "query_blocks": 512,
    "fill_quanta": 3,
    "sample_interval": 100,
}


@pytest.fixture
def small_spec():
    return WorkloadSpec(**SMALL)


def test_spec_defaults():
    spec = WorkloadSpec()
    assert spec.capacity == 65536
    assert spec.sweep_capacities == [65536, 131072, 262144]
    assert spec.retention == 10
    assert WorkloadSpec(quantum_records=16).capacity == 16


def test_load_spec(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"seed": 9, "mode": "plain_kv"}))
    spec = load_spec(path)
    assert (spec.seed, spec.mode) == (9, "plain_kv")

    with pytest.raises(ConfigError):
        load_spec(tmp_path / "missing.json")
    path.write_text(json.dumps({"replication": 4}))
    with pytest.raises(ConfigError):
        load_spec(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_spec(path)


def test_update_stream_is_reproducible(small_spec):
    a = UpdateStream(small_spec, 0).batch(500)
    b = UpdateStream(small_spec, 0)
    again = np.concatenate([b.batch(200), b.batch(300)])
    assert a.tobytes() == again.tobytes()
    assert UpdateStream(small_spec, 1).batch(500).tobytes() != a.tobytes()


def test_update_stream_shape(small_spec):
    batch = UpdateStream(small_spec.model_copy(update={"volumes": 3}), 0).batch(1000)
    assert (np.diff(batch["timestamp"].astype(np.int64)) == SYNTHETIC_STEP).all()
    assert (batch["virtual_offset"] + batch["length"] <= 4096).all()
    assert batch["length"].min() >= 1 and batch["length"].max() <= 32
    managed_end = batch["managed_offset"] + batch["length"]
    assert (managed_end[:-1] == batch["managed_offset"][1:]).all()
    assert set(batch["volume"].tolist()) == {0, 1, 2}
    assert volume_name(2, 1) == b"vol-2-1"


def test_latency_histogram():
    counts = latency_histogram([0.5, 10, 10, 2e6])
    assert len(counts) == len(LATENCY_EDGES_US) - 1
    assert sum(counts) == 4
    assert counts[0] == 1 and counts[-1] == 1


def test_write_report(tmp_path, small_spec):
    report = Report(experiment="demo", spec=small_spec, rows=[{"a": 1, "b": 2.5}, {"a": 3}],
                    checks={"ok": True})
    json_path, csv_path = write_report(report, tmp_path / "out")
    data = json.loads(json_path.read_text())
    assert data["schema_version"] == REPORT_SCHEMA_VERSION
    assert data["spec"]["quantum_records"] == 64
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    assert rows[0] == {"schema_version": "1", "a": "1", "b": "2.5"}
    assert rows[1]["b"] == ""
    assert report.passed
    assert not Report(experiment="x", spec=small_spec, checks={"ok": True, "bad": False}).passed


def test_query_latency_in_process(tmp_path, small_spec):
    report = run_query_latency(small_spec, tmp_path)
    assert [row["quantum_records"] for row in report.rows] == [16, 64, 256]
    assert all(row["queries"] == 20 for row in report.rows)
    assert report.checks["empty_volume_query_is_empty"]
    assert "worst_case_grows_with_quantum" in report.checks
    assert set(report.histograms) == {"quantum=16", "quantum=64", "quantum=256"}


def test_cli_writes_reports(tmp_path, small_spec):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(small_spec.model_dump_json())
    code = main(["query-latency", "--spec", str(spec_path), "--out", str(tmp_path / "results"),
                 "--workdir", str(tmp_path / "work")])
    assert code in (0, 1)
    assert (tmp_path / "results" / "query-latency.json").exists()
    assert (tmp_path / "results" / "query-latency.csv").exists()


def test_cli_rejects_bad_spec(tmp_path, capsys):
    spec_path = tmp_path / "bad.json"
    spec_path.write_text(json.dumps({"max_span": 0}))
    assert main(["crash", "--spec", str(spec_path)]) == 2
    assert "Error" in capsys.readouterr().err


@pytest.mark.slow
def test_write_scaling_local_cluster(tmp_path, small_spec):
    spec = small_spec.model_copy(update={"shards": [1, 2], "replication": 2, "updates": 200})
    report = run_write_scaling(spec, tmp_path)
    assert len(report.rows) == 3
    assert report.checks["one_round_trip_per_update"]
    assert all(row["updates"] == 200 * row["shards"] for row in report.rows[:2])


@pytest.mark.slow
def test_footprint_local_cluster(tmp_path, small_spec):
    report = run_footprint(small_spec, tmp_path)
    ado, plain = report.rows
    assert (ado["mode"], plain["mode"]) == ("ado", "plain_kv")
    assert plain["pairs"] > ado["pairs"]
    assert report.checks["ado_one_round_trip_per_update"]
    assert report.checks["plain_kv_extra_traffic"]


@pytest.mark.slow
def test_query_under_load(tmp_path, small_spec):
    spec = small_spec.model_copy(update={"window_seconds": 2.0, "query_interval_seconds": 0.2,
                                        "sample_interval": 200})
    report = run_query_under_load(spec, tmp_path)
    assert report.checks["writer_completed"]
    assert any(row["kind"] == "throughput" for row in report.rows)
    assert report.notes["queries"] == sum(row["kind"] == "query" for row in report.rows)

import numpy as np
import pytest

from active_store.cdp import (
    DEFAULT_CAPACITY,
    DEFAULT_RETENTION,
    Q_COUNT,
    R_CURRENT,
    R_NEXT_SEQUENCE,
    RECORD_DTYPE,
    SUMMARY_DTYPE,
    TIMESTAMP_FIELD,
    VALID_FIELD,
    VOLUME_ROOT_SIZE,
    CdpClient,
    IntervalMap,
    QuantumState,
    clip_mapping,
    oracle_query,
    quantum_list,
    records_for,
    retained_history,
    verify_volume,
)
from active_store.errors import (
    HistoryTrimmed,
    OrderingViolation,
    ParameterError,
    PluginError,
    VolumeNotFound,
)
from active_store.store import Shard
from tests.conftest import as_records, make_config, random_updates

VOLUME = b"vol-1"


def _mapping(entries) -> np.ndarray:
    return np.array(entries, dtype=SUMMARY_DTYPE)


def _apply(cdp, volume, updates):
    return [cdp.update(volume, *u) for u in updates]


def _plugin(shard, pool):
    return shard.pool(pool.handle).worker.plugins[0]


def _root(pool, volume=VOLUME) -> int:
    return pool.table.get(volume).offset


# =============================================================================
# LAYOUT
# =============================================================================

def test_layout_constants():
    assert RECORD_DTYPE.itemsize == 64
    assert RECORD_DTYPE.fields["timestamp"][1] == TIMESTAMP_FIELD == 24
    assert RECORD_DTYPE.fields["valid"][1] == VALID_FIELD == 40
    assert SUMMARY_DTYPE.itemsize == 24
    assert records_for(4) == 65536
    assert records_for(16) == 262144
    assert DEFAULT_CAPACITY == 65536
    assert DEFAULT_RETENTION == 10
    assert VOLUME_ROOT_SIZE == 128


# =============================================================================
# MERGE KERNEL
# =============================================================================

def test_clip_cuts_partial_runs():
    mapping = _mapping([(0, 100, 0), (100, 100, 500)])
    assert clip_mapping(mapping, 90, 110).tolist() == [(90, 10, 90), (100, 10, 500)]
    assert clip_mapping(mapping, 300, 400).tolist() == []
    assert clip_mapping(mapping).tolist() == mapping.tolist()


def test_merge_overwrites_and_splits():
    imap = IntervalMap()
    imap.merge(0, 100, 1000)
    imap.merge(40, 10, 5000)
    assert imap.entries() == [(0, 40, 1000), (40, 10, 5000), (50, 50, 1050)]
    imap.merge(0, 100, 7000)
    assert imap.entries() == [(0, 100, 7000)]


def test_merge_coalesces_linear_neighbours():
    imap = IntervalMap()
    imap.merge(0, 10, 100)
    imap.merge(20, 10, 120)
    imap.merge(10, 10, 110)
    assert imap.entries() == [(0, 30, 100)]
    imap.merge(30, 5, 999)
    assert imap.entries() == [(0, 30, 100), (30, 5, 999)]


def test_merge_matches_oracle(rng):
    updates = random_updates(rng, 500, blocks=1024, max_span=40)
    imap = IntervalMap()
    for v, n, m, _ in updates:
        imap.merge(v, n, m)
    expected = oracle_query(as_records(updates), 10 ** 12)
    assert imap.to_array().tolist() == expected.tolist()
    assert imap.clip(100, 300).tolist() == oracle_query(as_records(updates), 10 ** 12, 100, 300).tolist()


def test_restrict_keeps_whole_runs():
    imap = IntervalMap([0, 50, 200], [50, 50, 10], [0, 900, 5])
    assert imap.restrict(60, 70).entries() == [(50, 50, 900)]


# =============================================================================
# PLUGIN
# =============================================================================

def _check_against_oracle(cdp, updates, rng, queries=12, blocks=4096):
    records = as_records(updates)
    first, last = updates[0][3], updates[-1][3]
    times = [first - 1, last, last + 10] + rng.integers(first, last + 1, queries).tolist()
    for t in times:
        assert cdp.query(VOLUME, int(t)).tolist() == oracle_query(records, int(t)).tolist(), f"t={t}"
        start = int(rng.integers(0, blocks - 200))
        span = int(rng.integers(1, 200))
        got = cdp.query(VOLUME, int(t), start, span)
        assert got.tolist() == oracle_query(records, int(t), start, start + span).tolist(), f"t={t} [{start}+{span})"


@pytest.mark.parametrize("capacity", [256, 1024])
@pytest.mark.parametrize("inline", [True, False], ids=["inline", "background"])
def test_query_matches_oracle(shard, cdp_pool, cdp, rng, capacity, inline):
    cdp.configure(VOLUME, capacity=capacity, retention=0, inline_maintenance=inline)
    updates = random_updates(rng, 2500)
    _apply(cdp, VOLUME, updates)
    if not inline:
        shard.drain()
    _check_against_oracle(cdp, updates, rng)
    assert verify_volume(_plugin(shard, cdp_pool).memory, _root(cdp_pool)) == []


@pytest.mark.slow
def test_query_matches_oracle_at_default_capacity(shard, cdp_pool, cdp, rng):
    cdp.configure(VOLUME, capacity=DEFAULT_CAPACITY, retention=0, inline_maintenance=True)
    updates = random_updates(rng, DEFAULT_CAPACITY + 5000)
    _apply(cdp, VOLUME, updates)
    _check_against_oracle(cdp, updates, rng, queries=4)


# Seeded acceptance campaign: every workload gets a fresh pool, a random
# quantum capacity and 50 (t, range) queries checked against brute force.
ORACLE_CAPACITIES = (256, 1024, 65536)
ORACLE_BLOCKS = 4096
ORACLE_MAX_SPAN = 100
ORACLE_MAX_UPDATES = 10_000
ORACLE_QUERIES = 50
ORACLE_WORKLOADS = 1000


def _oracle_workload(shard, seed: int) -> int:
    rng = np.random.default_rng([20_240_917, seed])
    capacity = int(rng.choice(ORACLE_CAPACITIES))
    inline = bool(rng.integers(2))
    updates = random_updates(rng, int(rng.integers(1, ORACLE_MAX_UPDATES + 1)),
                             blocks=ORACLE_BLOCKS, max_span=ORACLE_MAX_SPAN)
    name = f"oracle-{seed}"
    pool = shard.pool_create(name)
    try:
        cdp = CdpClient.over_shard(shard, pool.handle, timeout=120)
        cdp.configure(VOLUME, capacity=capacity, retention=0, inline_maintenance=inline)
        _apply(cdp, VOLUME, updates)
        if not inline:
            shard.drain()

        records = as_records(updates)
        first, last = int(records["timestamp"][0]), int(records["timestamp"][-1])
        queries = []
        for _ in range(ORACLE_QUERIES):
            start = int(rng.integers(0, ORACLE_BLOCKS))
            queries.append((int(rng.integers(first - 1, last + 2)), start,
                            int(rng.integers(start + 1, ORACLE_BLOCKS + 1))))

        # replay once in time order; each snapshot is the base of the next
        snapshot = oracle_query(records[:0], 0)
        applied = first - 1
        for t, start, end in sorted(queries):
            stamps = records["timestamp"]
            snapshot = oracle_query(records[(stamps > applied) & (stamps <= t)], t, base=snapshot)
            applied = max(applied, t)
            expected = oracle_query(records[:0], t, start, end, base=snapshot)
            got = cdp.query(VOLUME, t, start, end - start)
            assert got.tolist() == expected.tolist(), \
                f"seed={seed} capacity={capacity} inline={inline} t={t} [{start}, {end})"
        assert verify_volume(_plugin(shard, pool).memory, _root(pool)) == []
    finally:
        shard.pool_close(pool.handle)
        shard.pool_delete(name)
    return len(updates)


@pytest.mark.parametrize("seed", range(8))
def test_oracle_campaign(shard, seed):
    assert 1 <= _oracle_workload(shard, seed) <= ORACLE_MAX_UPDATES


@pytest.mark.slow
def test_oracle_campaign_full(shard):
    for seed in range(ORACLE_WORKLOADS):
        _oracle_workload(shard, seed)


def test_query_while_unsummarized(shard, cdp_pool, cdp, rng):
    # background mode without draining: sealed quanta may not be summarized yet
    cdp.configure(VOLUME, capacity=64, retention=0)
    updates = random_updates(rng, 600)
    _apply(cdp, VOLUME, updates)
    _check_against_oracle(cdp, updates, rng, queries=4)


def test_sequence_numbers_and_repeated_timestamps(cdp):
    cdp.configure(VOLUME, capacity=4)
    assert [cdp.update(VOLUME, i, 1, 100 + i, 50) for i in range(6)] == [1, 2, 3, 4, 5, 6]
    assert cdp.query(VOLUME, 50).tolist() == [(0, 6, 100)]
    assert cdp.query(VOLUME, 49).tolist() == []


def test_ordering_violation(cdp):
    cdp.update(VOLUME, 0, 1, 0, 100)
    cdp.update(VOLUME, 0, 1, 0, 100)
    with pytest.raises(OrderingViolation):
        cdp.update(VOLUME, 0, 1, 0, 99)
    assert cdp.info(VOLUME).total_records == 2


def test_bad_record_and_capacity(cdp):
    with pytest.raises(ParameterError):
        cdp.update(VOLUME, 0, 0, 0, 1)
    with pytest.raises(ParameterError):
        cdp.configure(VOLUME, capacity=0)


def test_unknown_volume(cdp):
    with pytest.raises(VolumeNotFound):
        cdp.query(b"missing", 10)
    with pytest.raises(VolumeNotFound):
        cdp.info(b"missing")


def test_plain_pair_is_not_a_volume(shard, cdp_pool, cdp):
    shard.kv_put(cdp_pool.handle, b"plain", b"x" * 200)
    with pytest.raises(VolumeNotFound):
        cdp.query(b"plain", 10)


def test_unknown_operation(shard, cdp_pool, cdp):
    cdp.configure(VOLUME, capacity=16)
    with pytest.raises(PluginError):
        shard.invoke_ado(cdp_pool.handle, VOLUME, bytes([99])).result(10)
    with pytest.raises(PluginError):
        shard.invoke_ado(cdp_pool.handle, VOLUME, b"").result(10)


def test_empty_volume_query(cdp):
    cdp.configure(VOLUME, capacity=16)
    assert cdp.query(VOLUME, 10 ** 12).tolist() == []
    info = cdp.info(VOLUME)
    assert (info.list_length, info.total_records, info.next_sequence) == (1, 0, 1)


def test_latest_tracks_own_updates(cdp):
    cdp.configure(VOLUME, capacity=16)
    cdp.update(VOLUME, 0, 10, 100, 1)
    assert cdp.latest(VOLUME).tolist() == [(0, 10, 100)]
    cdp.update(VOLUME, 5, 10, 900, 2)
    assert cdp.latest(VOLUME).tolist() == [(0, 5, 100), (5, 10, 900)]
    assert cdp.latest(VOLUME, 4, 2).tolist() == [(4, 1, 104), (5, 1, 900)]


# =============================================================================
# QUANTA AND RETENTION
# =============================================================================

def test_sealing_is_lazy(shard, cdp_pool, cdp):
    cdp.configure(VOLUME, capacity=16, inline_maintenance=True)
    for i in range(16):
        cdp.update(VOLUME, i, 1, i, i + 1)
    info = cdp.info(VOLUME)
    assert (info.list_length, info.open_count) == (1, 16)
    cdp.update(VOLUME, 0, 1, 0, 100)
    info = cdp.info(VOLUME)
    assert (info.list_length, info.open_count, info.summarized) == (2, 1, 1)


def test_retention_bounds_list_length(cdp, rng):
    cdp.configure(VOLUME, capacity=8, retention=10, inline_maintenance=True)
    updates = random_updates(rng, 400, max_span=16)
    _apply(cdp, VOLUME, updates)
    info = cdp.info(VOLUME)
    assert info.list_length <= 11
    assert info.trimmed > 0
    assert info.total_records == 400 - info.trimmed * 8
    # everything from the base onwards is still answerable exactly
    records = as_records(updates)
    for t in (info.base_as_of, updates[-1][3]):
        assert cdp.query(VOLUME, t).tolist() == oracle_query(records, t).tolist()


def test_history_trimmed(cdp):
    cdp.configure(VOLUME, capacity=4, retention=1, inline_maintenance=True)
    for t in range(1, 21):
        cdp.update(VOLUME, t, 1, t, t)
    info = cdp.info(VOLUME)
    assert info.base_as_of > 1
    with pytest.raises(HistoryTrimmed):
        cdp.query(VOLUME, 1)
    assert len(cdp.query(VOLUME, info.base_as_of)) == 1  # blocks 1..base_as_of coalesce


def test_retention_zero_keeps_everything(cdp):
    cdp.configure(VOLUME, capacity=4, retention=0, inline_maintenance=True)
    for t in range(1, 41):
        cdp.update(VOLUME, 0, 1, t, t)
    info = cdp.info(VOLUME)
    assert (info.list_length, info.trimmed) == (10, 0)
    assert cdp.query(VOLUME, 1).tolist() == [(0, 1, 1)]


def test_age_based_retention(cdp):
    cdp.configure(VOLUME, capacity=4, retention=0, retention_age_ns=100, inline_maintenance=True)
    for i in range(60):
        cdp.update(VOLUME, i, 1, i, 10 * (i + 1))
    info = cdp.info(VOLUME)
    assert info.trimmed > 0
    assert 600 - info.base_as_of > 100
    with pytest.raises(HistoryTrimmed):
        cdp.query(VOLUME, 10)
    assert len(cdp.query(VOLUME, 600)) == 1


def test_explicit_trim_after_tightening(cdp):
    cdp.configure(VOLUME, capacity=4, retention=0, inline_maintenance=True)
    for t in range(1, 41):
        cdp.update(VOLUME, t, 1, t, t)
    cdp.configure(VOLUME, capacity=4, retention=2, inline_maintenance=True)
    assert cdp.info(VOLUME).list_length == 3
    assert cdp.trim(VOLUME) == 0


def test_configure_reshape_seals_current_quantum(cdp):
    cdp.configure(VOLUME, capacity=8, retention=0, inline_maintenance=True)
    for t in range(1, 4):
        cdp.update(VOLUME, t, 1, t, t)
    cdp.configure(VOLUME, capacity=4, retention=0, inline_maintenance=True)
    info = cdp.info(VOLUME)
    assert (info.list_length, info.open_count, info.summarized) == (2, 0, 1)
    for t in range(4, 9):
        cdp.update(VOLUME, t, 1, t, t)
    assert cdp.info(VOLUME).list_length == 3


def test_summarize_on_demand(shard, cdp_pool, cdp):
    cdp.configure(VOLUME, capacity=4, retention=0)
    for t in range(1, 30):
        cdp.update(VOLUME, t, 1, t, t)
    shard.drain()
    info = cdp.info(VOLUME)
    assert info.sealed == 0
    assert info.summarized == info.list_length - 1
    assert cdp.summarize(VOLUME) == 0


def test_digest_ignores_summarization_state(shard, cdp_pool, cdp):
    cdp.configure(b"a", capacity=4, retention=0, inline_maintenance=True)
    cdp.configure(b"b", capacity=4, retention=0)
    for t in range(1, 25):
        cdp.update(b"a", t, 2, 10 * t, t)
        cdp.update(b"b", t, 2, 10 * t, t)
    shard.drain()
    a, b = cdp.info(b"a"), cdp.info(b"b")
    assert a.digest == b.digest
    cdp.update(b"b", 0, 1, 0, 99)
    assert cdp.info(b"b").digest != a.digest


def test_default_quantum_holds_exactly_its_capacity(cdp):
    cdp.configure(VOLUME, capacity=16, inline_maintenance=True)
    for t in range(17):
        cdp.update(VOLUME, t, 1, t, t)
    assert cdp.info(VOLUME).list_length == 2


@pytest.mark.slow
def test_first_default_quantum_seals_after_65536_records(shard, cdp_pool, cdp):
    for t in range(DEFAULT_CAPACITY + 1):
        cdp.update(VOLUME, t % 4096, 1, t, t)
    shard.drain()
    info = cdp.info(VOLUME)
    assert (info.list_length, info.open_count) == (2, 1)
    plugin = _plugin(shard, cdp_pool)
    first = quantum_list(plugin.memory, _root(cdp_pool))[0]
    assert plugin.memory.read_u64(first) != QuantumState.OPEN


# =============================================================================
# RESTART AND RECOVERY
# =============================================================================

def test_volumes_survive_restart(data_dir, rng):
    config = make_config(data_dir)
    updates = random_updates(rng, 300)
    shard = Shard(config)
    pool = shard.pool_create("cdp-restart")
    cdp = CdpClient.over_shard(shard, pool.handle, timeout=30)
    cdp.configure(VOLUME, capacity=32, retention=0)
    _apply(cdp, VOLUME, updates[:200])
    shard.drain()
    before = cdp.info(VOLUME)
    shard.close()

    shard = Shard(config)
    try:
        pool = shard.pool_open("cdp-restart")
        cdp = CdpClient.over_shard(shard, pool.handle, timeout=30)
        assert cdp.info(VOLUME).digest == before.digest
        assert cdp.update(VOLUME, *updates[200]) == 201
        _apply(cdp, VOLUME, updates[201:])
        shard.drain()
        _check_against_oracle(cdp, updates, rng, queries=4)
        base, _, records = retained_history(_plugin(shard, pool).memory, _root(pool))
        assert len(base) == 0
        assert records["sequence"].tolist() == list(range(1, 301))
    finally:
        shard.close()


def test_recovery_repairs_lagging_count(data_dir):
    config = make_config(data_dir)
    shard = Shard(config)
    pool = shard.pool_create("cdp-repair")
    cdp = CdpClient.over_shard(shard, pool.handle, timeout=30)
    cdp.configure(VOLUME, capacity=16, retention=0)
    for t in range(1, 6):
        cdp.update(VOLUME, t, 1, t, t)
    # roll the count and sequence back as if the last append stopped after its valid flag
    root = _root(pool)
    q = pool.region.read_u64(root + R_CURRENT)
    pool.region.write_u64(q + Q_COUNT, 4)
    pool.region.write_u64(root + R_NEXT_SEQUENCE, 5)
    shard.close()

    shard = Shard(config)
    try:
        pool = shard.pool_open("cdp-repair")
        cdp = CdpClient.over_shard(shard, pool.handle, timeout=30)
        info = cdp.info(VOLUME)
        assert (info.total_records, info.next_sequence) == (5, 6)
        assert cdp.update(VOLUME, 9, 1, 9, 9) == 6
        assert verify_volume(_plugin(shard, pool).memory, _root(pool)) == []
    finally:
        shard.close()


def test_plugin_heap_survives_restart(data_dir):
    config = make_config(data_dir)
    shard = Shard(config)
    pool = shard.pool_create("cdp-heap")
    cdp = CdpClient.over_shard(shard, pool.handle, timeout=30)
    cdp.configure(VOLUME, capacity=4096, retention=0)
    chunks = [(h.start, h.end) for h in _plugin(shard, pool).heap.heaps]
    shard.close()

    shard = Shard(config)
    try:
        pool = shard.pool_open("cdp-heap")
        shard.drain()
        heap = _plugin(shard, pool).heap
        assert [(h.start, h.end) for h in heap.heaps] == chunks
        assert all(h.check() == [] for h in heap.heaps)
    finally:
        shard.close()

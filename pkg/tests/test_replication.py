import pytest

from active_store.cdp import CdpClient, CdpOp, VolumeInfo, decode_response
from active_store.errors import ReplicaUnavailable
from active_store.proto import AdoInvocation, ReplicaSet, replicated_invoke
from active_store.server import ShardServer
from tests.conftest import TEST_POOL_SIZE, make_config, random_updates

VOLUME = b"replicated"


@pytest.fixture
def replicas(tmp_path):
    servers = [ShardServer(make_config(tmp_path / f"replica-{i}")).start_in_thread() for i in range(3)]
    yield servers
    for server in servers:
        server.stop()


@pytest.fixture
def replica_set(replicas):
    with ReplicaSet([("127.0.0.1", s.port) for s in replicas], timeout=10) as rs:
        rs.open_pool("volumes", create_size=TEST_POOL_SIZE)
        yield rs


def _infos(replica_set) -> list[VolumeInfo]:
    per_replica = replicated_invoke(replica_set, AdoInvocation(VOLUME, bytes([CdpOp.INFO])))
    return [VolumeInfo.unpack(decode_response(responses[0])) for responses in per_replica]


def test_replicas_converge(replicas, replica_set, rng):
    cdp = CdpClient.over_replicas(replica_set)
    cdp.configure(VOLUME, capacity=32, retention=3, inline_maintenance=True)
    for update in random_updates(rng, 300):
        cdp.update(VOLUME, *update)

    infos = _infos(replica_set)
    assert len({info.digest for info in infos}) == 1
    assert infos[0].total_records > 0
    digests = {server.shard.pool_digest(handle) for server, handle in zip(replicas, replica_set.handles)}
    assert len(digests) == 1


def test_every_invocation_reaches_every_replica(replica_set):
    cdp = CdpClient.over_replicas(replica_set)
    before = replica_set.round_trips
    cdp.update(VOLUME, 0, 8, 0, 1)
    assert replica_set.round_trips == before + 3


def test_stopped_replica_stalls_the_set(replicas, replica_set):
    cdp = CdpClient.over_replicas(replica_set)
    cdp.update(VOLUME, 0, 8, 0, 1)
    replicas[2].stop()
    with pytest.raises(ReplicaUnavailable) as failure:
        cdp.update(VOLUME, 8, 8, 8, 2)
    assert f"127.0.0.1:{replicas[2].port}" in failure.value.details
    assert replica_set.stalled is failure.value
    with pytest.raises(ReplicaUnavailable):
        cdp.update(VOLUME, 16, 8, 16, 3)
    # nothing after the stall reached the live replicas
    assert {info.total_records for info in _surviving_infos(replicas, replica_set)} == {2}


def _surviving_infos(replicas, replica_set):
    out = []
    for server, handle in zip(replicas[:2], replica_set.handles[:2]):
        cdp = CdpClient.over_shard(server.shard, handle, timeout=10)
        out.append(cdp.info(VOLUME))
    return out


def test_needs_an_endpoint():
    with pytest.raises(ValueError):
        ReplicaSet([])

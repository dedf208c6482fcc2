import struct

import numpy as np
import pytest

from active_store import config
from active_store.errors import (
    LockedByAdo,
    NotFound,
    ParameterError,
    ProtocolError,
    ReplicaUnavailable,
    Status,
    StoreError,
    error_for_status,
)
from active_store.proto import (
    HEADER_SIZE,
    PREFIX_SIZE,
    CreatePool,
    Frame,
    Get,
    InvokeAdo,
    InvokePutAdo,
    Opcode,
    OpenPool,
    Put,
    Resize,
    Response,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    error_response,
    frame_length,
    pack_responses,
    unpack_responses,
)


def _decode(data: bytes):
    return decode_message(decode_frame(data))


@pytest.mark.parametrize("message", [
    OpenPool("volumes"),
    CreatePool("volumes", 1 << 30),
    Put(7, b"key", b"\x00" * 100),
    Get(1 << 40, b"k"),
    Resize(3, b"k", 12),
    InvokeAdo(9, b"vol", b"\x01request", ado_flags=1, value_size=64),
    InvokePutAdo(9, b"vol", b"value", b"req"),
    Response(Status.OK, b"payload"),
])
def test_messages_survive_the_wire(message):
    data = encode_message(message, request_id=77)
    frame = decode_frame(data)
    assert frame.request_id == 77
    assert frame.opcode == message.opcode
    assert decode_message(frame) == message


def test_frame_layout():
    data = encode_frame(Frame(Opcode.GET, 5, b"abc"))
    assert len(data) == HEADER_SIZE + 3
    length, version, opcode, flags, request_id = struct.unpack_from("<IBBHQ", data)
    assert (length, version, opcode, flags, request_id) == (HEADER_SIZE - PREFIX_SIZE + 3, 1, Opcode.GET, 0, 5)


def test_frame_length_limits(monkeypatch):
    monkeypatch.setattr(config, "MAX_FRAME_SIZE", 1024)
    assert frame_length(struct.pack("<I", 12)) == 12
    assert frame_length(struct.pack("<I", 1024)) == 1024
    with pytest.raises(ProtocolError):
        frame_length(struct.pack("<I", 11))
    with pytest.raises(ProtocolError):
        frame_length(struct.pack("<I", 1025))


def test_length_mismatch_rejected():
    data = encode_message(Get(1, b"k"), 1)
    with pytest.raises(ProtocolError):
        decode_frame(data + b"x")
    with pytest.raises(ProtocolError):
        decode_frame(data[:10])


def test_unknown_opcode_and_bad_header():
    with pytest.raises(ProtocolError):
        decode_message(Frame(200, 1))
    with pytest.raises(ProtocolError):
        decode_message(Frame(Opcode.GET, 1, Get(1, b"k").pack(), version=2))
    with pytest.raises(ProtocolError):
        decode_message(Frame(Opcode.GET, 1, Get(1, b"k").pack(), flags=1))


def test_truncated_and_trailing_bodies():
    body = Put(1, b"key", b"value").pack()
    with pytest.raises(ProtocolError):
        decode_message(Frame(Opcode.PUT, 1, body[:-1]))
    with pytest.raises(ProtocolError):
        decode_message(Frame(Opcode.PUT, 1, body + b"\x00"))


def test_non_utf8_pool_name():
    body = struct.pack("<H", 2) + b"\xff\xfe"
    with pytest.raises(ProtocolError):
        decode_message(Frame(Opcode.OPEN_POOL, 1, body))


def _fuzz(count: int, seed: int):
    rng = np.random.default_rng(seed)
    decoded = 0
    for _ in range(count):
        body = rng.bytes(int(rng.integers(0, 64)))
        version = 1 if rng.random() < 0.9 else int(rng.integers(0, 256))
        flags = 0 if rng.random() < 0.9 else int(rng.integers(0, 1 << 16))
        opcode = int(rng.integers(0, 16))
        data = encode_frame(Frame(opcode, int(rng.integers(0, 1 << 62)), body, flags, version))
        if rng.random() < 0.1:
            data = data[:int(rng.integers(0, len(data)))]
        try:
            _decode(data)
            decoded += 1
        except ProtocolError:
            pass
    return decoded


def test_random_frames_only_raise_protocol_errors():
    assert _fuzz(10_000, seed=1) > 0


@pytest.mark.slow
def test_random_frames_long_run():
    _fuzz(1_000_000, seed=2)


def test_response_lists():
    responses = [b"", b"one", b"\x00" * 300]
    assert unpack_responses(pack_responses(responses)) == responses
    assert unpack_responses(pack_responses([])) == []
    with pytest.raises(ProtocolError):
        unpack_responses(pack_responses(responses)[:-1])


def test_error_mapping():
    assert isinstance(error_for_status(Status.NOT_FOUND, "gone"), NotFound)
    assert isinstance(error_for_status(Status.LOCKED_BY_ADO, "held"), LockedByAdo)
    assert isinstance(error_for_status(Status.BAD_REQUEST, "bad"), ParameterError)
    unknown = error_for_status(999, "?")
    assert type(unknown) is StoreError

    response = error_response(NotFound("no such key"))
    assert response.status == Status.NOT_FOUND
    assert response.payload == b"no such key"
    assert error_response(RuntimeError("boom")).status == Status.INTERNAL


def test_replica_unavailable_keeps_details():
    error = ReplicaUnavailable("1 of 3 replicas unavailable", {"127.0.0.1:1": "refused"})
    assert error.status == Status.REPLICA_UNAVAILABLE
    assert error.details == {"127.0.0.1:1": "refused"}

"""
Framed wire protocol, blocking client, and client-driven replication.

Frame (little-endian):
    length u32 | version u8 | opcode u8 | flags u16 | request_id u64 | body
`length` covers everything after the length field. Bodies are opcode
specific and listed with each message class below. A RESPONSE body is
status u16 followed by the payload (an UTF-8 error message when status != OK).
"""

import itertools
import logging
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from active_store import config
from active_store.errors import (
    ProtocolError,
    ReplicaUnavailable,
    RequestTimeout,
    Status,
    StoreError,
    error_for_status,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IBBHQ")
HEADER_SIZE = HEADER.size  # 16
PREFIX_SIZE = 4


class Opcode(IntEnum):
    OPEN_POOL = 1
    CREATE_POOL = 2
    DELETE_POOL = 3
    PUT = 4
    GET = 5
    ERASE = 6
    RESIZE = 7
    INVOKE_ADO = 8
    INVOKE_PUT_ADO = 9
    RESPONSE = 10
    CLOSE_POOL = 11


@dataclass
class Frame:
    opcode: int
    request_id: int
    body: bytes = b""
    flags: int = 0
    version: int = PROTOCOL_VERSION


def encode_frame(frame: Frame) -> bytes:
    return HEADER.pack(HEADER_SIZE - PREFIX_SIZE + len(frame.body), frame.version, frame.opcode,
                       frame.flags, frame.request_id) + frame.body


def decode_frame(data: bytes) -> Frame:
    """Decode one complete frame, length prefix included."""
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"short frame ({len(data)} bytes)")
    length, version, opcode, flags, request_id = HEADER.unpack_from(data)
    if length != len(data) - PREFIX_SIZE:
        raise ProtocolError(f"length field {length} does not match frame of {len(data)} bytes")
    return Frame(opcode, request_id, bytes(data[HEADER_SIZE:]), flags, version)


def frame_length(prefix: bytes) -> int:
    """Bytes still to read after the 4-byte prefix; enforces the frame size limit."""
    (length,) = struct.unpack("<I", prefix)
    if length < HEADER_SIZE - PREFIX_SIZE or length > config.MAX_FRAME_SIZE:
        raise ProtocolError(f"bad frame length {length}")
    return length


def validate_header(frame: Frame):
    if frame.version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {frame.version}")
    if frame.flags:
        raise ProtocolError(f"reserved flag bits set: {frame.flags:#x}")


class _Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise ProtocolError("truncated message body")
        out = bytes(self._data[self._pos:self._pos + n])
        self._pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def name(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("pool name is not valid UTF-8")

    def done(self):
        if self._pos != len(self._data):
            raise ProtocolError(f"{len(self._data) - self._pos} trailing bytes in message body")


# =============================================================================
# MESSAGES
# =============================================================================

@dataclass
class OpenPool:
    """name_len u16 | name"""
    name: str
    opcode = Opcode.OPEN_POOL

    def pack(self) -> bytes:
        name = self.name.encode()
        return struct.pack("<H", len(name)) + name

    @classmethod
    def unpack(cls, r: _Reader):
        return cls(r.name())


@dataclass
class CreatePool:
    """size u64 | name_len u16 | name"""
    name: str
    size: int = 0
    opcode = Opcode.CREATE_POOL

    def pack(self) -> bytes:
        name = self.name.encode()
        return struct.pack("<QH", self.size, len(name)) + name

    @classmethod
    def unpack(cls, r: _Reader):
        size = r.u64()
        return cls(r.name(), size)


@dataclass
class DeletePool:
    name: str
    opcode = Opcode.DELETE_POOL

    def pack(self) -> bytes:
        name = self.name.encode()
        return struct.pack("<H", len(name)) + name

    @classmethod
    def unpack(cls, r: _Reader):
        return cls(r.name())


@dataclass
class ClosePool:
    handle: int
    opcode = Opcode.CLOSE_POOL

    def pack(self) -> bytes:
        return struct.pack("<Q", self.handle)

    @classmethod
    def unpack(cls, r: _Reader):
        return cls(r.u64())


@dataclass
class Put:
    """handle u64 | key_len u32 | value_len u32 | key | value"""
    handle: int
    key: bytes
    value: bytes
    opcode = Opcode.PUT

    def pack(self) -> bytes:
        return struct.pack("<QII", self.handle, len(self.key), len(self.value)) + self.key + self.value

    @classmethod
    def unpack(cls, r: _Reader):
        handle, key_len, value_len = r.u64(), r.u32(), r.u32()
        return cls(handle, r.take(key_len), r.take(value_len))


@dataclass
class Get:
    handle: int
    key: bytes
    opcode = Opcode.GET

    def pack(self) -> bytes:
        return struct.pack("<QI", self.handle, len(self.key)) + self.key

    @classmethod
    def unpack(cls, r: _Reader):
        handle = r.u64()
        return cls(handle, r.take(r.u32()))


@dataclass
class Erase:
    handle: int
    key: bytes
    opcode = Opcode.ERASE

    def pack(self) -> bytes:
        return struct.pack("<QI", self.handle, len(self.key)) + self.key

    @classmethod
    def unpack(cls, r: _Reader):
        handle = r.u64()
        return cls(handle, r.take(r.u32()))


@dataclass
class Resize:
    """handle u64 | new_size u64 | key_len u32 | key"""
    handle: int
    key: bytes
    new_size: int
    opcode = Opcode.RESIZE

    def pack(self) -> bytes:
        return struct.pack("<QQI", self.handle, self.new_size, len(self.key)) + self.key

    @classmethod
    def unpack(cls, r: _Reader):
        handle, new_size = r.u64(), r.u64()
        return cls(handle, r.take(r.u32()), new_size)


@dataclass
class InvokeAdo:
    """handle u64 | ado_flags u32 | value_size u64 | key_len u32 | req_len u32 | key | request"""
    handle: int
    key: bytes
    request: bytes
    ado_flags: int = 0
    value_size: int = 0
    opcode = Opcode.INVOKE_ADO

    def pack(self) -> bytes:
        return (struct.pack("<QIQII", self.handle, self.ado_flags, self.value_size, len(self.key),
                            len(self.request)) + self.key + self.request)

    @classmethod
    def unpack(cls, r: _Reader):
        handle, flags, value_size, key_len, req_len = r.u64(), r.u32(), r.u64(), r.u32(), r.u32()
        return cls(handle, r.take(key_len), r.take(req_len), flags, value_size)


@dataclass
class InvokePutAdo:
    """handle u64 | ado_flags u32 | key_len u32 | value_len u32 | req_len u32 | key | value | request"""
    handle: int
    key: bytes
    value: bytes
    request: bytes
    ado_flags: int = 0
    opcode = Opcode.INVOKE_PUT_ADO

    def pack(self) -> bytes:
        return (struct.pack("<QIIII", self.handle, self.ado_flags, len(self.key), len(self.value),
                            len(self.request)) + self.key + self.value + self.request)

    @classmethod
    def unpack(cls, r: _Reader):
        handle, flags, key_len, value_len, req_len = r.u64(), r.u32(), r.u32(), r.u32(), r.u32()
        return cls(handle, r.take(key_len), r.take(value_len), r.take(req_len), flags)


@dataclass
class Response:
    status: int
    payload: bytes = b""
    opcode = Opcode.RESPONSE

    def pack(self) -> bytes:
        return struct.pack("<H", self.status) + self.payload

    @classmethod
    def unpack(cls, r: _Reader):
        status = r.u16()
        return cls(status, r.take(len(r._data) - r._pos))


MESSAGES = {cls.opcode: cls for cls in (OpenPool, CreatePool, DeletePool, ClosePool, Put, Get, Erase,
                                        Resize, InvokeAdo, InvokePutAdo, Response)}


def encode_message(message, request_id: int) -> bytes:
    return encode_frame(Frame(message.opcode, request_id, message.pack()))


def decode_message(frame: Frame):
    """Typed message for a validated frame. Unknown opcodes raise ProtocolError."""
    validate_header(frame)
    try:
        cls = MESSAGES[Opcode(frame.opcode)]
    except ValueError:
        raise ProtocolError(f"unknown opcode {frame.opcode}")
    reader = _Reader(frame.body)
    message = cls.unpack(reader)
    reader.done()
    return message


def pack_responses(responses: list[bytes]) -> bytes:
    """count u32 | (len u32 | bytes)*"""
    parts = [struct.pack("<I", len(responses))]
    for item in responses:
        parts.append(struct.pack("<I", len(item)))
        parts.append(bytes(item))
    return b"".join(parts)


def unpack_responses(payload: bytes) -> list[bytes]:
    r = _Reader(payload)
    out = [r.take(r.u32()) for _ in range(r.u32())]
    r.done()
    return out


def error_response(error: Exception) -> Response:
    status = error.status if isinstance(error, StoreError) else Status.INTERNAL
    return Response(int(status), str(error).encode("utf-8", "replace"))


# =============================================================================
# CLIENT
# =============================================================================

class StoreClient:
    """
    Blocking client for one shard endpoint. One connection per thread.
    Requests may be pipelined with send()/receive(); responses are matched
    by request_id.
    """

    def __init__(self, host: str, port: int, timeout: float = config.REQUEST_TIMEOUT):
        self.endpoint = (host, port)
        self.timeout = timeout
        self.round_trips = 0
        self._ids = itertools.count(1)
        self._stash: dict[int, Response] = {}
        self._sock = socket.create_connection(self.endpoint, timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise RequestTimeout(f"no response from {self.endpoint} within {self.timeout}s")
            if not chunk:
                raise ProtocolError(f"connection to {self.endpoint} closed")
            buf.extend(chunk)
        return bytes(buf)

    def send(self, message) -> int:
        request_id = next(self._ids)
        self._sock.sendall(encode_message(message, request_id))
        return request_id

    def receive(self, request_id: int) -> bytes:
        """Wait for the RESPONSE to `request_id`; raise the mapped error on failure."""
        while request_id not in self._stash:
            prefix = self._recv_exact(PREFIX_SIZE)
            frame = decode_frame(prefix + self._recv_exact(frame_length(prefix)))
            response = decode_message(frame)
            if not isinstance(response, Response):
                raise ProtocolError(f"expected RESPONSE, got opcode {frame.opcode}")
            self._stash[frame.request_id] = response
        response = self._stash.pop(request_id)
        self.round_trips += 1
        if response.status != Status.OK:
            raise error_for_status(response.status, response.payload.decode("utf-8", "replace"))
        return response.payload

    def call(self, message) -> bytes:
        return self.receive(self.send(message))

    # --- pools ---

    def create_pool(self, name: str, size: int = 0) -> int:
        return struct.unpack("<Q", self.call(CreatePool(name, size)))[0]

    def open_pool(self, name: str) -> int:
        return struct.unpack("<Q", self.call(OpenPool(name)))[0]

    def close_pool(self, handle: int):
        self.call(ClosePool(handle))

    def delete_pool(self, name: str):
        self.call(DeletePool(name))

    # --- key-value ---

    def put(self, handle: int, key: bytes, value: bytes):
        self.call(Put(handle, key, value))

    def get(self, handle: int, key: bytes) -> bytes:
        return self.call(Get(handle, key))

    def erase(self, handle: int, key: bytes):
        self.call(Erase(handle, key))

    def resize(self, handle: int, key: bytes, new_size: int):
        self.call(Resize(handle, key, new_size))

    # --- ADO ---

    def invoke_ado(self, handle: int, key: bytes, request: bytes, flags: int = 0,
                   value_size: int = 0) -> list[bytes]:
        return unpack_responses(self.call(InvokeAdo(handle, key, request, flags, value_size)))

    def invoke_put_ado(self, handle: int, key: bytes, value: bytes, request: bytes,
                       flags: int = 0) -> list[bytes]:
        return unpack_responses(self.call(InvokePutAdo(handle, key, value, request, flags)))


# =============================================================================
# REPLICATION
# =============================================================================

@dataclass
class AdoInvocation:
    key: bytes
    request: bytes
    flags: int = 0
    value_size: int = 0


class ReplicaSet:
    """
    Client-side replication over 1-3 shard endpoints. Each invocation is sent
    to every replica and the call returns only after all of them answered, so
    at most one update is in flight. A transport failure stalls the set: the
    writer stops rather than reorder or skip a replica.
    """

    def __init__(self, endpoints: list[tuple[str, int]], timeout: float = config.REQUEST_TIMEOUT):
        if not endpoints:
            raise ValueError("a replica set needs at least one endpoint")
        self.endpoints = [tuple(e) for e in endpoints]
        self.clients = [StoreClient(host, port, timeout) for host, port in self.endpoints]
        self.handles: list[Optional[int]] = [None] * len(self.clients)
        self.stalled: Optional[ReplicaUnavailable] = None

    def close(self):
        for client in self.clients:
            client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def round_trips(self) -> int:
        return sum(c.round_trips for c in self.clients)

    def open_pool(self, name: str, create_size: Optional[int] = None):
        for i, client in enumerate(self.clients):
            if create_size is not None:
                self.handles[i] = client.create_pool(name, create_size)
            else:
                self.handles[i] = client.open_pool(name)

    def _fan_out(self, make_message) -> list[bytes]:
        if self.stalled is not None:
            raise self.stalled
        sent = []
        failures = {}
        for i, client in enumerate(self.clients):
            try:
                sent.append((i, client.send(make_message(self.handles[i]))))
            except OSError as e:
                failures[f"{client.endpoint[0]}:{client.endpoint[1]}"] = str(e)
        payloads: list[Optional[bytes]] = [None] * len(self.clients)
        app_error = None
        for i, request_id in sent:
            client = self.clients[i]
            try:
                payloads[i] = client.receive(request_id)
            except (OSError, RequestTimeout, ProtocolError) as e:
                failures[f"{client.endpoint[0]}:{client.endpoint[1]}"] = str(e)
            except StoreError as e:
                app_error = app_error or e
        if failures:
            self.stalled = ReplicaUnavailable(f"{len(failures)} of {len(self.clients)} replicas unavailable",
                                              failures)
            logger.warning("Replica set stalled: %s", failures)
            raise self.stalled
        if app_error is not None:
            raise app_error
        return payloads

    def invoke(self, invocation: AdoInvocation) -> list[list[bytes]]:
        """Per-replica response lists, in endpoint order."""
        payloads = self._fan_out(lambda handle: InvokeAdo(handle, invocation.key, invocation.request,
                                                         invocation.flags, invocation.value_size))
        return [unpack_responses(p) for p in payloads]

    def put(self, key: bytes, value: bytes):
        self._fan_out(lambda handle: Put(handle, key, value))


def replicated_invoke(replica_set: ReplicaSet, invocation: AdoInvocation) -> list[list[bytes]]:
    return replica_set.invoke(invocation)

"""Exception hierarchy shared by the store, the wire protocol and the client.

Every error carries a wire status code so the server can turn it into a
RESPONSE and the client can raise the same class again.
"""

from enum import IntEnum


class Status(IntEnum):
    """RESPONSE status codes (u16 on the wire)."""
    OK = 0
    NOT_FOUND = 1
    ALREADY_EXISTS = 2
    BUSY = 3
    LOCKED_BY_ADO = 4
    WRONG_SHARD = 5
    OUT_OF_MEMORY = 6
    PLUGIN_ERROR = 7
    PROTOCOL_ERROR = 8
    BAD_REQUEST = 9
    INTERNAL = 10
    TIMEOUT = 11
    REPLICA_UNAVAILABLE = 12
    UNKNOWN_CURSOR = 13
    PLUGIN_LOAD_ERROR = 14


class StoreError(Exception):
    """Base class for every store error."""
    status = Status.INTERNAL


# --- pmem ---------------------------------------------------------------------

class AlreadyExists(StoreError):
    status = Status.ALREADY_EXISTS


class CapacityError(StoreError):
    status = Status.BAD_REQUEST


class FormatError(StoreError):
    pass


class StateError(StoreError):
    pass


class LogFull(StoreError):
    status = Status.OUT_OF_MEMORY


class AlignmentError(StoreError):
    status = Status.BAD_REQUEST


class OutOfMemory(StoreError):
    status = Status.OUT_OF_MEMORY


class HeapCorruption(StoreError):
    pass


class BoundsError(StoreError):
    status = Status.BAD_REQUEST


class ParameterError(StoreError):
    status = Status.BAD_REQUEST


# --- index / store ------------------------------------------------------------

class NotFound(StoreError):
    status = Status.NOT_FOUND


class NameCollision(AlreadyExists):
    pass


class Busy(StoreError):
    status = Status.BUSY


class LockedByAdo(StoreError):
    status = Status.LOCKED_BY_ADO


class WrongShard(StoreError):
    status = Status.WRONG_SHARD


class ConfigError(StoreError):
    status = Status.BAD_REQUEST


# --- ado ----------------------------------------------------------------------

class PluginError(StoreError):
    status = Status.PLUGIN_ERROR


class PluginLoadError(StoreError):
    status = Status.PLUGIN_LOAD_ERROR


class UnknownCursor(StoreError):
    status = Status.UNKNOWN_CURSOR


# --- proto --------------------------------------------------------------------

class ProtocolError(StoreError):
    status = Status.PROTOCOL_ERROR


class RequestTimeout(StoreError):
    status = Status.TIMEOUT


class ReplicaUnavailable(StoreError):
    """A replica failed to acknowledge; `details` maps endpoint -> reason."""
    status = Status.REPLICA_UNAVAILABLE

    def __init__(self, message: str, details: dict = None):
        super().__init__(message)
        self.details = details or {}


# --- cdp ----------------------------------------------------------------------

class CdpError(PluginError):
    pass


class OrderingViolation(CdpError):
    pass


class VolumeNotFound(CdpError):
    pass


class HistoryTrimmed(CdpError):
    pass


class SimulatedCrash(Exception):
    """Raised by the crash emulator. Not a StoreError, so store error handlers never swallow it."""


_BY_STATUS = {
    Status.NOT_FOUND: NotFound,
    Status.ALREADY_EXISTS: NameCollision,
    Status.BUSY: Busy,
    Status.LOCKED_BY_ADO: LockedByAdo,
    Status.WRONG_SHARD: WrongShard,
    Status.OUT_OF_MEMORY: OutOfMemory,
    Status.PLUGIN_ERROR: PluginError,
    Status.PROTOCOL_ERROR: ProtocolError,
    Status.BAD_REQUEST: ParameterError,
    Status.TIMEOUT: RequestTimeout,
    Status.REPLICA_UNAVAILABLE: ReplicaUnavailable,
    Status.UNKNOWN_CURSOR: UnknownCursor,
    Status.PLUGIN_LOAD_ERROR: PluginLoadError,
}


def error_for_status(status: int, message: str) -> StoreError:
    """Build the exception a client raises for a non-OK RESPONSE."""
    try:
        cls = _BY_STATUS.get(Status(status), StoreError)
    except ValueError:
        cls = StoreError
    return cls(message)

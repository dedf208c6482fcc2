"""
Shard network server.

One asyncio event loop per shard serves the framed TCP protocol and, when
`admin_port` is set, the FastAPI admin app (via uvicorn on the same loop).
Key-value and pool operations execute in order per connection; ADO
invocations are dispatched to the pool's worker and answered when their
future resolves, so a connection may have several in flight.

Usage:
    python -m active_store.server --config config/server.example.json
    python -m active_store.server --shards 4
    python -m active_store.server --crash-point 5000:7   # emulated PM, crash at event 5000
"""

import argparse
import asyncio
import logging
import multiprocessing
import os
import struct
import sys
import threading
from typing import Optional

import uvicorn

from active_store import config
from active_store.admin import create_app
from active_store.config import ServerConfig, ShardConfig, load_server_config
from active_store.errors import ConfigError, ProtocolError, SimulatedCrash, StoreError
from active_store.pmem import CrashEmulator
from active_store.proto import (
    PREFIX_SIZE,
    ClosePool,
    CreatePool,
    DeletePool,
    Erase,
    Get,
    InvokeAdo,
    InvokePutAdo,
    OpenPool,
    Put,
    Resize,
    Response,
    decode_frame,
    decode_message,
    encode_message,
    error_response,
    frame_length,
    pack_responses,
)
from active_store.store import Shard

logger = logging.getLogger(__name__)

CRASH_EXIT_CODE = 86
_HANDLE = struct.Struct("<Q")


def parse_crash_point(value: str) -> tuple[int, int]:
    """`N` or `N:seed` -> (event, seed)."""
    event, _, seed = value.partition(":")
    try:
        return int(event), int(seed or 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"crash point must be N or N:seed, got {value!r}")


class ShardServer:
    def __init__(self, shard_config: ShardConfig, emulator: Optional[CrashEmulator] = None):
        self.config = shard_config
        self.emulator = emulator
        self.shard = Shard(shard_config, emulator)
        self.port: Optional[int] = None
        self.admin_port: Optional[int] = None
        self._server: Optional[asyncio.base_events.Server] = None
        self._admin: Optional[uvicorn.Server] = None
        self._admin_task: Optional[asyncio.Task] = None
        self._watchdog: Optional[asyncio.Task] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._stopped: Optional[asyncio.Event] = None
        self._thread: Optional[threading.Thread] = None
        self._writers: set[asyncio.StreamWriter] = set()
        self.connections = 0

    # --- lifecycle -----------------------------------------------------------

    async def start(self):
        self._loop = asyncio.get_running_loop()
        self._stopped = asyncio.Event()
        self._server = await asyncio.start_server(self._handle_connection, self.config.host, self.config.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("Shard %d listening on %s:%d", self.shard.shard_id, self.config.host, self.port)
        if self.config.admin_port is not None:
            self._admin = uvicorn.Server(uvicorn.Config(create_app(self.shard), host=self.config.host,
                                                        port=self.config.admin_port, log_level="warning"))
            self._admin_task = asyncio.create_task(self._admin.serve())
            while not self._admin.started:
                if self._admin_task.done():
                    self._admin_task.result()
                    raise ConfigError(f"admin app failed to start on port {self.config.admin_port}")
                await asyncio.sleep(0.01)
            self.admin_port = self._admin.servers[0].sockets[0].getsockname()[1]
            logger.info("Shard %d admin app on port %d", self.shard.shard_id, self.admin_port)
        if self.emulator is not None:
            self._watchdog = asyncio.create_task(self._watch_crash())

    async def serve_forever(self):
        await self.start()
        await self._stopped.wait()
        await self._shutdown()

    async def _shutdown(self):
        self._server.close()
        for writer in list(self._writers):
            writer.close()
        await self._server.wait_closed()
        if self._admin is not None:
            self._admin.should_exit = True
            await self._admin_task
        if self._watchdog is not None:
            self._watchdog.cancel()
        await asyncio.to_thread(self.shard.close)
        logger.info("Shard %d stopped", self.shard.shard_id)

    def start_in_thread(self, timeout: float = 10.0) -> "ShardServer":
        """Run the shard loop on a daemon thread; returns once the endpoint is bound."""
        ready = threading.Event()
        failure: list[BaseException] = []

        async def main():
            try:
                await self.start()
            except BaseException as e:
                failure.append(e)
                ready.set()
                return
            ready.set()
            await self._stopped.wait()
            await self._shutdown()

        self._thread = threading.Thread(target=asyncio.run, args=(main(),), name=f"shard-{self.shard.shard_id}",
                                        daemon=True)
        self._thread.start()
        if not ready.wait(timeout):
            raise TimeoutError("shard server did not start")
        if failure:
            raise failure[0]
        return self

    def stop(self, timeout: float = 10.0):
        if self._loop is None or self._stopped is None or self._loop.is_closed():
            return
        self._loop.call_soon_threadsafe(self._stopped.set)
        if self._thread is not None:
            self._thread.join(timeout)

    async def _watch_crash(self):
        while not self.emulator.crashed:
            await asyncio.sleep(0.02)
        self._die()

    def _die(self):
        logger.warning("Shard %d crash point fired after %d events; exiting", self.shard.shard_id,
                       self.emulator.events)
        logging.shutdown()
        os._exit(CRASH_EXIT_CODE)

    # --- connections -----------------------------------------------------------

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.connections += 1
        peer = writer.get_extra_info("peername")
        self._writers.add(writer)
        write_lock = asyncio.Lock()
        opened: list[int] = []
        tasks: set[asyncio.Task] = set()

        async def send(request_id: int, response: Response):
            async with write_lock:
                writer.write(encode_message(response, request_id))
                await writer.drain()

        try:
            while True:
                prefix = await reader.readexactly(PREFIX_SIZE)
                length = frame_length(prefix)
                frame = decode_frame(prefix + await reader.readexactly(length))
                try:
                    message = decode_message(frame)
                except ProtocolError as e:
                    await send(frame.request_id, error_response(e))
                    continue
                if isinstance(message, (InvokeAdo, InvokePutAdo)):
                    task = asyncio.create_task(self._invoke(message, frame.request_id, send))
                    tasks.add(task)
                    task.add_done_callback(tasks.discard)
                    continue
                await send(frame.request_id, await self._execute(message, opened))
        except asyncio.IncompleteReadError:
            pass
        except ProtocolError as e:
            logger.warning("Dropping connection from %s: %s", peer, e)
        except ConnectionError:
            pass
        finally:
            if tasks:
                await asyncio.gather(*tasks, return_exceptions=True)
            for handle in opened:
                try:
                    await asyncio.to_thread(self.shard.pool_close, handle)
                except StoreError:
                    pass
            writer.close()
            self._writers.discard(writer)

    async def _execute(self, message, opened: list[int]) -> Response:
        shard = self.shard
        try:
            match message:
                case OpenPool(name=name):
                    pool = await asyncio.to_thread(shard.pool_open, name)
                    opened.append(pool.handle)
                    return Response(0, _HANDLE.pack(pool.handle))
                case CreatePool(name=name, size=size):
                    pool = await asyncio.to_thread(shard.pool_create, name, size or None)
                    opened.append(pool.handle)
                    return Response(0, _HANDLE.pack(pool.handle))
                case DeletePool(name=name):
                    shard.pool_delete(name)
                case ClosePool(handle=handle):
                    await asyncio.to_thread(shard.pool_close, handle)
                    if handle in opened:
                        opened.remove(handle)
                case Put(handle=handle, key=key, value=value):
                    shard.kv_put(handle, key, value)
                case Get(handle=handle, key=key):
                    return Response(0, shard.kv_get(handle, key))
                case Erase(handle=handle, key=key):
                    shard.kv_erase(handle, key)
                case Resize(handle=handle, key=key, new_size=new_size):
                    shard.kv_resize(handle, key, new_size)
                case _:
                    raise ProtocolError(f"unexpected {type(message).__name__} from client")
        except StoreError as e:
            return error_response(e)
        except SimulatedCrash:
            self._die()
        return Response(0)

    async def _invoke(self, message, request_id: int, send):
        try:
            if isinstance(message, InvokePutAdo):
                future = self.shard.invoke_put_ado(message.handle, message.key, message.value, message.request,
                                                   message.ado_flags)
            else:
                future = self.shard.invoke_ado(message.handle, message.key, message.request, message.ado_flags,
                                               message.value_size)
            responses = await asyncio.wrap_future(future)
            response = Response(0, pack_responses(responses))
        except SimulatedCrash:
            self._die()
        except StoreError as e:
            response = error_response(e)
        except Exception as e:
            logger.exception("ADO invocation failed")
            response = error_response(e)
        try:
            await send(request_id, response)
        except ConnectionError:
            pass


# =============================================================================
# ENTRY POINT
# =============================================================================

def _run_shard(shard_config: ShardConfig, crash_point: Optional[tuple[int, int]] = None):
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(processName)s %(name)s %(message)s")
    emulator = CrashEmulator(crash_at=crash_point[0], seed=crash_point[1]) if crash_point else None
    server = ShardServer(shard_config, emulator)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        pass


def serve(server_config: ServerConfig, crash_point: Optional[tuple[int, int]] = None):
    """Run every shard: the first in this process, the rest in child processes."""
    children = []
    for shard_config in server_config.shards[1:]:
        process = multiprocessing.Process(target=_run_shard, args=(shard_config, crash_point),
                                          name=f"shard-{shard_config.shard_id}")
        process.start()
        children.append(process)
    try:
        _run_shard(server_config.shards[0], crash_point)
    finally:
        for child in children:
            child.terminate()
            child.join()


def main(argv=None):
    parser = argparse.ArgumentParser(description="Active store shard server")
    parser.add_argument("--config", help="Server config JSON file")
    parser.add_argument("--shards", type=int, help="Override the number of shards")
    parser.add_argument("--crash-point", type=parse_crash_point, metavar="N[:SEED]",
                        help="Run on emulated persistent memory and crash at persistence event N")
    args = parser.parse_args(argv)

    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(name)s %(message)s")
    try:
        server_config = load_server_config(args.config) if args.config else ServerConfig()
        if args.shards:
            server_config = server_config.with_shard_count(args.shards)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    serve(server_config, args.crash_point)
    return 0


if __name__ == "__main__":
    sys.exit(main())

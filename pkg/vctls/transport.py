import asyncio
import logging
from typing import Callable, Optional, Protocol

log = logging.getLogger("vctls.transport")


class TransportClosed(ConnectionError):
    pass


class Transport(Protocol):
    async def send(self, data: bytes):
        ...

    async def read_exactly(self, n: int) -> bytes:
        ...

    async def close(self):
        ...


class MemoryTransport:
    """One end of an in-memory duplex byte stream. None on the queue marks EOF."""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._buf = bytearray()
        self._eof = False
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["MemoryTransport", "MemoryTransport"]:
        a_to_b: asyncio.Queue = asyncio.Queue()
        b_to_a: asyncio.Queue = asyncio.Queue()
        return cls(b_to_a, a_to_b), cls(a_to_b, b_to_a)

    async def send(self, data: bytes):
        if self._closed:
            raise TransportClosed("send on closed transport")
        if data:
            await self._outbox.put(bytes(data))

    async def read_exactly(self, n: int) -> bytes:
        while len(self._buf) < n:
            if self._eof:
                raise TransportClosed(f"peer closed with {len(self._buf)} of {n} bytes pending")
            chunk = await self._inbox.get()
            if chunk is None:
                self._eof = True
                continue
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    async def close(self):
        if not self._closed:
            self._closed = True
            await self._outbox.put(None)


class StreamTransport:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer

    async def send(self, data: bytes):
        try:
            self.writer.write(data)
            await self.writer.drain()
        except (ConnectionError, OSError) as e:
            raise TransportClosed(str(e)) from e

    async def read_exactly(self, n: int) -> bytes:
        try:
            return await self.reader.readexactly(n)
        except asyncio.IncompleteReadError as e:
            raise TransportClosed(f"peer closed with {len(e.partial)} of {n} bytes pending") from e
        except (ConnectionError, OSError) as e:
            raise TransportClosed(str(e)) from e

    async def close(self):
        if self.writer.is_closing():
            return
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def open_tcp(host: str, port: int, timeout: Optional[float] = None) -> StreamTransport:
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    except (asyncio.TimeoutError, OSError) as e:
        raise TransportClosed(f"cannot reach {host}:{port}: {e}") from e
    return StreamTransport(reader, writer)


async def tcp_pair(host: str = "127.0.0.1") -> tuple[StreamTransport, StreamTransport]:
    """Both ends of one loopback TCP connection."""
    accepted: asyncio.Future = asyncio.get_running_loop().create_future()

    def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if not accepted.done():
            accepted.set_result(StreamTransport(reader, writer))

    server = await asyncio.start_server(on_connect, host, 0)
    try:
        port = server.sockets[0].getsockname()[1]
        client = await open_tcp(host, port)
        return client, await accepted
    finally:
        server.close()


async def accept_one(
    host: str,
    port: int,
    on_listening: Optional[Callable[[str, int], None]] = None,
) -> StreamTransport:
    """Listens until the first connection arrives, then stops listening."""
    accepted: asyncio.Future = asyncio.get_running_loop().create_future()

    def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if accepted.done():
            writer.close()
            return
        accepted.set_result(StreamTransport(reader, writer))

    server = await asyncio.start_server(on_connect, host, port)
    try:
        bound_host, bound_port = server.sockets[0].getsockname()[:2]
        log.info("Listening on %s:%s", bound_host, bound_port)
        if on_listening is not None:
            on_listening(bound_host, bound_port)
        return await accepted
    finally:
        server.close()

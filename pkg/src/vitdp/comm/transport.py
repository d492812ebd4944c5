"""Reliable, ordered frame channels over TCP or in-memory queues.

Both transports expose the same surface: ``listen(address)`` returns a
listener with ``accept(timeout)`` and ``address``; ``connect(address)``
returns a :class:`Channel`. Sends never block the caller (a writer thread or
queue absorbs them) so ring steps can send and receive without deadlocking.
"""
from __future__ import annotations

import itertools
import queue
import select
import socket
import threading
import time

from ..errors import ProtocolError, TransportError
from .frame import HEADER, HEADER_SIZE, Frame, parse_opcode


class Channel:
    """One direction-agnostic, ordered frame stream with traffic counters."""

    def __init__(self):
        self.bytes_sent = 0
        self.payload_bytes_sent = 0
        self.frames_sent = 0
        self.bytes_received = 0

    def send(self, frame: Frame) -> None:
        data = frame.encode()
        self._send_bytes(data)
        self.bytes_sent += len(data)
        self.payload_bytes_sent += len(frame.payload)
        self.frames_sent += 1

    def recv(self, timeout: float | None = None) -> Frame:
        """Next frame; raises ``TimeoutError`` if none arrives in ``timeout`` s."""
        frame = self._recv_frame(timeout)
        self.bytes_received += HEADER_SIZE + len(frame.payload)
        return frame

    def counters(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "payload_bytes_sent": self.payload_bytes_sent,
            "frames_sent": self.frames_sent,
            "bytes_received": self.bytes_received,
        }

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


# --------------------------------------------------------------------------
# TCP
# --------------------------------------------------------------------------


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {address!r}")
    return host, int(port)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        sock.setblocking(True)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self._outbox: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._closed = False
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()

    def _write_loop(self) -> None:
        while True:
            data = self._outbox.get()
            if data is None:
                return
            try:
                self.sock.sendall(data)
            except OSError as e:
                self._error = e
                return

    def _send_bytes(self, data: bytes) -> None:
        if self._error is not None:
            raise TransportError(f"send failed: {self._error}")
        if self._closed:
            raise TransportError("channel closed")
        self._outbox.put(data)

    def _read_exact(self, n: int, deadline: float | None) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                ready, _, _ = select.select([self.sock], [], [], max(remaining, 0.0))
                if not ready:
                    raise TimeoutError(f"no data within timeout ({got}/{n} bytes read)")
            try:
                k = self.sock.recv_into(view[got:], n - got)
            except OSError as e:
                raise TransportError(f"receive failed: {e}") from e
            if k == 0:
                raise TransportError("peer closed the connection")
            got += k
        return bytes(buf)

    def _recv_frame(self, timeout: float | None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        head = self._read_exact(HEADER_SIZE, deadline)
        opcode, tag, chunk, length = HEADER.unpack(head)
        payload = self._read_exact(length, deadline) if length else b""
        return Frame(parse_opcode(opcode), tag, chunk, payload)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._outbox.put(None)
        self._writer.join(timeout=10.0)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(128)
        self.host = host

    @property
    def address(self) -> str:
        return f"{self.host}:{self.sock.getsockname()[1]}"

    def accept(self, timeout: float | None = None) -> SocketChannel | None:
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return None
        conn, _ = self.sock.accept()
        return SocketChannel(conn)

    def close(self) -> None:
        self.sock.close()


class TcpTransport:
    def listen(self, address: str = "127.0.0.1:0") -> TcpListener:
        host, port = parse_address(address)
        return TcpListener(host, port)

    def connect(self, address: str, timeout: float = 30.0) -> SocketChannel:
        host, port = parse_address(address)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(deadline - time.monotonic(), 0.1))
                return SocketChannel(sock)
            except OSError as e:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot reach {address}: {e}") from e
                time.sleep(0.05)


# --------------------------------------------------------------------------
# In-memory
# --------------------------------------------------------------------------

_CLOSED = object()


class MemoryChannel(Channel):
    """Half of an in-memory channel pair; frames travel as encoded bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("channel closed")
        self._outbox.put(data)

    def _recv_frame(self, timeout: float | None) -> Frame:
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no data within timeout") from None
        if data is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportError("peer closed the connection")
        return Frame.decode(data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def memory_pair() -> tuple[MemoryChannel, MemoryChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return MemoryChannel(b_to_a, a_to_b), MemoryChannel(a_to_b, b_to_a)


class MemoryListener:
    def __init__(self, network: MemoryTransport, address: str):
        self.network = network
        self.address = address
        self._pending: queue.Queue = queue.Queue()

    def accept(self, timeout: float | None = None) -> MemoryChannel | None:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self.network._unregister(self.address)


class MemoryTransport:
    """An in-process "network" of named listeners for thread-mode worlds."""

    def __init__(self):
        self._listeners: dict[str, MemoryListener] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count()

    def listen(self, address: str = "mem:0") -> MemoryListener:
        with self._lock:
            if address.endswith(":0"):
                address = f"{address[:-2]}:{next(self._ids) + 1}"
            if address in self._listeners:
                raise TransportError(f"address {address} already in use")
            listener = MemoryListener(self, address)
            self._listeners[address] = listener
            return listener

    def _unregister(self, address: str) -> None:
        with self._lock:
            self._listeners.pop(address, None)

    def connect(self, address: str, timeout: float = 30.0) -> MemoryChannel:
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                listener = self._listeners.get(address)
            if listener is not None:
                mine, theirs = memory_pair()
                listener._pending.put(theirs)
                return mine
            if time.monotonic() >= deadline:
                raise TransportError(f"nothing listening at {address}")
            time.sleep(0.01)


def expect(frame: Frame, opcode, tag: int | None = None) -> Frame:
    if frame.opcode != opcode:
        raise ProtocolError(f"expected {opcode.name}, got {frame.opcode.name}")
    if tag is not None and frame.tag != tag:
        raise ProtocolError(f"{opcode.name}: expected tag {tag}, got {frame.tag}")
    return frame

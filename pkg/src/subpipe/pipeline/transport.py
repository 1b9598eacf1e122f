"""Duplex links between adjacent stages.

A link has two endpoints; bytes sent on one arrive, in order, on the other.
The TCP variant frames every message with a u64 little-endian length prefix.
"""

from __future__ import annotations

import collections
import queue
import socket
import struct
import threading

from ..errors import ConfigError, ProtocolError

LENGTH = struct.Struct("<Q")


class _QueueEndpoint:
    def __init__(self, inbox, outbox):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, data: bytes) -> None:
        self._outbox.append(bytes(data))

    def recv(self) -> bytes:
        if not self._inbox:
            raise ProtocolError("receive on an empty in-process channel")
        return self._inbox.popleft()

    def drain(self) -> int:
        dropped = len(self._inbox)
        self._inbox.clear()
        return dropped

    def close(self) -> None:
        pass


class InProcessLink:
    def __init__(self):
        ab = collections.deque()
        ba = collections.deque()
        self.a = _QueueEndpoint(ba, ab)
        self.b = _QueueEndpoint(ab, ba)

    def close(self) -> None:
        pass


def send_message(sock, data: bytes) -> None:
    sock.sendall(LENGTH.pack(len(data)) + data)


def _recv_exact(sock, count) -> bytes:
    chunks = bytearray()
    while len(chunks) < count:
        chunk = sock.recv(count - len(chunks))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        chunks += chunk
    return bytes(chunks)


def recv_message(sock) -> bytes:
    (size,) = LENGTH.unpack(_recv_exact(sock, LENGTH.size))
    return _recv_exact(sock, size)


class _SocketEndpoint:
    """Sends from a background thread so a large frame never blocks the caller."""

    def __init__(self, sock):
        self.sock = sock
        self._pending = 0
        self._outq = queue.Queue()
        self._sender = threading.Thread(target=self._send_loop, daemon=True)
        self._sender.start()

    def _send_loop(self):
        while True:
            data = self._outq.get()
            if data is None:
                return
            send_message(self.sock, data)

    def send(self, data: bytes) -> None:
        self._outq.put(bytes(data))

    def recv(self) -> bytes:
        return recv_message(self.sock)

    def drain(self) -> int:
        dropped = 0
        self.sock.settimeout(0.05)
        try:
            while True:
                recv_message(self.sock)
                dropped += 1
        except (socket.timeout, ProtocolError):
            pass
        finally:
            self.sock.settimeout(None)
        return dropped

    def close(self) -> None:
        self._outq.put(None)
        self._sender.join(timeout=1.0)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpLink:
    """A single loopback (or host:port) TCP connection between two stages."""

    def __init__(self, host="127.0.0.1", port=0):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        self.address = listener.getsockname()
        client = socket.create_connection(self.address)
        server, _ = listener.accept()
        listener.close()
        for s in (client, server):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.a = _SocketEndpoint(client)
        self.b = _SocketEndpoint(server)

    def close(self) -> None:
        self.a.close()
        self.b.close()


def parse_endpoints(text: str):
    out = []
    for item in text.split(","):
        host, _, port = item.strip().rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bad endpoint {item!r}, expected host:port")
        out.append((host, int(port)))
    return out


class TapEndpoint:
    """Wraps an endpoint and appends every sent frame, length-prefixed, to ``sink``."""

    def __init__(self, inner, sink):
        self.inner = inner
        self.sink = sink
        self.enabled = True

    def send(self, data: bytes) -> None:
        if self.enabled:
            self.sink.write(LENGTH.pack(len(data)) + bytes(data))
        self.inner.send(data)

    def recv(self) -> bytes:
        return self.inner.recv()

    def drain(self) -> int:
        return self.inner.drain()

    def close(self) -> None:
        self.inner.close()


def read_frame_dump(buf: bytes) -> list:
    """Split a dump written by :class:`TapEndpoint` back into frame byte strings."""
    out, pos = [], 0
    while pos < len(buf):
        if pos + LENGTH.size > len(buf):
            raise ProtocolError("truncated length prefix in frame dump")
        (size,) = LENGTH.unpack_from(buf, pos)
        pos += LENGTH.size
        if pos + size > len(buf):
            raise ProtocolError("truncated frame in dump")
        out.append(buf[pos:pos + size])
        pos += size
    return out
